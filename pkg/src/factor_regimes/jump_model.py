"""Statistical jump models and their sparse (feature-weighted) extension.

The state step is an exact dynamic program; centroids are per-state means.
Feature weights enter by scaling each standardized column by ``sqrt(w_d)``,
so ``centroids`` live in that scaled space, which is also where online
inference runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np
from numba import njit

from .features import FeatureMatrix, FeatureStats

logger = logging.getLogger(__name__)

SPARSE_MAX_OUTER = 10
SPARSE_WEIGHT_TOL = 1e-4


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class JumpModelConfig:
    """Hyperparameters and search settings for a jump-model fit.

    ``kappa_sq`` is the squared l1 bound on the feature weights; it is only
    used by the sparse fit and must lie in ``[1, D]``.
    """

    K: int = 2
    lam: float = 50.0
    kappa_sq: float = 9.5
    n_init: int = 10
    max_iter: int = 20
    tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.lam < 0:
            raise ValueError("jump penalty must be nonnegative")
        if self.kappa_sq < 1:
            raise ValueError("kappa_sq must be >= 1")
        if self.n_init < 1 or self.max_iter < 1:
            raise ValueError("n_init and max_iter must be >= 1")

    def check_dim(self, D: int) -> None:
        if not 1 <= self.kappa_sq <= D + 1e-12:
            raise ValueError(f"kappa_sq={self.kappa_sq} outside [1, {D}]")


# --- numba kernels -------------------------------------------------------


@njit(cache=True, nogil=True)
def _losses(X, C):
    T, D = X.shape
    K = C.shape[0]
    L = np.empty((T, K))
    for t in range(T):
        for k in range(K):
            acc = 0.0
            for d in range(D):
                diff = X[t, d] - C[k, d]
                acc += diff * diff
            L[t, k] = 0.5 * acc
    return L


@njit(cache=True, nogil=True)
def _step(v, loss_row, lam):
    K = v.shape[0]
    out = np.empty(K)
    for k in range(K):
        other = np.inf
        for j in range(K):
            if j != k and v[j] < other:
                other = v[j]
        out[k] = loss_row[k] + min(v[k], other + lam)
    return out


@njit(cache=True, nogil=True)
def _forward(L, lam):
    T, K = L.shape
    V = np.empty((T, K))
    V[0] = L[0]
    for t in range(1, T):
        V[t] = _step(V[t - 1], L[t], lam)
    return V


@njit(cache=True, nogil=True)
def _argmin_first(v):
    best = 0
    for k in range(1, v.shape[0]):
        if v[k] < v[best]:
            best = k
    return best


@njit(cache=True, nogil=True)
def _backtrack(V, lam):
    T, K = V.shape
    s = np.empty(T, dtype=np.int64)
    s[T - 1] = _argmin_first(V[T - 1])
    cand = np.empty(K)
    for t in range(T - 2, -1, -1):
        nxt = s[t + 1]
        for j in range(K):
            cand[j] = V[t, j] + (lam if j != nxt else 0.0)
        s[t] = _argmin_first(cand)
    return s


@njit(cache=True, nogil=True)
def _group_means(X, s, C_prev):
    T, D = X.shape
    K = C_prev.shape[0]
    sums = np.zeros((K, D))
    counts = np.zeros(K, dtype=np.int64)
    for t in range(T):
        counts[s[t]] += 1
        for d in range(D):
            sums[s[t], d] += X[t, d]
    C = C_prev.copy()
    for k in range(K):
        if counts[k] > 0:
            for d in range(D):
                C[k, d] = sums[k, d] / counts[k]
    return C, counts


# --- state and centroid steps ---------------------------------------------


def _check_finite(X, what="features"):
    if not np.all(np.isfinite(X)):
        raise FitError(f"non-finite values in {what}")


def state_losses(X, centroids) -> np.ndarray:
    """Half squared distances from every row to every centroid (T x K)."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    C = np.ascontiguousarray(np.atleast_2d(centroids), dtype=float)
    return _losses(X, C)


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.ascontiguousarray(X)


def dp_values(X, centroids, lam: float) -> np.ndarray:
    """Forward dynamic-programming values (T x K) for fixed centroids."""
    X = _as_2d(X)
    C = _as_2d(centroids)
    return _forward(_losses(X, C), float(lam))


def optimal_states(X, centroids, lam: float) -> np.ndarray:
    """Exact minimizer of the penalized clustering cost over state sequences.

    Minimizes ``sum_t 0.5*||x_t - theta_{s_t}||^2 + lam * #{t: s_t != s_{t-1}}``
    by dynamic programming in O(T K^2). Ties go to the lower state index.
    One-dimensional ``X`` is treated as a single feature column.
    """
    X = _as_2d(X)
    C = _as_2d(centroids)
    if X.shape[0] < 1:
        raise FitError("need at least one observation")
    if X.shape[1] != C.shape[1]:
        raise FitError(f"dimension mismatch: X has {X.shape[1]} columns, centroids {C.shape[1]}")
    _check_finite(X)
    _check_finite(C, "centroids")
    if lam < 0:
        raise ValueError("jump penalty must be nonnegative")
    V = _forward(_losses(X, C), float(lam))
    return _backtrack(V, float(lam))


def objective(X, centroids, states, lam: float) -> float:
    X = _as_2d(X)
    C = _as_2d(centroids)
    states = np.asarray(states)
    resid = X - C[states]
    return float(0.5 * np.sum(resid * resid) + lam * np.count_nonzero(np.diff(states)))


def update_centroids(X, states, prev=None, K: int | None = None):
    """Per-state row means. States with no rows keep ``prev``.

    Returns
    -------
    centroids : ndarray, shape (K, D)
    empty : ndarray of bool, shape (K,)
        True where a state had no rows.
    """
    X = _as_2d(X)
    states = np.asarray(states, dtype=np.int64)
    if K is None:
        K = prev.shape[0] if prev is not None else int(states.max()) + 1
    if states.min() < 0 or states.max() >= K:
        raise FitError("state index out of range")
    if prev is None:
        prev = np.zeros((K, X.shape[1]))
    C, counts = _group_means(X, states, np.ascontiguousarray(prev, dtype=float))
    return C, counts == 0


# --- fitting ----------------------------------------------------------------


def _kmeans_pp(X, K, rng) -> np.ndarray:
    T = X.shape[0]
    idx = [int(rng.integers(T))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(T))
        else:
            nxt = int(rng.choice(T, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[idx].copy()


@dataclass
class _Restart:
    centroids: np.ndarray
    states: np.ndarray
    objective: float
    history: list
    terminal: np.ndarray
    empty: bool


def _coordinate_descent(Xw, C0, lam, max_iter, tol) -> _Restart:
    C = C0
    states = None
    history = []
    empty_any = False
    for _ in range(max_iter):
        new_states = _backtrack(_forward(_losses(Xw, C), lam), lam)
        if states is not None and np.array_equal(new_states, states):
            break
        states = new_states
        C, empty = update_centroids(Xw, states, C)
        empty_any |= bool(empty.any())
        history.append(objective(Xw, C, states, lam))
        if len(history) > 1 and history[-2] - history[-1] <= tol * max(1.0, abs(history[-1])):
            break
    V = _forward(_losses(Xw, C), lam)
    states = _backtrack(V, lam)
    obj = objective(Xw, C, states, lam)
    history.append(obj)
    return _Restart(C, states, obj, history, V[-1].copy(), empty_any)


@dataclass(frozen=True)
class JumpModelFit:
    """Result of a (sparse) jump-model fit.

    ``centroids`` are in the weight-scaled feature space. ``terminal_value``
    holds the last row of the in-sample DP values and seeds online
    inference. ``labels`` maps state index to "bull"/"bear" once assigned
    by :func:`label_states`.
    """

    centroids: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    objective: float
    config: JumpModelConfig
    feature_names: tuple[str, ...] = ()
    train_stats: FeatureStats | None = None
    terminal_value: np.ndarray | None = None
    labels: dict | None = None
    history: tuple[float, ...] = ()
    flags: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def scale(self, X_std) -> np.ndarray:
        """Apply the feature weights to standardized rows."""
        return np.asarray(X_std, dtype=float) * np.sqrt(self.weights)

    def prepare(self, X_raw) -> np.ndarray:
        """Standardize raw rows with the training stats, then weight them."""
        X = np.asarray(X_raw, dtype=float)
        if self.train_stats is not None:
            X = (X - self.train_stats.mean) / self.train_stats.std
        return self.scale(X)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "centroids": self.centroids.tolist(),
            "weights": self.weights.tolist(),
            "objective": self.objective,
            "labels": None if self.labels is None else {str(k): v for k, v in self.labels.items()},
            "train_stats": None if self.train_stats is None else self.train_stats.to_dict(),
            "terminal_value": None if self.terminal_value is None else self.terminal_value.tolist(),
            "states": self.states.tolist(),
            "flags": list(self.flags),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "JumpModelFit":
        labels = d.get("labels")
        return cls(
            centroids=np.asarray(d["centroids"], dtype=float),
            states=np.asarray(d.get("states", []), dtype=np.int64),
            weights=np.asarray(d["weights"], dtype=float),
            objective=float(d["objective"]),
            config=JumpModelConfig(**d["config"]),
            feature_names=tuple(d.get("feature_names", ())),
            train_stats=None if d.get("train_stats") is None else FeatureStats.from_dict(d["train_stats"]),
            terminal_value=None if d.get("terminal_value") is None else np.asarray(d["terminal_value"], dtype=float),
            labels=None if labels is None else {int(k): v for k, v in labels.items()},
            flags=tuple(d.get("flags", ())),
        )

    @classmethod
    def from_json(cls, path) -> "JumpModelFit":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _unpack(X):
    if isinstance(X, FeatureMatrix):
        return np.ascontiguousarray(X.X, dtype=float), X.names, X.stats
    X = _as_2d(X)
    return X, tuple(f"x{i}" for i in range(X.shape[1])), None


def _fit_weighted(X, weights, config: JumpModelConfig, seed_seq) -> _Restart:
    Xw = np.ascontiguousarray(X * np.sqrt(weights))
    best = None
    for child in seed_seq.spawn(config.n_init):
        rng = np.random.default_rng(child)
        r = _coordinate_descent(Xw, _kmeans_pp(Xw, config.K, rng), float(config.lam), config.max_iter, config.tol)
        if best is None or r.objective < best.objective:
            best = r
    return best


def fit_jump_model(X, config: JumpModelConfig = JumpModelConfig()) -> JumpModelFit:
    """Fit a jump model with equal feature weights ``1/sqrt(D)``.

    Runs ``config.n_init`` k-means++ initializations of coordinate descent
    and keeps the one with the lowest objective.
    """
    Xa, names, stats = _unpack(X)
    T, D = Xa.shape
    if T <= config.K:
        raise FitError(f"need more observations ({T}) than states ({config.K})")
    _check_finite(Xa)
    w = np.full(D, 1.0 / np.sqrt(D))
    best = _fit_weighted(Xa, w, config, np.random.SeedSequence(config.seed))
    return JumpModelFit(
        centroids=best.centroids,
        states=best.states,
        weights=w,
        objective=best.objective,
        config=config,
        feature_names=names,
        train_stats=stats,
        terminal_value=best.terminal,
        history=tuple(best.history),
        flags=("empty_state",) if best.empty else (),
    )


def _soft_normalized(a, delta):
    s = np.maximum(a - delta, 0.0)
    n = np.linalg.norm(s)
    return s / n if n > 0 else s


def update_feature_weights(X, states, kappa: float) -> np.ndarray:
    """Feature weights from per-dimension variance reduction.

    Maximizes ``w @ a`` subject to ``||w||_2 <= 1``, ``||w||_1 <= kappa`` and
    ``w >= 0`` where ``a_d`` is the between-state sum of squares of column
    ``d``. The solution soft-thresholds ``a`` at the smallest ``delta`` for
    which the l1 bound holds, found by bisection. If every ``a_d`` is zero
    the first ``floor(kappa**2)`` columns share the weight equally.
    """
    X = _as_2d(X)
    states = np.asarray(states, dtype=np.int64)
    D = X.shape[1]
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    tss = np.sum((X - X.mean(axis=0)) ** 2, axis=0)
    C, _ = update_centroids(X, states, K=int(states.max()) + 1)
    wcss = np.sum((X - C[states]) ** 2, axis=0)
    a = np.maximum(tss - wcss, 0.0)
    # bss is exactly zero in theory when all states share a mean; ignore rounding
    a[a <= 1e-12 * max(1.0, tss.max())] = 0.0
    if not np.any(a > 0):
        # no feature separates the states: spread weight evenly over as many
        # leading columns as the l1 bound allows
        m = min(D, int(np.floor(kappa**2 + 1e-9)))
        w = np.zeros(D)
        w[:m] = 1.0 / np.sqrt(m)
        return w

    w = _soft_normalized(a, 0.0)
    if w.sum() <= kappa:
        return w
    top = a.max()
    below = a[a < top]
    hi = below.max() if below.size else 0.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _soft_normalized(a, mid).sum() <= kappa:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * top:
            break
    return _soft_normalized(a, hi)


def fit_sparse_jump_model(X, config: JumpModelConfig = JumpModelConfig()) -> JumpModelFit:
    """Fit a sparse jump model by alternating state fits and weight updates.

    Stops when the weights move less than 1e-4 in max-norm or after ten
    outer rounds. The returned centroids and states belong to a fit on
    features scaled by the returned weights.
    """
    Xa, names, stats = _unpack(X)
    T, D = Xa.shape
    if T <= config.K:
        raise FitError(f"need more observations ({T}) than states ({config.K})")
    _check_finite(Xa)
    config.check_dim(D)
    kappa = float(np.sqrt(config.kappa_sq))
    seed_seq = np.random.SeedSequence(config.seed)

    w = np.full(D, 1.0 / np.sqrt(D))
    flags = []
    converged = False
    fit = None
    for _ in range(SPARSE_MAX_OUTER):
        fit = _fit_weighted(Xa, w, config, seed_seq)
        w_new = update_feature_weights(Xa, fit.states, kappa)
        if np.max(np.abs(w_new - w)) < SPARSE_WEIGHT_TOL:
            converged = True
            break
        w = w_new
    if not converged:
        fit = _fit_weighted(Xa, w, config, seed_seq)
        flags.append("weights_not_converged")
    if len(np.unique(fit.states)) < 2:
        flags.append("single_state")
    if fit.empty:
        flags.append("empty_state")
    return JumpModelFit(
        centroids=fit.centroids,
        states=fit.states,
        weights=w,
        objective=fit.objective,
        config=config,
        feature_names=names,
        train_stats=stats,
        terminal_value=fit.terminal,
        history=tuple(fit.history),
        flags=tuple(flags),
    )


def label_states(fit: JumpModelFit, active, return_feature: str = "r_factor_63") -> dict[int, str]:
    """Name states by the total active return earned while in them.

    The state with the largest in-state sum of active returns is "bull" and
    the smallest is "bear"; with K > 2 the ones in between are "neutral1",
    "neutral2", ... in decreasing order. A state that never occurs is ranked
    by the sign of its centroid on ``return_feature`` (zero if absent).
    """
    a = np.asarray(getattr(active, "values", active), dtype=float)
    if len(a) != len(fit.states):
        raise FitError("active returns are not aligned with the fitted states")
    K = fit.K
    score = np.zeros(K)
    for k in range(K):
        mask = fit.states == k
        if mask.any():
            score[k] = a[mask].sum()
        elif return_feature in fit.feature_names:
            j = fit.feature_names.index(return_feature)
            score[k] = np.sign(fit.centroids[k, j]) * np.inf if fit.centroids[k, j] != 0 else 0.0
    # stable sort so equal scores keep index order
    order = np.argsort(-score, kind="stable")
    labels = {}
    for rank, k in enumerate(order):
        if rank == 0:
            labels[int(k)] = "bull"
        elif rank == K - 1:
            labels[int(k)] = "bear"
        else:
            labels[int(k)] = f"neutral{rank}"
    return labels


def with_labels(fit: JumpModelFit, active) -> JumpModelFit:
    return replace(fit, labels=label_states(fit, active))


# --- online inference -----------------------------------------------------


@dataclass(frozen=True)
class OnlineState:
    """Running DP values for filtering with fixed centroids."""

    value: np.ndarray | None = None
    last_state: int = -1
    steps: int = 0

    @classmethod
    def from_fit(cls, fit: JumpModelFit) -> "OnlineState":
        """Continue from the end of the fit's training sample."""
        if fit.terminal_value is None:
            return cls()
        v = np.asarray(fit.terminal_value, dtype=float)
        return cls(v.copy(), int(_argmin_first(v)), len(fit.states))


def online_infer(fit: JumpModelFit, x_new, st: OnlineState = OnlineState()) -> tuple[int, OnlineState]:
    """Consume one standardized, weight-scaled feature row.

    The returned state equals the final state of :func:`optimal_states`
    solved over every row seen since ``st`` was started.
    """
    x = np.ascontiguousarray(np.atleast_1d(np.asarray(x_new, dtype=float)))
    if x.ndim != 1 or x.shape[0] != fit.centroids.shape[1]:
        raise FitError(f"expected a feature vector of length {fit.centroids.shape[1]}")
    _check_finite(x)
    loss = _losses(x[None, :], np.ascontiguousarray(fit.centroids))[0]
    if st.value is None:
        v = loss
    else:
        v = _step(st.value, loss, float(fit.config.lam))
    s = int(_argmin_first(v))
    return s, OnlineState(v, s, st.steps + 1)


def infer_sequence(fit: JumpModelFit, X_scaled, st: OnlineState | None = None) -> tuple[np.ndarray, OnlineState]:
    """Run :func:`online_infer` over consecutive rows."""
    X = _as_2d(X_scaled)
    if st is None:
        st = OnlineState.from_fit(fit)
    out = np.empty(X.shape[0], dtype=np.int64)
    for t in range(X.shape[0]):
        out[t], st = online_infer(fit, X[t], st)
    return out, st
