"""Black-Litterman posterior returns and long-only mean-variance allocation.

All returns and covariances here are annualized. View uncertainty is
always expressed as ``Omega / tau`` so ``tau`` never appears on its own.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .market_data import TRADING_DAYS

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-10
KKT_TOL = 1e-8


class AllocationError(ArithmeticError):
    pass


def psd_floor(sigma: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrize and clip eigenvalues from below."""
    s = 0.5 * (sigma + sigma.T)
    vals, vecs = np.linalg.eigh(s)
    if vals.min() >= floor:
        return s
    s = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (s + s.T)


def ewm_covariance(returns, halflife: float = 126, *, annualize: bool = True, floor: bool = True) -> np.ndarray:
    """Exponentially weighted covariance of the rows of ``returns``.

    The weight on the observation ``k`` days before the last one is
    ``0.5 ** (k / halflife)``; weights are normalized to sum to one and the
    mean is the same weighted mean.
    """
    X = np.asarray(getattr(returns, "frame", returns), dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two rows of returns")
    if halflife <= 0:
        raise ValueError("halflife must be positive")
    T = X.shape[0]
    w = 0.5 ** (np.arange(T - 1, -1, -1) / halflife)
    w /= w.sum()
    mean = w @ X
    Z = X - mean
    cov = (Z * w[:, None]).T @ Z
    if annualize:
        cov *= TRADING_DAYS
    cov = 0.5 * (cov + cov.T)
    return psd_floor(cov) if floor else cov


@dataclass(frozen=True)
class Equilibrium:
    """Benchmark, covariance and risk aversion, with the implied prior ``pi``."""

    sigma: np.ndarray
    w_bmk: np.ndarray
    delta: float = 2.5
    pi: np.ndarray = field(init=False)

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        w = np.asarray(self.w_bmk, dtype=float)
        if sigma.shape != (len(w), len(w)):
            raise ValueError("sigma and benchmark weights do not conform")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("benchmark weights must be nonnegative and sum to 1")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "w_bmk", w)
        object.__setattr__(self, "pi", implied_prior(self.delta, sigma, w))


def implied_prior(delta: float, sigma, w_bmk) -> np.ndarray:
    """Equilibrium returns implied by holding the benchmark: ``delta * sigma @ w``."""
    return delta * np.asarray(sigma, dtype=float) @ np.asarray(w_bmk, dtype=float)


@dataclass(frozen=True)
class ViewSet:
    """Relative views: pick matrix ``P`` (K x N), view returns ``v``.

    ``omega_over_tau`` holds the diagonal of ``Omega / tau`` once set.
    """

    P: np.ndarray
    v: np.ndarray
    omega_over_tau: np.ndarray | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if P.shape[0] != v.shape[0]:
            raise ValueError("P and v disagree on the number of views")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "v", v)
        if self.omega_over_tau is not None:
            om = np.atleast_1d(np.asarray(self.omega_over_tau, dtype=float))
            if om.shape != v.shape or np.any(om <= 0):
                raise ValueError("view uncertainties must be positive, one per view")
            object.__setattr__(self, "omega_over_tau", om)

    def with_uncertainty(self, omega_over_tau) -> "ViewSet":
        return ViewSet(self.P, self.v, omega_over_tau, self.names)


def build_views(mu_hat: Mapping[str, float], universe: Sequence[str], market: str = "market") -> ViewSet:
    """One +factor/-market view per non-market asset, in universe order."""
    universe = list(universe)
    if market not in universe:
        raise ValueError(f"market column {market!r} not in universe")
    factors = [u for u in universe if u != market]
    missing = [f for f in factors if f not in mu_hat]
    if missing:
        raise ValueError(f"missing regime signal for {missing}")
    m = universe.index(market)
    P = np.zeros((len(factors), len(universe)))
    for k, f in enumerate(factors):
        P[k, universe.index(f)] = 1.0
        P[k, m] = -1.0
    return ViewSet(P, np.array([float(mu_hat[f]) for f in factors]), names=tuple(factors))


def view_uncertainty(sigma, P, confidence: float) -> np.ndarray:
    """``Omega / tau`` diagonal as ``confidence`` times ``diag(P sigma P')``.

    Larger values mean weaker views.
    """
    if confidence <= 0:
        raise ValueError("confidence multiplier must be positive")
    P = np.atleast_2d(P)
    d = np.einsum("kn,nm,km->k", P, np.asarray(sigma, dtype=float), P)
    if np.any(d <= 0):
        raise AllocationError("degenerate view with zero variance")
    return confidence * d


def _view_system(sigma, views: ViewSet):
    if views.omega_over_tau is None:
        raise ValueError("views need uncertainties; call view_uncertainty first")
    SPt = sigma @ views.P.T
    A = views.P @ SPt + np.diag(views.omega_over_tau)
    return SPt, 0.5 * (A + A.T)


def _spd_solve(A, b):
    try:
        return linalg.solve(A, b, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise AllocationError(f"view system is singular: {exc}") from exc


def posterior_returns(pi, sigma, views: ViewSet) -> np.ndarray:
    """Posterior mean ``pi + S P' (P S P' + Omega/tau)^-1 (v - P pi)``."""
    pi = np.asarray(pi, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    SPt, A = _view_system(sigma, views)
    return pi + SPt @ _spd_solve(A, views.v - views.P @ pi)


def unconstrained_active_weights(eq: Equilibrium, views: ViewSet, check: bool = True):
    """View multipliers ``lambda`` and active weights ``P' lambda``.

    Adding ``P' lambda`` to the benchmark gives the unconstrained
    Black-Litterman optimum. With ``check`` the multipliers are recomputed
    one view at a time (:func:`schur_multipliers`) and must agree to 1e-8.
    """
    _, A = _view_system(eq.sigma, views)
    lam = _spd_solve(A, views.v - views.P @ eq.pi) / eq.delta
    if check:
        alt = schur_multipliers(eq, views)
        err = np.max(np.abs(alt - lam)) if lam.size else 0.0
        if err > 1e-8 * max(1.0, np.max(np.abs(lam))):
            raise AllocationError(f"view multiplier self-check failed (max error {err:.3g})")
    return lam, views.P.T @ lam


def schur_multipliers(eq: Equilibrium, views: ViewSet) -> np.ndarray:
    """Per-view multipliers from the leave-one-view-out posterior.

    ``lambda_j = (v_j - p_j' mu_{-j}) / (delta * eta_j)`` where ``mu_{-j}`` is
    the posterior using every view except ``j`` and ``eta_j`` is the Schur
    complement of the other views' block in ``P S P' + Omega/tau``.
    """
    sigma, P, v, om = eq.sigma, views.P, views.v, views.omega_over_tau
    if om is None:
        raise ValueError("views need uncertainties")
    K = P.shape[0]
    out = np.empty(K)
    for j in range(K):
        pj = P[j]
        rest = [i for i in range(K) if i != j]
        Spj = sigma @ pj
        eta = pj @ Spj + om[j]
        mu_rest = eq.pi
        if rest:
            Pr = P[rest]
            Ar = Pr @ sigma @ Pr.T + np.diag(om[rest])
            mu_rest = eq.pi + sigma @ Pr.T @ _spd_solve(Ar, v[rest] - Pr @ eq.pi)
            eta -= (Pr @ Spj) @ _spd_solve(Ar, Pr @ Spj)
        out[j] = (v[j] - pj @ mu_rest) / (eq.delta * eta)
    return out


def kkt_residual(w, mu, sigma, delta) -> float:
    """Largest violation of the KKT conditions for the long-only budget problem."""
    w = np.asarray(w, dtype=float)
    g = delta * sigma @ w - np.asarray(mu, dtype=float)
    free = w > 1e-12
    gamma = -g[free].mean() if free.any() else -g.min()
    nu = g + gamma
    stat = np.abs(nu[free]).max() if free.any() else 0.0
    dual = max(0.0, -nu[~free].min()) if (~free).any() else 0.0
    primal = max(abs(w.sum() - 1.0), max(0.0, -w.min()))
    return float(max(stat, dual, primal))


def _equality_qp(mu, sigma, delta, free):
    """Weights on ``free`` maximizing the utility with sum one; others zero."""
    F = np.flatnonzero(free)
    n = len(F)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = delta * sigma[np.ix_(F, F)]
    M[:n, n] = 1.0
    M[n, :n] = 1.0
    rhs = np.r_[mu[F], 1.0]
    sol = np.linalg.solve(M, rhs)
    w = np.zeros(len(mu))
    w[F] = sol[:n]
    return w


def solve_mvo(mu, sigma, delta: float = 2.5) -> np.ndarray:
    """Long-only, fully invested mean-variance weights.

    Maximizes ``mu'w - delta/2 w'Sw`` subject to ``sum(w) = 1`` and ``w >= 0``
    with a primal active-set method over the nonnegativity constraints.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    N = len(mu)
    if sigma.shape != (N, N):
        raise ValueError("mu and sigma do not conform")
    if np.linalg.eigvalsh(0.5 * (sigma + sigma.T)).min() <= 0:
        raise AllocationError("covariance must be positive definite")
    w = np.full(N, 1.0 / N)
    free = np.ones(N, dtype=bool)
    max_iter = N * 2 ** min(N, 12) + 10
    for _ in range(max_iter):
        target = _equality_qp(mu, sigma, delta, free)
        p = target - w
        if np.max(np.abs(p)) <= 1e-14:
            g = delta * sigma @ w - mu
            gamma = -g[free].mean()
            nu = g + gamma
            nu[free] = np.inf
            j = int(np.argmin(nu))
            if nu[j] >= -1e-12:
                break
            free[j] = True
            continue
        # largest step keeping free weights nonnegative
        neg = free & (p < 0)
        alpha, block = 1.0, -1
        if neg.any():
            ratios = np.where(neg, -w / np.where(neg, p, -1.0), np.inf)
            block = int(np.argmin(ratios))
            if ratios[block] < 1.0:
                alpha = max(ratios[block], 0.0)
            else:
                block = -1
        w = w + alpha * p
        if block >= 0:
            w[block] = 0.0
            free[block] = False
    else:
        raise AllocationError(f"active-set did not converge in {max_iter} iterations (free set {free.tolist()})")

    # refine on the final free set from a direct solve
    w = _equality_qp(mu, sigma, delta, free)
    w[~free] = 0.0
    res = kkt_residual(w, mu, sigma, delta)
    if res > KKT_TOL:
        raise AllocationError(f"KKT residual {res:.3g} exceeds {KKT_TOL}")
    return w


def tracking_error(w, w_bmk, sigma) -> float:
    d = np.asarray(w, dtype=float) - np.asarray(w_bmk, dtype=float)
    return float(np.sqrt(max(d @ sigma @ d, 0.0)))


@dataclass(frozen=True)
class AllocationResult:
    mu_bl: np.ndarray
    weights: np.ndarray
    confidence: float
    ex_ante_te: float
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "mu_bl": self.mu_bl.tolist(),
            "weights": self.weights.tolist(),
            "confidence": self.confidence,
            "ex_ante_te": self.ex_ante_te,
            "flags": list(self.flags),
        }


def allocate(eq: Equilibrium, views: ViewSet, confidence: float) -> AllocationResult:
    """Posterior returns and optimal weights at one confidence multiplier."""
    vs = views.with_uncertainty(view_uncertainty(eq.sigma, views.P, confidence))
    mu = posterior_returns(eq.pi, eq.sigma, vs)
    w = solve_mvo(mu, eq.sigma, eq.delta)
    return AllocationResult(mu, w, confidence, tracking_error(w, eq.w_bmk, eq.sigma))


def target_tracking_error(
    eq: Equilibrium,
    views: ViewSet,
    te_target: float,
    *,
    c_bounds: tuple[float, float] = (1e-4, 1e4),
    rel_tol: float = 0.05,
    max_iter: int = 60,
) -> AllocationResult:
    """Choose the view confidence whose allocation hits an ex-ante tracking error.

    Bisects on ``log(c)``: small ``c`` means confident views and a larger
    tracking error. If even the most confident setting falls short of the
    target, that allocation is returned flagged ``te_capped``.
    """
    if te_target <= 0:
        raise ValueError("tracking-error target must be positive")
    lo, hi = np.log(c_bounds[0]), np.log(c_bounds[1])
    strongest = allocate(eq, views, float(np.exp(lo)))
    if strongest.ex_ante_te < te_target * (1 - rel_tol):
        return AllocationResult(strongest.mu_bl, strongest.weights, strongest.confidence,
                                strongest.ex_ante_te, ("te_capped",))
    if abs(strongest.ex_ante_te - te_target) <= rel_tol * te_target:
        return strongest

    best = strongest
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        res = allocate(eq, views, float(np.exp(mid)))
        if abs(res.ex_ante_te - te_target) < abs(best.ex_ante_te - te_target):
            best = res
        if abs(res.ex_ante_te - te_target) <= rel_tol * te_target:
            return res
        if res.ex_ante_te > te_target:
            lo = mid
        else:
            hi = mid
    logger.warning("tracking-error bisection did not reach %.4f (best %.4f)", te_target, best.ex_ante_te)
    return AllocationResult(best.mu_bl, best.weights, best.confidence, best.ex_ante_te, ("te_bracket_failure",))
