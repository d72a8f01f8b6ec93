import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factor_regimes.black_litterman import (
    AllocationError,
    Equilibrium,
    ViewSet,
    allocate,
    build_views,
    ewm_covariance,
    implied_prior,
    kkt_residual,
    posterior_returns,
    psd_floor,
    schur_multipliers,
    solve_mvo,
    target_tracking_error,
    tracking_error,
    unconstrained_active_weights,
    view_uncertainty,
)

UNIVERSE = ["market", "value", "size", "momentum", "quality", "low_vol", "growth"]


def random_spd(rng, n, scale=0.04):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T / n + 0.2 * np.eye(n))


def random_views(rng, N, K, c=1.0, sigma=None):
    P = np.zeros((K, N))
    for k in range(K):
        i, j = rng.choice(N, 2, replace=False)
        P[k, i], P[k, j] = 1.0, -1.0
    v = rng.uniform(-0.05, 0.05, K)
    vs = ViewSet(P, v)
    if sigma is not None:
        vs = vs.with_uncertainty(view_uncertainty(sigma, P, c))
    return vs


def seven_asset(rng, seed_views=True):
    sigma = random_spd(rng, 7)
    eq = Equilibrium(sigma, np.full(7, 1 / 7))
    mu = {f: rng.uniform(-0.05, 0.05) for f in UNIVERSE[1:]}
    return eq, build_views(mu, UNIVERSE)


class TestCovariance:
    def test_constant_returns_zero(self):
        cov = ewm_covariance(np.ones((20, 3)) * 0.01, floor=False)
        assert np.allclose(cov, 0)

    def test_long_halflife_sample_cov(self, rng):
        X = rng.multivariate_normal([0, 0], [[1e-4, 3e-5], [3e-5, 2e-4]], 10_000)
        cov = ewm_covariance(X, halflife=1e9)
        sample = np.cov(X.T, ddof=0) * 252
        assert np.allclose(cov, sample, rtol=0.05)

    def test_perfect_correlation(self, rng):
        x = rng.normal(size=200)
        cov = ewm_covariance(np.c_[x, 2 * x], halflife=30)
        assert cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1]) == pytest.approx(1, abs=1e-8)

    def test_weight_oracle(self, rng):
        X = rng.normal(size=(50, 3))
        w = 0.5 ** (np.arange(49, -1, -1) / 10)
        w /= w.sum()
        m = w @ X
        oracle = 252 * ((X - m).T * w) @ (X - m)
        assert np.allclose(ewm_covariance(X, 10), oracle, atol=1e-12)

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            ewm_covariance(np.zeros((1, 3)))

    def test_psd_floor(self):
        s = psd_floor(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert np.linalg.eigvalsh(s).min() >= 1e-10 - 1e-15


class TestPrior:
    def test_identity(self):
        assert np.allclose(implied_prior(2.5, np.eye(4), np.full(4, 0.25)), 2.5 / 4)

    def test_zero_delta(self, rng):
        assert np.all(implied_prior(0.0, random_spd(rng, 3), np.full(3, 1 / 3)) == 0)

    def test_matmul_oracle(self, rng):
        S, w = random_spd(rng, 3), rng.dirichlet(np.ones(3))
        oracle = [2.5 * sum(S[i, j] * w[j] for j in range(3)) for i in range(3)]
        assert np.max(np.abs(implied_prior(2.5, S, w) - oracle)) < 1e-12

    def test_equilibrium_validation(self):
        with pytest.raises(ValueError):
            Equilibrium(np.eye(2), np.array([0.7, 0.7]))


class TestViews:
    def test_zero_views(self):
        vs = build_views({f: 0.0 for f in UNIVERSE[1:]}, UNIVERSE)
        assert np.all(vs.v == 0) and vs.P.shape == (6, 7)
        assert np.all(vs.P.sum(1) == 0) and np.all((vs.P != 0).sum(1) == 2)

    def test_order(self):
        mu = {f: 0.0 for f in UNIVERSE[1:]}
        mu["value"] = 0.05
        vs = build_views(mu, UNIVERSE)
        assert vs.v.tolist() == [0.05, 0, 0, 0, 0, 0]
        assert vs.P[0, 1] == 1 and vs.P[0, 0] == -1

    def test_missing_factor(self):
        with pytest.raises(ValueError, match="missing"):
            build_views({"value": 0.01}, UNIVERSE)

    def test_uncertainty(self, rng):
        P = np.array([[1.0, -1.0, 0.0]])
        assert view_uncertainty(np.eye(3), P, 1.0).tolist() == [2.0]
        S = random_spd(rng, 3)
        assert np.allclose(view_uncertainty(S, P, 2.0), 2 * view_uncertainty(S, P, 1.0))
        assert view_uncertainty(S, P, 1.5)[0] == pytest.approx(1.5 * (P @ S @ P.T)[0, 0], rel=1e-14)
        with pytest.raises(AllocationError):
            view_uncertainty(np.zeros((3, 3)), P, 1.0)


class TestPosterior:
    def test_no_innovation(self, rng):
        S = random_spd(rng, 5)
        eq = Equilibrium(S, np.full(5, 0.2))
        vs = random_views(rng, 5, 3, sigma=S)
        vs = ViewSet(vs.P, vs.P @ eq.pi, vs.omega_over_tau)
        assert np.max(np.abs(posterior_returns(eq.pi, S, vs) - eq.pi)) <= 1e-12

    def test_weak_views(self, rng):
        S = random_spd(rng, 4)
        eq = Equilibrium(S, np.full(4, 0.25))
        vs = random_views(rng, 4, 2, c=1e12, sigma=S)
        assert np.allclose(posterior_returns(eq.pi, S, vs), eq.pi, atol=1e-12)

    def test_explicit_inverse_oracle(self, rng):
        S = random_spd(rng, 3)
        pi = implied_prior(2.5, S, np.full(3, 1 / 3))
        vs = random_views(rng, 3, 1, c=0.7, sigma=S)
        P, v, Om = vs.P, vs.v, np.diag(vs.omega_over_tau)
        oracle = pi + S @ P.T @ np.linalg.inv(P @ S @ P.T + Om) @ (v - P @ pi)
        assert np.max(np.abs(posterior_returns(pi, S, vs) - oracle)) < 1e-10

    def test_needs_uncertainty(self, rng):
        with pytest.raises(ValueError):
            posterior_returns(np.zeros(3), np.eye(3), ViewSet(np.array([[1.0, -1.0, 0]]), [0.01]))


class TestMultipliers:
    def test_zero_innovation(self, rng):
        S = random_spd(rng, 4)
        eq = Equilibrium(S, np.full(4, 0.25))
        vs = random_views(rng, 4, 2, sigma=S)
        vs = ViewSet(vs.P, vs.P @ eq.pi, vs.omega_over_tau)
        lam, aw = unconstrained_active_weights(eq, vs)
        assert np.allclose(lam, 0, atol=1e-15) and np.allclose(aw, 0, atol=1e-15)

    def test_single_view_closed_form(self, rng):
        S = random_spd(rng, 4)
        eq = Equilibrium(S, np.full(4, 0.25))
        vs = random_views(rng, 4, 1, c=0.5, sigma=S)
        p, om = vs.P[0], vs.omega_over_tau[0]
        closed = (vs.v[0] - p @ eq.pi) / (eq.delta * (p @ S @ p + om))
        lam, _ = unconstrained_active_weights(eq, vs)
        assert abs(lam[0] - closed) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_two_views_element_vs_matrix(self, seed):
        rng = np.random.default_rng(seed)
        S = random_spd(rng, 5)
        eq = Equilibrium(S, np.full(5, 0.2))
        vs = random_views(rng, 5, 2, c=0.8, sigma=S)
        lam, _ = unconstrained_active_weights(eq, vs, check=False)
        assert np.max(np.abs(schur_multipliers(eq, vs) - lam)) <= 1e-8

    def test_two_asset_unconstrained_optimum(self, rng):
        # w_bmk + P'lambda solves the unconstrained first-order condition delta S w = mu_bl
        S = random_spd(rng, 2)
        eq = Equilibrium(S, np.array([0.5, 0.5]))
        vs = ViewSet(np.array([[-1.0, 1.0]]), [0.03])
        vs = vs.with_uncertainty(view_uncertainty(S, vs.P, 0.6))
        lam, aw = unconstrained_active_weights(eq, vs)
        mu_bl = posterior_returns(eq.pi, S, vs)
        assert np.allclose(eq.delta * S @ (eq.w_bmk + aw), mu_bl, atol=1e-8)
        assert np.allclose(eq.w_bmk + aw, np.linalg.solve(eq.delta * S, mu_bl), atol=1e-8)


def _closed_form(mu, S, delta):
    Si = np.linalg.inv(S)
    one = np.ones(len(mu))
    return (Si @ one) / (one @ Si @ one) + Si @ (mu - one * (one @ Si @ mu) / (one @ Si @ one)) / delta


def _simplex_grid(mu, S, delta, step=1e-3):
    n = int(round(1 / step))
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    ok = i + j <= n
    W = np.c_[i[ok], j[ok], n - i[ok] - j[ok]] * step
    util = W @ mu - 0.5 * delta * np.einsum("ij,jk,ik->i", W, S, W)
    return W[np.argmax(util)]


class TestMVO:
    def test_symmetric(self):
        assert np.allclose(solve_mvo(np.full(4, 0.05), 0.04 * np.eye(4)), 0.25, atol=1e-12)

    def test_two_asset_interior(self):
        mu, S = np.array([0.10, 0.0]), np.eye(2)
        w = solve_mvo(mu, S, 2.5)
        assert np.allclose(w, [0.52, 0.48], atol=1e-12)
        assert np.allclose(w, _closed_form(mu, S, 2.5), atol=1e-8)

    def test_extreme_binding(self):
        mu = np.array([1.0, -100.0, 0.5])
        S = np.diag([0.04, 0.04, 0.09])
        w = solve_mvo(mu, S, 2.5)
        assert w[1] == 0
        assert np.max(np.abs(w - _simplex_grid(mu, S, 2.5))) <= 1e-3

    @pytest.mark.parametrize("seed", range(10))
    def test_random_binding_vs_grid(self, seed):
        rng = np.random.default_rng(100 + seed)
        while True:
            S = random_spd(rng, 3)
            mu = rng.normal(0, 0.2, 3)
            if np.any(_closed_form(mu, S, 2.5) < 0):
                break
        w = solve_mvo(mu, S, 2.5)
        assert np.any(w == 0)
        assert np.max(np.abs(w - _simplex_grid(mu, S, 2.5))) <= 1e-3 + 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 10**6), st.floats(-1, 1))
    def test_invariants(self, N, seed, shift):
        rng = np.random.default_rng(seed)
        S = random_spd(rng, N)
        mu = rng.normal(0, 0.1, N)
        w = solve_mvo(mu, S, 2.5)
        assert np.all(w >= -1e-10) and abs(w.sum() - 1) <= 1e-8
        assert kkt_residual(w, mu, S, 2.5) <= 1e-8
        assert np.max(np.abs(solve_mvo(mu + shift, S, 2.5) - w)) <= 1e-8

    def test_not_pd(self):
        with pytest.raises(AllocationError):
            solve_mvo(np.zeros(2), np.zeros((2, 2)))


class TestTrackingError:
    def test_no_views_capped(self, rng):
        S = random_spd(rng, 7)
        eq = Equilibrium(S, np.full(7, 1 / 7))
        views = build_views({f: 0.0 for f in UNIVERSE[1:]}, UNIVERSE)
        views = ViewSet(views.P, views.P @ eq.pi)
        res = target_tracking_error(eq, views, 0.02)
        assert "te_capped" in res.flags
        assert res.ex_ante_te < 1e-8
        assert np.allclose(res.weights, 1 / 7, atol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_targets(self, seed):
        rng = np.random.default_rng(seed)
        eq, views = seven_asset(rng)
        devs = []
        for te in (0.01, 0.02, 0.03, 0.04):
            res = target_tracking_error(eq, views, te)
            assert abs(res.ex_ante_te - te) <= 0.05 * te or "te_capped" in res.flags
            assert res.ex_ante_te == pytest.approx(tracking_error(res.weights, eq.w_bmk, eq.sigma), abs=1e-15)
            devs.append(res.ex_ante_te)
        assert all(b >= a - 1e-12 for a, b in zip(devs, devs[1:]))

    def test_te_monotone_in_confidence_single_view(self, rng):
        # one view with an interior optimum: TE = |lambda| sqrt(p'Sp), and
        # |lambda| shrinks as c grows
        S = random_spd(rng, 4) * 0.05
        eq = Equilibrium(S, np.full(4, 0.25))
        views = ViewSet(np.array([[-1.0, 1.0, 0, 0]]), [0.0005])
        cs = np.logspace(-2, 4, 40)
        res = [allocate(eq, views, c) for c in cs]
        assert all(np.all(r.weights > 0) for r in res)
        tes = [r.ex_ante_te for r in res]
        assert all(a >= b - 1e-12 for a, b in zip(tes, tes[1:]))

    def test_te_extremes_in_confidence(self, rng):
        eq, views = seven_asset(rng)
        assert allocate(eq, views, 1e-4).ex_ante_te > allocate(eq, views, 1.0).ex_ante_te
        assert allocate(eq, views, 1e4).ex_ante_te < 1e-3

    def test_bad_target(self, rng):
        eq, views = seven_asset(rng)
        with pytest.raises(ValueError):
            target_tracking_error(eq, views, 0.0)

    def test_result_serializable(self, rng):
        eq, views = seven_asset(rng)
        d = target_tracking_error(eq, views, 0.02).to_dict()
        assert set(d) == {"mu_bl", "weights", "confidence", "ex_ante_te", "flags"}
