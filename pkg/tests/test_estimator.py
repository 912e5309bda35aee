import numpy as np
import pytest

from peg import (
    ConvergenceError,
    DataError,
    Dataset,
    FitControls,
    ModelIndexSet,
    MomentCache,
    MomentMatrices,
    NumericalError,
    PenalizedFit,
    ScadPenalty,
    WorkingCorrelation,
    fit_propensity,
    g_estimate,
    moment_matrices,
    penalized_g_fit,
    sandwich_ci,
    scad_derivative,
    scad_penalty_value,
    tune_lambda,
)
from peg.estimator import default_lambda_grid

from conftest import make_dataset, stub_propensity


def scad_oracle(t, lam, a):
    # scalar reference, branch by region
    if t <= lam:
        return lam
    return max(a * lam - t, 0.0) / (a - 1.0)


class TestScad:
    def test_flat_region(self):
        assert scad_derivative(0.5, ScadPenalty(1.0, 3.7)) == 1.0

    def test_middle_region(self):
        val = scad_derivative(2.0, ScadPenalty(1.0, 3.7))
        assert val == pytest.approx((3.7 - 2.0) / 2.7)

    def test_zero_region(self):
        assert scad_derivative(4.0, ScadPenalty(1.0, 3.7)) == 0.0

    def test_matches_oracle_everywhere(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            lam = rng.uniform(0.05, 2.0)
            a = rng.uniform(2.05, 5.0)
            p = ScadPenalty(lam, a)
            for t in (rng.uniform(0, 1.5 * a * lam), lam, a * lam, 0.0):
                assert scad_derivative(t, p) == scad_oracle(t, lam, a)

    def test_vectorized(self):
        p = ScadPenalty(1.0, 3.7)
        t = np.array([0.0, 0.5, 1.0, 2.0, 3.7, 5.0])
        expected = [scad_oracle(v, 1.0, 3.7) for v in t]
        np.testing.assert_array_equal(scad_derivative(t, p), expected)

    def test_invalid_inputs(self):
        with pytest.raises(DataError):
            scad_derivative(-0.1, ScadPenalty(1.0))
        with pytest.raises(DataError):
            ScadPenalty(1.0, a=2.0)
        with pytest.raises(DataError):
            ScadPenalty(-0.5)

    def test_value_derivative_consistent(self):
        # finite differences of the penalty value reproduce the derivative
        rng = np.random.default_rng(4)
        p = ScadPenalty(0.8, 3.7)
        h = 1e-6
        for _ in range(50):
            t = rng.uniform(0.05, 4.0)
            if min(abs(t - p.lam), abs(t - p.a * p.lam)) < 1e-3:
                continue  # kinks
            fd = (scad_penalty_value(t + h, p) - scad_penalty_value(t - h, p)) / (2 * h)
            assert fd == pytest.approx(scad_derivative(t, p), abs=1e-5)


class TestMomentMatrices:
    def test_single_session_hand_expansion(self):
        # n=1, J=1, K=1, V=1: W = [[1, a], [a-e, a(a-e)]], G = [y, (a-e) y]
        a, e, y = 1.0, 0.3, 2.0
        d = Dataset([0], [np.array([y])], [np.array([a])], [np.ones((1, 1))])
        pm = stub_propensity(d, e_value=e)
        mm = moment_matrices(d, pm, WorkingCorrelation("independent"), 1.0)
        np.testing.assert_allclose(mm.w, [[1.0, a], [a - e, a * (a - e)]])
        np.testing.assert_allclose(mm.g, [y, (a - e) * y])

    def test_full_model_order(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        mm = moment_matrices(d, pm, WorkingCorrelation("independent"), 1.0)
        assert mm.w.shape == (2 * d.k, 2 * d.k)
        sub = moment_matrices(d, pm, WorkingCorrelation("independent"), 1.0,
                              m=ModelIndexSet((0, 2)))
        assert sub.w.shape == (d.k + 2, d.k + 2)
        # submodel matrices are submatrices of the full ones
        idx = np.concatenate([np.arange(d.k), [d.k + 0, d.k + 2]])
        np.testing.assert_allclose(sub.w, mm.w[np.ix_(idx, idx)], rtol=1e-12)
        np.testing.assert_allclose(sub.g, mm.g[idx], rtol=1e-12)

    def test_duplicated_subjects_average_out(self, rng):
        d, _, _ = make_dataset(rng, n=6, j=3, k=4)
        pm = stub_propensity(d, 0.4)
        doubled = Dataset(tuple(range(12)), d.y + d.y, d.a + d.a, d.h + d.h)
        pm2 = stub_propensity(doubled, 0.4)
        mm1 = moment_matrices(d, pm, WorkingCorrelation("ar1", rho=0.3), 1.5)
        mm2 = moment_matrices(doubled, pm2, WorkingCorrelation("ar1", rho=0.3), 1.5)
        np.testing.assert_allclose(mm1.w, mm2.w, rtol=1e-12)
        np.testing.assert_allclose(mm1.g, mm2.g, rtol=1e-12)

    def test_cache_matches_direct(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        corr = WorkingCorrelation("exchangeable", rho=0.4)
        direct = moment_matrices(d, pm, corr, 2.2)
        cached = moment_matrices(d, pm, corr, 2.2, cache=MomentCache(d, pm))
        np.testing.assert_allclose(direct.w, cached.w, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(direct.g, cached.g, rtol=1e-9, atol=1e-12)


class TestGEstimate:
    def test_identity_solve(self):
        g = np.array([0.3, -1.2, 4.0])
        mm = MomentMatrices(w=np.eye(3), g=g, m=ModelIndexSet((0,)), k=2)
        np.testing.assert_array_equal(g_estimate(mm), g)

    def test_exact_recovery_on_noiseless_data(self, rng):
        d, delta, psi = make_dataset(rng, n=30, j=3, k=4, noise=0.0)
        pm = fit_propensity(d)
        mm = moment_matrices(d, pm, WorkingCorrelation("independent"), 1.0)
        theta = g_estimate(mm)
        np.testing.assert_allclose(theta, np.concatenate([delta, psi]), atol=1e-8)

    def test_singular_matrix_rejected(self, rng):
        d, _, _ = make_dataset(rng, n=20, j=3, k=3)
        h_dup = [np.column_stack([hi, hi[:, 1]]) for hi in d.h]
        d_dup = Dataset(d.ids, d.y, d.a, h_dup)
        pm = stub_propensity(d_dup, 0.5)
        mm = moment_matrices(d_dup, pm, WorkingCorrelation("independent"), 1.0)
        with pytest.raises(NumericalError, match="condition"):
            g_estimate(mm)


class TestPenalizedFit:
    def test_zero_penalty_equals_direct_solve(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        fit = penalized_g_fit(d, pm, "exchangeable", ScadPenalty(0.0))
        assert fit.converged
        mm = moment_matrices(d, pm, fit.corr, fit.sigma2)
        np.testing.assert_allclose(fit.theta, g_estimate(mm), atol=1e-6)

    def test_zero_penalty_solves_equations_fixed_correlation(self, small_fit_inputs):
        # with the correlation structure fixed, the zero-penalty solution
        # satisfies the estimating equations to solver precision
        d, pm, _, _ = small_fit_inputs
        fit = penalized_g_fit(d, pm, "independent", ScadPenalty(0.0))
        mm = moment_matrices(d, pm, fit.corr, fit.sigma2)
        assert np.max(np.abs(mm.w @ fit.theta - mm.g)) < 1e-8

    def test_large_penalty_kills_modifiers(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        unpen = penalized_g_fit(d, pm, "independent", ScadPenalty(0.0))
        lam = 2.0 * np.max(np.abs(unpen.psi))
        fit = penalized_g_fit(d, pm, "independent", ScadPenalty(lam))
        np.testing.assert_array_equal(fit.psi[1:], 0.0)
        assert fit.psi[0] != 0.0
        assert fit.selected.indices == (0,)

    def test_selects_true_support(self, rng):
        psi = np.array([1.0, 0.9, 0.0, 0.0, -0.8, 0.0])
        d, _, _ = make_dataset(rng, n=250, j=4, k=6, psi=psi, noise=1.0)
        pm = fit_propensity(d)
        fit = penalized_g_fit(d, pm, "exchangeable", ScadPenalty(0.2))
        assert fit.selected.indices == (0, 1, 4)

    def test_restart_keeps_selection(self, rng):
        psi = np.array([1.0, 0.9, 0.0, 0.0, -0.8, 0.0])
        d, _, _ = make_dataset(rng, n=150, j=4, k=6, psi=psi)
        pm = fit_propensity(d)
        fit = penalized_g_fit(d, pm, "exchangeable", ScadPenalty(0.2))
        refit = penalized_g_fit(d, pm, "exchangeable", ScadPenalty(0.2),
                                theta0=fit.theta)
        assert refit.selected.indices == fit.selected.indices

    def test_mm_penalty_majorization_along_path(self, rng):
        # the reweighting at step t majorizes the SCAD penalty at step t+1
        d, _, _ = make_dataset(rng, n=80, j=4, k=6)
        pm = fit_propensity(d)
        p = ScadPenalty(0.15)
        eps = 1e-6
        for kind in ("independent", "exchangeable", "ar1"):
            fit = penalized_g_fit(d, pm, kind, p,
                                  FitControls(track_history=True))
            path = fit.history["theta_path"]
            k = d.k
            for prev, cur in zip(path[:-1], path[1:]):
                v = np.abs(prev[k + 1:])
                u = np.abs(cur[k + 1:])
                lhs = scad_penalty_value(u, p)
                rhs = (scad_penalty_value(v, p)
                       + scad_derivative(v, p) / (2.0 * (eps + v)) * (u**2 - v**2))
                assert np.all(lhs <= rhs + 1e-8 * (1.0 + p.lam))

    def test_nonconvergence_flagged(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        fit = penalized_g_fit(d, pm, "exchangeable", ScadPenalty(0.1),
                              FitControls(max_iter=1, tol=1e-14))
        assert not fit.converged
        assert fit.iterations == 1

    def test_sandwich_cov_symmetric_psd(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        fit = penalized_g_fit(d, pm, "exchangeable", ScadPenalty(0.1))
        cov = fit.sandwich_cov
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        assert np.min(np.linalg.eigvalsh(cov)) > -1e-12


class TestSandwichCI:
    def test_wald_arithmetic(self):
        # alpha=0.05, se=0.1, estimate 1 -> (0.804, 1.196) with z=1.9599640
        cov = np.zeros((2, 2))
        cov[1, 1] = 0.01
        fit = PenalizedFit(
            delta=np.zeros(1), psi=np.array([1.0]), sigma2=1.0,
            corr=WorkingCorrelation("independent"), penalty=ScadPenalty(0.0),
            selected=ModelIndexSet((0,)), iterations=1, converged=True,
            sandwich_cov=cov, n=10,
        )
        (iv,) = sandwich_ci(fit, alpha=0.05)
        assert iv.lower == pytest.approx(1.0 - 1.9599639845400545 * 0.1, abs=1e-9)
        assert iv.upper == pytest.approx(1.0 + 1.9599639845400545 * 0.1, abs=1e-9)
        assert iv.upper - iv.estimate == pytest.approx(iv.estimate - iv.lower)

    def test_intervals_cover_selected_coordinates(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        fit = penalized_g_fit(d, pm, "exchangeable", ScadPenalty(0.1))
        ivs = sandwich_ci(fit, 0.05)
        assert [iv.index for iv in ivs] == list(fit.selected)
        for iv in ivs:
            assert iv.lower <= iv.estimate <= iv.upper

    def test_requires_convergence(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        fit = penalized_g_fit(d, pm, "independent", ScadPenalty(0.1),
                              FitControls(max_iter=1, tol=1e-14))
        with pytest.raises(ConvergenceError):
            sandwich_ci(fit)


class TestTuneLambda:
    def test_singleton_grid(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        res = tune_lambda(d, pm, "independent", grid=np.array([0.07]))
        assert res.lambda_star == pytest.approx(0.07)
        assert len(res.fits) == 1

    def test_tie_prefers_larger(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        # both values kill every modifier, so the criterion ties exactly
        res = tune_lambda(d, pm, "independent", grid=np.array([5.0, 10.0]))
        assert res.lambda_star == pytest.approx(10.0)

    def test_grid_validation(self, small_fit_inputs):
        d, pm, _, _ = small_fit_inputs
        with pytest.raises(DataError):
            tune_lambda(d, pm, "independent", grid=np.array([]))
        with pytest.raises(DataError):
            tune_lambda(d, pm, "independent", grid=np.array([0.2, 0.1]))

    def test_recovers_support_on_easy_problem(self, rng):
        psi = np.array([1.0, 0.9, 0.0, 0.0, -0.8, 0.0])
        d, _, _ = make_dataset(rng, n=300, j=4, k=6, psi=psi)
        pm = fit_propensity(d)
        res = tune_lambda(d, pm, "exchangeable")
        assert res.best.selected.indices == (0, 1, 4)
        assert res.dric[np.isfinite(res.dric)].size > 0

    def test_default_grid_shape(self):
        grid = default_lambda_grid(1.5, 400, 20)
        assert grid.shape == (30,)
        assert np.all(np.diff(grid) > 0)
