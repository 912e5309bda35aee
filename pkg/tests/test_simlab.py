import numpy as np
import pytest

from peg import (
    DataError,
    Interval,
    ModelIndexSet,
    SimConfig,
    TrueParams,
    compute_metrics,
    generate_dataset,
    run_replications,
)


TINY = dict(n=50, j=4, reps=2, seed=99, boot=200, cv_folds=3)


class TestTrueParams:
    def test_paper_vectors_at_k20(self):
        tp = TrueParams.for_dimension(20)
        np.testing.assert_allclose(tp.beta, [0, 1, -1.1, 1.2, 0.75, -0.9, 1.2])
        assert tp.delta.shape == (25,)
        np.testing.assert_allclose(tp.delta[:7], [1, 1, 1.2, 1.2, -0.9, 0.8, -1])
        np.testing.assert_allclose(tp.delta[7:21], 1.0)  # 14 noise covariates
        np.testing.assert_allclose(tp.delta[21:], [-0.8, 1, 1.2, -1.5])
        assert tp.psi.shape == (21,)
        np.testing.assert_allclose(tp.psi[:6], [1, 1, -1, -0.9, 0.8, 1])
        np.testing.assert_allclose(tp.psi[6:], 0.0)

    def test_zero_padding_beyond_twenty(self):
        tp = TrueParams.for_dimension(50)
        np.testing.assert_allclose(tp.delta[7:27], 1.0)
        np.testing.assert_allclose(tp.delta[27:51], 0.0)
        np.testing.assert_allclose(tp.delta[51:], [-0.8, 1, 1.2, -1.5])


class TestGenerateDataset:
    def test_noiseless_outcome_wiring(self):
        cfg = SimConfig(n=40, k=20, j=3, sigma2_eps=0.0, reps=1, seed=5)
        d, truth = generate_dataset(cfg, rep=0)
        y = np.stack(d.y)
        np.testing.assert_allclose(y, truth.mu + truth.gamma, atol=1e-12)

    def test_analysis_design_has_k_columns(self):
        for k in (20, 50):
            cfg = SimConfig(n=10, k=k, reps=1, seed=1)
            d, truth = generate_dataset(cfg, rep=0)
            assert d.k == k
            assert truth.psi.shape == (k,)

    def test_true_nonzero_blip_coefficients(self):
        cfg = SimConfig(n=5, k=20, reps=1, seed=1)
        _, truth = generate_dataset(cfg, rep=0)
        np.testing.assert_allclose(truth.psi[:7], [1, 1, -1, -0.9, 0.8, 1, 0])
        np.testing.assert_allclose(truth.psi[7:], 0.0)
        assert truth.support == (0, 1, 2, 3, 4, 5)
        assert truth.modifiers == frozenset({1, 2, 3, 4, 5})

    def test_bitwise_reproducible(self):
        cfg = SimConfig(n=30, k=20, reps=1, seed=77)
        d1, t1 = generate_dataset(cfg, rep=4)
        d2, t2 = generate_dataset(cfg, rep=4)
        for a, b in zip(d1.y, d2.y):
            assert np.array_equal(a, b)
        for a, b in zip(d1.h, d2.h):
            assert np.array_equal(a, b)
        assert np.array_equal(t1.mu, t2.mu)

    def test_reps_differ(self):
        cfg = SimConfig(n=30, k=20, reps=1, seed=77)
        d1, _ = generate_dataset(cfg, rep=0)
        d2, _ = generate_dataset(cfg, rep=1)
        assert not np.array_equal(d1.y[0], d2.y[0])

    def test_first_session_covariates_centered(self):
        cfg = SimConfig(n=4000, k=20, reps=1, seed=13)
        d, _ = generate_dataset(cfg, rep=0)
        h0 = np.stack([hi[0] for hi in d.h])  # first sessions
        means = h0[:, 1:7].mean(axis=0)
        assert np.max(np.abs(means)) < 4.0 / np.sqrt(4000)

    def test_treatment_prevalence_reasonable(self):
        cfg = SimConfig(n=500, k=20, reps=1, seed=2)
        d, _ = generate_dataset(cfg, rep=0)
        a = np.concatenate(d.a)
        assert 0.3 < a.mean() < 0.7

    def test_k_below_minimum_rejected(self):
        with pytest.raises(DataError):
            SimConfig(n=10, k=6, reps=1, seed=0)


def iv(k, lo, hi):
    return Interval(index=k, estimate=(lo + hi) / 2, lower=lo, upper=hi)


class TestComputeMetrics:
    def test_all_covered(self):
        psi = np.array([1.0, 0.5, 0.0])
        sel = ModelIndexSet((0, 1))
        ivs = [iv(0, 0.5, 1.5), iv(1, 0.0, 1.0)]
        avg_len, fcr, power = compute_metrics(ivs, psi, sel)
        assert fcr == 0.0
        assert avg_len == pytest.approx(1.0)

    def test_full_power(self):
        psi = np.array([1.0, 0.5])
        sel = ModelIndexSet((0, 1))
        ivs = [iv(0, 0.5, 1.5), iv(1, 0.2, 0.9)]
        _, _, power = compute_metrics(ivs, psi, sel)
        assert power == 1.0

    def test_half_miss(self):
        psi = np.array([1.0, 0.5])
        sel = ModelIndexSet((0, 1))
        ivs = [iv(0, 0.5, 1.5), iv(1, 0.6, 0.9)]  # second misses 0.5
        _, fcr, _ = compute_metrics(ivs, psi, sel)
        assert fcr == pytest.approx(0.5)

    def test_power_counts_only_nonzero_truth(self):
        psi = np.array([1.0, 0.0])
        sel = ModelIndexSet((0, 1))
        ivs = [iv(0, 0.5, 1.5), iv(1, -0.2, 0.2)]
        _, _, power = compute_metrics(ivs, psi, sel)
        assert power == 1.0  # only the intercept has nonzero truth

    def test_missing_interval_rejected(self):
        psi = np.array([1.0, 0.0])
        with pytest.raises(DataError):
            compute_metrics([iv(0, 0, 1)], psi, ModelIndexSet((0, 1)))


@pytest.fixture(scope="module")
def tiny_result():
    cfg = SimConfig(k=8, methods=("naive", "uposi", "os-lasso"),
                    workers=1, **TINY)
    return run_replications(cfg)


class TestRunReplications:

    def test_structure(self, tiny_result):
        res = tiny_result
        assert res.reps_used + res.failures == 2
        for name in ("naive", "uposi", "os-lasso"):
            met = res.method_metrics[name]
            assert set(met) == {"avg_ci_length", "fcr", "power"}
        assert set(res.selection) == {"fn_pct", "fp_pct", "exact_pct", "afp"}
        assert len(res.records) == 2

    def test_records_carry_intervals(self, tiny_result):
        rec = tiny_result.records[0]
        if rec["error"] is None:
            assert rec["methods"]["os-lasso"]["onestep"]
            assert rec["methods"]["uposi"]["c_g"] >= 0
            assert len(rec["methods"]["naive"]["intervals"]) == len(rec["selected"])

    def test_worker_count_does_not_change_results(self, tiny_result):
        cfg = SimConfig(k=8, methods=("naive", "uposi", "os-lasso"),
                        workers=2, **TINY)
        res2 = run_replications(cfg)
        assert res2.method_metrics == tiny_result.method_metrics
        assert res2.selection == tiny_result.selection
        assert res2.records == tiny_result.records
