import math

import numpy as np
import pandas as pd
import pytest

import dnnfm.simulation as sim
from dnnfm.simulation import (
    DIAGNOSTIC_COLUMNS,
    STUDY_COLUMNS,
    DesignConfig,
    diagnostics_summary,
    diagnostics_table,
    evaluate_methods,
    mc_sigma_f,
    psi_covariance,
    psi_transform,
    run_study,
    simulate,
    simulate_errors,
    snr_diagnostics,
    sparsity_cardinality,
)

FAST = {"max_epochs": 30, "widths": (8, 8)}


class TestErrors:
    def test_single_asset(self):
        _, S = simulate_errors(1, 10, 0)
        np.testing.assert_array_equal(S, [[1.0]])

    def test_two_assets(self):
        U, S = simulate_errors(2, 10, 5)
        a1 = np.random.default_rng(5).normal(0.0, 0.5, size=(3, 2))[0, 0]
        assert S[0, 1] == pytest.approx(a1)
        assert S[1, 1] == pytest.approx(1 + a1**2)
        assert S[0, 0] == 1.0

    def test_explicit_recursion(self):
        J, n = 6, 4
        rng = np.random.default_rng(3)
        a, b, c = rng.normal(0.0, 0.5, size=(3, J))
        e = rng.standard_normal((n, J))
        U, _ = simulate_errors(J, n, 3)
        for j in range(J):
            expected = e[:, j].copy()
            if j >= 1:
                expected += a[j - 1] * e[:, j - 1]
            if j >= 2:
                expected += b[j - 2] * e[:, j - 2]
            if j >= 3:
                expected += c[j - 3] * e[:, j - 3]
            np.testing.assert_allclose(U[:, j], expected, rtol=1e-14, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_banded_and_spd(self, seed):
        _, S = simulate_errors(30, 1, seed)
        j, k = np.indices(S.shape)
        assert not S[np.abs(j - k) > 3].any()
        assert np.linalg.eigvalsh(S)[0] > 0
        assert max(np.count_nonzero(S, axis=1)) <= 7

    def test_sample_covariance_converges(self):
        U, S = simulate_errors(5, 200_000, 11)
        np.testing.assert_allclose(np.cov(U, rowvar=False), S, atol=0.03)

    def test_noise_expectation(self):
        # var(u_j) for j >= 4 has mean 1 + 3 * 0.25 over coefficient draws
        v = [np.diag(simulate_errors(50, 1, s)[1])[3:].mean() for s in range(500)]
        assert abs(np.mean(v) - 1.75) <= 0.05


class TestPsi:
    def test_examples(self):
        np.testing.assert_array_equal(psi_transform(np.array([1.0, 2.0])), [3.0, 6.0])
        np.testing.assert_array_equal(psi_transform(np.zeros(4)), np.zeros(4))
        np.testing.assert_array_equal(psi_transform(np.array([3.0])), [9.0])

    def test_three_dims_cyclic(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(psi_transform(x), [1 + 2, 4 + 6, 9 + 3])

    def test_rows(self, rng):
        X = rng.standard_normal((5, 4))
        np.testing.assert_array_equal(psi_transform(X), np.array([psi_transform(x) for x in X]))

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5, 7])
    def test_covariance_against_monte_carlo(self, d):
        X = np.random.default_rng(d).standard_normal((400_000, d))
        C = np.cov(psi_transform(X), rowvar=False).reshape(d, d)
        np.testing.assert_allclose(psi_covariance(d), C, atol=0.08)


class TestDesigns:
    def test_design1_formula(self):
        p = simulate(DesignConfig(1, 30, 4, 3, seed=2))
        X, beta = p.X, p.coefficients["beta"]
        expected = np.zeros((30, 4))
        for m in range(3):
            # 1-based index m+1: odd -> square, even -> linear
            expected += np.outer(X[:, m] ** 2 if (m + 1) % 2 else X[:, m], beta[m])
        np.testing.assert_allclose(p.f0, expected, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(p.Y, p.f0 + p.U, atol=0)

    @pytest.mark.parametrize("design,d", [(1, 1), (1, 4), (2, 1), (2, 3), (2, 5), (3, 3)])
    def test_sigma_f_against_monte_carlo(self, design, d):
        cfg = DesignConfig(design, 50, 12, d, seed=4)
        p = simulate(cfg)
        mc = mc_sigma_f(cfg, p.coefficients, draws=200_000)
        scale = max(1.0, np.max(np.abs(p.sigma_f_true)))
        assert np.max(np.abs(mc - p.sigma_f_true)) <= 0.05 * scale

    def test_degenerate_coefficients(self):
        cfg = DesignConfig(2, 20, 5, 2)
        zero = {"alpha": np.zeros((2, 5)), "beta": np.zeros((2, 5))}
        assert not mc_sigma_f(cfg, zero, draws=1000).any()
        assert not sim._design2_truth(zero["alpha"], zero["beta"]).any()

    @pytest.mark.parametrize("design", [1, 2, 3])
    def test_truth_psd_spd(self, design):
        for rep in range(10):
            p = simulate(DesignConfig(design, 10, 25, 3, reps=10, seed=1), rep)
            assert np.linalg.eigvalsh(p.sigma_f_true)[0] >= -1e-8
            assert np.linalg.eigvalsh(p.sigma_u_true)[0] > 0
            np.testing.assert_allclose(p.precision_y_true @ p.sigma_y_true, np.eye(25), atol=1e-8)

    @pytest.mark.parametrize("design", [1, 2, 3])
    def test_replication_determinism(self, design):
        cfg = DesignConfig(design, 40, 10, 2, reps=3, seed=9)
        a, b = simulate(cfg, 2), simulate(cfg, 2)
        np.testing.assert_array_equal(a.Y, b.Y)
        np.testing.assert_array_equal(a.sigma_f_true, b.sigma_f_true)
        assert not np.array_equal(a.Y, simulate(cfg, 1).Y)

    def test_design1_signal_expectation(self):
        # signal = 2 * chi2_1 here, so the mean of 2000 reps has sd sqrt(8 / 2000)
        s = diagnostics_summary(DesignConfig(1, 10, 50, 1, reps=2000, seed=3))
        assert abs(s["signal"] - 2.0) <= 4 * math.sqrt(8 / 2000)

    def test_design2_snr(self):
        # reference mean signal-to-noise ratio 0.29
        s = diagnostics_summary(DesignConfig(2, 10, 50, 1, reps=500))
        assert abs(s["snr"] - 0.29) <= 0.03

    def test_design3_row_counts(self):
        cfg = DesignConfig(3, 20, 100, 7, seed=5)
        p = simulate(cfg)
        for name in ("alpha", "beta"):
            counts = np.count_nonzero(p.coefficients[name], axis=1)
            assert counts.tolist() == [sparsity_cardinality(100, m) for m in range(1, 8)]


class TestCardinality:
    @pytest.mark.parametrize("J,m,k", [(100, 1, 10), (100, 2, 6), (100, 3, 6), (100, 4, 3), (100, 7, 2),
                                       (50, 1, 7), (200, 1, 14)])
    def test_examples(self, J, m, k):
        assert sparsity_cardinality(J, m) == k


class TestDiagnostics:
    def test_examples(self):
        r = snr_diagnostics(np.eye(4), np.eye(4))
        assert (r.signal, r.noise, r.snr) == pytest.approx((1.0, 1.0, 1.0))
        assert snr_diagnostics(np.zeros((3, 3)), np.eye(3)).snr == 0.0
        assert snr_diagnostics(2 * np.eye(3), np.eye(3)).snr == pytest.approx(2.0)
        assert math.isnan(snr_diagnostics(np.eye(2), np.zeros((2, 2))).snr)

    def test_table_columns(self):
        t = diagnostics_table(DesignConfig(1, 10, 8, 2, reps=3))
        assert len(t) == 3
        assert list(DIAGNOSTIC_COLUMNS[2:]) == list(t.columns)
        s = diagnostics_summary(DesignConfig(1, 10, 8, 2, reps=3))
        assert list(s) == list(DIAGNOSTIC_COLUMNS)


class TestStudy:
    def test_shape_and_determinism(self):
        grid = [DesignConfig(1, 40, 4, 1, reps=1, seed=1), DesignConfig(2, 40, 4, 2, reps=1, seed=1)]
        t1, rec = run_study(grid, ("dnn", "linear"), train_overrides=FAST)
        t2, _ = run_study(grid, ("dnn", "linear"), train_overrides=FAST)
        assert list(t1.columns) == list(STUDY_COLUMNS)
        assert len(t1) == len(grid) * 2
        pd.testing.assert_frame_equal(t1, t2)
        assert (t1.reps_ok == 1).all()
        assert len(rec) == 4

    def test_failures_counted(self, monkeypatch):
        real = sim.fit_model

        def flaky(Y, X, mode, cfg=None, *a, **k):
            if mode == "linear" and Y[0, 0] > 0:
                raise RuntimeError("boom")
            return real(Y, X, mode, cfg, *a, **k)

        monkeypatch.setattr(sim, "fit_model", flaky)
        cfg = DesignConfig(1, 40, 3, 1, reps=6, seed=0)
        positives = sum(simulate(cfg, r).Y[0, 0] > 0 for r in range(6))
        table, rec = run_study([cfg], ("linear",))
        assert table.reps_ok.iloc[0] == 6 - positives
        assert rec.ok.sum() == 6 - positives

    def test_linear_is_oracle_for_linear_truth(self):
        p = simulate(DesignConfig(2, 240, 6, 2, seed=3))
        f0 = p.X @ p.coefficients["alpha"]
        panel = sim._panel(f0, p.U, p.coefficients["alpha"].T @ p.coefficients["alpha"], p.sigma_u_true,
                           p.X, {"alpha": p.coefficients["alpha"], "beta": np.zeros_like(p.coefficients["alpha"])})
        scores = evaluate_methods(panel, ("linear", "dnn"), seed=0, metrics=("function_error",))
        assert scores["linear"]["function_error"] <= scores["dnn"]["function_error"]
