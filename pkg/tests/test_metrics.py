"""Metric correctness: closed-form affine SNR fit and SSIM properties."""

import csv

import numpy as np
import pytest

from sgdnet import metrics


class TestSnr:
    def test_perfect_match_sentinel(self):
        x = np.random.default_rng(0).random((8, 8))
        assert metrics.snr_db(x, x) == float("inf")

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.random((10, 10))
        xhat = x + 0.1 * rng.standard_normal((10, 10))
        base = metrics.snr_db(xhat, x)
        for a, b in [(5.0, 3.0), (-2.0, 0.7), (0.01, -40.0)]:
            assert abs(metrics.snr_db(a * xhat + b, x) - base) <= 1e-9

    def test_worked_example(self):
        x = np.array([1.0, 2.0, 3.0])
        xhat = np.array([1.0, 2.0, 2.0])
        a, b = metrics.affine_fit(xhat, x)
        np.testing.assert_allclose([a, b], [1.5, 0.5], rtol=1e-12)
        np.testing.assert_allclose(metrics.snr_db(xhat, x),
                                   10 * np.log10(28.0), rtol=1e-12)

    def test_closed_form_is_grid_maximum(self):
        rng = np.random.default_rng(2)
        x = rng.random(30)
        xhat = x + 0.2 * rng.standard_normal(30)
        a0, b0 = metrics.affine_fit(xhat, x)
        best = metrics.snr_db(xhat, x)
        x_norm = np.linalg.norm(x)
        for da in np.linspace(-0.2, 0.2, 9):
            for db in np.linspace(-0.2, 0.2, 9):
                resid = x - (a0 + da) * xhat + (b0 + db)
                val = 20 * np.log10(x_norm / np.linalg.norm(resid))
                assert val <= best + 1e-9

    def test_zero_truth_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            metrics.snr_db(np.ones(4), np.zeros(4))

    def test_constant_estimate_degenerate_fit(self):
        x = np.array([1.0, 2.0, 3.0])
        val = metrics.snr_db(np.ones(3), x)
        # Fit collapses to the mean: residual is x - mean(x).
        expected = 20 * np.log10(np.linalg.norm(x) /
                                 np.linalg.norm(x - x.mean()))
        np.testing.assert_allclose(val, expected, rtol=1e-12)


class TestSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(3).random((16, 16))
        assert abs(metrics.ssim(x, x, 1.0) - 1.0) <= 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        p = rng.random((16, 16))
        q = rng.random((16, 16))
        assert abs(metrics.ssim(p, q, 1.0) - metrics.ssim(q, p, 1.0)) <= 1e-12

    def test_negated_image_negative_score(self):
        # Zero-local-mean pattern: negation flips the structure term while
        # the luminance term stays near its stabilizing constant.
        rng = np.random.default_rng(5)
        ii, jj = np.mgrid[:24, :24]
        x = (-1.0) ** (ii + jj) * (0.5 + 0.3 * rng.random((24, 24)))
        assert metrics.ssim(-x, x, 2.0) < 0

    def test_constant_images_scalar_formula(self):
        c1v, c2v = 0.52, 0.5
        val = metrics.ssim(np.full((16, 16), c1v), np.full((16, 16), c2v), 1.0)
        c1 = (0.01 * 1.0) ** 2
        expected = (2 * c1v * c2v + c1) / (c1v ** 2 + c2v ** 2 + c1)
        np.testing.assert_allclose(val, expected, rtol=1e-10)

    def test_range_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            p = rng.random((16, 16))
            q = rng.random((16, 16))
            v = metrics.ssim(p, q, 1.0)
            assert -1.0 <= v <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            metrics.ssim(np.zeros((4, 4)), np.zeros((5, 5)), 1.0)


class TestReportAndCsv:
    def test_report_aggregates(self):
        rng = np.random.default_rng(7)
        truths = [rng.random((16, 16)) for _ in range(3)]
        ests = [t + 0.05 * rng.standard_normal((16, 16)) for t in truths]
        ests[0] = truths[0].copy()  # one perfect match -> inf snr
        rep = metrics.MetricReport.from_pairs(ests, truths)
        assert rep.snr_values[0] == float("inf")
        assert np.isfinite(rep.aggregates["snr_mean"])
        assert all(-1 <= s <= 1 for s in rep.ssim_values)

    def test_csv_caps_infinite_snr(self, tmp_path):
        p = tmp_path / "metrics.csv"
        metrics.write_metrics_csv(p, [
            {"image_id": 0, "method": "sgdnet", "snr_db": float("inf"),
             "ssim": 0.99},
            {"image_id": 1, "method": "tv", "snr_db": 21.5, "ssim": 0.8},
        ])
        with open(p) as f:
            rows = list(csv.DictReader(f))
        assert float(rows[0]["snr_db"]) == 300.0
        assert float(rows[1]["snr_db"]) == 21.5
