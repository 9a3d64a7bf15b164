import numpy as np
import pytest
from scipy import stats
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dhipf.particles import (
    DegenerateWeightsError,
    Ensemble,
    effective_sample_size,
    estimate_mean,
    normalize_weights,
    point_ensemble,
    resample_indices,
    resample_inverse_cdf,
    write_ensemble_csv,
)

from oracles import binomial_upper

log_weights = arrays(np.float64, st.integers(1, 50), elements=st.floats(-500, 500))


class TestNormalizeWeights:
    def test_uniform(self):
        np.testing.assert_allclose(normalize_weights([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_single_survivor(self):
        np.testing.assert_array_equal(normalize_weights([0.0, -np.inf, -np.inf]), [1.0, 0.0, 0.0])

    def test_proportional(self):
        np.testing.assert_allclose(normalize_weights(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_all_minus_inf(self):
        with pytest.raises(DegenerateWeightsError, match="degenerate weight vector"):
            normalize_weights([-np.inf, -np.inf])

    def test_rejects_nan(self):
        with pytest.raises(DegenerateWeightsError):
            normalize_weights([0.0, np.nan])

    def test_extreme_range(self):
        w = normalize_weights([-2000.0, 0.0, -1e5])
        assert w[1] == 1.0 and np.isfinite(w).all()

    @given(log_weights)
    def test_sums_to_one(self, lw):
        w = normalize_weights(lw)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) <= 1e-12

    @given(log_weights, st.floats(-1e3, 1e3))
    def test_shift_invariance(self, lw, c):
        np.testing.assert_allclose(normalize_weights(lw + c), normalize_weights(lw), rtol=1e-9, atol=1e-15)


class TestEss:
    def test_uniform(self):
        assert effective_sample_size(np.full(20, 0.05)) == pytest.approx(20.0)

    def test_one_hot(self):
        assert effective_sample_size([0.0, 1.0, 0.0]) == 1.0

    def test_half(self):
        assert effective_sample_size([0.5, 0.5, 0.0, 0.0]) == 2.0


class TestResampling:
    def test_deterministic_selection(self):
        ens = Ensemble(np.array([[1.0], [2.0], [3.0]]))
        out = resample_inverse_cdf(ens, np.array([1.0, 0.0, 0.0]), np.random.default_rng(0))
        np.testing.assert_array_equal(out.particles, [[1.0], [1.0], [1.0]])
        assert out.log_weights is None
        assert effective_sample_size(out.weights()) == pytest.approx(3.0)

    def test_rejects_unnormalised(self):
        with pytest.raises(ValueError):
            resample_indices(np.array([0.5, 0.6]), np.random.default_rng(0))
        with pytest.raises(ValueError):
            resample_indices(np.array([1.5, -0.5]), np.random.default_rng(0))

    def test_right_interval_on_ties(self):
        class Fixed:
            def random(self, n):
                return np.array([0.5, 0.0, 0.25])

        idx = resample_indices(np.array([0.5, 0.0, 0.5]), Fixed())
        # 0.5 sits exactly on the first cumulative sum and goes right, skipping the zero weight
        np.testing.assert_array_equal(idx, [2, 0, 0])

    def test_zero_weights_never_selected(self):
        w = np.array([0.0, 0.3, 0.0, 0.7, 0.0])
        for seed in range(200):
            idx = resample_indices(w, np.random.default_rng(seed))
            assert set(idx) <= {1, 3}

    def test_support_preserved(self):
        rng = np.random.default_rng(5)
        ens = Ensemble(rng.normal(size=(50, 2)))
        w = normalize_weights(rng.normal(size=50))
        out = resample_inverse_cdf(ens, w, rng)
        rows = {tuple(r) for r in ens.particles}
        assert all(tuple(r) in rows for r in out.particles)

    def test_seeded_determinism(self):
        w = normalize_weights(np.random.default_rng(1).normal(size=30))
        a = resample_indices(w, np.random.default_rng(9))
        b = resample_indices(w, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("method", ["multinomial", "systematic"])
    def test_copy_counts_within_four_sigma_band(self, method):
        # literal per-particle band for every particle and every seed
        n = 10_000
        w = np.full(n, 1.0 / n)
        band = 4.0 * np.sqrt(n * w[0] * (1 - w[0]))
        for seed in range(100):
            counts = np.bincount(resample_indices(w, np.random.default_rng(seed), method), minlength=n)
            assert np.all(np.abs(counts - 1.0) <= band)

    def test_band_exceedances_match_binomial_tail(self):
        # counts ~ Binomial(N, 1/N); compare the number of band exceedances
        # over all particles and seeds against the exact tail probability
        n, seeds = 10_000, 100
        band = 4.0 * np.sqrt(n * (1 / n) * (1 - 1 / n))
        k = np.arange(n + 1)
        outside = np.abs(k - 1.0) > band
        p_out = float(stats.binom.pmf(k[outside], n, 1 / n).sum())
        w = np.full(n, 1.0 / n)
        hits = sum(
            int(np.sum(np.abs(np.bincount(resample_indices(w, np.random.default_rng(s)), minlength=n) - 1.0) > band))
            for s in range(seeds)
        )
        trials = n * seeds
        assert hits <= binomial_upper(trials, p_out)
        assert hits >= trials - binomial_upper(trials, 1 - p_out)

    def test_unbiased_mean(self):
        rng = np.random.default_rng(3)
        n = 200
        x = rng.normal(size=(n, 1)) * 2.0 + 1.0
        w = normalize_weights(rng.normal(size=n))
        target = w @ x[:, 0]
        std = np.sqrt(w @ (x[:, 0] - target) ** 2)
        means = [x[resample_indices(w, rng), 0].mean() for _ in range(1000)]
        assert abs(np.mean(means) - target) < 3.0 * std / np.sqrt(1000 * n)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            resample_indices(np.array([1.0]), np.random.default_rng(0), "residual")


class TestEstimateMean:
    def test_uniform(self):
        assert estimate_mean(Ensemble(np.array([1.0, 3.0]))) == pytest.approx([2.0])

    def test_weighted(self):
        ens = Ensemble(np.array([0.0, 10.0]), np.log([0.9, 0.1]))
        assert estimate_mean(ens)[0] == pytest.approx(1.0)

    def test_clt(self):
        x = np.random.default_rng(4).standard_normal((100_000, 1))
        assert abs(estimate_mean(Ensemble(x))[0]) < 4.0 / np.sqrt(100_000)


class TestEnsemble:
    def test_validation(self):
        with pytest.raises(ValueError):
            Ensemble(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            Ensemble(np.zeros((3, 1)), np.zeros(2))

    def test_point_ensemble(self):
        e = point_ensemble([1.0, 2.0], 4)
        assert e.size == 4 and e.dim == 2 and np.all(e.particles == [1.0, 2.0])

    def test_csv_snapshot(self, tmp_path):
        e = Ensemble(np.array([[1.0, 2.0], [3.0, 4.0]]), np.log([0.25, 0.75]), step=7)
        write_ensemble_csv(tmp_path / "e.csv", e)
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "step,particle_index,x_0,x_1,weight"
        step, idx, x0, x1, w = lines[2].split(",")
        assert (step, idx, x0, x1) == ("7", "1", "3.0", "4.0")
        assert float(w) == pytest.approx(0.75, abs=1e-15)
