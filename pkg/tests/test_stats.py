"""Tests for carrier generation and sphere-cosine statistics."""

import math

import mpmath
import numpy as np
import pytest
from scipy import special

from featuremark import stats


def mp_log10_cosine_pvalue(c, d):
    """High-precision oracle via mpmath's regularized incomplete beta."""
    a = (d - 1) / 2.0
    if c >= 0:
        p = 0.5 * mpmath.betainc(a, 0.5, 0, 1 - c * c, regularized=True)
    else:
        p = 1 - 0.5 * mpmath.betainc(a, 0.5, 0, 1 - c * c, regularized=True)
    return float(mpmath.log(p) / mpmath.log(10))


class TestGenerateCarriers:
    def test_unit_rows(self):
        cs = stats.generate_carriers(10, 512, seed=7)
        assert cs.vectors.shape == (10, 512)
        assert np.allclose(np.linalg.norm(cs.vectors, axis=1), 1.0, atol=1e-6)
        assert cs.class_count == 10 and cs.feature_dim == 512

    def test_deterministic(self):
        a = stats.generate_carriers(5, 64, seed=3)
        b = stats.generate_carriers(5, 64, seed=3)
        assert np.array_equal(a.vectors, b.vectors)
        c = stats.generate_carriers(5, 64, seed=4)
        assert not np.array_equal(a.vectors, c.vectors)

    def test_near_orthogonal_in_high_dim(self):
        # sd of the cosine between uniform sphere vectors is ~1/sqrt(d)=0.044,
        # so 0.2 is a >4 sigma bound
        cs = stats.generate_carriers(2, 512, seed=11)
        cos = float(cs.vectors[0] @ cs.vectors[1])
        assert abs(cos) < 0.2

    def test_rejects_low_dim(self):
        with pytest.raises(ValueError):
            stats.generate_carriers(3, 1, seed=0)
        with pytest.raises(ValueError):
            stats.generate_carriers(0, 8, seed=0)

    def test_carrier_set_validates_norms(self):
        with pytest.raises(ValueError):
            stats.CarrierSet(vectors=np.ones((2, 4)), seed=0)


class TestCosinePvalue:
    def test_symmetry_point(self):
        for d in (2, 3, 17, 512):
            assert stats.cosine_pvalue(0.0, d) == pytest.approx(0.5, abs=1e-12)

    def test_closed_form_d3(self):
        # in d=3 the cosine marginal is uniform on [-1, 1]
        for c in np.linspace(-1, 1, 21):
            assert stats.cosine_pvalue(float(c), 3) == pytest.approx((1 - c) / 2, abs=1e-9)

    def test_closed_form_d2(self):
        for c in np.linspace(-0.99, 0.99, 21):
            assert stats.cosine_pvalue(float(c), 2) == pytest.approx(
                math.acos(c) / math.pi, abs=1e-9
            )

    def test_half_quarter_example(self):
        assert stats.cosine_pvalue(0.5, 3) == pytest.approx(0.25, abs=1e-12)
        assert stats.cosine_pvalue(math.sqrt(2) / 2, 2) == pytest.approx(0.25, abs=1e-9)

    def test_complement_identity(self):
        for d in (2, 3, 8, 64, 512):
            for c in np.linspace(-0.95, 0.95, 13):
                s = stats.cosine_pvalue(float(c), d) + stats.cosine_pvalue(float(-c), d)
                assert s == pytest.approx(1.0, abs=1e-12)

    def test_monotone_nonincreasing_in_c(self):
        for d in (2, 3, 8, 64, 512):
            grid = np.linspace(-1, 1, 201)
            ps = [stats.cosine_pvalue(float(c), d) for c in grid]
            assert all(p1 >= p2 - 1e-15 for p1, p2 in zip(ps, ps[1:]))

    def test_bounds_and_errors(self):
        assert stats.cosine_pvalue(1.0, 8) == 0.0
        assert stats.cosine_pvalue(-1.0, 8) == 1.0
        with pytest.raises(ValueError):
            stats.cosine_pvalue(1.5, 8)
        with pytest.raises(ValueError):
            stats.cosine_pvalue(0.2, 1)

    def test_monte_carlo_d512_small_cosine(self):
        cos = stats.mc_null_samples(512, 10**6, seed=5)
        p_hat = float(np.mean(cos >= 0.05))
        p = stats.cosine_pvalue(0.05, 512)
        se = math.sqrt(p * (1 - p) / cos.size)
        assert abs(p - p_hat) <= 3 * se


class TestLog10CosinePvalue:
    @pytest.mark.parametrize("d", [2, 3, 8, 64, 512, 2048])
    def test_matches_mpmath_over_range(self, d):
        for c in np.linspace(-0.999, 0.999, 41):
            got = stats.log10_cosine_pvalue(float(c), d)
            want = mp_log10_cosine_pvalue(float(c), d)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_consistent_with_linear_path(self):
        for d in (3, 64, 512):
            for c in (0.0, 0.1, 0.4, -0.3):
                lin = math.log10(stats.cosine_pvalue(c, d))
                assert stats.log10_cosine_pvalue(c, d) == pytest.approx(lin, rel=1e-10)

    def test_finite_deep_in_tail(self):
        # far below double-precision underflow of the plain p-value
        lp = stats.log10_cosine_pvalue(0.999, 4096)
        assert math.isfinite(lp)
        assert lp < -5000


class TestCombinePvalues:
    def test_singleton_identity(self):
        assert stats.combine_pvalues([0.05]) == pytest.approx(0.05, rel=1e-12)
        assert stats.combine_pvalues([0.7]) == pytest.approx(0.7, rel=1e-12)

    def test_all_ones(self):
        assert stats.combine_pvalues([1.0, 1.0, 1.0]) == pytest.approx(1.0, abs=1e-12)

    def test_two_of_005(self):
        # chi-square(4) upper tail at -2*(ln .05 + ln .05) = 11.98293;
        # closed form for dof 4 is exp(-x/2) * (1 + x/2)
        x = -2 * (math.log(0.05) + math.log(0.05))
        expected = math.exp(-x / 2) * (1 + x / 2)
        assert expected == pytest.approx(0.0174787, abs=5e-7)
        assert stats.combine_pvalues([0.05, 0.05]) == pytest.approx(expected, rel=1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            stats.combine_pvalues([])
        with pytest.raises(ValueError):
            stats.combine_pvalues([0.0, 0.5])
        with pytest.raises(ValueError):
            stats.combine_pvalues([0.5, 1.5])

    def test_log_path_agrees_with_linear(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ps = rng.uniform(1e-6, 1.0, size=rng.integers(1, 12))
            lin = math.log10(stats.combine_pvalues(ps))
            log = stats.combine_log10_pvalues(np.log10(ps))
            assert log == pytest.approx(lin, rel=1e-9, abs=1e-12)

    def test_log_path_finite_at_extremes(self):
        combined = stats.combine_log10_pvalues([-2000.0] * 10)
        assert math.isfinite(combined)
        assert combined < -10000

    def test_uniform_under_null(self):
        # Fisher combination of iid uniform p-values is itself uniform
        rng = np.random.default_rng(42)
        draws = rng.uniform(size=(10_000, 10))
        combined = np.array([stats.combine_pvalues(row) for row in draws])
        grid = np.sort(combined)
        ecdf = np.arange(1, grid.size + 1) / grid.size
        ks = float(np.max(np.abs(ecdf - grid)))
        assert ks <= 0.02


class TestLogChi2Sf:
    def test_matches_mpmath(self):
        for x, k in [(0.5, 2), (3.0, 2), (11.98, 4), (100.0, 16), (5e3, 16), (2e5, 20)]:
            got = stats.log_chi2_sf(x, k)
            want = float(
                mpmath.log(mpmath.gammainc(k / 2.0, x / 2.0, mpmath.inf, regularized=True))
            )
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_at_zero(self):
        assert stats.log_chi2_sf(0.0, 4) == 0.0


class TestMcNullSamples:
    def test_deterministic(self):
        a = stats.mc_null_samples(8, 1000, seed=9)
        b = stats.mc_null_samples(8, 1000, seed=9)
        assert np.array_equal(a, b)

    def test_d3_mean_and_tail(self):
        cos = stats.mc_null_samples(3, 10**6, seed=1)
        assert abs(float(np.mean(cos))) < 0.005
        assert float(np.mean(cos >= 0.5)) == pytest.approx(0.25, abs=0.002)

    def test_values_are_cosines(self):
        cos = stats.mc_null_samples(4, 5000, seed=2)
        assert np.all(cos >= -1.0) and np.all(cos <= 1.0)
