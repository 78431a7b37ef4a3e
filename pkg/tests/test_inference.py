import math

import numpy as np
import pytest

from svdinfer import (
    NotPositive,
    confidence_interval,
    covers,
    normal_cdf,
    normal_pdf,
    normal_quantile,
    standardized_stat,
)


def quantile_bisect(prob, lo=-40.0, hi=40.0):
    """Independent inverse-CDF oracle: bisection on the erfc-based CDF."""
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if normal_cdf(mid) < prob:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


class TestNormalQuantile:
    def test_frozen_values(self):
        assert abs(normal_quantile(0.975) - 1.959963984540054) < 1e-11
        assert abs(normal_quantile(0.95) - 1.6448536269514722) < 1e-11
        assert abs(normal_quantile(0.995) - 2.5758293035489004) < 1e-11

    def test_median_is_zero(self):
        assert normal_quantile(0.5) == 0.0

    def test_symmetry(self):
        # 1 - p is not exactly the complement in floats, so symmetry holds
        # to rounding, not bitwise.
        for p in (0.01, 0.1, 0.25, 0.4):
            assert abs(normal_quantile(p) + normal_quantile(1.0 - p)) < 1e-12

    def test_against_bisection_oracle(self):
        grid = [1e-4, 1e-3, 0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 0.999, 0.9999]
        for p in grid:
            assert abs(normal_quantile(p) - quantile_bisect(p)) < 1e-9

    def test_cdf_roundtrip(self):
        for p in (0.001, 0.025, 0.2, 0.5, 0.8, 0.975, 0.999):
            assert abs(normal_cdf(normal_quantile(p)) - p) < 1e-12

    def test_rejects_out_of_range(self):
        for p in (0.0, 1.0, -0.1, 1.1):
            with pytest.raises(ValueError):
                normal_quantile(p)

    def test_extreme_tails_finite(self):
        z = normal_quantile(1e-12)
        assert math.isfinite(z) and z < -6.9
        # The upper version suffers the rounding of 1 - 1e-12 itself.
        assert abs(normal_quantile(1.0 - 1e-12) + z) < 1e-4


class TestNormalCdfPdf:
    def test_cdf_values(self):
        assert normal_cdf(0.0) == 0.5
        assert abs(normal_cdf(1.96) - 0.9750021048517795) < 1e-14

    def test_cdf_symmetry(self):
        for x in (0.3, 1.0, 2.5):
            assert abs(normal_cdf(-x) - (1.0 - normal_cdf(x))) < 1e-15

    def test_pdf_peak(self):
        assert abs(normal_pdf(0.0) - 1.0 / math.sqrt(2.0 * math.pi)) < 1e-16

    def test_pdf_is_cdf_derivative(self):
        h = 1e-6
        for x in (-1.5, 0.2, 2.0):
            fd = (normal_cdf(x + h) - normal_cdf(x - h)) / (2.0 * h)
            assert abs(fd - normal_pdf(x)) < 1e-9


class TestConfidenceInterval:
    def test_unit_case(self):
        ci = confidence_interval(0.0, 1.0, 1, 0.05)
        assert abs(ci.lo + 1.959964) < 1e-6
        assert abs(ci.hi - 1.959964) < 1e-6
        assert not ci.significant

    def test_shifted_case(self):
        ci = confidence_interval(2.0, 4.0, 100, 0.05)
        assert abs(ci.std_err - 0.2) < 1e-15
        assert abs(ci.lo - 1.6080072030919892) < 1e-12
        assert abs(ci.hi - 2.3919927969080108) < 1e-12
        assert ci.significant
        assert abs(ci.length - (ci.hi - ci.lo)) == 0.0

    def test_one_sigma_alpha(self):
        # alpha = 0.3173 makes the half-width one standard error.
        ci = confidence_interval(0.0, 1.0, 1, 0.3173)
        assert abs(ci.length / 2.0 - 1.0) < 1e-3

    def test_width_ratio_is_quantile_ratio(self):
        a = confidence_interval(1.0, 2.0, 50, 0.05)
        b = confidence_interval(1.0, 2.0, 50, 0.10)
        want = normal_quantile(0.975) / normal_quantile(0.95)
        assert abs(a.length / b.length - want) < 1e-12

    def test_width_scales_with_root_n(self):
        a = confidence_interval(0.0, 1.0, 4, 0.05)
        b = confidence_interval(0.0, 1.0, 16, 0.05)
        assert abs(a.length / b.length - 2.0) < 1e-12

    def test_rejects_bad_inputs(self):
        with pytest.raises(NotPositive):
            confidence_interval(0.0, 0.0, 10, 0.05)
        with pytest.raises(NotPositive):
            confidence_interval(0.0, -1.0, 10, 0.05)
        with pytest.raises(ValueError):
            confidence_interval(0.0, 1.0, 10, 0.0)
        with pytest.raises(ValueError):
            confidence_interval(0.0, 1.0, 0, 0.05)


class TestStandardizedStat:
    def test_exact_value(self):
        assert standardized_stat(0.8, 0.5, 9.0, 100) == pytest.approx(1.0, abs=1e-15)

    def test_sign(self):
        assert standardized_stat(0.0, 1.0, 1.0, 4) == -2.0

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(NotPositive):
            standardized_stat(1.0, 0.0, 0.0, 10)


class TestCovers:
    def test_matches_interval_membership(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            est = float(rng.normal())
            truth = float(rng.normal())
            var = float(rng.uniform(0.1, 5.0))
            n = int(rng.integers(2, 400))
            alpha = float(rng.uniform(0.01, 0.5))
            ci = confidence_interval(est, var, n, alpha)
            inside = ci.lo <= truth <= ci.hi
            assert covers(est, truth, var, n, alpha) == inside

    def test_exact_center(self):
        assert covers(1.0, 1.0, 2.0, 30, 0.05)
