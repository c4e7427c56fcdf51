import numpy as np
import pytest

from mlmsa.core import (
    Level,
    ParameterError,
    RateParameters,
    ReprojectionFamily,
    make_step_schedule,
    ratio_diagnostic,
    reprojection_set,
)


class TestLevel:
    def test_delta_is_exact_power_of_two(self):
        for l in range(12):
            assert Level(l).delta == 2.0 ** (-l)
        assert Level(0).delta == 1.0  # coarsest

    @pytest.mark.parametrize("bad", [-1, 1.5, True])
    def test_rejects_bad_indices(self, bad):
        with pytest.raises(ParameterError):
            Level(bad)


class TestStepSchedule:
    def test_polynomial_value(self):
        sched = make_step_schedule("polynomial", 1.0, 0.75, 10)
        # direct evaluation of gamma0 * n**-rho at n = 3
        assert sched.step_size(3) == pytest.approx(0.4386913376508308, rel=1e-15)
        assert sched.step_size(1) == 1.0

    def test_constant_value(self):
        sched = make_step_schedule("constant", 0.1, n_total=100)
        assert all(sched.step_size(n) == 0.1 for n in (1, 50, 100))

    def test_constant_allows_zero_for_frozen_runs(self):
        sched = make_step_schedule("constant", 0.0, n_total=10)
        assert sched.step_size(5) == 0.0

    def test_rho_one_rejected_naming_ratio_condition(self):
        # log(gamma_n/gamma_{n-1}) ~ -1/n is of exact order gamma_n = 1/n
        with pytest.raises(ParameterError, match="ratio condition"):
            make_step_schedule("polynomial", 1.0, 1.0, 10)

    def test_rho_half_rejected_naming_square_summability(self):
        with pytest.raises(ParameterError, match="square summability"):
            make_step_schedule("polynomial", 1.0, 0.5, 10)

    def test_rho_above_one_rejected_naming_divergence(self):
        with pytest.raises(ParameterError, match="divergence"):
            make_step_schedule("polynomial", 1.0, 1.2, 10)

    def test_gamma0_validation(self):
        with pytest.raises(ParameterError):
            make_step_schedule("polynomial", 0.0, 0.75, 10)
        with pytest.raises(ParameterError):
            make_step_schedule("constant", -0.1, n_total=10)

    def test_step_sum_diverges_numerically(self):
        g = make_step_schedule("polynomial", 1.0, 0.75, 200000).step_sizes()
        partial = np.cumsum(g)
        # increments over successive doublings grow: the sum diverges
        inc_late = partial[-1] - partial[len(g) // 2]
        inc_early = partial[len(g) // 10] - partial[len(g) // 20]
        assert inc_late > inc_early > 0

    def test_squared_sum_converges_numerically(self):
        g = make_step_schedule("polynomial", 1.0, 0.75, 200000).step_sizes()
        sq = np.cumsum(g ** 2)
        # the tail contributes a vanishing fraction
        assert sq[-1] - sq[len(g) // 2] < 0.01 * sq[-1]

    def test_ratio_diagnostic_decreases_to_zero(self):
        sched = make_step_schedule("polynomial", 1.0, 0.75, 5000)
        d = ratio_diagnostic(sched)
        assert np.all(np.diff(d) < 0)
        assert d[-1] < 0.2 * d[0]


class TestReprojectionFamily:
    def test_interval_examples(self):
        fam = ReprojectionFamily(1.0, 1.0)
        assert reprojection_set(fam, 0) == (-1.0, 1.0)
        assert reprojection_set(fam, 3) == (-4.0, 4.0)

    def test_nested_over_scanned_range(self):
        fam = ReprojectionFamily(0.5, 2.0)
        for k in range(1, 40):
            lo0, hi0 = fam.bounds(k - 1)
            lo1, hi1 = fam.bounds(k)
            assert lo1 <= lo0 and hi0 <= hi1

    def test_any_finite_theta_is_covered(self):
        fam = ReprojectionFamily(1.0, 0.5)
        for theta in (0.0, -3.7, 1e6, -2.5e8):
            k = fam.index_covering(theta)
            assert fam.contains(theta, k)
            if k > 0:
                assert not fam.contains(theta, k - 1)

    def test_parameter_validation(self):
        with pytest.raises(ParameterError):
            ReprojectionFamily(0.0, 1.0)
        with pytest.raises(ParameterError):
            ReprojectionFamily(1.0, -1.0)
        with pytest.raises(ParameterError):
            ReprojectionFamily(1.0, 1.0).bounds(-1)


class TestRateParameters:
    def test_valid(self):
        r = RateParameters(alpha=1.0, beta=1.0, zeta=1.0, kappa=0.5)
        assert r.variance_rate == 1.0

    def test_variance_rate_takes_minimum(self):
        r = RateParameters(alpha=2.0, beta=0.8, zeta=0.6, kappa=0.5)
        assert r.variance_rate == pytest.approx(0.8)

    @pytest.mark.parametrize("kwargs", [
        dict(alpha=0.0, beta=1.0, zeta=1.0, kappa=0.5),
        dict(alpha=1.0, beta=-1.0, zeta=1.0, kappa=0.5),
        dict(alpha=1.0, beta=1.0, zeta=0.5, kappa=0.5),
        dict(alpha=1.0, beta=1.0, zeta=1.1, kappa=0.5),
        dict(alpha=1.0, beta=1.0, zeta=1.0, kappa=0.0),
    ])
    def test_rejects_out_of_range(self, kwargs):
        with pytest.raises(ParameterError):
            RateParameters(**kwargs)
