"""Tests for fast-slow homogenization

Validates that:
1. Vector fields evaluate with analytic Jacobians that match finite differences
2. FastSlowSpec validates epsilon and field shapes
3. The corrected drift adds the E-weighted derivative term
4. The slow recursion matches a hand-written loop bit for bit, and Euler-Maruyama behaves on simple fields
5. Homogenization is refused outside the uniform-decay regime
6. Frozen and annealed comparisons produce the documented tables, and the epsilon
   ladder 0.2, 0.1, 0.05 reports a KS trend
"""
import os
import sys
from unittest.mock import patch

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from quenched_lab import (
    AffineField, BasePath, ConfigurationError, ConstantField, EstimationError, FastSlowSpec, HomogenizationRefused,
    HomogenizedSDE, IntegrationError, PolynomialField, SinusoidalField, UniformDecayReport, build_field,
    check_field_derivatives, check_uniform_decay, corrected_drift, empirical_cdf_table, epsilon_refinement,
    euler_maruyama, finite_difference_jacobian, homogenization_compare, homogenization_ks_threshold,
    integrate_fast_slow, slow_recursion,
)


def scalar_spec(epsilon=0.1, a=None, b=None, xi=0.0):
    a = a or ConstantField((1,), 1, 0.0)
    b = b or ConstantField((1, 1), 1, 1.0)
    return FastSlowSpec(1, 1, a, b, epsilon, [xi])


class TestVectorFields:
    """Test field families"""

    def test_constant(self):
        fld = ConstantField((2,), 2, [1.0, -1.0])
        np.testing.assert_array_equal(fld.value(np.zeros((3, 2))), [[1.0, -1.0]] * 3)
        assert fld.jacobian(np.zeros((3, 2))).shape == (3, 2, 2)

    def test_affine(self):
        fld = AffineField((1,), 1, offset=1.0, linear=[[2.0]])
        assert fld.value(np.array([[0.5]]))[0, 0] == pytest.approx(2.0)
        assert fld.jacobian(np.array([[0.5]]))[0, 0, 0] == pytest.approx(2.0)

    def test_polynomial(self):
        fld = PolynomialField((1,), 1, coefficients=[1.0, 0.0, 3.0])
        assert fld.value(np.array([[2.0]]))[0, 0] == pytest.approx(13.0)
        assert fld.jacobian(np.array([[2.0]]))[0, 0, 0] == pytest.approx(12.0)

    def test_polynomial_degree_limit(self):
        with pytest.raises(ConfigurationError, match="degree"):
            PolynomialField((1,), 1, coefficients=[1.0, 0.0, 0.0, 0.0, 1.0])

    def test_sinusoidal(self):
        fld = SinusoidalField((1, 1), 1, amplitude=1.0, frequency=1.0, offset=2.0)
        x = np.array([[0.0], [np.pi / 2]])
        np.testing.assert_allclose(fld.value(x)[:, 0, 0], [2.0, 3.0])
        np.testing.assert_allclose(fld.jacobian(x)[:, 0, 0, 0], [1.0, 0.0], atol=1e-15)

    def test_jacobians_match_finite_differences(self):
        fields = [
            AffineField((2,), 2, offset=[0.1, 0.2], linear=[[1.0, 2.0], [0.0, -1.0]]),
            PolynomialField((2,), 2, coefficients=[0.0, 1.0, 0.5, -0.2]),
            SinusoidalField((2, 1), 2, amplitude=0.7, frequency=1.5, phase=0.3),
        ]
        for fld in fields:
            assert check_field_derivatives(fld) < 1e-6
            x = np.array([[0.3, -0.4]])
            np.testing.assert_allclose(finite_difference_jacobian(fld, x), fld.jacobian(x), atol=1e-8)

    def test_wrong_jacobian_is_caught(self):
        class SkewedField(AffineField):
            def jacobian(self, x):
                return super().jacobian(x) + 1.0

        with pytest.raises(ConfigurationError, match="finite differences"):
            check_field_derivatives(SkewedField((1,), 1, linear=[[1.0]]))

    def test_build_field(self):
        fld = build_field({"family": "sinusoidal", "amplitude": 1.0, "offset": 2.0}, (1, 1), 1)
        assert isinstance(fld, SinusoidalField)
        with pytest.raises(ConfigurationError, match="Unknown field family"):
            build_field({"family": "spline"}, (1,), 1)
        with pytest.raises(ConfigurationError, match="Bad parameters"):
            build_field({"family": "constant", "slope": 2.0}, (1,), 1)

    def test_parameter_shape(self):
        with pytest.raises(ConfigurationError, match="wrong shape"):
            AffineField((1,), 1, linear=[1.0, 2.0, 3.0])

    def test_state_dimension(self):
        with pytest.raises(IntegrationError, match="State dimension mismatch"):
            ConstantField((1,), 1).value(np.zeros((2, 3)))


class TestFastSlowSpec:
    """Test specification checks"""

    def test_epsilon_range(self):
        with pytest.raises(ConfigurationError, match="epsilon must be in"):
            scalar_spec(epsilon=1.5)
        with pytest.raises(ConfigurationError):
            scalar_spec(epsilon=0.0)

    def test_n_steps(self):
        assert scalar_spec(epsilon=0.05).n_steps == 400
        assert scalar_spec(epsilon=0.1).n_steps == 100

    def test_field_shapes(self):
        with pytest.raises(ConfigurationError, match="Drift a"):
            scalar_spec(a=ConstantField((2,), 1))
        with pytest.raises(ConfigurationError, match="Diffusion b"):
            scalar_spec(b=ConstantField((1,), 1))


class TestCorrectedDrift:
    """Test the E-weighted drift correction"""

    def test_sinusoidal_diffusion(self):
        spec = scalar_spec(b=SinusoidalField((1, 1), 1, amplitude=1.0, offset=2.0))
        a_tilde = corrected_drift(spec, np.array([[1.0 / 12.0]]))
        assert a_tilde(np.array([[0.0]]))[0, 0] == pytest.approx(1.0 / 6.0)

    def test_constant_diffusion_has_no_correction(self):
        spec = scalar_spec(a=ConstantField((1,), 1, 0.3))
        a_tilde = corrected_drift(spec, np.array([[5.0]]))
        assert a_tilde(np.array([[1.0]]))[0, 0] == pytest.approx(0.3)

    def test_wrong_shape(self):
        with pytest.raises(EstimationError):
            corrected_drift(scalar_spec(), np.eye(2))

    def test_sde_checks(self):
        spec = scalar_spec(b=SinusoidalField((1, 1), 1, amplitude=1.0, offset=2.0))
        sde = HomogenizedSDE(spec, 0.25, 1.0 / 12.0)
        assert sde.root[0, 0] == pytest.approx(0.5)
        assert sde.check_correction() < 1e-6
        with pytest.raises(IntegrationError, match="Sigma not PSD"):
            HomogenizedSDE(spec, -1.0, 0.0)


class TestIntegrators:
    """Test the slow recursion and Euler-Maruyama"""

    def test_slow_recursion_pure_drift(self):
        spec = scalar_spec(epsilon=0.1, a=ConstantField((1,), 1, 1.0))
        x = slow_recursion(spec, np.zeros((3, spec.n_steps, 1)))
        np.testing.assert_allclose(x[:, 0], 1.0)
        path = slow_recursion(spec, np.zeros((2, spec.n_steps, 1)), keep_path=True)
        assert path.shape == (2, 101, 1)
        assert path[0, 50, 0] == pytest.approx(0.5)

    def test_slow_recursion_replays_hand_loop(self):
        a = AffineField((1,), 1, offset=0.3, linear=[[-1.0]])
        b = SinusoidalField((1, 1), 1, amplitude=0.5, frequency=2.0, phase=0.1, offset=1.0)
        spec = FastSlowSpec(1, 1, a, b, 0.1, [0.2])
        fast = np.random.default_rng(4).uniform(-0.5, 0.5, size=(5, spec.n_steps, 1))
        eps = spec.epsilon
        x = np.full((5, 1), 0.2)
        expected = [x]
        for k in range(spec.n_steps):
            x = x + (eps * eps) * a.value(x) + eps * (b.value(x)[:, :, 0] * fast[:, k])
            expected.append(x)
        np.testing.assert_array_equal(slow_recursion(spec, fast, keep_path=True), np.stack(expected, axis=1))

    def test_slow_recursion_reports_step(self):
        spec = scalar_spec(epsilon=0.1)
        values = np.zeros((2, spec.n_steps, 1))
        values[:, 3] = np.inf
        with pytest.raises(IntegrationError) as exc_info:
            slow_recursion(spec, values)
        assert exc_info.value.step == 4

    def test_integrate_fast_slow_variance(self, doubling_window):
        system, path, track, v = doubling_window
        spec = scalar_spec(epsilon=0.1)
        x = integrate_fast_slow(spec, system, path, v, track, n_paths=2000, seed=3)
        assert x.shape == (2000, 1)
        assert x[:, 0].var() == pytest.approx(0.25, abs=0.03)

    def test_integrate_dimension_mismatch(self, doubling_window):
        system, path, track, v = doubling_window
        spec = FastSlowSpec(1, 2, ConstantField((1,), 1), ConstantField((1, 2), 1, 1.0), 0.1, [0.0])
        with pytest.raises(EstimationError, match="dimension"):
            integrate_fast_slow(spec, system, path, v, track, n_paths=10, seed=0)

    def test_euler_maruyama_variance(self):
        sde = HomogenizedSDE(scalar_spec(), 0.25, 0.0)
        z = euler_maruyama(sde, [0.0], dt=1e-3, n_paths=4000, seed=1)
        assert z.shape == (4000, 1)
        assert abs(z[:, 0].mean()) < 0.03
        assert z[:, 0].var() == pytest.approx(0.25, abs=0.03)

    def test_euler_maruyama_step_bound(self):
        sde = HomogenizedSDE(scalar_spec(), 0.25, 0.0)
        with pytest.raises(IntegrationError, match="dt must be in"):
            euler_maruyama(sde, [0.0], dt=0.01, n_paths=10)


class TestUniformDecay:
    """Test the uniform-decay guard"""

    def test_single_map_ok(self, doubling_system):
        report = check_uniform_decay(doubling_system)
        assert report.ok
        assert report.rates["T2"] < 1.0
        assert report.dispersion == 0.0

    def test_spread_rates_rejected(self, random_beta_system):
        report = check_uniform_decay(random_beta_system, dispersion_tol=0.05)
        assert not report.ok
        assert "spread" in report.reason
        assert report.rates["b3"] < report.rates["b2"]


class TestHomogenizationCompare:
    """Test slow-process versus SDE comparisons"""

    def test_ks_threshold(self):
        assert homogenization_ks_threshold(0.05, 2000, 2000) == pytest.approx(0.05)
        assert homogenization_ks_threshold(0.2, 2000, 2000) == pytest.approx(0.1)

    def test_refused_outside_regime(self, doubling_window):
        system, path, track, v = doubling_window
        spec = scalar_spec()
        sde = HomogenizedSDE(spec, 0.25, 1.0 / 12.0)
        with patch('quenched_lab.check_uniform_decay',
                   return_value=UniformDecayReport({}, 1.0, False, "spread")):
            with pytest.raises(HomogenizationRefused):
                homogenization_compare(spec, system, v, sde, 100, seed=0, path=path, track=track)

    def test_unknown_mode(self, doubling_window):
        system, path, track, v = doubling_window
        spec = scalar_spec()
        sde = HomogenizedSDE(spec, 0.25, 1.0 / 12.0)
        with pytest.raises(EstimationError, match="Unknown homogenization mode"):
            homogenization_compare(spec, system, v, sde, 100, seed=0, path=path, track=track,
                                   mode="sideways", require_uniform_decay=False)

    def test_frozen_needs_track(self, doubling_window):
        system, path, _, v = doubling_window
        spec = scalar_spec()
        sde = HomogenizedSDE(spec, 0.25, 1.0 / 12.0)
        with pytest.raises(EstimationError, match="frozen mode"):
            homogenization_compare(spec, system, v, sde, 100, seed=0, path=path, require_uniform_decay=False)

    def test_frozen_doubling(self, doubling_window):
        system, path, track, v = doubling_window
        spec = scalar_spec(epsilon=0.1)
        sde = HomogenizedSDE(spec, 0.25, 1.0 / 12.0)
        report = homogenization_compare(spec, system, v, sde, 2000, seed=4, path=path, track=track)
        assert report.mode == "frozen"
        assert report.slow.shape == (2000, 1)
        assert report.sde.shape == (2000, 1)
        assert report.passed
        assert {'mean_gap', 'var_gap', 'ks', 'ks_threshold', 'passed'} <= set(report.table.columns)
        row = report.table.iloc[0]
        assert row['mean_bias_allowance'] == pytest.approx(0.01 * (1.0 + abs(row['mean_sde'])))
        assert row['var_bias_allowance'] == pytest.approx(0.01 * (1.0 + row['var_sde']))
        assert row['mean_tolerance'] > row['mean_bias_allowance']

    def test_annealed_mode(self, random_beta_process, random_beta_system, linear_observable):
        spec = scalar_spec(epsilon=0.1)
        sde = HomogenizedSDE(spec, 0.2, 0.05)
        report = homogenization_compare(spec, random_beta_system, linear_observable, sde, 256, seed=2,
                                        process=random_beta_process, mode="annealed", k_pullback=10)
        assert report.mode == "annealed"
        assert report.slow.shape == (256, 1)
        assert report.table.iloc[0]['mode'] == "annealed"

    def test_annealed_needs_process(self, random_beta_system, linear_observable):
        spec = scalar_spec()
        sde = HomogenizedSDE(spec, 0.25, 0.0)
        with pytest.raises(EstimationError, match="annealed mode"):
            homogenization_compare(spec, random_beta_system, linear_observable, sde, 10, seed=0,
                                   mode="annealed", require_uniform_decay=False)

    @pytest.mark.slow
    def test_epsilon_refinement(self, doubling_system, linear_observable):
        path = BasePath.constant(("T2",), "T2", 80, 400)
        spec = scalar_spec(epsilon=0.05)
        table = epsilon_refinement(spec, doubling_system, linear_observable,
                                   lambda s: HomogenizedSDE(s, 0.25, 1.0 / 12.0), path, n_paths=400, seed=5)
        assert list(table['epsilon']) == [0.2, 0.1, 0.05]
        assert list(table.columns) == ['epsilon', 'ks', 'passed', 'non_increasing']
        assert table['non_increasing'].iloc[0]
        assert (table['ks'] < 0.5).all()

    def test_empirical_cdf_table(self):
        rng = np.random.default_rng(0)
        table = empirical_cdf_table(rng.normal(size=200), rng.normal(size=300), n_points=64)
        assert list(table.columns) == ['x', 'cdf_slow', 'cdf_sde']
        assert len(table) == 64
        assert table['cdf_slow'].iloc[-1] == 1.0
        assert table['cdf_sde'].is_monotonic_increasing
