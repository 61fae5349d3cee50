import math

import numpy as np
import pytest

from obsctrl.cost import CostSpec, FixedZeta
from obsctrl.errors import ValidationError
from obsctrl.model import linear_system
from obsctrl.ode import IntegratorConfig
from obsctrl.sensitivity import (
    AugmentedState,
    build_H,
    cost_and_gradient,
    fd_gradient,
    gradient,
    hamiltonian_jacobians,
    hamiltonian_jacobians_fd,
    initial_augmented_state,
    integrate_augmented,
    rollout_segment,
)

SEGMENT = (0.0, 1.0)


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b))


def scalar_spec(Qf=0.1):
    return CostSpec(Q=[[1.0]], R=[[1.0]], Qf=[[Qf]], epsilon=0.01, zeta_policy=FixedZeta(0.0))


def scalar_cost(k, Qf, x0=1.0, T=1.0):
    """J(k) exacto para ẋ = k x sin recompensa: (1+k²)x0²(e^{2kT}-1)/(2k) + Qf x0² e^{2kT}."""
    return (1 + k * k) * x0**2 * (math.exp(2 * k * T) - 1) / (2 * k) + Qf * x0**2 * math.exp(2 * k * T)


class TestAugmentedState:
    def test_layout(self, spec, x0):
        z = initial_augmented_state(x0, spec)
        assert z.dimension == 11
        v = z.to_vector()
        np.testing.assert_allclose(v[:2], x0)
        np.testing.assert_allclose(v[2:4], x0 + [0.01, 0.0])
        np.testing.assert_allclose(v[4:6], x0 - [0.01, 0.0])
        assert v[-1] == pytest.approx(0.5)

    def test_from_vector(self, spec, x0):
        z = initial_augmented_state(x0, spec)
        back = AugmentedState.from_vector(z.to_vector(), 2)
        np.testing.assert_array_equal(back.perturbed, z.perturbed)
        with pytest.raises(ValidationError):
            AugmentedState.from_vector(np.zeros(10), 2)

    def test_running_cost_reproduces_J(self, spec, bearing, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        final, J = integrate_augmented(bearing, spec, -np.eye(2), SEGMENT, z0, coarse, 10.0)
        assert final.running_cost == J
        np.testing.assert_allclose(final.nominal, x0 * math.exp(-1.0), rtol=1e-8)


class TestHamiltonian:
    def test_build_H_nominal_block(self, spec, bearing, x0):
        z = initial_augmented_state(x0, spec).to_vector()
        H = build_H(bearing, spec, -np.eye(2), 10.0, 0.0, z)
        assert H.shape == z.shape
        np.testing.assert_allclose(H[:2], -x0)

    @pytest.mark.parametrize("zeta", [10.0, 1.0])
    def test_block_jacobians_match_finite_differences(self, spec, bearing, zeta):
        z = initial_augmented_state(np.array([-0.8, 1.7]), spec).to_vector()
        K = np.array([[-1.0, 0.3], [0.2, -0.7]])
        Hz, HK = hamiltonian_jacobians(bearing, spec, K, zeta, 0.4, z)
        Hz_fd, HK_fd = hamiltonian_jacobians_fd(bearing, spec, K, zeta, 0.4, z)
        np.testing.assert_allclose(Hz, Hz_fd, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(HK, HK_fd, rtol=1e-5, atol=1e-5)

    def test_block_jacobians_on_linear_system(self):
        sys = linear_system([[0.0, 1.0], [-2.0, -0.5]], [[0.0], [1.0]], [[1.0, 0.0]])
        spec = CostSpec(Q=np.eye(2), R=[[2.0]], Qf=np.diag([0.3, 0.1]), epsilon=0.05, zeta_policy=FixedZeta(10.0))
        z = initial_augmented_state(np.array([1.0, -0.5]), spec).to_vector()
        K = np.array([[-1.0, -1.5]])
        Hz, HK = hamiltonian_jacobians(sys, spec, K, 10.0, 0.2, z)
        Hz_fd, HK_fd = hamiltonian_jacobians_fd(sys, spec, K, 10.0, 0.2, z)
        np.testing.assert_allclose(Hz, Hz_fd, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(HK, HK_fd, rtol=1e-6, atol=1e-6)


class TestGradient:
    def test_scalar_cost_matches_closed_form(self, scalar_system):
        # ẋ = -x + u con u = k x: tasa efectiva k - 1
        spec = scalar_spec()
        z0 = initial_augmented_state([1.0], spec)
        J, _ = cost_and_gradient(scalar_system, spec, [[0.5]], SEGMENT, z0, zeta=0.0)
        k = 0.5
        exact = (1 + k * k) * (math.exp(2 * (k - 1)) - 1) / (2 * (k - 1)) + 0.1 * math.exp(2 * (k - 1))
        assert J == pytest.approx(exact, rel=1e-9)

    def test_scalar_gradient_matches_closed_form(self):
        sys = linear_system([[0.0]], [[1.0]], [[1.0]])
        spec = scalar_spec()
        z0 = initial_augmented_state([1.0], spec)
        k = -0.8
        _, g = cost_and_gradient(sys, spec, [[k]], SEGMENT, z0, zeta=0.0)
        h = 1e-5
        exact = (scalar_cost(k + h, 0.1) - scalar_cost(k - h, 0.1)) / (2 * h)
        assert g[0] == pytest.approx(exact, rel=1e-7)

    def test_bearing_gradient_matches_finite_differences(self, spec, bearing, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        J, g = cost_and_gradient(bearing, spec, -np.eye(2), SEGMENT, z0, coarse, 10.0)
        assert relative_error(g, fd_gradient(bearing, spec, -np.eye(2), SEGMENT, z0, coarse, 10.0)) <= 1e-4
        assert J == pytest.approx(integrate_augmented(bearing, spec, -np.eye(2), SEGMENT, z0, coarse, 10.0)[1])

    def test_finite_difference_error_is_second_order(self, spec, bearing, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        K = -np.eye(2)
        g = gradient(bearing, spec, K, SEGMENT, z0, coarse, 10.0)
        e1 = relative_error(g, fd_gradient(bearing, spec, K, SEGMENT, z0, coarse, 10.0, delta=1e-2))
        e2 = relative_error(g, fd_gradient(bearing, spec, K, SEGMENT, z0, coarse, 10.0, delta=5e-3))
        assert 3.0 <= e1 / e2 <= 5.0

    def test_random_lti_gradient(self, coarse):
        rng = np.random.default_rng(11)
        sys = linear_system([[0.0, 1.0], [-2.0, -0.5]], rng.normal(size=(2, 2)), [[1.0, 0.0]])
        spec = CostSpec(Q=np.eye(2), R=np.eye(2), Qf=0.1 * np.eye(2), epsilon=0.05, zeta_policy=FixedZeta(10.0))
        z0 = initial_augmented_state([1.0, -0.5], spec)
        K = -0.5 * np.eye(2)
        g = gradient(sys, spec, K, SEGMENT, z0, coarse)
        assert relative_error(g, fd_gradient(sys, spec, K, SEGMENT, z0, coarse)) <= 1e-4

    def test_decay_rule_needs_explicit_zeta(self, decay_spec, bearing, x0, coarse):
        z0 = initial_augmented_state(x0, decay_spec)
        with pytest.raises(ValidationError):
            cost_and_gradient(bearing, decay_spec, -np.eye(2), SEGMENT, z0, coarse)

    def test_empty_segment(self, spec, bearing, x0):
        z0 = initial_augmented_state(x0, spec)
        with pytest.raises(ValidationError):
            cost_and_gradient(bearing, spec, -np.eye(2), (1.0, 1.0), z0)

    def test_fd_delta_positive(self, spec, bearing, x0):
        z0 = initial_augmented_state(x0, spec)
        with pytest.raises(ValidationError):
            fd_gradient(bearing, spec, -np.eye(2), SEGMENT, z0, delta=0.0)


class TestRollout:
    def test_records_and_consistency(self, spec, bearing, x0):
        z0 = initial_augmented_state(x0, spec)
        roll = rollout_segment(bearing, spec, -np.eye(2), SEGMENT, z0, IntegratorConfig(dt=1e-3), 10.0)
        assert roll.states.shape == (len(roll.times), 2)
        assert roll.perturbed.shape == (len(roll.times), 4, 2)
        np.testing.assert_allclose(roll.controls, -roll.states)
        np.testing.assert_allclose(roll.gamma, roll.l1 - roll.l2)
        assert roll.quadrature_cost(spec.Qf) == pytest.approx(roll.J, rel=1e-9)
        assert np.all(roll.l2 <= 10.0 * np.exp(-roll.times) + 1e-12)

    def test_bearing_observability_is_constant_under_lqr(self, spec, bearing, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        roll = rollout_segment(bearing, spec, -np.eye(2), SEGMENT, z0, coarse, 10.0)
        # y es homogénea de grado 0 y u = -x solo reescala los estados
        np.testing.assert_allclose(roll.observability, roll.observability[0], rtol=1e-9)
        assert roll.observability[0] == pytest.approx(5.0, rel=1e-3)
