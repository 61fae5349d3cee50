import numpy as np
import pytest

from obsctrl.cost import CostSpec, FixedZeta
from obsctrl.errors import NumericalError, ValidationError
from obsctrl.model import linear_system
from obsctrl.optimizer import (
    CAPPED,
    CONVERGED,
    OptimizerConfig,
    cost_bounds,
    optimize_segment,
    optimize_segments_independent,
    psd_check,
    secant_hessian,
    step_size,
)
from obsctrl.sensitivity import initial_augmented_state

SEGMENT = (0.0, 1.0)


@pytest.fixture
def integrator_system():
    """ẋ = u: con Q = R = 1, Qf = 0.1 y sin recompensa el óptimo en [0, 1) es k ≈ -0.6."""
    return linear_system([[0.0]], [[1.0]], [[1.0]])


@pytest.fixture
def integrator_spec():
    return CostSpec(Q=[[1.0]], R=[[1.0]], Qf=[[0.1]], epsilon=0.01, zeta_policy=FixedZeta(0.0))


class TestOptimizerConfig:
    def test_defaults(self):
        cfg = OptimizerConfig()
        assert cfg.mu0 == 0.1
        assert cfg.max_iters == 200
        assert not cfg.track_bounds

    @pytest.mark.parametrize(
        "kwargs, field",
        [
            ({"mu0": 0.0}, "optimizer.mu0"),
            ({"mu0": float("inf")}, "optimizer.mu0"),
            ({"grad_tol": 0.0}, "optimizer.grad_tol"),
            ({"max_iters": 0}, "optimizer.max_iters"),
            ({"psd_tol": -1.0}, "optimizer.psd_tol"),
        ],
    )
    def test_invalid(self, kwargs, field):
        with pytest.raises(ValidationError) as info:
            OptimizerConfig(**kwargs)
        assert info.value.field == field


class TestStepRule:
    def test_harmonic_schedule(self):
        assert [step_size(i, 0.5) for i in (1, 2, 4)] == [0.5, 0.25, 0.125]

    def test_index_starts_at_one(self):
        with pytest.raises(ValidationError):
            step_size(0, 0.5)


class TestSecantHessian:
    def test_axis_aligned_step_recovers_column(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        k0 = np.array([0.3, -0.2])
        k1 = k0 + np.array([0.1, 0.0])
        H = secant_hessian(A @ k1, A @ k0, k1, k0)
        np.testing.assert_allclose(H[:, 0], A[:, 0])
        np.testing.assert_array_equal(H[:, 1], [0.0, 0.0])

    def test_guard_zeroes_tiny_steps(self):
        H = secant_hessian([1.0, 2.0], [0.0, 0.0], [1e-13, 1.0], [0.0, 0.0])
        np.testing.assert_array_equal(H[:, 0], [0.0, 0.0])
        np.testing.assert_allclose(H[:, 1], [1.0, 2.0])

    def test_rank_one_fails_psd_for_convex_quadratic(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        k0 = np.array([0.3, -0.2])
        k1 = k0 + np.array([0.1, 0.05])
        H = secant_hessian(A @ k1, A @ k0, k1, k0)
        assert np.linalg.matrix_rank(H) == 1
        assert not psd_check(H, 1e-8)
        assert psd_check(H, 1.0)

    def test_fuzz_never_produces_non_finite_entries(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            d = rng.integers(1, 6)
            scale = 10.0 ** rng.uniform(-300, 300, size=4)
            g, g_prev, K1, K0 = (rng.normal(size=d) * s for s in scale)
            if rng.random() < 0.3:
                K1 = K0 + rng.normal(size=d) * 1e-14
            H = secant_hessian(g, g_prev, K1, K0)
            assert H.shape == (d, d)
            assert np.all(np.isfinite(H))


class TestPsdCheck:
    def test_verdicts(self):
        assert psd_check(np.eye(2))
        assert psd_check(np.zeros((3, 3)))
        assert not psd_check(np.diag([1.0, -1.0]))

    def test_tolerance(self):
        assert psd_check([[-1e-10]], psd_tol=1e-8)
        assert not psd_check([[-1e-6]], psd_tol=1e-8)

    def test_uses_symmetric_part(self):
        assert psd_check([[1.0, 4.0], [-4.0, 1.0]])

    def test_square_only(self):
        with pytest.raises(ValidationError):
            psd_check(np.ones((2, 3)))


class TestCostBounds:
    def test_bounds_contain_cost(self, bearing, spec, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        bounds = cost_bounds(bearing, spec, -np.eye(2), SEGMENT, z0, coarse, 10.0)
        assert bounds.holds
        assert bounds.lower_printed <= bounds.lower <= bounds.J <= bounds.upper
        assert set(bounds.to_dict()) == {"lower", "lower_printed", "upper", "J"}

    def test_tracked_on_every_iteration(self, bearing, spec, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        cfg = OptimizerConfig(mu0=0.1, max_iters=3, track_bounds=True)
        _, trace = optimize_segment(bearing, spec, SEGMENT, z0, -np.eye(2), cfg, coarse, 10.0)
        assert all(r.bounds is not None and r.bounds.holds for r in trace.records)


class TestOptimizeSegment:
    def test_scalar_gain_approaches_optimum(self, integrator_system, integrator_spec, coarse):
        z0 = initial_augmented_state([1.0], integrator_spec)
        cfg = OptimizerConfig(mu0=1.0, max_iters=40)
        K, trace = optimize_segment(integrator_system, integrator_spec, SEGMENT, z0, [[-1.0]], cfg, coarse, 0.0)
        assert K.entries[0, 0] == pytest.approx(-0.6, abs=0.05)
        assert trace.best.J == pytest.approx(0.822, abs=2e-3)
        assert K.valid_interval == SEGMENT

    def test_converges_with_loose_tolerance(self, integrator_system, integrator_spec, coarse):
        z0 = initial_augmented_state([1.0], integrator_spec)
        cfg = OptimizerConfig(mu0=1.0, grad_tol=0.05, max_iters=40)
        _, trace = optimize_segment(integrator_system, integrator_spec, SEGMENT, z0, [[-1.0]], cfg, coarse, 0.0)
        assert trace.status == CONVERGED
        assert trace.converged
        assert trace.records[-1].grad_norm <= 0.05
        assert trace.records[-1].mu_applied == 0.0

    def test_iteration_cap_is_reported(self, integrator_system, integrator_spec, coarse):
        z0 = initial_augmented_state([1.0], integrator_spec)
        cfg = OptimizerConfig(mu0=1.0, grad_tol=1e-12, max_iters=3)
        _, trace = optimize_segment(integrator_system, integrator_spec, SEGMENT, z0, [[-1.0]], cfg, coarse, 0.0)
        assert trace.status == CAPPED
        assert len(trace) == 3

    def test_step_schedule_advances_only_on_convex_steps(self, bearing, spec, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        cfg = OptimizerConfig(mu0=0.1, max_iters=6)
        K, trace = optimize_segment(bearing, spec, SEGMENT, z0, -np.eye(2), cfg, coarse, 10.0)
        assert trace.status in (CONVERGED, CAPPED)
        assert trace.records[0].cvx_check
        s = 1
        for record in trace.records:
            assert record.mu_scheduled == pytest.approx(0.1 / s)
            if record.cvx_check:
                s += 1
        convex = [r.mu_scheduled for r in trace.records if r.cvx_check]
        assert all(a > b for a, b in zip(convex, convex[1:]))

    def test_returns_best_gain(self, bearing, spec, x0, coarse):
        z0 = initial_augmented_state(x0, spec)
        cfg = OptimizerConfig(mu0=0.1, max_iters=6)
        K, trace = optimize_segment(bearing, spec, SEGMENT, z0, -np.eye(2), cfg, coarse, 10.0)
        assert trace.best.J < trace.records[0].J
        np.testing.assert_array_equal(K.flat, trace.best.K)
        assert np.all(np.diff(trace.best_so_far()) <= 0)
        rows = trace.to_rows()
        assert {"iteration", "J", "grad_norm", "k1", "k4"} <= set(rows[0])

    def test_divergent_step_is_halved(self, integrator_system, integrator_spec, coarse):
        z0 = initial_augmented_state([1.0], integrator_spec)
        cfg = OptimizerConfig(mu0=1e5, max_iters=2)
        K, trace = optimize_segment(integrator_system, integrator_spec, SEGMENT, z0, [[-1.0]], cfg, coarse, 0.0)
        first = trace.records[0]
        assert first.recoveries >= 1
        assert first.mu_applied == pytest.approx(first.mu_scheduled / 2**first.recoveries)
        assert K.entries[0, 0] == -1.0

    def test_gives_up_after_max_halvings(self, integrator_system, integrator_spec, coarse):
        z0 = initial_augmented_state([1.0], integrator_spec)
        cfg = OptimizerConfig(mu0=1e5, max_iters=2, max_halvings=2)
        with pytest.raises(NumericalError) as info:
            optimize_segment(integrator_system, integrator_spec, SEGMENT, z0, [[-1.0]], cfg, coarse, 0.0)
        assert info.value.context["segment"] == [0.0, 1.0]

    def test_gain_shape_is_checked(self, bearing, spec, x0):
        z0 = initial_augmented_state(x0, spec)
        with pytest.raises(ValidationError):
            optimize_segment(bearing, spec, SEGMENT, z0, np.ones((1, 2)))


class TestIndependentSegments:
    def test_each_segment_starts_from_given_state(self, bearing, spec, x0, coarse):
        starts = [((0.0, 1.0), x0), ((1.0, 2.0), x0 * np.exp(-1.0))]
        cfg = OptimizerConfig(mu0=0.1, max_iters=2)
        results = optimize_segments_independent(bearing, spec, starts, -np.eye(2), cfg, coarse)
        assert [K.valid_interval for K, _ in results] == [(0.0, 1.0), (1.0, 2.0)]
        assert all(len(trace) == 2 for _, trace in results)
