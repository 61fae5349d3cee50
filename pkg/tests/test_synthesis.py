import math

import numpy as np
import pytest

from obsctrl.cost import CostSpec, DecayRule, FixedZeta, terminal_cost
from obsctrl.errors import OutputDomainError, RiccatiError, ValidationError
from obsctrl.model import GainMatrix, Trajectory, holonomic_bearing, linear_system
from obsctrl.ode import IntegratorConfig
from obsctrl.optimizer import CAPPED, CONVERGED, OptimizerConfig
from obsctrl.synthesis import (
    BASELINE,
    SegmentPlan,
    baseline,
    compare,
    decay_rate_estimate,
    gramian_ratio,
    initial_gain,
    lemma_margins,
    lqr_gain,
    lyapunov_trace,
    obs_det_integral,
    riccati_residual,
    simulate_piecewise,
    solve_riccati,
    synthesize,
)

X0 = np.array([-1.0, 2.0])
DT = IntegratorConfig(dt=1e-2)
QUICK = OptimizerConfig(mu0=0.1, max_iters=8)
DESK = OptimizerConfig(mu0=0.1, max_iters=30)


def bearing_spec(policy, Qf=0.1):
    return CostSpec(Q=np.eye(2), R=np.eye(2), Qf=Qf * np.eye(2), epsilon=0.01, zeta_policy=policy)


def bearing_index(x, epsilon=0.01):
    """Suma de observabilidad exacta del rumbo y = x2/x1 en x (perturbaciones ±ε)."""
    a, b = x
    return b**2 / (a**2 - epsilon**2) ** 2 + 1.0 / a**2


@pytest.fixture(scope="module")
def desk():
    """Síntesis y línea base del sistema con rumbo en [0, 3) con tramos unitarios."""
    sys = holonomic_bearing()
    spec = bearing_spec(FixedZeta(10.0))
    plan = SegmentPlan.uniform(3.0, 1.0)
    synth = synthesize(sys, spec, plan, QUICK, X0, DT)
    base = baseline(sys, spec, plan, -np.eye(2), X0, DT)
    return sys, spec, plan, synth, base


class TestSegmentPlan:
    def test_uniform(self):
        plan = SegmentPlan.uniform(10.0, 1.0)
        assert len(plan) == 10
        assert plan.segments[3] == (3.0, 4.0)
        assert plan.t_f == 10.0

    def test_last_segment_is_shortened(self):
        plan = SegmentPlan.uniform(2.5, 1.0)
        assert plan.segments[-1] == (2.0, 2.5)

    @pytest.mark.parametrize("edges", [[0.0], [1.0, 2.0], [0.0, 1.0, 1.0]])
    def test_invalid_boundaries(self, edges):
        with pytest.raises(ValidationError):
            SegmentPlan(edges)

    def test_invalid_uniform(self):
        with pytest.raises(ValidationError):
            SegmentPlan.uniform(1.0, 0.0)


class TestRiccati:
    def test_holonomic_anchor(self):
        P, K, residual = solve_riccati(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
        np.testing.assert_allclose(P, np.eye(2), atol=1e-10)
        np.testing.assert_allclose(K, -np.eye(2), atol=1e-10)
        assert residual <= 1e-10

    def test_scalar_unstable_anchor(self):
        _, K, _ = solve_riccati([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        assert K[0, 0] == pytest.approx(-1.0 - math.sqrt(2.0), abs=1e-8)

    def test_hurwitz_start(self):
        P, K, _ = solve_riccati([[-1.0]], [[1.0]], [[1.0]], [[1.0]])
        assert P[0, 0] == pytest.approx(math.sqrt(2.0) - 1.0, abs=1e-9)

    def test_double_integrator_residual(self, double_integrator):
        A, B, _ = double_integrator.linear_matrices
        P, K, residual = solve_riccati(A, B, np.eye(2), np.eye(1))
        assert riccati_residual(A, B, np.eye(2), np.eye(1), P) == pytest.approx(residual)
        assert np.all(np.linalg.eigvals(A + B @ K).real < 0)

    def test_not_stabilizable(self):
        with pytest.raises(RiccatiError):
            solve_riccati(np.diag([1.0, -1.0]), [[0.0], [1.0]], np.eye(2), [[1.0]])

    def test_bad_initial_gain(self):
        with pytest.raises(RiccatiError):
            solve_riccati([[1.0]], [[1.0]], [[1.0]], [[1.0]], K0=[[0.5]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            solve_riccati(np.zeros((2, 2)), np.eye(2), np.eye(3), np.eye(2))

    def test_lqr_gain_wraps(self):
        K = lqr_gain([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        assert isinstance(K, GainMatrix)

    def test_initial_gain(self, bearing, spec):
        np.testing.assert_allclose(initial_gain(bearing, spec, X0).entries, -np.eye(2), atol=1e-10)
        np.testing.assert_array_equal(initial_gain(bearing, spec, X0, K0=-2 * np.eye(2)).entries, -2 * np.eye(2))


class TestSynthesis:
    def test_segments_hand_off_exact_state(self, desk):
        _, _, plan, synth, _ = desk
        assert [s.segment for s in synth.segments] == plan.segments
        assert [g.valid_interval for g in synth.gains] == plan.segments
        for prev, nxt in zip(synth.segments, synth.segments[1:]):
            np.testing.assert_array_equal(nxt.rollout.states[0], prev.rollout.states[-1])
        assert synth.trajectory.times[0] == 0.0
        assert synth.trajectory.times[-1] == pytest.approx(3.0)

    def test_statuses_and_zetas(self, desk):
        _, _, _, synth, _ = desk
        assert all(status in (CONVERGED, CAPPED) for _, _, status in synth.per_segment)
        assert synth.zetas == [10.0, 10.0, 10.0]

    def test_first_segment_descends_from_lqr(self, desk):
        _, _, _, synth, _ = desk
        first = synth.segments[0]
        assert first.J < first.trace.records[0].J

    def test_observability_improves_over_baseline(self, desk):
        sys, _, _, synth, base = desk
        det_s, det_b = obs_det_integral(synth), obs_det_integral(base)
        assert det_b <= 1e-12
        assert det_s > 1e3 * max(det_b, 1e-12)
        replay_s = gramian_ratio(sys, synth, X0, 1e-3, 1.0, DT, replay=True)[0]
        replay_b = gramian_ratio(sys, base, X0, 1e-3, 1.0, DT, replay=True)[0]
        assert replay_s > 10.0 * replay_b

    def test_compare_reports_both_runs(self, desk):
        sys, spec, _, synth, base = desk
        summary = compare(sys, spec, synth, base, X0, DT)
        assert set(summary) == {"synthesized", BASELINE}
        for entry in summary.values():
            assert {"total_cost", "integrated_cost", "gramian", "replay_gramian", "obs_det_integral"} <= set(entry)
            assert entry["gramian"]["horizon"] == pytest.approx(3.0)

    def test_bad_initial_state(self, bearing, spec):
        with pytest.raises(ValidationError) as info:
            synthesize(bearing, spec, SegmentPlan.uniform(1.0, 1.0), QUICK, [1.0, 2.0, 3.0], DT, K0=-np.eye(2))
        assert info.value.field == "x0"


    def test_repeated_runs_are_identical(self, bearing, spec):
        plan = SegmentPlan.uniform(2.0, 1.0)
        cfg = OptimizerConfig(mu0=0.1, max_iters=3)
        a = synthesize(bearing, spec, plan, cfg, X0, DT)
        b = synthesize(bearing, spec, plan, cfg, X0, DT)
        np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)
        for ga, gb in zip(a.gains, b.gains):
            np.testing.assert_array_equal(ga.entries, gb.entries)
        assert a.total_cost == b.total_cost

    def test_zero_reward_keeps_lqr_gain(self):
        # salida constante: l2 = 0; con Qf = P (Riccati) la ganancia -I es estacionaria en cada tramo
        sys = linear_system(np.zeros((2, 2)), np.eye(2), np.zeros((1, 2)))
        spec = bearing_spec(FixedZeta(10.0), Qf=1.0)
        res = synthesize(sys, spec, SegmentPlan.uniform(10.0, 1.0), DESK, X0, DT)
        assert all(status == CONVERGED for _, _, status in res.per_segment)
        for g in res.gains:
            np.testing.assert_allclose(g.entries, -np.eye(2), atol=1e-3)
        exact = X0[None, :] * np.exp(-res.trajectory.times)[:, None]
        assert np.max(np.linalg.norm(res.trajectory.states - exact, axis=1)) <= 1e-3

    @pytest.mark.slow
    def test_desk_run_beats_baseline(self):
        sys = holonomic_bearing()
        spec = bearing_spec(FixedZeta(10.0))
        plan = SegmentPlan.uniform(10.0, 1.0)
        synth = synthesize(sys, spec, plan, DESK, X0, DT)
        base = baseline(sys, spec, plan, -np.eye(2), X0, DT)
        assert synth.total_cost < base.total_cost
        assert synth.observability_integral > base.observability_integral
        assert base.total_cost == pytest.approx(-1.761, abs=5e-3)

class TestBaseline:
    def test_constant_gain(self, desk):
        _, _, _, _, base = desk
        assert all(s.status == BASELINE and s.iterations == 0 for s in base.segments)
        assert all(np.array_equal(g.entries, -np.eye(2)) for g in base.gains)
        np.testing.assert_allclose(base.trajectory.states[-1], X0 * math.exp(-3.0), rtol=1e-8)

    def test_cost_accounting(self, desk):
        _, spec, _, _, base = desk
        interior = sum(float(terminal_cost(s.rollout.states[-1], spec.Qf)) for s in base.segments[:-1])
        assert base.total_cost - base.integrated_cost == pytest.approx(interior, abs=1e-6)

    def test_observability_index_follows_reseeded_state(self, desk):
        _, _, _, _, base = desk
        # u = -x reescala estados y perturbadas por igual: la suma es constante en cada tramo
        # y sólo cambia al re-sembrar en x_j = x0·e^{-j}
        expected = [bearing_index(s.rollout.states[0]) for s in base.segments]
        for s, value in zip(base.segments, expected):
            np.testing.assert_allclose(s.rollout.observability, value, rtol=1e-9)
        np.testing.assert_allclose(base.monitors["observability_index"], expected, rtol=1e-9)
        assert expected[0] == pytest.approx(5.0008, rel=1e-4)
        assert expected[1] / expected[0] == pytest.approx(math.exp(2.0), rel=1e-2)

    def test_domain_error_names_segment(self, bearing, spec):
        # la perturbada x1 - ε arranca en x1 = 0
        with pytest.raises(OutputDomainError) as info:
            baseline(bearing, spec, SegmentPlan.uniform(1.0, 1.0), -np.eye(2), [0.01, 1.0], DT)
        assert info.value.context["segment_index"] == 0
        assert info.value.time == 0.0


class TestMonitors:
    @pytest.mark.slow
    def test_decay_rule_run_is_stable(self):
        sys = holonomic_bearing()
        spec = bearing_spec(DecayRule(1.0))
        res = synthesize(sys, spec, SegmentPlan.uniform(3.0, 1.0), QUICK, X0, DT)
        assert res.zetas[0] == pytest.approx(math.exp(-1.0) * 5.0)
        assert lemma_margins(res, spec).min() >= -1e-12
        assert res.monitors["lyapunov"].verdict
        assert res.monitors["lyapunov"].positive

    @pytest.mark.slow
    def test_decay_rule_reaches_origin(self):
        sys = holonomic_bearing()
        spec = bearing_spec(DecayRule(1.0))
        res = synthesize(sys, spec, SegmentPlan.uniform(10.0, 1.0), DESK, X0, DT)
        assert np.linalg.norm(res.trajectory.states[-1]) <= 1e-2
        assert res.monitors["lyapunov"].verdict
        assert lemma_margins(res, spec).min() >= -1e-12

    def test_lyapunov_trace_shape(self, desk):
        _, spec, _, synth, _ = desk
        trace = lyapunov_trace(synth, spec)
        assert trace.V.shape == trace.times.shape
        assert set(np.unique(trace.segment_index)) == {0, 1, 2}

    def test_decay_rate_estimate(self, bearing):
        traj = simulate_piecewise(bearing, [GainMatrix(-np.eye(2), (0.0, 2.0))], X0, DT)
        assert decay_rate_estimate(traj, np.eye(2)) == pytest.approx(1.0, rel=1e-6)
        assert decay_rate_estimate(traj, np.eye(2), [0.0, 1.0, 2.0]) == pytest.approx(1.0, rel=1e-6)

    def test_decay_rate_of_constant_state(self):
        traj = Trajectory(np.array([0.0, 1.0]), np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert decay_rate_estimate(traj, np.eye(2)) == 0.0


class TestSimulatePiecewise:
    def test_switching(self, bearing):
        gains = [GainMatrix(-np.eye(2), (0.0, 1.0)), GainMatrix(-2.0 * np.eye(2), (1.0, 2.0))]
        traj = simulate_piecewise(bearing, gains, X0)
        np.testing.assert_allclose(traj.final_state, X0 * math.exp(-3.0), rtol=1e-9)

    def test_zero_horizon(self, bearing):
        traj = simulate_piecewise(bearing, [GainMatrix(-np.eye(2), (1.0, 2.0))], X0, t0=1.0, t1=1.0)
        np.testing.assert_array_equal(traj.times, [1.0])
        np.testing.assert_array_equal(traj.states, [X0])

    def test_infinite_horizon_is_rejected(self, bearing):
        with pytest.raises(ValidationError):
            simulate_piecewise(bearing, [GainMatrix(-np.eye(2))], X0)
