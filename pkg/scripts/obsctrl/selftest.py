# scripts/obsctrl/selftest.py
"""
AUTOPRUEBA DE PROPIEDADES
=========================

Verificaciones numéricas de extremo a extremo, ejecutables sin pytest
(`python -m obsctrl selftest`):

 1. Gramiano empírico = gramiano lineal exacto en sistemas LTI
 2. Valor del gramiano escalar (1 - e^-2)/2
 3. Inobservabilidad de u = -x en el sistema con rumbo
 4. Anclas de Riccati
 5. Gradiente por sensibilidades vs diferencias finitas
 6. Descenso y mejora de observabilidad (escala de escritorio)
 7. Estabilidad con la regla de decaimiento
 8. Mecánica del descenso (pasos, estado final, Hessiano secante)
 9. Cotas del costo en cada iteración
10. Capa de expresiones (ida y vuelta, derivadas)

--quick reduce horizontes e iteraciones, salvo en el descenso (6), que
siempre corre a escala de escritorio.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from obsctrl.cost import CostSpec, DecayRule, FixedZeta
from obsctrl.expr import differentiate, evaluate, parse, to_text
from obsctrl.gramian import bearing_obs_det, empirical_gramian, linear_gramian
from obsctrl.model import GainMatrix, holonomic_bearing, linear_system, output_at, simulate_closed_loop
from obsctrl.ode import IntegratorConfig
from obsctrl.optimizer import CAPPED, CONVERGED, OptimizerConfig, optimize_segment, psd_check, secant_hessian
from obsctrl.sensitivity import cost_and_gradient, fd_gradient, initial_augmented_state
from obsctrl.synthesis import (
    SegmentPlan,
    baseline,
    gramian_ratio,
    lemma_margins,
    obs_det_integral,
    solve_riccati,
    synthesize,
)

logger = logging.getLogger(__name__)

BEARING_X0 = np.array([-1.0, 2.0])


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float = 0.0
    details: Dict[str, object] = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "seconds": round(self.seconds, 3), "details": self.details}


def bearing_spec(zeta_policy=None, epsilon=0.01):
    return CostSpec(
        Q=np.eye(2), R=np.eye(2), Qf=0.1 * np.eye(2),
        epsilon=epsilon, zeta_policy=zeta_policy or FixedZeta(10.0),
    )


def random_expression_text(rng, n, depth=3):
    """Texto de una expresión aleatoria bien definida en todo ℝⁿ."""
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.6:
            return f"x{rng.integers(1, n + 1)}"
        return f"{rng.uniform(-2.0, 2.0):.3f}"
    a = random_expression_text(rng, n, depth - 1)
    b = random_expression_text(rng, n, depth - 1)
    choice = rng.integers(0, 9)
    return [
        f"({a} + {b})",
        f"({a} - {b})",
        f"({a} * {b})",
        f"({a} / (1.5 + ({b})^2))",
        f"sin({a})",
        f"cos({a})",
        f"exp(0.3 * sin({a}))",
        f"-({a})",
        f"({a})^2",
    ][choice]


# ---------------------------------------------------------------------------
# Verificaciones
# ---------------------------------------------------------------------------

def check_lti_gramian(quick):
    rng = np.random.default_rng(7)
    M = rng.normal(size=(3, 3))
    A3 = M - (np.max(np.linalg.eigvals(M).real) + 1.0) * np.eye(3)
    cases = [
        ("scalar", linear_system([[-1.0]], [[1.0]], [[1.0]]), np.zeros((1, 1)), np.array([1.0])),
        (
            "double_integrator",
            linear_system([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], [[1.0, 0.0]]),
            np.array([[-1.0, -1.5]]),
            np.array([1.0, 0.0]),
        ),
        ("random3", linear_system(A3, rng.normal(size=(3, 1)), rng.normal(size=(1, 3))), np.zeros((1, 3)),
         rng.normal(size=3)),
    ]
    t_f = 1.0
    worst = 0.0
    for name, sys, K, x0 in cases:
        A, B, C = sys.linear_matrices
        reference = linear_gramian(A + B @ K, C, t_f)
        for eps in (1e-3, 1e-2, 1e-1):
            W = empirical_gramian(sys, GainMatrix(K), x0, eps, t_f, IntegratorConfig(dt=2.5e-4)).W
            worst = max(worst, float(np.linalg.norm(W - reference) / np.linalg.norm(reference)))
    return worst <= 1e-6, {"max_relative_error": worst}


def check_scalar_gramian(quick):
    sys = linear_system([[-1.0]], [[1.0]], [[1.0]])
    g = empirical_gramian(sys, GainMatrix([[0.0]]), [1.0], 0.01, 1.0, IntegratorConfig(dt=1e-4))
    expected = (1.0 - math.exp(-2.0)) / 2.0
    return abs(g.trace_index - expected) <= 1e-8, {"trace": g.trace_index, "expected": expected}


def check_lqr_unobservable(quick):
    sys = holonomic_bearing()
    traj = simulate_closed_loop(sys, -np.eye(2), BEARING_X0, 0.0, 5.0)
    det = np.abs(bearing_obs_det(traj.states, traj.controls))
    y = output_at(sys, traj.states)[:, 0]
    ydot = np.gradient(y, traj.times)
    ratio = empirical_gramian(sys, GainMatrix(-np.eye(2)), BEARING_X0, 0.01, 5.0).singular_value_ratio
    passed = det.max() <= 1e-12 and np.abs(ydot).max() <= 1e-9 and ratio <= 1e-6
    return passed, {"max_det": float(det.max()), "max_ydot": float(np.abs(ydot).max()), "sigma_ratio": ratio}


def check_riccati(quick):
    P1, K1, r1 = solve_riccati(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
    _, K2, _ = solve_riccati([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    err1 = float(np.abs(K1 + np.eye(2)).max())
    err2 = abs(float(K2[0, 0]) + 1.0 + math.sqrt(2.0))
    return err1 <= 1e-10 and r1 <= 1e-10 and err2 <= 1e-8, {"K_error": err1, "residual": r1, "scalar_error": err2}


def _relative(a, b):
    return float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b)))


def check_gradient(quick):
    icfg = IntegratorConfig(dt=1e-2 if quick else 1e-3)
    sys = holonomic_bearing()
    spec = bearing_spec()
    z0 = initial_augmented_state(BEARING_X0, spec)
    K = -np.eye(2)
    g = cost_and_gradient(sys, spec, K, (0.0, 1.0), z0, icfg, 10.0)[1]
    err = _relative(g, fd_gradient(sys, spec, K, (0.0, 1.0), z0, icfg, 10.0, delta=1e-5))
    e1 = _relative(g, fd_gradient(sys, spec, K, (0.0, 1.0), z0, icfg, 10.0, delta=1e-2))
    e2 = _relative(g, fd_gradient(sys, spec, K, (0.0, 1.0), z0, icfg, 10.0, delta=5e-3))

    rng = np.random.default_rng(11)
    lti = linear_system([[0.0, 1.0], [-2.0, -0.5]], rng.normal(size=(2, 2)), [[1.0, 0.0]])
    lti_spec = CostSpec(Q=np.eye(2), R=np.eye(2), Qf=0.1 * np.eye(2), epsilon=0.05, zeta_policy=FixedZeta(10.0))
    z_lti = initial_augmented_state([1.0, -0.5], lti_spec)
    K_lti = -0.5 * np.eye(2)
    g_lti = cost_and_gradient(lti, lti_spec, K_lti, (0.0, 1.0), z_lti, icfg, 10.0)[1]
    err_lti = _relative(g_lti, fd_gradient(lti, lti_spec, K_lti, (0.0, 1.0), z_lti, icfg, 10.0, delta=1e-5))
    order = e1 / e2 if e2 > 0 else float("inf")
    passed = err <= 1e-4 and err_lti <= 1e-4 and 3.0 <= order <= 5.0
    return passed, {"bearing_error": err, "lti_error": err_lti, "halving_ratio": order}


def desk_setup(quick, zeta_policy=None):
    """Escala de escritorio: t_f = 10 con tramos unitarios; --quick acorta a 3 tramos."""
    t_f = 3.0 if quick else 10.0
    return dict(
        sys=holonomic_bearing(),
        spec=bearing_spec(zeta_policy),
        plan=SegmentPlan.uniform(t_f, 1.0),
        opt_cfg=OptimizerConfig(mu0=0.1, max_iters=8 if quick else 30),
        icfg=IntegratorConfig(dt=1e-2),
    )


def check_descent(quick, cache):
    setup = desk_setup(False)
    synth = synthesize(setup["sys"], setup["spec"], setup["plan"], setup["opt_cfg"], BEARING_X0, setup["icfg"])
    base = baseline(setup["sys"], setup["spec"], setup["plan"], -np.eye(2), BEARING_X0, setup["icfg"])
    cache["descent"] = (setup, synth, base)
    first = synth.segments[0].trace
    margin = first.records[0].J - synth.segments[0].J
    det_s, det_b = obs_det_integral(synth), obs_det_integral(base)
    replay_s = gramian_ratio(setup["sys"], synth, BEARING_X0, 1e-3, 1.0, setup["icfg"], replay=True)[0]
    replay_b = gramian_ratio(setup["sys"], base, BEARING_X0, 1e-3, 1.0, setup["icfg"], replay=True)[0]
    passed = (
        margin > 0
        and synth.total_cost < base.total_cost
        and synth.observability_integral > base.observability_integral
        and det_s > 1e3 * max(det_b, 1e-12)
        and replay_s > 10.0 * replay_b
    )
    return passed, {
        "segment0_descent": margin,
        "obs_det_integral": [det_s, det_b],
        "replay_sigma_ratio": [replay_s, replay_b],
        "total_cost": [synth.total_cost, base.total_cost],
        "observability_integral": [synth.observability_integral, base.observability_integral],
    }


def check_stability(quick):
    setup = desk_setup(quick, DecayRule(1.0))
    res = synthesize(setup["sys"], setup["spec"], setup["plan"], setup["opt_cfg"], BEARING_X0, setup["icfg"])
    final = float(np.linalg.norm(res.trajectory.states[-1]))
    lemma = float(lemma_margins(res, setup["spec"]).min())
    lyap = res.monitors["lyapunov"]
    passed = lyap.verdict and lemma >= -1e-12 and (quick or final <= 1e-2)
    return passed, {"final_norm": final, "lemma_min": lemma, "lyapunov_worst_increase": lyap.worst_increase}


def check_mechanics(quick, cache):
    rng = np.random.default_rng(3)
    finite = True
    for _ in range(1000):
        k = int(rng.integers(1, 5))
        scale = 10.0 ** rng.uniform(-14, 2)
        H = secant_hessian(rng.normal(size=k), rng.normal(size=k),
                           rng.normal(size=k) * scale, rng.normal(size=k) * scale)
        finite &= bool(np.all(np.isfinite(H)))
    statuses_ok, schedule_ok = True, True
    _, synth, _ = cache.get("descent") or (None, None, None)
    for seg in (synth.segments if synth else []):
        statuses_ok &= seg.status in (CONVERGED, CAPPED)
        accepted = [r.mu_scheduled for r in seg.trace.records if r.cvx_check]
        schedule_ok &= all(b < a for a, b in zip(accepted, accepted[1:]))
    return finite and statuses_ok and schedule_ok, {
        "secant_finite": finite, "statuses_ok": statuses_ok, "schedule_ok": schedule_ok,
    }


def check_cost_bounds(quick):
    sys = holonomic_bearing()
    spec = bearing_spec()
    z0 = initial_augmented_state(BEARING_X0, spec)
    cfg = OptimizerConfig(mu0=0.1, max_iters=5 if quick else 20, track_bounds=True)
    _, trace = optimize_segment(sys, spec, (0.0, 1.0), z0, -np.eye(2), cfg, IntegratorConfig(dt=1e-2), 10.0)
    ok = all(r.bounds.holds for r in trace.records)
    return ok, {"iterations": len(trace)}


def check_expressions(quick):
    rng = np.random.default_rng(5)
    worst_round, worst_deriv = 0.0, 0.0
    for _ in range(100):
        e = parse(random_expression_text(rng, 3), (3, 0))
        again = parse(to_text(e), (3, 0))
        points = rng.uniform(-1.5, 1.5, size=(100, 3))
        a, b = evaluate(e, points), evaluate(again, points)
        worst_round = max(worst_round, float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)))))
        x = points[0]
        for j in range(3):
            d = evaluate(differentiate(e, f"x{j + 1}"), x)
            h = 1e-6 * (1.0 + abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (evaluate(e, xp) - evaluate(e, xm)) / (2 * h)
            worst_deriv = max(worst_deriv, abs(d - fd) / max(1.0, abs(d)))
    return worst_round <= 1e-12 and worst_deriv <= 1e-6, {"roundtrip": worst_round, "derivative": worst_deriv}


CHECKS: List[tuple] = [
    ("lti_gramian_oracle", check_lti_gramian),
    ("scalar_gramian", check_scalar_gramian),
    ("lqr_unobservability", check_lqr_unobservable),
    ("riccati_anchors", check_riccati),
    ("gradient_correctness", check_gradient),
    ("descent_and_observability", check_descent),
    ("stability_monitors", check_stability),
    ("descent_mechanics", check_mechanics),
    ("cost_bounds", check_cost_bounds),
    ("expression_layer", check_expressions),
]


def run_selftest(quick=False, report: Callable = None):
    """Ejecuta todas las verificaciones; un fallo numérico cuenta como verificación fallida."""
    cache = {}
    results = []
    for k, (name, fn) in enumerate(CHECKS, start=1):
        if report:
            report(f"[{k}/{len(CHECKS)}] {name}...")
        start = time.perf_counter()
        try:
            if fn in (check_descent, check_mechanics):
                passed, details = fn(quick, cache)
            else:
                passed, details = fn(quick)
        except Exception as exc:  # noqa: BLE001
            logger.exception("Verificación %s abortada", name)
            passed, details = False, {"error": type(exc).__name__, "message": str(exc)}
        results.append(CheckResult(name, bool(passed), time.perf_counter() - start, details))
    return results
