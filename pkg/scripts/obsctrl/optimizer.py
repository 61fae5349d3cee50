# scripts/obsctrl/optimizer.py
"""
DESCENSO POR GRADIENTE SOBRE LA GANANCIA DE UN TRAMO
====================================================

Por iteración:
1. Co-integrar estado aumentado y sensibilidades -> J_i, g_i
2. Hessiano secante H con (g_i - g_{i-1}) y (K^i - K^{i-1}); cvxCheck = H ⪰ 0
3. Terminar si ‖g_i‖ ≤ grad_tol y cvxCheck
4. K^{i+1} = K^i - μ·g_i con μ = μ0/s; s avanza sólo cuando cvxCheck se cumple
5. Si K^{i+1} hace diverger la integración, se reintenta con μ/2 (hasta 10 veces)

El resultado es la mejor ganancia evaluada (menor J) y un estado explícito:
"converged" o "iteration-capped".
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import eigvalsh

from obsctrl.cost import terminal_cost, zeta_for_segment
from obsctrl.errors import NumericalError, ValidationError
from obsctrl.model import GainMatrix, as_gain
from obsctrl.sensitivity import cost_and_gradient, initial_augmented_state, rollout_segment

logger = logging.getLogger(__name__)

CONVERGED = "converged"
CAPPED = "iteration-capped"

SECANT_GUARD = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    mu0: float = 0.1
    grad_tol: float = 1e-4
    max_iters: int = 200
    psd_tol: float = 1e-8
    max_halvings: int = 10
    track_bounds: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.mu0) and self.mu0 > 0):
            raise ValidationError(f"optimizer.mu0 must be > 0, got {self.mu0}", field="optimizer.mu0")
        if not self.grad_tol > 0:
            raise ValidationError(
                f"optimizer.grad_tol must be > 0, got {self.grad_tol}", field="optimizer.grad_tol"
            )
        if int(self.max_iters) < 1:
            raise ValidationError(
                f"optimizer.max_iters must be >= 1, got {self.max_iters}", field="optimizer.max_iters"
            )
        if self.psd_tol < 0:
            raise ValidationError(f"optimizer.psd_tol must be >= 0, got {self.psd_tol}", field="optimizer.psd_tol")


@dataclass(frozen=True)
class CostBounds:
    lower: float          # ∫(l1 - ζe^{-t})dt + L
    lower_printed: float  # ∫(l1 - ζ)dt + L
    upper: float          # ∫l1 dt + L
    J: float

    @property
    def holds(self):
        tol = 1e-9 * max(1.0, abs(self.J))
        return self.lower_printed - tol <= self.J <= self.upper + tol

    def to_dict(self):
        return {"lower": self.lower, "lower_printed": self.lower_printed, "upper": self.upper, "J": self.J}


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    K: np.ndarray
    J: float
    grad_norm: float
    mu_scheduled: float
    mu_applied: float
    cvx_check: bool
    recoveries: int = 0
    bounds: Optional[CostBounds] = None


@dataclass
class IterationTrace:
    records: List[IterationRecord] = field(default_factory=list)
    status: str = CAPPED

    def __len__(self):
        return len(self.records)

    @property
    def converged(self):
        return self.status == CONVERGED

    @property
    def iterations(self):
        return len(self.records)

    @property
    def best(self):
        return min(self.records, key=lambda r: r.J)

    def best_so_far(self):
        """min_{k ≤ i} J_k para cada iteración."""
        return np.minimum.accumulate([r.J for r in self.records])

    def to_rows(self):
        return [
            {
                "iteration": r.iteration,
                "J": r.J,
                "grad_norm": r.grad_norm,
                "mu_scheduled": r.mu_scheduled,
                "mu_applied": r.mu_applied,
                "cvx_check": r.cvx_check,
                "recoveries": r.recoveries,
                **{f"k{k + 1}": v for k, v in enumerate(r.K)},
            }
            for r in self.records
        ]


def step_size(i, mu0):
    """μ_i = μ0 / i."""
    if i < 1:
        raise ValidationError(f"step index must be >= 1, got {i}", field="iteration")
    return mu0 / i


def secant_hessian(g_i, g_prev, K_next, K_curr):
    """H[m, n] = (g_i[m] - g_prev[m]) / (K_next[n] - K_curr[n]); |Δ| < 1e-12 da 0."""
    dg = np.asarray(g_i, dtype=float) - np.asarray(g_prev, dtype=float)
    dK = np.asarray(K_next, dtype=float).reshape(-1) - np.asarray(K_curr, dtype=float).reshape(-1)
    safe = np.abs(dK) >= SECANT_GUARD
    inv = np.where(safe, 1.0 / np.where(safe, dK, 1.0), 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        H = np.outer(dg, inv)
    H[~np.isfinite(H)] = 0.0
    return H


def psd_check(H, psd_tol=1e-8):
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[0] != H.shape[1]:
        raise ValidationError(f"H must be square, got {H.shape}", field="H")
    return bool(eigvalsh(0.5 * (H + H.T))[0] >= -psd_tol)


def cost_bounds(sys, spec, K, segment, z0, cfg=None, zeta=None):
    """Cotas del costo del tramo evaluadas sobre la malla del integrador."""
    roll = rollout_segment(sys, spec, K, segment, z0, cfg, zeta)
    t = roll.times
    terminal = float(terminal_cost(roll.states[-1], spec.Qf))
    stage = float(trapezoid(roll.l1, x=t))
    refined = float(trapezoid(roll.l1 - roll.zeta * np.exp(-t), x=t))
    printed = stage - roll.zeta * (t[-1] - t[0])
    bounds = CostBounds(lower=refined + terminal, lower_printed=printed + terminal, upper=stage + terminal, J=roll.J)
    if not bounds.holds:
        logger.warning(
            "Cotas del costo no contienen J en [%g, %g): %.9g ∉ [%.9g, %.9g]",
            segment[0], segment[1], roll.J, bounds.lower_printed, bounds.upper,
        )
    return bounds


def _evaluate(sys, spec, K, segment, z0, icfg, zeta):
    J, g = cost_and_gradient(sys, spec, K, segment, z0, icfg, zeta)
    if not (math.isfinite(J) and np.all(np.isfinite(g))):
        raise NumericalError(f"cost or gradient not finite on [{segment[0]}, {segment[1]})")
    return J, g


def optimize_segment(sys, spec, segment, z0, K_init, cfg=None, icfg=None, zeta=None):
    """Busca K_j* para un tramo; devuelve (GainMatrix, IterationTrace).

    El Hessiano secante H[m, n] = Δg[m]/ΔK[n] tiene rango uno. Con p·n > 1
    su parte simétrica tiene un autovalor negativo salvo que Δg sea un
    múltiplo no negativo de 1/ΔK (componente a componente), así que cvx
    pasa sólo dentro de `psd_tol`: el calendario del paso depende entonces
    de la tolerancia más que de la curvatura.
    """
    cfg = cfg or OptimizerConfig()
    segment = (float(segment[0]), float(segment[1]))
    K = as_gain(K_init, sys).entries.reshape(-1).copy()
    shape = (sys.p, sys.n)
    if zeta is None:
        x_j = z0.nominal if hasattr(z0, "nominal") else np.asarray(z0)[: sys.n]
        zeta = zeta_for_segment(spec.zeta_policy, x_j, spec.Q, segment[1], segment).value

    J, g = _evaluate(sys, spec, K.reshape(shape), segment, z0, icfg, zeta)
    trace = IterationTrace()
    K_prev = g_prev = None
    s = 1
    recoveries = 0
    mu_applied = 0.0
    for i in range(1, cfg.max_iters + 1):
        if i == 1:
            cvx = True
        else:
            cvx = psd_check(secant_hessian(g, g_prev, K, K_prev), cfg.psd_tol)
        grad_norm = float(np.linalg.norm(g))
        mu = step_size(s, cfg.mu0)
        bounds = cost_bounds(sys, spec, K.reshape(shape), segment, z0, icfg, zeta) if cfg.track_bounds else None
        logger.debug(
            "[%g, %g) it=%d J=%.9g |g|=%.3e mu=%.4g cvx=%s",
            segment[0], segment[1], i, J, grad_norm, mu, cvx,
        )
        record = dict(iteration=i, K=K.copy(), J=J, grad_norm=grad_norm, mu_scheduled=mu, cvx_check=cvx, bounds=bounds)

        if grad_norm <= cfg.grad_tol and cvx:
            trace.records.append(IterationRecord(mu_applied=0.0, recoveries=0, **record))
            trace.status = CONVERGED
            break
        if i == cfg.max_iters:
            trace.records.append(IterationRecord(mu_applied=0.0, recoveries=0, **record))
            break

        # paso con recuperación ante divergencia
        mu_applied, recoveries = mu, 0
        while True:
            K_next = K - mu_applied * g
            try:
                J_next, g_next = _evaluate(sys, spec, K_next.reshape(shape), segment, z0, icfg, zeta)
                break
            except NumericalError as exc:
                recoveries += 1
                if recoveries > cfg.max_halvings:
                    exc.context.setdefault("segment", list(segment))
                    raise
                mu_applied *= 0.5
                logger.warning(
                    "[%g, %g) it=%d: paso rechazado (%s), mu -> %.4g",
                    segment[0], segment[1], i, type(exc).__name__, mu_applied,
                )
        trace.records.append(IterationRecord(mu_applied=mu_applied, recoveries=recoveries, **record))
        if cvx:
            s += 1
        K_prev, g_prev = K, g
        K, J, g = K_next, J_next, g_next

    best = trace.best
    K_star = GainMatrix(best.K.reshape(shape), segment)
    logger.debug(
        "[%g, %g) %s en %d iteraciones, J*=%.9g", segment[0], segment[1], trace.status, len(trace), best.J
    )
    return K_star, trace


def optimize_segments_independent(sys, spec, starts, K_init, cfg=None, icfg=None):
    """Modo análisis: optimiza cada (tramo, estado inicial) sin traspaso de estado.

    `starts` es una secuencia de ((t_j, t_{j+1}), x_j). Devuelve una lista de
    (GainMatrix, IterationTrace) en el mismo orden.
    """
    results: List[Tuple[GainMatrix, IterationTrace]] = []
    for segment, x_j in starts:
        z0 = initial_augmented_state(x_j, spec)
        zeta = zeta_for_segment(spec.zeta_policy, x_j, spec.Q, segment[1], tuple(segment)).value
        results.append(optimize_segment(sys, spec, segment, z0, K_init, cfg, icfg, zeta))
    return results
