# scripts/obsctrl/cost.py
"""
COSTO AUMENTADO CON OBSERVABILIDAD
==================================

    l1(x, u) = xᵀQx + uᵀRu
    l2(t, ...) = e^{-t} · sat_ζ( 1/(4ε²) Σ_i ‖h(x^{+i}) - h(x^{-i})‖² )
    Γ = l1(x, Kx) - l2
    L(x) = xᵀ Qf x

t es siempre el tiempo GLOBAL. Todas las funciones aceptan lotes en los
ejes iniciales.

Política de ζ:
- FixedZeta(ζ): valor del escenario
- DecayRule(β): ‖x(t_j)‖²_Q si 0 < β ≤ 1/2, si no e^{(1-2β)t_{j+1}}·‖x(t_j)‖²_Q
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from obsctrl.errors import ValidationError


@dataclass(frozen=True)
class FixedZeta:
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValidationError(f"zeta must be >= 0, got {self.value}", field="cost.zeta")

    def describe(self):
        return {"policy": "fixed", "zeta": self.value}


@dataclass(frozen=True)
class DecayRule:
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValidationError(f"beta must be > 0, got {self.beta}", field="cost.beta")

    def describe(self):
        return {"policy": "decay", "beta": self.beta}


ZetaPolicy = Union[FixedZeta, DecayRule]


@dataclass(frozen=True)
class ZetaValue:
    value: float
    segment: Tuple[float, float]

    def __post_init__(self):
        if not self.value >= 0:
            raise ValidationError(f"zeta must be >= 0, got {self.value}", field="cost.zeta")

    def __float__(self):
        return float(self.value)


def _matrix(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {M.shape}", field=name)
    if not np.all(np.isfinite(M)):
        raise ValidationError(f"{name} must be finite", field=name)
    return M


def _min_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


@dataclass(frozen=True)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    epsilon: float = 0.01
    zeta_policy: ZetaPolicy = field(default_factory=lambda: FixedZeta(10.0))
    t_f: Optional[float] = None
    strict: bool = field(default=True, compare=False)

    def __post_init__(self):
        Q = _matrix(self.Q, "cost.Q")
        R = _matrix(self.R, "cost.R")
        Qf = _matrix(self.Qf, "cost.Qf")
        if Qf.shape != Q.shape:
            raise ValidationError(f"cost.Qf must match cost.Q {Q.shape}, got {Qf.shape}", field="cost.Qf")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValidationError(f"cost.epsilon must be > 0, got {self.epsilon}", field="cost.epsilon")
        if self.strict:
            if _min_eig(Q) <= 0:
                raise ValidationError("cost.Q must be positive definite", field="cost.Q")
            if _min_eig(R) <= 0:
                raise ValidationError("cost.R must be positive definite", field="cost.R")
            if _min_eig(Qf) < -1e-12:
                raise ValidationError("cost.Qf must be positive semidefinite", field="cost.Qf")
        if self.t_f is not None and not self.t_f > 0:
            raise ValidationError(f"plan.t_f must be > 0, got {self.t_f}", field="plan.t_f")
        for name, M in (("Q", Q), ("R", R), ("Qf", Qf)):
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def p(self):
        return self.R.shape[0]

    def check_dims(self, n, p):
        if self.n != n:
            raise ValidationError(f"cost.Q must be {n}×{n}, got {self.Q.shape}", field="cost.Q")
        if self.p != p:
            raise ValidationError(f"cost.R must be {p}×{p}, got {self.R.shape}", field="cost.R")


def _quad(x, M):
    x = np.asarray(x, dtype=float)
    return np.einsum("...i,ij,...j->...", x, M, x)


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


def sat(x, zeta):
    """ζ si x > ζ, x en otro caso."""
    return _scalar(np.minimum(np.asarray(x, dtype=float), float(zeta)))


def sat_derivative(x, zeta):
    """1 bajo el umbral, 0 en el umbral o por encima."""
    return _scalar(np.where(np.asarray(x, dtype=float) < float(zeta), 1.0, 0.0))


def l1(x, u, spec):
    return _scalar(_quad(x, spec.Q) + _quad(u, spec.R))


def observability_sum(perturbed_outputs, epsilon):
    """1/(4ε²) Σ_i ‖h(x^{+i}) - h(x^{-i})‖² para salidas (..., 2n, m) en orden ±."""
    Y = np.asarray(perturbed_outputs, dtype=float)
    D = Y[..., 0::2, :] - Y[..., 1::2, :]
    return _scalar(np.sum(D * D, axis=(-2, -1)) / (4.0 * epsilon**2))


def l2(t, perturbed_outputs, zeta, epsilon):
    return _scalar(np.exp(-np.asarray(t, dtype=float)) * sat(observability_sum(perturbed_outputs, epsilon), zeta))


def reward_bound(t, zeta):
    """b(t) = ζ·e^{-t}: cota superior de l2."""
    return _scalar(float(zeta) * np.exp(-np.asarray(t, dtype=float)))


def zeta_for_segment(policy, x_tj, Q, t_next, segment=None):
    t_next = float(t_next)
    segment = segment or (float("-inf"), t_next)
    if isinstance(policy, FixedZeta):
        return ZetaValue(policy.value, segment)
    norm_sq = float(_quad(np.asarray(x_tj, dtype=float), np.atleast_2d(Q)))
    if policy.beta <= 0.5:
        return ZetaValue(norm_sq, segment)
    return ZetaValue(math.exp((1.0 - 2.0 * policy.beta) * t_next) * norm_sq, segment)


def terminal_cost(x, Qf):
    return _scalar(_quad(x, np.atleast_2d(Qf)))


def stage_weight(K, spec):
    """KᵀRK + Q."""
    K = np.asarray(getattr(K, "entries", K), dtype=float)
    return K.T @ spec.R @ K + spec.Q


def gamma(t, x, perturbed_outputs, K, spec, zeta):
    """xᵀ(KᵀRK + Q)x - l2."""
    return _scalar(
        _quad(x, stage_weight(K, spec)) - np.asarray(l2(t, perturbed_outputs, float(zeta), spec.epsilon))
    )


def lemma_margin(t, x, perturbed_outputs, spec, zeta):
    """xᵀQx - l2; no negativo cuando ζ sale de la regla de decaimiento y x decae a ritmo ≥ β."""
    return _scalar(_quad(x, spec.Q) - np.asarray(l2(t, perturbed_outputs, float(zeta), spec.epsilon)))
