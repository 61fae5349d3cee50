# scripts/obsctrl/sensitivity.py
"""
ESTADO AUMENTADO Y SENSIBILIDADES RESPECTO A LA GANANCIA
========================================================

Estado aumentado (dimensión n(2n+1)+1):

    z = [x, x^{+1}, x^{-1}, ..., x^{+n}, x^{-n}, x_{n+1}]

    ż = ℍ(t, z, K):  f(x, K) para cada subestado,  Γ + L̇ para x_{n+1}

con x_{n+1}(t_j) = L(x_j), así x_{n+1}(t_{j+1}) = J(K).

Sensibilidades X̄ = ∂z/∂K (columnas en orden fila-mayor de K):

    dX̄/dt = (∂ℍ/∂z)·X̄ + ∂ℍ/∂K,    X̄(t_j) = 0

Ambas ecuaciones se integran juntas con RK4 sobre la misma malla; la
última fila de X̄ en t_{j+1} es el gradiente exacto del costo discretizado.

Los Jacobianos de ℍ se arman por bloques a partir de los Jacobianos del
sistema (analíticos si existen, diferencias centrales si no).
`hamiltonian_jacobians_fd` es la versión por fuerza bruta, sólo para pruebas.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import simpson

from obsctrl.cost import (
    observability_sum,
    sat,
    sat_derivative,
    stage_weight,
    terminal_cost,
)
from obsctrl.errors import ValidationError
from obsctrl.gramian import output_differences, perturbed_initial_conditions
from obsctrl.model import (
    GainMatrix,
    closed_loop_jacobian,
    control_matrix,
    eval_closed_loop,
    output_at,
    output_jacobian,
)
from obsctrl.ode import IntegratorConfig, integrate, time_grid, integrate_on_grid

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True)
class AugmentedState:
    nominal: np.ndarray
    perturbed: np.ndarray  # (2n, n) en orden +1, -1, +2, -2, ...
    running_cost: float

    @property
    def n(self):
        return len(self.nominal)

    @property
    def dimension(self):
        return self.n * (2 * self.n + 1) + 1

    def to_vector(self):
        return np.concatenate([self.nominal, np.asarray(self.perturbed).reshape(-1), [self.running_cost]])

    @classmethod
    def from_vector(cls, z, n):
        z = np.asarray(z, dtype=float)
        if z.shape != (n * (2 * n + 1) + 1,):
            raise ValidationError(
                f"augmented state must have dimension {n * (2 * n + 1) + 1}, got {z.shape}",
                field="augmented_state",
            )
        states = z[:-1].reshape(2 * n + 1, n)
        return cls(states[0].copy(), states[1:].copy(), float(z[-1]))


def initial_augmented_state(x_j, spec):
    """x(t_j) = x_j, x^{±i}(t_j) = x_j ± ε·e_i, x_{n+1}(t_j) = L(x_j)."""
    x_j = np.asarray(x_j, dtype=float).reshape(-1)
    return AugmentedState(
        nominal=x_j.copy(),
        perturbed=perturbed_initial_conditions(x_j, spec.epsilon),
        running_cost=float(terminal_cost(x_j, spec.Qf)),
    )


def _vector(z):
    return z.to_vector() if isinstance(z, AugmentedState) else np.asarray(z, dtype=float)


def _gain(K):
    return np.asarray(K.entries if isinstance(K, GainMatrix) else K, dtype=float)


def _substates(z, n):
    return z[:-1].reshape(2 * n + 1, n)


def build_H(sys, spec, K, zeta, t, z):
    """ℍ(t, z, K): vector de la misma dimensión que z."""
    n = sys.n
    Kmat = _gain(K)
    z = _vector(z)
    S = _substates(z, n)
    F = eval_closed_loop(sys, S, Kmat)
    x = S[0]
    obs = observability_sum(output_at(sys, S[1:]), spec.epsilon)
    gamma = x @ stage_weight(Kmat, spec) @ x - np.exp(-t) * sat(obs, float(zeta))
    ldot = x @ (spec.Qf + spec.Qf.T) @ F[0]
    return np.concatenate([F.reshape(-1), [gamma + ldot]])


def hamiltonian_jacobians(sys, spec, K, zeta, t, z):
    """(∂ℍ/∂z, ∂ℍ/∂K) densos, armados por bloques."""
    n, p = sys.n, sys.p
    Kmat = _gain(K)
    z = _vector(z)
    S = _substates(z, n)
    d = len(z)
    G = control_matrix(sys, S)
    Acl = closed_loop_jacobian(sys, S, Kmat, G)
    F = eval_closed_loop(sys, S, Kmat)

    Hz = np.zeros((d, d))
    HK = np.zeros((d, p * n))
    for s in range(2 * n + 1):
        rows = slice(s * n, (s + 1) * n)
        Hz[rows, rows] = Acl[s]
        HK[rows] = np.einsum("ia,b->iab", G[s], S[s]).reshape(n, p * n)

    x = S[0]
    M = stage_weight(Kmat, spec)
    Qs = spec.Qf + spec.Qf.T
    Hz[-1, :n] = (M + M.T) @ x + Acl[0].T @ (Qs @ x) + Qs @ F[0]

    Y = output_at(sys, S[1:])
    obs = observability_sum(Y, spec.epsilon)
    slope = np.exp(-t) * sat_derivative(obs, float(zeta))
    if slope != 0.0:
        D = output_differences(Y)  # (n, m)
        Jh = output_jacobian(sys, S[1:])  # (2n, m, n)
        c = 1.0 / (4.0 * spec.epsilon**2)
        for i in range(n):
            plus = Jh[2 * i].T @ D[i]
            minus = Jh[2 * i + 1].T @ D[i]
            Hz[-1, (2 * i + 1) * n:(2 * i + 2) * n] = -slope * 2.0 * c * plus
            Hz[-1, (2 * i + 2) * n:(2 * i + 3) * n] = slope * 2.0 * c * minus

    HK[-1] = (
        (spec.R + spec.R.T) @ Kmat @ np.outer(x, x)
        + np.outer(G[0].T @ (Qs @ x), x)
    ).reshape(-1)
    return Hz, HK


def hamiltonian_jacobians_fd(sys, spec, K, zeta, t, z, step=FD_STEP):
    """Diferencias centrales de build_H (oráculo)."""
    Kmat = _gain(K)
    z = _vector(z)
    d, pn = len(z), Kmat.size
    Hz = np.zeros((d, d))
    for k in range(d):
        h = step * (1.0 + abs(z[k]))
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        Hz[:, k] = (build_H(sys, spec, Kmat, zeta, t, zp) - build_H(sys, spec, Kmat, zeta, t, zm)) / (2 * h)
    HK = np.zeros((d, pn))
    flat = Kmat.reshape(-1)
    for k in range(pn):
        h = step * (1.0 + abs(flat[k]))
        Kp, Km = flat.copy(), flat.copy()
        Kp[k] += h
        Km[k] -= h
        HK[:, k] = (
            build_H(sys, spec, Kp.reshape(Kmat.shape), zeta, t, z)
            - build_H(sys, spec, Km.reshape(Kmat.shape), zeta, t, z)
        ) / (2 * h)
    return Hz, HK


def sensitivity_rhs(sys, spec, K, zeta, t, z, Xbar):
    """dX̄/dt = (∂ℍ/∂z)·X̄ + ∂ℍ/∂K."""
    Hz, HK = hamiltonian_jacobians(sys, spec, K, zeta, t, z)
    return Hz @ np.asarray(Xbar, dtype=float) + HK


def _check_segment(segment):
    t0, t1 = (float(v) for v in segment)
    if not t0 < t1:
        raise ValidationError(f"segment must satisfy t_j < t_(j+1), got [{t0}, {t1})", field="plan")
    return t0, t1


def integrate_augmented(sys, spec, K, segment, z0, cfg=None, zeta=None):
    """Integra ℍ sobre el tramo; devuelve (estado aumentado final, J)."""
    t0, t1 = _check_segment(segment)
    Kmat = _gain(K)
    zeta = _resolve_zeta(spec, zeta)
    traj = integrate(lambda t, z: build_H(sys, spec, Kmat, zeta, t, z), _vector(z0), t0, t1, cfg)
    z_end = traj.states[-1]
    return AugmentedState.from_vector(z_end, sys.n), float(z_end[-1])


def _resolve_zeta(spec, zeta):
    if zeta is not None:
        return float(zeta)
    value = getattr(spec.zeta_policy, "value", None)
    if value is None:
        raise ValidationError("zeta must be given explicitly under the decay rule", field="cost.zeta")
    return float(value)


def cost_and_gradient(sys, spec, K, segment, z0, cfg=None, zeta=None):
    """Co-integra ℍ y las sensibilidades; devuelve (J, ∂J/∂K en orden fila-mayor)."""
    t0, t1 = _check_segment(segment)
    cfg = cfg or IntegratorConfig()
    Kmat = _gain(K)
    zeta = _resolve_zeta(spec, zeta)
    z0 = _vector(z0)
    pn = Kmat.size

    def rhs(t, C):
        z, X = C[:, 0], C[:, 1:]
        return np.column_stack([
            build_H(sys, spec, Kmat, zeta, t, z),
            sensitivity_rhs(sys, spec, Kmat, zeta, t, z, X),
        ])

    C0 = np.column_stack([z0, np.zeros((len(z0), pn))])
    grid = time_grid(t0, t1, cfg.dt)
    C_end = integrate_on_grid(rhs, C0, grid)[-1]
    return float(C_end[-1, 0]), C_end[-1, 1:].copy()


def gradient(sys, spec, K, segment, z0, cfg=None, zeta=None):
    return cost_and_gradient(sys, spec, K, segment, z0, cfg, zeta)[1]


def fd_gradient(sys, spec, K, segment, z0, cfg=None, zeta=None, delta=1e-5):
    """Diferencia central de J sobre cada entrada de K."""
    if not delta > 0:
        raise ValidationError(f"delta must be > 0, got {delta}", field="delta")
    Kmat = _gain(K)
    flat = Kmat.reshape(-1)
    g = np.zeros(flat.size)
    for k in range(flat.size):
        Kp, Km = flat.copy(), flat.copy()
        Kp[k] += delta
        Km[k] -= delta
        Jp = integrate_augmented(sys, spec, Kp.reshape(Kmat.shape), segment, z0, cfg, zeta)[1]
        Jm = integrate_augmented(sys, spec, Km.reshape(Kmat.shape), segment, z0, cfg, zeta)[1]
        g[k] = (Jp - Jm) / (2.0 * delta)
    return g


@dataclass(frozen=True)
class SegmentRollout:
    """Registro completo de un tramo sobre la malla del integrador."""

    times: np.ndarray
    states: np.ndarray
    perturbed: np.ndarray
    controls: np.ndarray
    running_cost: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    observability: np.ndarray
    gamma: np.ndarray
    ldot: np.ndarray
    zeta: float
    gain: np.ndarray
    J: float
    final_state: Optional[AugmentedState] = None

    def quadrature_cost(self, Qf):
        """∫Γ dt por Simpson + L(x(t_{j+1})) sobre la misma malla."""
        return float(simpson(self.gamma, x=self.times)) + float(terminal_cost(self.states[-1], Qf))


def rollout_segment(sys, spec, K, segment, z0, cfg=None, zeta=None):
    t0, t1 = _check_segment(segment)
    Kmat = _gain(K)
    zeta = _resolve_zeta(spec, zeta)
    n = sys.n
    traj = integrate(lambda t, z: build_H(sys, spec, Kmat, zeta, t, z), _vector(z0), t0, t1, cfg)
    Z = traj.states
    S = Z[:, :-1].reshape(len(Z), 2 * n + 1, n)
    X, P = S[:, 0], S[:, 1:]
    U = X @ Kmat.T
    F = eval_closed_loop(sys, X, Kmat)
    obs = np.atleast_1d(observability_sum(output_at(sys, P), spec.epsilon))
    reward = np.exp(-traj.times) * np.minimum(obs, zeta)
    stage = np.einsum("ti,ij,tj->t", X, spec.Q, X) + np.einsum("ti,ij,tj->t", U, spec.R, U)
    ldot = np.einsum("ti,ij,tj->t", X, spec.Qf + spec.Qf.T, F)
    return SegmentRollout(
        times=traj.times,
        states=X,
        perturbed=P,
        controls=U,
        running_cost=Z[:, -1],
        l1=stage,
        l2=reward,
        observability=obs,
        gamma=stage - reward,
        ldot=ldot,
        zeta=zeta,
        gain=Kmat.copy(),
        J=float(Z[-1, -1]),
        final_state=AugmentedState.from_vector(Z[-1], n),
    )
