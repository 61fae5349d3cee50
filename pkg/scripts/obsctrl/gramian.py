# scripts/obsctrl/gramian.py
"""
GRAMIANO EMPÍRICO DE OBSERVABILIDAD
===================================

    W_ij = 1/(4ε²) ∫_0^tf (y^{+i} - y^{-i})ᵀ (y^{+j} - y^{-j}) dt

- Las 2n trayectorias perturbadas x0 ± ε·e_i se integran como un solo lote
- Cada perturbada evoluciona bajo la MISMA política: ganancia única,
  ganancias por tramos o una señal de control fija u(t)
- Regla del trapecio sobre la malla del integrador (la misma del costo); W se simetriza
- Índice de observabilidad = traza de W

Incluye además el gramiano lineal exacto (oráculo para pruebas) y el
determinante de la matriz de observabilidad del sistema holonómico con
medida de rumbo.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import expm

from obsctrl.errors import OutputDomainError, ValidationError
from obsctrl.model import GainMatrix, output_at, piecewise_closed_loop, signal_rhs
from obsctrl.ode import IntegratorConfig, integrate

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.01
PSD_RTOL = 1e-10


@dataclass(frozen=True)
class GramianResult:
    W: np.ndarray
    epsilon: float
    horizon: float
    trace_index: float
    policy: str = "gain"

    @cached_property
    def eigenvalues(self):
        return np.linalg.eigvalsh(self.W)

    @property
    def min_eigenvalue(self):
        return float(self.eigenvalues[0])

    @property
    def determinant(self):
        return float(np.prod(self.eigenvalues))

    @property
    def trace_inverse(self):
        if self.eigenvalues[0] <= 0:
            return float("inf")
        return float(np.sum(1.0 / self.eigenvalues))

    @cached_property
    def singular_values(self):
        return np.linalg.svd(self.W, compute_uv=False)

    @property
    def singular_value_ratio(self):
        """σ_min/σ_max (0 si W = 0)."""
        s = self.singular_values
        return float(s[-1] / s[0]) if s[0] > 0 else 0.0

    @property
    def is_psd(self):
        scale = np.linalg.norm(self.W)
        return self.min_eigenvalue >= -PSD_RTOL * scale

    def diagnostics(self):
        return {
            "trace_index": self.trace_index,
            "eigenvalues": self.eigenvalues.tolist(),
            "min_eigenvalue": self.min_eigenvalue,
            "determinant": self.determinant,
            "trace_inverse": self.trace_inverse,
            "singular_values": self.singular_values.tolist(),
            "singular_value_ratio": self.singular_value_ratio,
        }


def perturbed_initial_conditions(x0, epsilon):
    """x0 ± ε·e_i en el orden (+1, -1, +2, -2, ...): array (2n, n)."""
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be > 0, got {epsilon}", field="cost.epsilon")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = len(x0)
    out = np.repeat(x0[None, :], 2 * n, axis=0)
    for i in range(n):
        out[2 * i, i] += epsilon
        out[2 * i + 1, i] -= epsilon
    return out


def output_differences(Y):
    """h(x^{+i}) - h(x^{-i}) a partir de salidas (..., 2n, m): forma (..., n, m)."""
    return Y[..., 0::2, :] - Y[..., 1::2, :]


def _outputs_along(sys, times, states):
    try:
        return output_at(sys, states)
    except OutputDomainError as exc:
        for k, t in enumerate(times):
            try:
                output_at(sys, states[k])
            except OutputDomainError:
                exc.time = float(t)
                exc.context["time"] = float(t)
                break
        raise


def _perturbed_run(sys, policy, X0, t0, t_f, cfg):
    if callable(policy) and not isinstance(policy, GainMatrix):
        traj = integrate(signal_rhs(sys, policy), X0, t0, t_f, cfg)
        return traj.times, traj.states, "signal"
    if isinstance(policy, (list, tuple)):
        times, states, _ = piecewise_closed_loop(sys, policy, X0, t0, t_f, cfg)
        return times, states, "piecewise"
    gain = policy if isinstance(policy, GainMatrix) else GainMatrix(np.asarray(policy, dtype=float))
    times, states, _ = piecewise_closed_loop(sys, [gain.on((t0, np.inf))], X0, t0, t_f, cfg)
    return times, states, "gain"


def empirical_gramian(sys, policy, x0, epsilon=DEFAULT_EPSILON, t_f=5.0, cfg=None, t0=0.0):
    """Gramiano empírico de observabilidad sobre [t0, t_f].

    `policy` es una GainMatrix (o matriz p×n), una lista de GainMatrix que
    se conmutan en sus bordes, o un callable u(t) aplicado en lazo abierto.
    """
    cfg = cfg or IntegratorConfig()
    if not t_f > t0:
        raise ValidationError(f"horizon must exceed t0, got t_f={t_f}", field="horizon")
    X0 = perturbed_initial_conditions(x0, epsilon)
    times, states, kind = _perturbed_run(sys, policy, X0, t0, t_f, cfg)
    D = output_differences(_outputs_along(sys, times, states))
    integrand = np.einsum("tim,tjm->tij", D, D)
    scale = 1.0 / (4.0 * epsilon**2)
    W = scale * trapezoid(integrand, x=times, axis=0)
    W = 0.5 * (W + W.T)
    index = scale * float(trapezoid(np.einsum("tim,tim->t", D, D), x=times))
    result = GramianResult(W=W, epsilon=float(epsilon), horizon=float(t_f), trace_index=index, policy=kind)
    if not result.is_psd:
        logger.warning("Gramiano no PSD: autovalor mínimo %.3e", result.min_eigenvalue)
    logger.debug("Gramiano (%s) traza=%.6g σ-ratio=%.3e", kind, index, result.singular_value_ratio)
    return result


def trace_index(g):
    return float(g.trace_index)


def linear_gramian(A, C, t_f):
    """∫_0^tf e^{Aᵀt} Cᵀ C e^{At} dt exacto por exponencial de matriz por bloques."""
    if not t_f > 0:
        raise ValidationError(f"t_f must be > 0, got {t_f}", field="horizon")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A.T
    M[:n, n:] = C.T @ C
    M[n:, n:] = A
    E = expm(M * t_f)
    W = E[n:, n:].T @ E[:n, n:]
    return 0.5 * (W + W.T)


def bearing_obs_det(x, u):
    """det(d𝒪) = (1/x1³)(u2 - (x2/x1) u1) = (u2·x1 - x2·u1)/x1⁴ para ẋ = u, y = x2/x1."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    if np.any(x1 == 0):
        raise OutputDomainError("observability determinant undefined at x1 = 0", detail="x2/x1")
    det = (u[..., 1] * x1 - x2 * u[..., 0]) / x1**4
    return float(det) if np.ndim(det) == 0 else det


def obs_det_trace(traj):
    """bearing_obs_det en cada punto de una trayectoria con controles."""
    if traj.controls is None:
        raise ValidationError("trajectory has no controls", field="trajectory.controls")
    return np.asarray(bearing_obs_det(traj.states, traj.controls), dtype=float).reshape(-1)


def signal_from_trajectory(traj):
    """u(t) por interpolación lineal de los controles registrados (repetición de entrada)."""
    if traj.controls is None:
        raise ValidationError("trajectory has no controls", field="trajectory.controls")
    times = traj.times
    U = np.asarray(traj.controls, dtype=float)

    def u_of_t(t):
        return np.array([np.interp(t, times, U[:, a]) for a in range(U.shape[1])])

    return u_of_t
