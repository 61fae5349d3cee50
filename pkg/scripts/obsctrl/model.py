# scripts/obsctrl/model.py
"""
SISTEMAS AFINES EN EL CONTROL
=============================

    ẋ = f0(x) + Σ_i f_i(x)·u_i,    y = h(x)

Define el sistema, la ganancia por tramo (u = K x) y la trayectoria, y
evalúa dinámica en lazo abierto/cerrado y salidas.

Los campos pueden ser callables arbitrarios que reciben un estado (n,).
Si el sistema se marca `vectorized=True` los callables aceptan además
lotes (..., n); así las 2n trayectorias perturbadas se integran como un
solo array. Los sistemas internos y los declarados por expresiones son
vectorizados.

Los sistemas son inmutables y las evaluaciones puras: se pueden compartir
entre hilos sin copia.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from obsctrl.errors import DomainError, OutputDomainError, ValidationError

logger = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True)
class ControlAffineSystem:
    n: int
    p: int
    m: int
    drift: Callable
    control_fields: Tuple[Callable, ...]
    output: Callable
    name: str = "custom"
    vectorized: bool = False
    drift_jacobian: Optional[Callable] = None
    control_jacobians: Optional[Tuple[Callable, ...]] = None
    output_jacobian: Optional[Callable] = None
    linear_matrices: Optional[tuple] = field(default=None, compare=False)
    sample_point: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.m < 1:
            raise ValidationError(
                f"system dimensions must be >= 1 (n={self.n}, p={self.p}, m={self.m})",
                field="system",
            )
        object.__setattr__(self, "control_fields", tuple(self.control_fields))
        if len(self.control_fields) != self.p:
            raise ValidationError(
                f"expected {self.p} control fields, got {len(self.control_fields)}",
                field="system.control_fields",
            )
        if self.control_jacobians is not None:
            object.__setattr__(self, "control_jacobians", tuple(self.control_jacobians))
        self._check_sample_point()

    def _check_sample_point(self):
        sample_point = self.sample_point
        if sample_point is None:
            sample_point = 0.7 + 0.1 * np.arange(self.n, dtype=float)
        sample_point = np.asarray(sample_point, dtype=float)
        try:
            self._check_shapes(sample_point)
        except ValueError as exc:
            raise ValidationError(f"system maps have inconsistent shapes: {exc}", field="system") from exc

    def _check_shapes(self, sample_point):
        if drift_at(self, sample_point).shape != (self.n,):
            raise ValidationError("drift must map R^n -> R^n", field="system.drift")
        if control_matrix(self, sample_point).shape != (self.n, self.p):
            raise ValidationError("control fields must map R^n -> R^n", field="system.control_fields")
        if output_at(self, sample_point).shape != (self.m,):
            raise ValidationError(f"output must map R^n -> R^{self.m}", field="system.output")


@dataclass(frozen=True)
class GainMatrix:
    """Ganancia K (p×n) válida en [t_j, t_{j+1})."""

    entries: np.ndarray
    valid_interval: Tuple[float, float] = (0.0, np.inf)

    def __post_init__(self):
        K = np.array(self.entries, dtype=float)
        if K.ndim == 1:
            K = K.reshape(1, -1)
        if K.ndim != 2:
            raise ValidationError(f"gain must be a p×n matrix, got shape {K.shape}", field="gain")
        if not np.all(np.isfinite(K)):
            raise ValidationError("gain entries must be finite", field="gain")
        t0, t1 = (float(v) for v in self.valid_interval)
        if not t0 < t1:
            raise ValidationError(f"empty gain interval [{t0}, {t1})", field="gain.valid_interval")
        K.setflags(write=False)
        object.__setattr__(self, "entries", K)
        object.__setattr__(self, "valid_interval", (t0, t1))

    @property
    def shape(self):
        return self.entries.shape

    @property
    def flat(self):
        """Entradas en orden fila-mayor (k_11, k_12, ..., k_pn)."""
        return self.entries.reshape(-1).copy()

    def with_entries(self, entries):
        return GainMatrix(np.asarray(entries, dtype=float).reshape(self.shape), self.valid_interval)

    def on(self, interval):
        return GainMatrix(self.entries, interval)

    def active_at(self, t):
        t0, t1 = self.valid_interval
        return t0 <= t < t1


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: Optional[np.ndarray] = None
    outputs: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if times.ndim != 1 or len(times) < 1:
            raise ValidationError("trajectory times must be a nonempty 1-D grid", field="trajectory.times")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("trajectory times must be strictly increasing", field="trajectory.times")
        for name in ("states", "controls", "outputs"):
            arr = states if name == "states" else getattr(self, name)
            if arr is not None and len(arr) != len(times):
                raise ValidationError(
                    f"trajectory {name} has {len(arr)} samples for {len(times)} times",
                    field=f"trajectory.{name}",
                )
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.times)

    @property
    def final_state(self):
        return self.states[-1]

    def interpolate(self, t):
        """Salida densa por interpolación lineal (sólo para gráficas)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        flat = self.states.reshape(len(self.times), -1)
        cols = [np.interp(t, self.times, flat[:, k]) for k in range(flat.shape[1])]
        return np.stack(cols, axis=-1).reshape((len(t),) + self.states.shape[1:])


# ---------------------------------------------------------------------------
# Evaluación por lotes
# ---------------------------------------------------------------------------

def _apply(sys, fn, X, tail):
    X = np.asarray(X, dtype=float)
    lead = X.shape[:-1]
    if sys.vectorized:
        out = np.asarray(fn(X), dtype=float)
        return np.array(np.broadcast_to(out, lead + tail))
    flat = X.reshape(-1, sys.n)
    rows = [np.asarray(fn(row), dtype=float).reshape(tail) for row in flat]
    if not rows:
        return np.zeros(lead + tail)
    return np.stack(rows).reshape(lead + tail)


def drift_at(sys, X):
    return _apply(sys, sys.drift, X, (sys.n,))


def control_matrix(sys, X):
    """Columnas f_1(x), ..., f_p(x): forma (..., n, p)."""
    cols = [_apply(sys, fi, X, (sys.n,)) for fi in sys.control_fields]
    return np.stack(cols, axis=-1)


def output_at(sys, X):
    try:
        Y = _apply(sys, sys.output, X, (sys.m,))
    except OutputDomainError:
        raise
    except DomainError as exc:
        raise OutputDomainError(f"output map outside its domain: {exc.message}", detail=exc.detail) from exc
    if not np.all(np.isfinite(Y)):
        raise OutputDomainError("output map returned a non-finite value", detail=sys.name)
    return Y


def _check_dims(sys, x, u=None):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (sys.n,):
        raise ValidationError(f"state must have dimension {sys.n}, got shape {x.shape}", field="x")
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (sys.p,):
            raise ValidationError(f"input must have dimension {sys.p}, got shape {u.shape}", field="u")
    return x, u


def _finite(value, what):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{what} evaluated to a non-finite value", detail=what)
    return value


def eval_dynamics(sys, x, u):
    """f0(x) + Σ f_i(x) u_i."""
    x, u = _check_dims(sys, x, u)
    xdot = drift_at(sys, x) + np.einsum("...np,...p->...n", control_matrix(sys, x), u)
    return _finite(xdot, "dynamics")


def eval_closed_loop(sys, x, K):
    """eval_dynamics(sys, x, K x)."""
    Kmat = K.entries if isinstance(K, GainMatrix) else np.asarray(K, dtype=float)
    if Kmat.shape != (sys.p, sys.n):
        raise ValidationError(f"gain must be {sys.p}×{sys.n}, got {Kmat.shape}", field="gain")
    x, _ = _check_dims(sys, x)
    return eval_dynamics(sys, x, x @ Kmat.T)


def eval_output(sys, x):
    x, _ = _check_dims(sys, x)
    return output_at(sys, x)


def closed_loop_rhs(sys, K):
    """Lado derecho (t, X) -> Ẋ para u = K x; X admite lotes."""
    Kmat = K.entries if isinstance(K, GainMatrix) else np.asarray(K, dtype=float)

    def rhs(t, X):
        return eval_dynamics(sys, X, X @ Kmat.T)

    return rhs


def signal_rhs(sys, u_of_t):
    """Lado derecho con una señal de control fija u(t) (lazo abierto)."""

    def rhs(t, X):
        u = np.broadcast_to(np.asarray(u_of_t(t), dtype=float), X.shape[:-1] + (sys.p,))
        return eval_dynamics(sys, X, u)

    return rhs


# ---------------------------------------------------------------------------
# Jacobianos
# ---------------------------------------------------------------------------

def _fd_jacobian(sys, fn, X, out_dim):
    """Diferencia central con paso 1e-6·(1+|x_i|); devuelve (..., out, n)."""
    X = np.asarray(X, dtype=float)
    h = FD_STEP * (1.0 + np.abs(X))
    eye = np.eye(sys.n)
    Xp = X[..., None, :] + h[..., None, :] * eye
    Xm = X[..., None, :] - h[..., None, :] * eye
    diff = _apply(sys, fn, Xp, (out_dim,)) - _apply(sys, fn, Xm, (out_dim,))
    J = diff / (2.0 * h[..., :, None])
    return np.swapaxes(J, -1, -2)


def drift_jacobian(sys, X):
    if sys.drift_jacobian is not None:
        return _apply(sys, sys.drift_jacobian, X, (sys.n, sys.n))
    return _fd_jacobian(sys, sys.drift, X, sys.n)


def control_jacobians(sys, X):
    """∂f_a/∂x apilados: forma (..., n, p, n)."""
    X = np.asarray(X, dtype=float)
    blocks = []
    for a, fa in enumerate(sys.control_fields):
        if sys.control_jacobians is not None:
            Ja = _apply(sys, sys.control_jacobians[a], X, (sys.n, sys.n))
        else:
            Ja = _fd_jacobian(sys, fa, X, sys.n)
        blocks.append(Ja)
    return np.stack(blocks, axis=-2)


def output_jacobian(sys, X):
    X = np.asarray(X, dtype=float)
    if sys.output_jacobian is not None:
        J = _apply(sys, sys.output_jacobian, X, (sys.m, sys.n))
    else:
        J = _fd_jacobian(sys, lambda Z: output_at(sys, Z) if sys.vectorized else sys.output(Z), X, sys.m)
    if not np.all(np.isfinite(J)):
        raise OutputDomainError("output Jacobian is not finite", detail=sys.name)
    return J


def closed_loop_jacobian(sys, X, K, G=None):
    """∂/∂x de f0(x) + G(x) K x; forma (..., n, n)."""
    Kmat = K.entries if isinstance(K, GainMatrix) else np.asarray(K, dtype=float)
    X = np.asarray(X, dtype=float)
    if G is None:
        G = control_matrix(sys, X)
    U = X @ Kmat.T
    return (
        drift_jacobian(sys, X)
        + np.einsum("...nam,...a->...nm", control_jacobians(sys, X), U)
        + G @ Kmat
    )


def linearize(sys, x):
    """(A, B) de la linealización jacobiana en x."""
    x, _ = _check_dims(sys, x)
    A = np.array(drift_jacobian(sys, x))
    B = np.array(control_matrix(sys, x))
    return A, B


# ---------------------------------------------------------------------------
# Sistemas incluidos
# ---------------------------------------------------------------------------

def _bearing_output(X):
    X = np.asarray(X, dtype=float)
    x1 = X[..., 0]
    if np.any(x1 == 0):
        raise OutputDomainError("bearing output y = x2/x1 undefined at x1 = 0", detail="x2/x1")
    return (X[..., 1] / x1)[..., None]


def _bearing_output_jacobian(X):
    X = np.asarray(X, dtype=float)
    x1, x2 = X[..., 0], X[..., 1]
    if np.any(x1 == 0):
        raise OutputDomainError("bearing Jacobian undefined at x1 = 0", detail="x2/x1")
    return np.stack([-x2 / x1**2, 1.0 / x1], axis=-1)[..., None, :]


def holonomic_bearing():
    """ẋ1 = u1, ẋ2 = u2 con medida de rumbo y = x2/x1."""
    zero_field = lambda X: np.zeros(np.shape(X))
    zero_jac = lambda X: np.zeros(np.shape(X)[:-1] + (2, 2))

    def unit(i):
        e = np.eye(2)[i]
        return lambda X: np.broadcast_to(e, np.shape(X)).copy()

    return ControlAffineSystem(
        n=2, p=2, m=1,
        drift=zero_field,
        control_fields=(unit(0), unit(1)),
        output=_bearing_output,
        name="holonomic_bearing",
        vectorized=True,
        drift_jacobian=zero_jac,
        control_jacobians=(zero_jac, zero_jac),
        output_jacobian=_bearing_output_jacobian,
        linear_matrices=(np.zeros((2, 2)), np.eye(2), None),
    )


def linear_system(A, B, C, name="linear"):
    """ẋ = A x + B u, y = C x."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValidationError(f"A must be square, got {A.shape}", field="system.A")
    if B.shape[0] != n:
        raise ValidationError(f"B must have {n} rows, got {B.shape}", field="system.B")
    if C.shape[1] != n:
        raise ValidationError(f"C must have {n} columns, got {C.shape}", field="system.C")
    p, m = B.shape[1], C.shape[0]

    def column(a):
        b = B[:, a].copy()
        return lambda X: np.broadcast_to(b, np.shape(X)).copy()

    def const(M):
        return lambda X: np.broadcast_to(M, np.shape(X)[:-1] + M.shape)

    zeros = np.zeros((n, n))
    return ControlAffineSystem(
        n=n, p=p, m=m,
        drift=lambda X: np.asarray(X) @ A.T,
        control_fields=tuple(column(a) for a in range(p)),
        output=lambda X: np.asarray(X) @ C.T,
        name=name,
        vectorized=True,
        drift_jacobian=const(A),
        control_jacobians=tuple(const(zeros) for _ in range(p)),
        output_jacobian=const(C),
        linear_matrices=(A, B, C),
    )


def as_gain(K, sys=None, interval=(0.0, np.inf)):
    gain = K if isinstance(K, GainMatrix) else GainMatrix(np.asarray(K, dtype=float), interval)
    if sys is not None and gain.shape != (sys.p, sys.n):
        raise ValidationError(f"gain must be {sys.p}×{sys.n}, got {gain.shape}", field="gain")
    return gain


def simulate_closed_loop(sys, K, x0, t0, t1, cfg=None):
    """Lazo cerrado u = K x sobre [t0, t1]; trayectoria con controles."""
    from obsctrl.ode import integrate

    Kmat = as_gain(K, sys).entries
    x0, _ = _check_dims(sys, x0)
    traj = integrate(closed_loop_rhs(sys, Kmat), x0, t0, t1, cfg)
    return Trajectory(traj.times, traj.states, controls=traj.states @ Kmat.T)


def piecewise_closed_loop(sys, gains, x0, t0, t1, cfg=None):
    """Integra u = K_j x cambiando de ganancia en los bordes de cada intervalo.

    x0 puede ser un lote (..., n). Devuelve (times, states, controls); el
    estado final de cada tramo es exactamente el inicial del siguiente.
    """
    from obsctrl.ode import integrate

    x0, _ = _check_dims(sys, x0)
    t0, t1 = float(t0), float(t1)
    if t1 == t0:
        return np.array([t0]), x0[None].copy(), None
    ordered = sorted((as_gain(g, sys) for g in gains), key=lambda g: g.valid_interval[0])
    times, states, controls = [], [], []
    cursor, x = t0, x0
    for gain in ordered:
        a, b = gain.valid_interval
        a, b = max(a, t0), min(b, t1)
        if b <= a or b <= cursor:
            continue
        if a > cursor + 1e-12:
            break
        piece = integrate(closed_loop_rhs(sys, gain), x, cursor, b, cfg)
        skip = 1 if times else 0
        times.append(piece.times[skip:])
        states.append(piece.states[skip:])
        controls.append(piece.states[skip:] @ gain.entries.T)
        cursor, x = b, piece.states[-1]
        if cursor >= t1:
            break
    if cursor < t1 - 1e-12:
        raise ValidationError(
            f"gains do not cover [{t0}, {t1}); coverage stops at t={cursor}", field="gains"
        )
    return np.concatenate(times), np.concatenate(states), np.concatenate(controls)
