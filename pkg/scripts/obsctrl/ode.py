# scripts/obsctrl/ode.py
"""
INTEGRACIÓN DE PASO FIJO (RK4)
==============================

Runge-Kutta clásico de orden 4 sobre una malla uniforme:
- El último paso se acorta para terminar exactamente en t1
- La trayectoria incluye ambos extremos
- El estado puede tener cualquier forma (lotes de trayectorias, estado
  aumentado junto con su bloque de sensibilidades)

Sin control de error ni detección de eventos: la misma malla se usa para
el estado aumentado y para las sensibilidades, así el gradiente corresponde
al costo discretizado.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from obsctrl.errors import DivergenceError, DomainError, ValidationError, with_time
from obsctrl.model import Trajectory

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = DEFAULT_DT
    method: str = "rk4"

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValidationError(f"integrator dt must be > 0, got {self.dt}", field="integrator.dt")
        if self.method != "rk4":
            raise ValidationError(
                f"unsupported integrator method '{self.method}' (only rk4)", field="integrator.method"
            )


def time_grid(t0, t1, dt):
    """t0, t0+dt, ..., t1 con el último paso acortado."""
    t0, t1 = float(t0), float(t1)
    if not t0 < t1:
        raise ValidationError(f"integration interval must satisfy t0 < t1, got [{t0}, {t1}]", field="interval")
    steps = int(math.floor((t1 - t0) / dt * (1.0 + 1e-12)))
    grid = t0 + dt * np.arange(steps + 1, dtype=float)
    if t1 - grid[-1] <= 1e-9 * dt and len(grid) > 1:
        grid[-1] = t1
    else:
        grid = np.append(grid, t1)
    return grid


def rk4_step(f, t, z, h):
    k1 = f(t, z)
    k2 = f(t + 0.5 * h, z + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, z + 0.5 * h * k2)
    k4 = f(t + h, z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_on_grid(f, z0, grid):
    """Integra sobre una malla dada; devuelve el array (len(grid), *z0.shape)."""
    z = np.array(z0, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DivergenceError("initial state is not finite", time=float(grid[0]))
    out = np.empty((len(grid),) + z.shape)
    out[0] = z
    for k in range(len(grid) - 1):
        t, h = grid[k], grid[k + 1] - grid[k]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                z = rk4_step(f, t, z, h)
        except DomainError as exc:
            raise with_time(exc, t)
        if not np.all(np.isfinite(z)):
            logger.debug("Estado no finito en t=%.6g", grid[k + 1])
            raise DivergenceError(
                f"state became non-finite at t={grid[k + 1]:.6g}", time=float(grid[k + 1])
            )
        out[k + 1] = z
    return out


def integrate(f, z0, t0, t1, cfg=None):
    """Integra ż = f(t, z) en [t0, t1]; devuelve la Trajectory completa."""
    cfg = cfg or IntegratorConfig()
    grid = time_grid(t0, t1, cfg.dt)
    try:
        f0 = f(grid[0], np.asarray(z0, dtype=float))
    except DomainError as exc:
        raise with_time(exc, grid[0])
    if not np.all(np.isfinite(f0)):
        raise DivergenceError(f"right-hand side is not finite at t={grid[0]:.6g}", time=float(grid[0]))
    return Trajectory(grid, integrate_on_grid(f, z0, grid))
