# scripts/obsctrl/scenarios.py
"""
ESCENARIOS (TOML)
=================

Formato versionado (`schema_version = 1`), matrices como listas de filas:

    schema_version = 1
    name = "holonomic_bearing"
    x0 = [-1.0, 2.0]

    [system]            builtin = "holonomic_bearing" | "linear" (A, B, C)
                        o por expresiones: n, p, drift, control_fields, output
    [cost]              Q, R, Qf (obligatorias), epsilon, zeta_policy, zeta, beta
    [plan]              t_f + segment_length, o boundaries
    [optimizer]         mu0, grad_tol, max_iters, psd_tol
    [integrator]        dt
    [controller]        K0 (opcional: ganancia inicial / línea base)
    [gramian]           horizon, gain ("lqr" o matriz)
    [compare]           gramian_horizon, replay_horizon, replay_epsilon
    [outputs]           directory, formats

Defaults: ε = 0.01, dt = 1e-3 (o OBSCTRL_DT), μ0 = 0.1, grad_tol = 1e-4,
max_iters = 200. Todo valor resuelto va al manifest.
"""

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from obsctrl.cost import CostSpec, DecayRule, FixedZeta
from obsctrl.errors import ObsCtrlError, ValidationError
from obsctrl.expr import expression_system
from obsctrl.model import holonomic_bearing, linear_system
from obsctrl.ode import DEFAULT_DT, IntegratorConfig
from obsctrl.optimizer import OptimizerConfig
from obsctrl.synthesis import SegmentPlan

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BUILTINS = ("holonomic_bearing", "linear")
FORMATS = ("csv", "json", "svg")

DEFAULTS = {
    "epsilon": 0.01,
    "dt": DEFAULT_DT,
    "mu0": 0.1,
    "grad_tol": 1e-4,
    "max_iters": 200,
    "psd_tol": 1e-8,
    "gramian_horizon": 5.0,
    "replay_horizon": 1.0,
    "replay_epsilon": 1e-3,
}


@dataclass(frozen=True)
class OutputsConfig:
    directory: Optional[Path]
    formats: tuple = FORMATS


@dataclass(frozen=True)
class Scenario:
    name: str
    path: Optional[Path]
    system: Any
    x0: np.ndarray
    cost: CostSpec
    plan: SegmentPlan
    optimizer: OptimizerConfig
    integrator: IntegratorConfig
    outputs: OutputsConfig
    K0: Optional[np.ndarray] = None
    gramian_horizon: float = 5.0
    gramian_gain: Any = "lqr"
    compare: Dict[str, float] = field(default_factory=dict)
    resolved: Dict[str, Any] = field(default_factory=dict)

    def to_manifest(self):
        return {"scenario": self.name, "schema_version": SCHEMA_VERSION, **self.resolved}


# ---------------------------------------------------------------------------
# Lectura de valores
# ---------------------------------------------------------------------------

def _table(doc, key):
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ValidationError(f"[{key}] must be a table", field=key)
    return value


def _number(table, key, where, default=None, required=False):
    if key not in table:
        if required:
            raise ValidationError(f"{where}.{key} required", field=f"{where}.{key}")
        return default
    value = table[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}.{key} must be a number, got {value!r}", field=f"{where}.{key}")
    return float(value)


def _matrix(table, key, where, required=True):
    name = f"{where}.{key}"
    if key not in table:
        if required:
            raise ValidationError(f"{name} required", field=name)
        return None
    value = table[key]
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.array([[float(value)]])
    try:
        M = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a list of numeric rows", field=name)
    if M.ndim == 1:
        M = M.reshape(1, -1)
    if M.ndim != 2:
        raise ValidationError(f"{name} must be a matrix given as row lists", field=name)
    return M


def _vector(value, name):
    try:
        v = np.array(value, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a list of numbers", field=name)
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be finite", field=name)
    return v


def _count(table, key, where):
    name = f"{where}.{key}"
    value = table[key]
    numeric = isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value)
    if not numeric or value != int(value) or value < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}", field=name)
    return int(value)


def _text_list(value, name):
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValidationError(f"{name} must be a list of strings", field=name)
    return value


# ---------------------------------------------------------------------------
# Secciones
# ---------------------------------------------------------------------------

def _build_system(table):
    if not table:
        raise ValidationError("[system] required", field="system")
    builtin = table.get("builtin")
    if builtin == "holonomic_bearing":
        return holonomic_bearing(), {"builtin": builtin}
    if builtin == "linear":
        A = _matrix(table, "A", "system")
        B = _matrix(table, "B", "system")
        C = _matrix(table, "C", "system")
        return linear_system(A, B, C), {"builtin": builtin, "A": A.tolist(), "B": B.tolist(), "C": C.tolist()}
    if builtin is not None:
        raise ValidationError(
            f"unknown system.builtin {builtin!r} (expected one of {', '.join(BUILTINS)})", field="system.builtin"
        )
    for key in ("n", "p", "drift", "control_fields", "output"):
        if key not in table:
            raise ValidationError(f"system.{key} required", field=f"system.{key}")
    n, p = _count(table, "n", "system"), _count(table, "p", "system")
    drift = _text_list(table["drift"], "system.drift")
    fields = table["control_fields"]
    if not isinstance(fields, list):
        raise ValidationError("system.control_fields must be a list of lists", field="system.control_fields")
    fields = [_text_list(f, f"system.control_fields[{a}]") for a, f in enumerate(fields)]
    output = _text_list(table["output"], "system.output")
    name = str(table.get("name", "expression"))
    system = expression_system(n, p, drift, fields, output, name=name)
    return system, {"n": n, "p": p, "drift": drift, "control_fields": fields, "output": output, "name": name}


def _build_cost(table, t_f):
    Q = _matrix(table, "Q", "cost")
    R = _matrix(table, "R", "cost")
    Qf = _matrix(table, "Qf", "cost")
    epsilon = _number(table, "epsilon", "cost", DEFAULTS["epsilon"])
    policy_name = str(table.get("zeta_policy", "fixed"))
    if policy_name == "fixed":
        policy = FixedZeta(_number(table, "zeta", "cost", required=True))
    elif policy_name == "decay":
        policy = DecayRule(_number(table, "beta", "cost", required=True))
    else:
        raise ValidationError(
            f"cost.zeta_policy must be 'fixed' or 'decay', got {policy_name!r}", field="cost.zeta_policy"
        )
    spec = CostSpec(Q=Q, R=R, Qf=Qf, epsilon=epsilon, zeta_policy=policy, t_f=t_f)
    resolved = {"Q": Q.tolist(), "R": R.tolist(), "Qf": Qf.tolist(), "epsilon": epsilon, **policy.describe()}
    return spec, resolved


def _build_plan(table):
    if "boundaries" in table:
        plan = SegmentPlan(_vector(table["boundaries"], "plan.boundaries"))
        return plan, {"boundaries": plan.boundaries.tolist()}
    t_f = _number(table, "t_f", "plan", required=True)
    length = _number(table, "segment_length", "plan", default=t_f)
    plan = SegmentPlan.uniform(t_f, length)
    return plan, {"t_f": t_f, "segment_length": length, "boundaries": plan.boundaries.tolist()}


def _build_optimizer(table):
    cfg = OptimizerConfig(
        mu0=_number(table, "mu0", "optimizer", DEFAULTS["mu0"]),
        grad_tol=_number(table, "grad_tol", "optimizer", DEFAULTS["grad_tol"]),
        max_iters=_count(table, "max_iters", "optimizer") if "max_iters" in table else DEFAULTS["max_iters"],
        psd_tol=_number(table, "psd_tol", "optimizer", DEFAULTS["psd_tol"]),
    )
    return cfg, {"mu0": cfg.mu0, "grad_tol": cfg.grad_tol, "max_iters": cfg.max_iters, "psd_tol": cfg.psd_tol}


# ---------------------------------------------------------------------------
# Carga
# ---------------------------------------------------------------------------

def parse_scenario(doc, path=None, env=None):
    """Valida un documento ya leído y devuelve el Scenario con defaults resueltos."""
    version = doc.get("schema_version")
    if version is None:
        raise ValidationError("schema_version required", field="schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})", field="schema_version"
        )
    name = str(doc.get("name") or (Path(path).stem if path else "scenario"))

    system, system_resolved = _build_system(_table(doc, "system"))
    if "x0" not in doc:
        raise ValidationError("x0 required", field="x0")
    x0 = _vector(doc["x0"], "x0")
    if len(x0) != system.n:
        raise ValidationError(f"x0 has dimension {len(x0)} but the system has n={system.n}", field="x0")

    plan, plan_resolved = _build_plan(_table(doc, "plan"))
    cost, cost_resolved = _build_cost(_table(doc, "cost"), plan.t_f)
    if cost.Q.shape != (system.n, system.n):
        raise ValidationError(f"cost.Q must be {system.n}×{system.n}, got {cost.Q.shape}", field="cost.Q")
    if cost.R.shape != (system.p, system.p):
        raise ValidationError(f"cost.R must be {system.p}×{system.p}, got {cost.R.shape}", field="cost.R")

    optimizer, optimizer_resolved = _build_optimizer(_table(doc, "optimizer"))

    env_dt = env.dt if env is not None else None
    dt = _number(_table(doc, "integrator"), "dt", "integrator", env_dt or DEFAULTS["dt"])
    integrator = IntegratorConfig(dt=dt)

    controller = _table(doc, "controller")
    K0 = _matrix(controller, "K0", "controller", required=False)
    if K0 is not None and K0.shape != (system.p, system.n):
        raise ValidationError(f"controller.K0 must be {system.p}×{system.n}, got {K0.shape}", field="controller.K0")

    gramian = _table(doc, "gramian")
    gramian_horizon = _number(gramian, "horizon", "gramian", min(DEFAULTS["gramian_horizon"], plan.t_f))
    gain = gramian.get("gain", "lqr")
    if gain != "lqr":
        gain = _matrix(gramian, "gain", "gramian")
        if gain.shape != (system.p, system.n):
            raise ValidationError(f"gramian.gain must be {system.p}×{system.n}", field="gramian.gain")

    compare_table = _table(doc, "compare")
    compare = {
        key: _number(compare_table, key, "compare", DEFAULTS[key])
        for key in ("gramian_horizon", "replay_horizon", "replay_epsilon")
    }

    outputs_table = _table(doc, "outputs")
    directory = outputs_table.get("directory")
    if directory is not None and not isinstance(directory, str):
        raise ValidationError(f"outputs.directory must be a path string, got {directory!r}", field="outputs.directory")
    formats = tuple(_text_list(outputs_table.get("formats", list(FORMATS)), "outputs.formats"))
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ValidationError(f"unknown output formats {unknown}", field="outputs.formats")
    if directory is None and env is not None:
        directory = env.output_dir / name
    outputs = OutputsConfig(Path(directory) if directory else None, formats)

    resolved = {
        "system": system_resolved,
        "x0": x0.tolist(),
        "cost": cost_resolved,
        "plan": plan_resolved,
        "optimizer": optimizer_resolved,
        "integrator": {"dt": dt, "method": integrator.method},
        "controller": {"K0": K0.tolist() if K0 is not None else None},
        "gramian": {"horizon": gramian_horizon, "gain": gain if isinstance(gain, str) else gain.tolist()},
        "compare": compare,
        "outputs": {"formats": list(formats)},
    }
    return Scenario(
        name=name,
        path=Path(path) if path else None,
        system=system,
        x0=x0,
        cost=cost,
        plan=plan,
        optimizer=optimizer,
        integrator=integrator,
        outputs=outputs,
        K0=K0,
        gramian_horizon=gramian_horizon,
        gramian_gain=gain,
        compare=compare,
        resolved=resolved,
    )


def load_scenario(path, env=None):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"scenario file not found: {path}", field="scenario")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"cannot parse {path.name}: {exc}", field="scenario") from exc
    try:
        scenario = parse_scenario(doc, path, env)
    except ObsCtrlError as exc:
        exc.context.setdefault("scenario", str(path))
        raise
    logger.info("Escenario '%s' cargado (%d tramos, dt=%g)", scenario.name, len(scenario.plan), scenario.integrator.dt)
    return scenario
