# scripts/obsctrl/cli.py
"""
CLI DE SÍNTESIS CONSCIENTE DE OBSERVABILIDAD
============================================

Uso (desde scripts/):
    python -m obsctrl gramian        ../scenarios/holonomic_bearing.scenario
    python -m obsctrl synthesize     ../scenarios/holonomic_bearing_desk.scenario
    python -m obsctrl baseline       ../scenarios/holonomic_bearing_desk.scenario
    python -m obsctrl compare        ../scenarios/holonomic_bearing_desk.scenario
    python -m obsctrl check-gradient ../scenarios/holonomic_bearing.scenario
    python -m obsctrl selftest --quick

Salidas en el directorio del escenario (o --output-dir):
- trajectory.csv   t, <controlador>_x1..xn
- controls.csv     t, <controlador>_u1..up
- gains.csv        tramo, t_inicio, t_fin, estado, J, iteraciones, k1..k(p·n)
- summary.json     costos, índices, Gramianos, monitores
- manifest.json    todos los parámetros resueltos
- *.svg            trayectorias y controles

Códigos de salida: 0 ok, 2 validación, 3 fallo numérico, 4 no convergencia.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from obsctrl import __version__
from obsctrl.config import load_env, setup_logging
from obsctrl.cost import zeta_for_segment
from obsctrl.errors import NonConvergenceError, NumericalError, ObsCtrlError
from obsctrl.gramian import empirical_gramian
from obsctrl.model import GainMatrix
from obsctrl.optimizer import CAPPED
from obsctrl.scenarios import load_scenario
from obsctrl.sensitivity import cost_and_gradient, fd_gradient, initial_augmented_state
from obsctrl.synthesis import baseline, compare, initial_gain, synthesize

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
GRADIENT_TOL = 1e-4


# ---------------------------------------------------------------------------
# Serialización
# ---------------------------------------------------------------------------

def _jsonable(value):
    """Tipos numpy a JSON; no finitos como texto ("inf", "nan")."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _state_frame(result):
    traj = result.trajectory
    data = {"t": traj.times}
    for i in range(traj.states.shape[1]):
        data[f"{result.label}_x{i + 1}"] = traj.states[:, i]
    return pd.DataFrame(data)


def _control_frame(result):
    traj = result.trajectory
    data = {"t": traj.times}
    for a in range(traj.controls.shape[1]):
        data[f"{result.label}_u{a + 1}"] = traj.controls[:, a]
    return pd.DataFrame(data)


def _joined(frames):
    merged = frames[0]
    for frame in frames[1:]:
        merged = merged.merge(frame, on="t", how="outer")
    return merged.sort_values("t").reset_index(drop=True)


def _gains_frame(result):
    rows = []
    for seg in result.segments:
        row = {
            "controller": result.label,
            "segment": seg.index,
            "t_start": seg.segment[0],
            "t_end": seg.segment[1],
            "status": seg.status,
            "J": seg.J,
            "iterations": seg.iterations,
            "zeta": seg.zeta,
        }
        row.update({f"k{k + 1}": v for k, v in enumerate(seg.gain.flat)})
        rows.append(row)
    return pd.DataFrame(rows)


def write_results(results, directory, formats):
    """CSV de trayectorias, controles y ganancias; SVG si se piden."""
    directory.mkdir(parents=True, exist_ok=True)
    if "csv" in formats:
        _joined([_state_frame(r) for r in results]).to_csv(
            directory / "trajectory.csv", index=False, float_format=FLOAT_FORMAT
        )
        _joined([_control_frame(r) for r in results]).to_csv(
            directory / "controls.csv", index=False, float_format=FLOAT_FORMAT
        )
        pd.concat([_gains_frame(r) for r in results], ignore_index=True).to_csv(
            directory / "gains.csv", index=False, float_format=FLOAT_FORMAT
        )
    if "svg" in formats:
        from obsctrl.plotting import plot_controls, plot_trajectories

        plot_trajectories(results, directory / "trajectories.svg")
        plot_controls(results, directory / "controls.svg")


def result_summary(result):
    lyap = result.monitors["lyapunov"]
    return {
        "label": result.label,
        "total_cost": result.total_cost,
        "integrated_cost": result.integrated_cost,
        "observability_integral": result.observability_integral,
        "final_state": result.trajectory.states[-1],
        "all_converged": result.all_converged,
        "segments": [
            {
                "index": s.index,
                "segment": list(s.segment),
                "J": s.J,
                "iterations": s.iterations,
                "status": s.status,
                "zeta": s.zeta,
                "gain": s.gain.entries,
                "observability_index": s.observability_index,
            }
            for s in result.segments
        ],
        "monitors": {
            "lyapunov_verdict": lyap.verdict,
            "lyapunov_worst_increase": lyap.worst_increase,
            "lyapunov_positive": lyap.positive,
            "beta_estimate": result.monitors["beta"],
            "lemma_min_margin": result.monitors["lemma_min_margin"],
            "terminal_residual_max": result.monitors["terminal_residual_max"],
        },
    }


# ---------------------------------------------------------------------------
# Comandos
# ---------------------------------------------------------------------------

def _check_capped(results, allow_capped):
    capped = [(r.label, s.index) for r in results for s in r.segments if s.status == CAPPED]
    if capped and not allow_capped:
        raise NonConvergenceError(
            f"{len(capped)} segment(s) reached the iteration cap", segments=[i for _, i in capped]
        )
    if capped:
        print(f"[!] {len(capped)} tramo(s) alcanzaron el tope de iteraciones (--allow-capped)")


def cmd_gramian(scenario, out_dir, args):
    sys_ = scenario.system
    if isinstance(scenario.gramian_gain, str):
        gain = initial_gain(sys_, scenario.cost, scenario.x0, scenario.K0)
    else:
        gain = GainMatrix(scenario.gramian_gain)
    print(f"[1/2] Gramiano empírico en [0, {scenario.gramian_horizon:g}] con ε={scenario.cost.epsilon:g}...")
    g = empirical_gramian(
        sys_, gain, scenario.x0, scenario.cost.epsilon, scenario.gramian_horizon, scenario.integrator
    )
    print(f"[OK] tr(W) = {g.trace_index:.6g}, σ_min/σ_max = {g.singular_value_ratio:.3e}")
    print("[2/2] Guardando resultados...")
    write_json(out_dir / "summary.json", {
        "command": "gramian",
        "gain": gain.entries,
        "epsilon": g.epsilon,
        "horizon": g.horizon,
        "W": g.W,
        **g.diagnostics(),
    })
    return []


def cmd_synthesize(scenario, out_dir, args):
    print(f"[1/2] Síntesis por tramos ({len(scenario.plan)} tramos)...")
    result = synthesize(
        scenario.system, scenario.cost, scenario.plan, scenario.optimizer,
        scenario.x0, scenario.integrator, scenario.K0,
    )
    print(f"[OK] Σ J = {result.total_cost:.6g}, ‖x(t_f)‖ = {np.linalg.norm(result.trajectory.states[-1]):.3e}")
    print("[2/2] Guardando resultados...")
    write_results([result], out_dir, scenario.outputs.formats)
    write_json(out_dir / "summary.json", {"command": "synthesize", "synthesized": result_summary(result)})
    return [result]


def cmd_baseline(scenario, out_dir, args):
    K = initial_gain(scenario.system, scenario.cost, scenario.x0, scenario.K0)
    print(f"[1/2] Línea base con ganancia constante ({len(scenario.plan)} tramos)...")
    result = baseline(scenario.system, scenario.cost, scenario.plan, K, scenario.x0, scenario.integrator)
    print(f"[OK] Σ J = {result.total_cost:.6g}")
    print("[2/2] Guardando resultados...")
    write_results([result], out_dir, scenario.outputs.formats)
    write_json(out_dir / "summary.json", {
        "command": "baseline", "gain": K.entries, "baseline": result_summary(result),
    })
    return []


def cmd_compare(scenario, out_dir, args):
    sys_, spec = scenario.system, scenario.cost
    K = initial_gain(sys_, spec, scenario.x0, scenario.K0)
    print(f"[1/4] Síntesis por tramos ({len(scenario.plan)} tramos)...")
    synth = synthesize(sys_, spec, scenario.plan, scenario.optimizer, scenario.x0, scenario.integrator, K)
    print(f"[OK] Σ J = {synth.total_cost:.6g}")
    print("[2/4] Línea base con la ganancia inicial...")
    base = baseline(sys_, spec, scenario.plan, K, scenario.x0, scenario.integrator)
    print(f"[OK] Σ J = {base.total_cost:.6g}")
    print("[3/4] Métricas de observabilidad...")
    metrics = compare(
        sys_, spec, synth, base, scenario.x0, scenario.integrator,
        gramian_horizon=scenario.compare["gramian_horizon"],
        replay_horizon=scenario.compare["replay_horizon"],
        replay_epsilon=scenario.compare["replay_epsilon"],
    )
    for label, entry in metrics.items():
        print(
            f"   {label:<12} Σ J={entry['total_cost']:.6g}  obs={entry['observability_integral']:.6g}"
            f"  σ-ratio replay={entry['replay_gramian']['singular_value_ratio']:.3e}"
        )
    print("[4/4] Guardando resultados...")
    write_results([synth, base], out_dir, scenario.outputs.formats)
    write_json(out_dir / "summary.json", {
        "command": "compare",
        "comparison": metrics,
        "synthesized": result_summary(synth),
        "baseline": result_summary(base),
    })
    return [synth]


def cmd_check_gradient(scenario, out_dir, args):
    sys_, spec = scenario.system, scenario.cost
    segment = scenario.plan.segments[0]
    K = initial_gain(sys_, spec, scenario.x0, scenario.K0).entries
    z0 = initial_augmented_state(scenario.x0, spec)
    zeta = zeta_for_segment(spec.zeta_policy, scenario.x0, spec.Q, segment[1], segment).value
    print(f"[1/2] Gradiente por sensibilidades en [{segment[0]:g}, {segment[1]:g})...")
    J, g = cost_and_gradient(sys_, spec, K, segment, z0, scenario.integrator, zeta)
    g_fd = fd_gradient(sys_, spec, K, segment, z0, scenario.integrator, zeta, delta=args.delta)
    err = float(np.linalg.norm(g - g_fd) / max(1.0, np.linalg.norm(g_fd)))
    passed = err <= GRADIENT_TOL
    print(f"[{'OK' if passed else 'ERROR'}] error relativo = {err:.3e} (tolerancia {GRADIENT_TOL:g})")
    print("[2/2] Guardando resultados...")
    write_json(out_dir / "summary.json", {
        "command": "check-gradient",
        "segment": list(segment),
        "K": K,
        "J": J,
        "gradient": g,
        "fd_gradient": g_fd,
        "delta": args.delta,
        "max_relative_error": err,
        "passed": passed,
    })
    if not passed:
        raise NumericalError(f"gradient check failed: relative error {err:.3e} > {GRADIENT_TOL:g}",
                             max_relative_error=err)
    return []


def cmd_selftest(args):
    from obsctrl.selftest import run_selftest

    results = run_selftest(quick=args.quick, report=print)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"   [{'OK' if r.passed else 'ERROR'}] {r.name} ({r.seconds:.1f} s)")
    if args.output_dir:
        write_json(Path(args.output_dir) / "selftest.json", {
            "quick": args.quick, "checks": [r.to_dict() for r in results],
        })
    if failed:
        raise NumericalError(f"{len(failed)} selftest check(s) failed", failed=[r.name for r in failed])
    print(f"[OK] {len(results)} verificaciones superadas")


HANDLERS = {
    "gramian": cmd_gramian,
    "synthesize": cmd_synthesize,
    "baseline": cmd_baseline,
    "compare": cmd_compare,
    "check-gradient": cmd_check_gradient,
}


# ---------------------------------------------------------------------------
# Entrada
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="obsctrl", description="Síntesis de realimentación lineal por tramos consciente de observabilidad"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", type=str, help="Directorio de salida (sobrescribe outputs.directory)")
    common.add_argument("--verbose", action="store_true", help="Logging DEBUG (progreso por iteración)")
    common.add_argument("--allow-capped", action="store_true",
                        help="No fallar si algún tramo alcanza el tope de iteraciones")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name, parents=[common])
        p.add_argument("scenario", type=str, help="Archivo de escenario (TOML)")
        if name == "check-gradient":
            p.add_argument("--delta", type=float, default=1e-5, help="Paso de diferencias centrales")
    p = sub.add_parser("selftest", parents=[common])
    p.add_argument("--quick", action="store_true", help="Horizontes e iteraciones reducidos")
    return parser


def _fail(exc, out_dir):
    payload = exc.to_dict()
    print("[ERROR] " + json.dumps(_jsonable(payload), sort_keys=True, ensure_ascii=False))
    if out_dir is not None:
        try:
            write_json(out_dir / "error.json", payload)
        except OSError as io_exc:
            logger.error("No se pudo escribir error.json: %s", io_exc)
    return exc.exit_code


def run(argv=None):
    """Ejecuta un comando y devuelve el código de salida."""
    args = build_parser().parse_args(argv)
    out_dir = Path(args.output_dir) if args.output_dir else None
    try:
        env = load_env()
        setup_logging("DEBUG" if args.verbose else env.log_level)
        if args.command == "selftest":
            cmd_selftest(args)
            return 0

        print(f"[INFO] Cargando escenario {args.scenario}...")
        scenario = load_scenario(args.scenario, env)
        out_dir = out_dir or scenario.outputs.directory or Path("outputs") / scenario.name
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "manifest.json", {
            "command": args.command,
            "version": __version__,
            **scenario.to_manifest(),
        })
        print(f"[OK] Escenario '{scenario.name}' ({scenario.system.name}), salida en {out_dir}")

        results = HANDLERS[args.command](scenario, out_dir, args)
        _check_capped(results, args.allow_capped)
    except ObsCtrlError as exc:
        return _fail(exc, out_dir)
    except Exception as exc:  # noqa: BLE001
        logger.exception("Fallo no previsto en '%s'", args.command)
        return _fail(ObsCtrlError(f"{type(exc).__name__}: {exc}", cause=type(exc).__name__), out_dir)
    print("[OK] Listo")
    return 0


def main():
    sys.exit(run())
