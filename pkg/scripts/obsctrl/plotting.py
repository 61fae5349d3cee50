# scripts/obsctrl/plotting.py
"""
Figuras SVG estáticas: plano de estados y controles vs tiempo.
Salida determinista (sin fecha en metadatos, ids con semilla fija).
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "obsctrl"

STYLES = {"synthesized": "-", "baseline": "--"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trajectories(results, path):
    """x2 contra x1 para cada controlador (sistemas con n ≥ 2), o x1(t) si n = 1."""
    fig, ax = plt.subplots(figsize=(6, 5))
    for res in results:
        X = res.trajectory.states
        style = STYLES.get(res.label, "-")
        if X.shape[1] >= 2:
            ax.plot(X[:, 0], X[:, 1], style, label=res.label)
            ax.plot(X[0, 0], X[0, 1], "ko", markersize=4)
        else:
            ax.plot(res.trajectory.times, X[:, 0], style, label=res.label)
    if results and results[0].trajectory.states.shape[1] >= 2:
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    else:
        ax.set_xlabel("t [s]")
        ax.set_ylabel("x1")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_controls(results, path):
    """u_i(t) para cada controlador."""
    p = results[0].trajectory.controls.shape[1]
    fig, axes = plt.subplots(p, 1, figsize=(7, 2.5 * p), sharex=True, squeeze=False)
    for a in range(p):
        ax = axes[a, 0]
        for res in results:
            traj = res.trajectory
            ax.plot(traj.times, traj.controls[:, a], STYLES.get(res.label, "-"), label=res.label)
        ax.set_ylabel(f"u{a + 1}")
        ax.grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel("t [s]")
    axes[0, 0].legend()
    _save(fig, path)
