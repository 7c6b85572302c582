"""Figures written next to the CSV outputs.

PNG files are saved without a software stamp so reruns are byte-identical.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "svg.hashsalt": "cybergrid",
}


def _figure(width=5.0, ratio=0.62):
    plt.rcParams.update(_RC)
    return plt.subplots(figsize=(width, width * ratio))


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_trajectory(tr, episode: int, path, epsilon: float = 0.05, attack_at_step=None) -> None:
    fig, ax = _figure()
    t = np.arange(tr.n_steps)
    ax.plot(t, tr.v1[episode], color="tab:blue", label="V1")
    ax.plot(t, tr.v2[episode], color="tab:red", label="V2")
    ax.plot(t, tr.v3[episode], color="tab:green", label="V3")
    for y in (1 - epsilon, 1 + epsilon):
        ax.axhline(y, color="0.5", lw=0.6, ls="--")
    if attack_at_step is not None:
        ax.axvline(attack_at_step, color="k", lw=0.6, ls=":")
    ax.set_xlabel("step (minutes)")
    ax.set_ylabel("voltage (p.u.)")
    ax.legend(loc="best", frameon=False)
    _save(fig, path)


def plot_training_log(rows, path) -> None:
    fig, ax = _figure()
    ax.plot([r["iteration"] for r in rows], [r["mean_reward"] for r in rows], marker="o", ms=3)
    ax.set_xlabel("policy iteration")
    ax.set_ylabel("mean reward per step")
    _save(fig, path)


def plot_p_sweep(result, path) -> None:
    fig, ax = _figure()
    sim_ps = sorted({r.sim_p for r in result.records if r.sim_p > 0})
    for sp in sim_ps:
        recs = sorted(result.select(sim_p=sp), key=lambda r: r.train_p)
        ax.plot([r.train_p for r in recs], [r.normalized_reward for r in recs], marker="o", ms=3,
                label=f"sim p={sp:.3g}")
    ax.set_xscale("log")
    ax.set_xlabel("attack probability during training")
    ax.set_ylabel("reward per step of attacker presence")
    ax.legend(loc="best", frameon=False)
    _save(fig, path)


def plot_design_surface(mixed, path, p: float) -> None:
    """`mixed` rows are (p2_max, p3_max, reward, stderr)."""
    fig, ax = _figure()
    for p2 in sorted({m[0] for m in mixed}):
        pts = sorted((m[1], m[2]) for m in mixed if m[0] == p2)
        ax.plot(*zip(*pts), marker="o", ms=3, label=f"p2,max={p2:g}")
    ax.set_xlabel("p3,max (p.u.)")
    ax.set_ylabel(f"mean defender reward per step (p={p:g})")
    ax.legend(loc="best", frameon=False, ncol=2)
    _save(fig, path)


def plot_slopes(rows, path) -> None:
    fig, ax = _figure()
    ax.plot([r.p2_max for r in rows], [r.slope for r in rows], marker="o", ms=3)
    ax.axhline(0.0, color="0.5", lw=0.6)
    ax.set_xlabel("p2,max (p.u.)")
    ax.set_ylabel("reward slope per MW of p3,max")
    _save(fig, path)


def plot_break_even(rows, path) -> None:
    fig, ax = _figure()
    pts = [(r.p2_max, r.break_even_cpq) for r in rows if not math.isinf(r.break_even_cpq)]
    if pts:
        ax.plot(*zip(*pts), marker="o", ms=3)
    ax.set_yscale("log")
    ax.set_xlabel("p2,max (p.u.)")
    ax.set_ylabel("break-even C_PQ ($/event)")
    _save(fig, path)
