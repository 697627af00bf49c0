"""Figures for sweeps and training runs. CSV files stay the source of truth."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed salt and no timestamp keep SVG output byte-stable across runs
matplotlib.rcParams["svg.hashsalt"] = "laeo-lab"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def sweep_plot(rows: list[dict], axis: str, path) -> Path:
    """Mean success with standard-error bars, one line per method.

    ``rows`` need ``value``, ``method``, ``mean_success`` and ``stderr`` keys.
    """
    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = sorted({r["method"] for r in rows})
    values = list(dict.fromkeys(str(r["value"]) for r in rows))
    for m in methods:
        pts = [r for r in rows if r["method"] == m and r["mean_success"] != ""]
        xs = [values.index(str(r["value"])) for r in pts]
        ys = [100 * float(r["mean_success"]) for r in pts]
        es = [100 * float(r["stderr"]) for r in pts]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=m.upper())
    ax.set_xticks(range(len(values)), values)
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def training_plot(rows: list[dict], path) -> Path:
    """Loss and evaluation success against training step for one run."""
    fig, (ax_l, ax_s) = plt.subplots(1, 2, figsize=(8, 3.2))
    steps = [int(r["step"]) for r in rows]
    ax_l.plot(steps, [float(r["loss"]) for r in rows], lw=1)
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("loss")
    ev = [(int(r["step"]), float(r["eval_success_rate"])) for r in rows if r["eval_success_rate"] != ""]
    if ev:
        ax_s.plot(*zip(*ev), marker=".")
    ax_s.set_xlabel("step")
    ax_s.set_ylabel("eval success")
    ax_s.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)


def task_bar_plot(rows: list[dict], path) -> Path:
    """Per-task success for the planner and the random-action baseline."""
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    planners = list(dict.fromkeys(r["planner"] for r in rows))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(planners)
    for k, p in enumerate(planners):
        ys = [100 * float(next(r["mean_success"] for r in rows if r["task"] == t and r["planner"] == p)) for t in tasks]
        ax.bar([i + k * width for i in range(len(tasks))], ys, width, label=p)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(tasks))], tasks, rotation=20)
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)
