"""Post-hoc figure rendering from run artifacts.

The training and sweep paths emit CSV only; these helpers read those
files back and write PNG figures next to them (size and Q versus step,
step time versus step, and the accuracy-versus-size locus).
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _read_csv(path):
    with open(path) as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    return rows


def _floats(rows, key):
    out = []
    for row in rows:
        value = row.get(key, "")
        out.append(float(value) if value not in ("", None) else None)
    return out


def render_training_figures(run_dir, out_dir=None):
    """Figures from a run's metrics.csv; returns the written paths."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = _read_csv(os.path.join(run_dir, "metrics.csv"))
    steps = _floats(rows, "step")
    written = []

    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6, 6))
        ax1.plot(steps, _floats(rows, "total_bits"), color="tab:blue")
        ax1.set_ylabel("total bits")
        ax2.plot(steps, _floats(rows, "Q"), color="tab:orange")
        ax2.set_ylabel("Q (bits / starting weight)")
        ax2.set_xlabel("step")
        fig.suptitle("network size during training")
        path = os.path.join(out_dir, "size_vs_step.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots()
        ax.plot(steps, _floats(rows, "step_ms"), color="tab:green", lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("step wall time (ms)")
        ax.set_title("step time during training")
        path = os.path.join(out_dir, "step_time_vs_step.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots()
        ax.plot(steps, _floats(rows, "train_acc"), label="train", lw=0.8)
        eval_pairs = [(s, a) for s, a in zip(steps, _floats(rows, "eval_acc"))
                      if a is not None]
        if eval_pairs:
            ax.plot(*zip(*eval_pairs), label="eval", marker="o", ms=3)
        ax.set_xlabel("step")
        ax.set_ylabel("top-1 accuracy")
        ax.legend()
        ax.set_title("accuracy during training")
        path = os.path.join(out_dir, "accuracy_vs_step.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def render_locus_figure(sweep_dir, out_dir=None):
    """Accuracy against final size fraction from a sweep's locus.csv."""
    out_dir = out_dir or sweep_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = [r for r in _read_csv(os.path.join(sweep_dir, "locus.csv"))
            if r.get("bits_fraction")]
    written = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bits = [float(r["bits_fraction"]) for r in rows]
        acc = [float(r["accuracy"]) for r in rows]
        gammas = [float(r["gamma"]) for r in rows]
        ax.scatter(bits, acc, c="tab:blue")
        for g, x, y in zip(gammas, bits, acc):
            ax.annotate(f"{g:g}", (x, y), textcoords="offset points",
                        xytext=(4, 4), fontsize=7)
        ax.set_xscale("log")
        ax.set_xlabel("final bits fraction")
        ax.set_ylabel("top-1 accuracy")
        ax.set_title("size / accuracy locus")
        path = os.path.join(out_dir, "locus.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
