"""Figures for the ``report`` command (rendered off-screen with Agg)."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 6.0
colors = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5", "#e34a33"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
}

# fixed metadata keeps repeated renders byte-stable
_META = {"Software": None}


def _label(path):
    return os.path.splitext(os.path.basename(os.path.dirname(os.path.abspath(path))) or path)[0]


def read_train_log(path):
    """``train_log.csv`` as a dict of float columns (the abort row is skipped)."""
    cols = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if row["epoch"] == "ABORT":
                continue
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v) if v not in ("", None) else np.nan)
    return {k: np.array(v) for k, v in cols.items()}


def plot_training(logs, out_path):
    """Loss and TV-to-oracle traces against epoch, one line per run."""
    with plt.rc_context(params):
        fig, (ax_l, ax_tv) = plt.subplots(1, 2, figsize=(fig_width, fig_width * golden_mean * 0.6))
        for name, cols in logs.items():
            ax_l.plot(cols["epoch"], cols["loss"], label=name)
            tv = cols.get("tv_to_oracle")
            if tv is not None and np.any(np.isfinite(tv)):
                ax_tv.semilogy(cols["epoch"], tv, label=name)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("mean loss")
        ax_tv.set_xlabel("epoch")
        ax_tv.set_ylabel(r"TV to $\pi^*$")
        if logs:
            ax_l.legend(loc="best")
        fig.tight_layout()
        fig.savefig(out_path, metadata=_META)
        plt.close(fig)
    return out_path


def plot_eval_comparison(rows, out_path):
    """Win rates and the diversity triplet side by side for each report."""
    names = [r["name"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(params):
        fig, (ax_w, ax_d) = plt.subplots(1, 2, figsize=(fig_width, fig_width * golden_mean * 0.7))
        width = 0.38
        ax_w.bar(x - width / 2, [r["win_rate"] for r in rows], width, label="WR")
        ax_w.bar(x + width / 2, [r["lc_win_rate"] for r in rows], width, label="LC WR")
        ax_w.axhline(50.0, color="0.5", lw=0.8, ls="--")
        ax_w.set_ylim(0, 120)
        ax_w.set_yticks(np.arange(0, 101, 25))
        ax_w.set_ylabel("win rate vs reference (%)")
        metrics = ("predictive_entropy", "distinct1", "self_bleu")
        width = 0.8 / len(metrics)
        for k, m in enumerate(metrics):
            ax_d.bar(x + (k - 1) * width, [r[m] for r in rows], width, label=m.replace("_", " "))
        ax_d.set_ylabel("diversity")
        ax_d.set_ylim(0, 1.2 * max(1.0, max(max(r[m] for r in rows) for m in metrics)))
        for ax in (ax_w, ax_d):
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=30, ha="right")
            ax.legend(loc="upper center", ncol=2, fontsize=7)
        fig.tight_layout()
        fig.savefig(out_path, metadata=_META)
        plt.close(fig)
    return out_path
