"""PNG figures for sweep, training and equivalence reports.

Figures are written with the Agg backend and without the software metadata
stamp, so the same report always produces the same bytes.
"""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.8),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}

_METADATA = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_METADATA)
    plt.close(fig)


def plot_sweep(report, path):
    """PSNR against NFE, one line per solver; failed cells are skipped."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(dict.fromkeys(r.solver for r in report.rows))
        for name in names:
            pts = sorted((r.nfe, r.psnr) for r in report.rows if r.solver == name and math.isfinite(r.psnr))
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("NFE")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(loc="best")
        _save(fig, path)


def plot_history(history, path):
    """Training loss and validation PSNR against iteration."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = [h["iter"] for h in history]
        ax.plot(it, [h["val_psnr"] for h in history], marker="o", label="val PSNR")
        ax.plot(it, [h["best_val_psnr"] for h in history], ls="--", label="best val PSNR")
        ax.set_xlabel("iteration")
        ax.set_ylabel("PSNR (dB)")
        ax2 = ax.twinx()
        ax2.plot(it, [h["train_loss"] for h in history], color="tab:gray", alpha=0.7, label="train loss")
        ax2.set_ylabel("train loss")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="lower right")
        _save(fig, path)


def plot_taxonomy(report, path):
    """Worst deviation per check on a log scale with the tolerance line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        worst = report.max_by_check()
        names = list(worst)
        vals = [max(worst[k], 1e-18) for k in names]
        colors = ["tab:green" if all(r.passed for r in report.rows if r.check == k) else "tab:red" for k in names]
        ax.bar(range(len(names)), vals, color=colors)
        tol = max((r.tol for r in report.rows), default=1e-9)
        ax.axhline(tol, color="k", ls="--", lw=1, label=f"tol {tol:g}")
        ax.set_yscale("log")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("max deviation")
        ax.legend(loc="best")
        _save(fig, path)
