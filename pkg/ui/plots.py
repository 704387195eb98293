# ui/plots.py
# File-based report figures (PNG, non-interactive backend).
import math

import matplotlib as mpl
mpl.use("Agg")

import matplotlib.pyplot as plt

mpl.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (5.0, 3.2),
    "savefig.dpi": 120,
})


def new(nrows: int = 1, ncols: int = 1):
    return plt.subplots(nrows=nrows, ncols=ncols)


def save(fig, path: str):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _f(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def pck_vs_epoch(epoch_rows: list, path: str, title: str = ""):
    """Mean PCK over all eval samples per epoch, one line per model (student/teacher)."""
    fig, ax = new()
    for model in sorted({r["model"] for r in epoch_rows}):
        rows = [r for r in epoch_rows if r["model"] == model and r["split"] == "all"]
        ax.plot([int(r["epoch"]) for r in rows], [_f(r["Avg"]) for r in rows], marker="o", label=model)
    ax.set_xlabel("epoch")
    ax.set_ylabel("PCK@0.05 (%)")
    if title:
        ax.set_title(title)
    ax.legend()
    save(fig, path)
    return fig, ax


def pck_vs_severity(table_rows: list, path: str):
    """One line per variant over the severity=k rows of a result table."""
    fig, ax = new()
    severities = sorted({int(r["split"].split("=")[1]) for r in table_rows if r["split"].startswith("severity=")})
    for variant in dict.fromkeys(r["variant"] for r in table_rows):
        pts = {int(r["split"].split("=")[1]): _f(r["Avg"]) for r in table_rows
               if r["variant"] == variant and r["split"].startswith("severity=") and r.get("status", "ok") == "ok"}
        if pts:
            xs = sorted(pts)
            ax.plot(xs, [pts[x] for x in xs], marker="o", label=variant)
    ax.set_xticks(severities)
    ax.set_xlabel("occlusion severity")
    ax.set_ylabel("PCK@0.05 (%)")
    ax.legend()
    save(fig, path)
    return fig, ax


def loss_breakdown(step_rows: list, path: str, terms=("src_ocl", "ant", "pred_vis", "pred", "total")):
    fig, ax = new()
    steps = [int(r["step"]) for r in step_rows]
    for term in terms:
        ax.plot(steps, [_f(r[term]) for r in step_rows], label=term, linewidth=1)
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(ncol=2)
    save(fig, path)
    return fig, ax


def gamma_trace(xs: list, gammas: list, path: str):
    fig, ax = new()
    ax.plot(xs, gammas, marker=".", drawstyle="steps-post")
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("epoch")
    ax.set_ylabel("gamma")
    save(fig, path)
    return fig, ax
