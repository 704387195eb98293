# control/report.py
# Static report over finished runs: PNG curves plus a plain-text summary.
# Missing inputs only drop the affected figure.
import glob
import json
import logging
import math
import os
from typing import Optional

from adapt.losses import CurriculumState
from iodev.csv_log import read_csv
from ui import plots

log = logging.getLogger("ctl")


def gamma_schedule(total_epochs: int, mode: str = "schedule"):
    """Curriculum weight at every epoch boundary 0..total (the last point is the schedule's end)."""
    xs = list(range(total_epochs + 1))
    return xs, [CurriculumState(e, total_epochs, mode).gamma for e in xs]


def _read(path: str) -> Optional[list]:
    if not os.path.exists(path):
        log.warning(f"report: missing {path}")
        return None
    return read_csv(path)


def _run_name(run_dir: str) -> str:
    parts = os.path.normpath(run_dir).split(os.sep)
    return "_".join(parts[-2:])


def winners(table_rows: list) -> dict:
    """split -> (variant, Avg) with the highest Avg among rows that did not fail."""
    best = {}
    for r in table_rows:
        if r.get("status", "ok") != "ok":
            continue
        try:
            avg = float(r["Avg"])
        except (TypeError, ValueError):
            continue
        if math.isnan(avg):
            continue
        split = r["split"]
        if split not in best or avg > best[split][1]:
            best[split] = (r["variant"], avg)
    return best


def _result_rows(root: str) -> list:
    """Ablation table if present, otherwise every evaluate table under eval/."""
    path = os.path.join(root, "ablation", "table.csv")
    if os.path.exists(path):
        return read_csv(path)
    rows = []
    for p in sorted(glob.glob(os.path.join(root, "eval", "*", "table.csv"))):
        rows.extend(read_csv(p))
    if not rows:
        log.warning(f"report: no result table under {root}")
    return rows


def build_report(root: str, run_dirs: list, out: str) -> dict:
    """
    Per adaptation run: PCK-vs-epoch, loss breakdown and gamma trace.
    Across runs: PCK-vs-severity from the result table and summary.txt naming the winner per split.
    Returns the winners dict.
    """
    os.makedirs(out, exist_ok=True)
    if not run_dirs:
        run_dirs = sorted(glob.glob(os.path.join(root, "runs", "seed*", "adapt_*")))
    written = []

    for run in run_dirs:
        name = _run_name(run)
        epochs = _read(os.path.join(run, "adapt_epochs.csv"))
        if epochs:
            path = os.path.join(out, f"{name}_pck_epoch.png")
            plots.pck_vs_epoch(epochs, path, title=name)
            written.append(path)
        steps = _read(os.path.join(run, "adapt_steps.csv"))
        if steps:
            path = os.path.join(out, f"{name}_losses.png")
            plots.loss_breakdown(steps, path)
            written.append(path)

        cfg_path = os.path.join(run, "config.json")
        if os.path.exists(cfg_path):
            with open(cfg_path, "r", encoding="utf-8") as f:
                a = json.load(f)["adapt"]
            xs, gammas = gamma_schedule(int(a["epochs"]), a.get("gamma_mode", "schedule"))
            path = os.path.join(out, f"{name}_gamma.png")
            plots.gamma_trace(xs, gammas, path)
            written.append(path)
        else:
            log.warning(f"report: missing {cfg_path}")

    table = _result_rows(root)
    if any(r["split"].startswith("severity=") for r in table):
        path = os.path.join(out, "pck_severity.png")
        plots.pck_vs_severity(table, path)
        written.append(path)

    best = winners(table)
    lines = ["split  winner  Avg"]
    lines += [f"{split}  {variant}  {avg:.2f}" for split, (variant, avg) in best.items()]
    if not best:
        lines.append("(no results)")
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    log.info(f"report: {len(written)} figures -> {out}")
    return best
