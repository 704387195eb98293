# control/ablation.py
# Four-variant comparison over several seeds: mean and std per (variant, split),
# a variant that fails on every seed is kept as a "failed" row.
import logging
import os

import numpy as np

from control.evaluation import ResultRow, ResultTable, group_columns

log = logging.getLogger("ctl")

VARIANTS = ("source_only", "mt_ocl", "prior", "full")
FLAG_COLUMNS = ["L_src_ocl", "L_pred", "L_ant", "L_vis"]
VARIANT_FLAGS = {
    "source_only": {},
    "mt_ocl": {"L_src_ocl": True, "L_pred": True},
    "prior": {"L_src_ocl": True, "L_pred": True, "L_ant": True},
    "full": {"L_src_ocl": True, "L_pred": True, "L_ant": True, "L_vis": True},
}


def aggregate_rows(variant: str, per_seed: list, columns: list, flags: dict) -> list:
    """Mean and sample std over seed tables, one row per split (std is 0 with a single seed)."""
    splits = list(dict.fromkeys(r.split for t in per_seed for r in t.rows))
    rows = []
    for split in splits:
        hits = [r for t in per_seed for r in t.rows if r.split == split and r.status == "ok"]
        if not hits:
            continue
        values, std = {}, {}
        for c in columns + ["Avg"]:
            xs = np.array([h.avg if c == "Avg" else h.values.get(c, np.nan) for h in hits], dtype=np.float64)
            mean = float(np.nanmean(xs)) if np.isfinite(xs).any() else float("nan")
            dev = float(np.nanstd(xs, ddof=1)) if np.isfinite(xs).sum() > 1 else 0.0
            values[c], std[c] = mean, dev
        avg = values.pop("Avg")
        rows.append(ResultRow(variant, split, values, avg, n=len(hits), std=std, flags=dict(flags)))
    return rows


def run_ablation(ctl, seeds: list) -> ResultTable:
    """
    For every seed: pretrain and prior are reused (or produced once), then each variant
    is adapted and its best teacher evaluated. Writes ablation/table.{csv,txt}.
    """
    out = os.path.join(ctl.root, "ablation")
    ctl._claim(out)
    columns = group_columns(ctl.skel)
    table = ResultTable(columns, FLAG_COLUMNS)

    for variant in VARIANTS:
        per_seed = []
        for seed in seeds:
            try:
                ckpt = ctl.ensure_stage(seed, "pretrain")
                if variant != "source_only":
                    if variant in ("prior", "full"):
                        ctl.ensure_stage(seed, "prior")
                    ckpt = ctl.ensure_stage(seed, f"adapt_{variant}", variant=variant)
                per_seed.append(ctl.evaluate_checkpoint(ckpt, variant, overlays=False))
            except Exception as e:
                # a failed run drops only its own (variant, seed) entry
                log.warning(f"{variant} seed {seed} failed: {type(e).__name__}: {e}")

        if not per_seed:
            table.add(ResultRow(variant, "target_eval", {}, float("nan"), n=0, status="failed",
                                flags=dict(VARIANT_FLAGS[variant])))
            continue
        for row in aggregate_rows(variant, per_seed, columns, VARIANT_FLAGS[variant]):
            table.add(row)
        log.info(f"{variant}: {len(per_seed)}/{len(seeds)} seeds")

    table.write_csv(os.path.join(out, "table.csv"))
    table.write_text(os.path.join(out, "table.txt"))
    print(table.to_text())
    return table
