# control/evaluation.py
# PCK evaluation of a network on a labeled split, and the result table layout
# (one column per joint group, pooled left+right, plus Avg; values in percent).
import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from predict.predictor import PosePredictor
from skeleton.metrics import PCKResult, pck
from skeleton.skeleton import SkeletonSpec


@dataclass
class EvalOutcome:
    ids: list
    severities: np.ndarray
    preds: list                  # Pose per sample
    confidences: np.ndarray      # (N, K)
    gts: list
    result: PCKResult

    def subset(self, keep: np.ndarray) -> PCKResult:
        """PCK restricted to the samples where keep is True."""
        r = self.result
        correct, evaluated = r.correct[keep], r.evaluated[keep]
        counts = evaluated.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_joint = np.where(counts > 0, correct.sum(axis=0) / np.maximum(counts, 1), np.nan)
        total = evaluated.sum()
        mean = float(correct.sum() / total) if total else float("nan")
        return PCKResult(per_joint, mean, correct, evaluated, r.distances[keep])


def evaluate_samples(net, samples, skel: SkeletonSpec, alpha: float, image_size: int,
                     batch_size: int = 32) -> EvalOutcome:
    out = PosePredictor(net, batch_size).predict([s.image for s in samples])
    preds = [p for p, _ in out]
    gts = [s.pose for s in samples]
    result = pck(preds, gts, alpha, image_size, joints=skel.evaluated_joints)
    conf = np.stack([c for _, c in out]) if out else np.zeros((0, skel.num_joints))
    return EvalOutcome([s.id for s in samples], np.array([s.severity for s in samples]),
                       preds, conf, gts, result)


# ---------- Result table ----------

@dataclass
class ResultRow:
    variant: str
    split: str
    values: dict                      # column -> percent
    avg: float                        # percent, pooled over evaluated joints
    n: int = 0
    status: str = "ok"
    std: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)


def group_columns(skel: SkeletonSpec) -> list:
    return [name for name, _ in skel.evaluated_groups]


def row_from_pck(variant: str, split: str, result: PCKResult, skel: SkeletonSpec,
                 n: Optional[int] = None, flags: Optional[dict] = None) -> ResultRow:
    fractions = result.group_fractions(skel.evaluated_groups)
    return ResultRow(variant, split, {k: 100.0 * v for k, v in fractions.items()}, 100.0 * result.mean,
                     n if n is not None else int(result.evaluated.shape[0]), flags=flags or {})


def severity_rows(outcome: EvalOutcome, variant: str, skel: SkeletonSpec, prefix: str = "severity=") -> list:
    rows = []
    for sev in sorted(set(int(s) for s in outcome.severities)):
        keep = outcome.severities == sev
        rows.append(row_from_pck(variant, f"{prefix}{sev}", outcome.subset(keep), skel, int(keep.sum())))
    return rows


class ResultTable:
    """
    Rows keyed by (variant, split); one column per joint group plus Avg.
    Emitted as CSV and as aligned plain text.
    """
    def __init__(self, columns: list, flag_columns: Optional[list] = None):
        self.columns = list(columns)
        self.flag_columns = list(flag_columns or [])
        self.rows: list = []

    def add(self, row: ResultRow):
        self.rows.append(row)
        return row

    def get(self, variant: str, split: str) -> Optional[ResultRow]:
        for r in self.rows:
            if r.variant == variant and r.split == split:
                return r
        return None

    def header(self) -> list:
        return ["variant", "split"] + self.flag_columns + self.columns + ["Avg", "n", "status"]

    def _cells(self, r: ResultRow, fmt) -> list:
        flags = ["x" if r.flags.get(f) else "" for f in self.flag_columns]
        if r.status != "ok":
            vals = ["failed"] * (len(self.columns) + 1)
        else:
            vals = [fmt(r.values.get(c, float("nan")), r.std.get(c)) for c in self.columns]
            vals.append(fmt(r.avg, r.std.get("Avg")))
        return [r.variant, r.split] + flags + vals + [str(r.n), r.status]

    def write_csv(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        std_cols = [f"{c}_std" for c in self.columns + ["Avg"]]
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.header() + std_cols)
            for r in self.rows:
                cells = self._cells(r, lambda v, s: "" if v is None or math.isnan(v) else repr(float(v)))
                stds = ["" if r.std.get(c) is None else repr(float(r.std[c])) for c in self.columns + ["Avg"]]
                w.writerow(cells + stds)

    def to_text(self) -> str:
        def fmt(v, s):
            if v is None or math.isnan(v):
                return "-"
            return f"{v:.1f}" if s is None else f"{v:.1f}±{s:.1f}"
        lines = [self.header()] + [self._cells(r, fmt) for r in self.rows]
        widths = [max(len(str(line[i])) for line in lines) for i in range(len(lines[0]))]
        return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines)

    def write_text(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text() + "\n")


def read_table_csv(path: str) -> list:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ---------- Per-sample records ----------

def sample_records(outcome: EvalOutcome) -> list:
    r = outcome.result
    out = []
    for i, sid in enumerate(outcome.ids):
        out.append({
            "id": sid,
            "severity": int(outcome.severities[i]),
            "pred": outcome.preds[i].coords.tolist(),
            "gt": outcome.gts[i].coords.tolist(),
            "confidence": outcome.confidences[i].tolist(),
            "error_px": r.distances[i].tolist(),
            "correct": r.correct[i].tolist(),
            "evaluated": r.evaluated[i].tolist(),
        })
    return out


def write_records(path: str, records: list):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def avg_from_records(records: list) -> float:
    """Pooled PCK (percent) recomputed from per-sample correctness flags."""
    correct = sum(sum(1 for c, e in zip(r["correct"], r["evaluated"]) if c and e) for r in records)
    evaluated = sum(sum(1 for e in r["evaluated"] if e) for r in records)
    return 100.0 * correct / evaluated if evaluated else float("nan")


def mean_error(record: dict) -> float:
    errs = [e for e, ok in zip(record["error_px"], record["evaluated"]) if ok]
    return float(np.mean(errs)) if errs else 0.0
