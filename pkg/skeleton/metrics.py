from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from control.errors import RejectedInputError
from skeleton.skeleton import Pose


@dataclass
class PCKResult:
    per_joint: np.ndarray     # (K,) fraction correct, nan where a joint was never evaluated
    mean: float               # pooled over every evaluated joint of every pose
    correct: np.ndarray       # (N, K) bool
    evaluated: np.ndarray     # (N, K) bool
    distances: np.ndarray     # (N, K) pixels

    def group_fractions(self, groups) -> dict:
        """Pool joints into table columns, e.g. {"Sld.": (2, 3)} -> {"Sld.": 0.83}."""
        out = {}
        for name, idx in groups:
            idx = list(idx)
            n = self.evaluated[:, idx].sum()
            out[name] = float(self.correct[:, idx].sum() / n) if n else float("nan")
        return out


def _stack(poses: Union[Pose, Sequence[Pose]]):
    if isinstance(poses, Pose):
        poses = [poses]
    coords = np.stack([p.coords for p in poses])
    valid = np.stack([p.valid_mask for p in poses])
    return coords, valid


def pck(pred, gt, alpha: float = 0.05, image_size: float = 256.0, joints=None) -> PCKResult:
    """
    Percentage of correct keypoints: error <= alpha * image_size counts as correct.
    - pred/gt: a Pose or a sequence of Poses (same order)
    - joints masked invalid in gt are left out of numerator and denominator
    - joints: optional subset of joint indices to evaluate (others are skipped)
    """
    if image_size <= 0:
        raise RejectedInputError(f"image_size must be > 0, got {image_size}")
    p_xy, _ = _stack(pred)
    g_xy, g_valid = _stack(gt)
    if p_xy.shape != g_xy.shape:
        raise RejectedInputError(f"prediction shape {p_xy.shape} does not match ground truth {g_xy.shape}")

    evaluated = g_valid.copy()
    if joints is not None:
        keep = np.zeros(g_valid.shape[1], dtype=bool)
        keep[list(joints)] = True
        evaluated &= keep[None, :]

    dist = np.linalg.norm(p_xy - g_xy, axis=-1)
    correct = (dist <= alpha * image_size) & evaluated

    counts = evaluated.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(counts > 0, correct.sum(axis=0) / np.maximum(counts, 1), np.nan)
    total = evaluated.sum()
    mean = float(correct.sum() / total) if total else float("nan")
    return PCKResult(per_joint, mean, correct, evaluated, dist)
