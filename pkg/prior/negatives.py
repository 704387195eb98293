# prior/negatives.py
# Training samples for the pose prior:
#   ground_truth         d = 0, bone vectors of a labeled pose
#   vonmises             bone directions rotated by Von-Mises draws, d = mean |rotation|
#   occluded_prediction  source-only network run on an occluded image, d = mean angular error
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from control.errors import DatasetError, RejectedInputError
from skeleton.skeleton import (BoneVectorSet, Pose, SkeletonSpec, angular_deviation, bone_vectors,
                               reconstruct_pose, rotate_vectors)

log = logging.getLogger("prior")

PROVENANCES = ("ground_truth", "occluded_prediction", "vonmises")


@dataclass
class PriorSample:
    theta: BoneVectorSet
    d: float
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise RejectedInputError(f"unknown provenance '{self.provenance}'")
        if not np.isfinite(self.d) or self.d < 0:
            raise RejectedInputError(f"target distance must be finite and >= 0, got {self.d}")
        if (self.d == 0) != (self.provenance == "ground_truth"):
            raise RejectedInputError(f"d = {self.d} is inconsistent with provenance '{self.provenance}'")


def positive(pose: Pose, skel: SkeletonSpec) -> PriorSample:
    return PriorSample(bone_vectors(pose, skel), 0.0, "ground_truth")


def _labeled(theta: BoneVectorSet, d: float, provenance: str) -> PriorSample:
    # exact zero deviation can only mean an unchanged pose
    if d == 0.0:
        return PriorSample(theta, 0.0, "ground_truth")
    return PriorSample(theta, d, provenance)


def vonmises_negative(pose: Pose, skel: SkeletonSpec, kappa: float,
                      max_bones_perturbed: Optional[int], rng: np.random.Generator,
                      mode: str = "angle", angles: Optional[np.ndarray] = None) -> PriorSample:
    """
    Perturb a plausible pose with Von-Mises(0, kappa) noise.
    - mode "angle": a random subset of bones is rotated, bone lengths preserved
    - mode "position": the child joints of those bones move by |draw| * bone length
      in a uniform random direction
    - angles: optional per-bone draws (length M, 0 = untouched) replacing the random ones
    d is the mean over all M bones of the angular deviation from the input pose.
    """
    if kappa <= 0:
        raise RejectedInputError(f"kappa must be > 0, got {kappa}")
    if mode not in ("angle", "position"):
        raise RejectedInputError(f"mode must be angle|position, got {mode}")
    base = bone_vectors(pose, skel)
    M = skel.num_bones

    if angles is None:
        limit = M if max_bones_perturbed is None else min(max_bones_perturbed, M)
        angles = np.zeros(M)
        if limit > 0:
            count = int(rng.integers(1, limit + 1))
            chosen = rng.choice(M, size=count, replace=False)
            angles[chosen] = rng.vonmises(0.0, kappa, size=count)
    angles = np.asarray(angles, dtype=np.float64).reshape(M)
    if not np.any(angles):
        return PriorSample(base, 0.0, "ground_truth")

    if mode == "angle":
        rotated = BoneVectorSet(rotate_vectors(base.vectors, angles), base.scale, base.root)
        coords = reconstruct_pose(rotated, skel).coords
    else:
        coords = pose.coords.copy()
        lengths = np.linalg.norm(base.vectors, axis=1) * base.scale
        for m in np.nonzero(angles)[0]:
            psi = rng.uniform(0.0, 2.0 * np.pi)
            coords[skel.bones[m][1]] += abs(angles[m]) * lengths[m] * np.array([np.cos(psi), np.sin(psi)])

    # renormalize by the perturbed pose's own box, as every other pose is
    theta = bone_vectors(Pose(coords), skel)
    d = float(angular_deviation(theta.vectors, base.vectors).mean())
    return _labeled(theta, d, "vonmises")


def prediction_negative(pred: Pose, gt: Pose, skel: SkeletonSpec, threshold: float = 0.02,
                        counter: Optional[Counter] = None) -> Optional[PriorSample]:
    """
    Label a predicted pose by its mean angular deviation from ground truth.
    Near-perfect predictions (d < threshold) are relabeled as ground_truth with d = 0.
    Degenerate predictions are skipped (None) and counted under "skipped_negative".
    """
    try:
        theta = bone_vectors(Pose(pred.coords), skel)
    except RejectedInputError:
        if counter is not None:
            counter["skipped_negative"] += 1
        return None
    d = float(angular_deviation(theta.vectors, bone_vectors(gt, skel).vectors).mean())
    if d < threshold:
        return PriorSample(theta, 0.0, "ground_truth")
    return PriorSample(theta, d, "occluded_prediction")


def model_prediction_negative(predictor, sample, skel: SkeletonSpec, threshold: float = 0.02,
                              counter: Optional[Counter] = None) -> Optional[PriorSample]:
    """Run the source-only predictor on an occluded sample and label its output."""
    (pred, _conf), = predictor.predict([sample.image])
    return prediction_negative(pred, sample.pose, skel, threshold, counter)


def sample_kappa(rng: np.random.Generator, kappa_range) -> float:
    """Log-uniform concentration, so both small and large deviations are covered."""
    lo, hi = np.log(kappa_range[0]), np.log(kappa_range[1])
    return float(np.exp(rng.uniform(lo, hi)))


# ---------- Negative cache (JSON lines) ----------

def save_samples(path: str, samples: list):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps({"theta": s.theta.vectors.tolist(), "scale": s.theta.scale,
                                "root": s.theta.root.tolist(), "d": s.d,
                                "provenance": s.provenance}, sort_keys=True) + "\n")


def load_samples(path: str) -> list:
    out = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                r = json.loads(line)
                out.append(PriorSample(BoneVectorSet(np.array(r["theta"]), r["scale"], np.array(r["root"])),
                                       float(r["d"]), r["provenance"]))
    except FileNotFoundError:
        raise DatasetError(f"missing negative cache: {path}")
    except (json.JSONDecodeError, KeyError) as e:
        raise DatasetError(f"corrupt negative cache {path}: {e}")
    return out
