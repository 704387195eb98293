import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from control.errors import ConfigError, RejectedInputError


@dataclass(frozen=True)
class SkeletonSpec:
    """
    Joint names plus the bone tree connecting them.
    - bones are (parent_index, child_index) pairs, M = K - 1, rooted at `root`
    - evaluated_groups maps a table column (e.g. "Sld.") to the joints it pools
    """
    joint_names: tuple
    bones: tuple
    symmetric_pairs: tuple = ()
    root: int = 0
    evaluated_groups: tuple = ()      # ((column, (idx, ...)), ...)
    name: str = "custom"

    def __post_init__(self):
        K, M = len(self.joint_names), len(self.bones)
        if K < 2:
            raise RejectedInputError(f"skeleton needs at least 2 joints, got {K}")
        if M != K - 1:
            raise RejectedInputError(f"skeleton needs M = K - 1 bones, got K={K}, M={M}")
        for p, c in list(self.bones) + list(self.symmetric_pairs):
            if not (0 <= p < K and 0 <= c < K):
                raise RejectedInputError(f"joint index out of range in pair ({p}, {c}) for K={K}")
        if not 0 <= self.root < K:
            raise RejectedInputError(f"root index {self.root} out of range")

        # every non-root joint must have exactly one parent and reach the root
        parents = {}
        for p, c in self.bones:
            if c == self.root or c in parents:
                raise RejectedInputError(f"joint {self.joint_names[c]} has more than one parent")
            parents[c] = p
        for j in range(K):
            seen, cur = set(), j
            while cur != self.root:
                if cur in seen or cur not in parents:
                    raise RejectedInputError(f"joint {self.joint_names[j]} is not connected to the root")
                seen.add(cur)
                cur = parents[cur]

    # ---------- Derived structure ----------

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_bones(self) -> int:
        return len(self.bones)

    @property
    def parent_bone(self) -> tuple:
        """Index of the bone ending at each bone's parent joint (-1 at the root)."""
        ending = {c: m for m, (_, c) in enumerate(self.bones)}
        return tuple(ending.get(p, -1) for p, _ in self.bones)

    @property
    def topo_order(self) -> tuple:
        """Bone indices ordered so that every parent bone comes first."""
        pb = self.parent_bone
        order, placed = [], set()
        while len(order) < self.num_bones:
            for m in range(self.num_bones):
                if m not in placed and (pb[m] == -1 or pb[m] in placed):
                    order.append(m)
                    placed.add(m)
        return tuple(order)

    @property
    def evaluated_joints(self) -> tuple:
        if not self.evaluated_groups:
            return tuple(j for j in range(self.num_joints) if j != self.root)
        return tuple(sorted({j for _, idx in self.evaluated_groups for j in idx}))

    def skeleton_hash(self) -> str:
        payload = json.dumps({
            "joint_names": list(self.joint_names),
            "bones": [list(b) for b in self.bones],
            "symmetric_pairs": [list(s) for s in self.symmetric_pairs],
            "root": self.root,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    # ---------- File format ----------

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        names = list(d["joint_names"])
        index = {n: i for i, n in enumerate(names)}

        def idx(x):
            # pairs may use names or integer indices
            if isinstance(x, str):
                if x not in index:
                    raise RejectedInputError(f"unknown joint name '{x}' in skeleton file")
                return index[x]
            return int(x)

        groups = tuple((col, tuple(idx(j) for j in js)) for col, js in d.get("evaluated_groups", {}).items())
        return cls(
            joint_names=tuple(names),
            bones=tuple((idx(p), idx(c)) for p, c in d["bones"]),
            symmetric_pairs=tuple((idx(a), idx(b)) for a, b in d.get("symmetric_pairs", [])),
            root=idx(d.get("root", 0)),
            evaluated_groups=groups,
            name=d.get("name", "custom"),
        )

    @classmethod
    def load(cls, path: str) -> "SkeletonSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                d = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"skeleton file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"skeleton file {path} is not valid JSON: {e}")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        n = self.joint_names
        return {
            "name": self.name,
            "root": n[self.root],
            "joint_names": list(n),
            "bones": [[n[p], n[c]] for p, c in self.bones],
            "symmetric_pairs": [[n[a], n[b]] for a, b in self.symmetric_pairs],
            "evaluated_groups": {col: [n[j] for j in idx] for col, idx in self.evaluated_groups},
        }

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


@dataclass
class Pose:
    """K joints in image pixels; masked-out joints are ignored by metrics and losses."""
    coords: np.ndarray
    valid_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.valid_mask is None:
            self.valid_mask = np.ones(len(self.coords), dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(-1)
        if len(self.valid_mask) != len(self.coords):
            raise RejectedInputError(f"valid_mask has {len(self.valid_mask)} entries for {len(self.coords)} joints")

    @property
    def num_joints(self) -> int:
        return len(self.coords)

    def translated(self, dx: float, dy: float) -> "Pose":
        return Pose(self.coords + np.array([dx, dy]), self.valid_mask.copy())


@dataclass
class BoneVectorSet:
    """Bone displacements divided by the pose's bounding-box diagonal."""
    vectors: np.ndarray
    scale: float = 1.0
    root: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 2)
        self.root = np.asarray(self.root, dtype=np.float64).reshape(2)

    @property
    def num_bones(self) -> int:
        return len(self.vectors)


def bbox_diagonal(coords: np.ndarray) -> float:
    span = coords.max(axis=0) - coords.min(axis=0)
    return float(np.hypot(span[0], span[1]))


def bone_vectors(pose: Pose, skel: SkeletonSpec) -> BoneVectorSet:
    """Express a pose as scale-normalized parent->child vectors."""
    if pose.num_joints != skel.num_joints:
        raise RejectedInputError(f"pose has {pose.num_joints} joints, skeleton has {skel.num_joints}")
    if not np.all(np.isfinite(pose.coords)):
        raise RejectedInputError("pose coordinates must be finite")
    endpoints = {j for b in skel.bones for j in b}
    if not all(pose.valid_mask[j] for j in endpoints):
        raise RejectedInputError("every bone endpoint must be a valid joint")

    scale = bbox_diagonal(pose.coords)
    if scale <= 0.0:
        raise RejectedInputError("degenerate pose: zero bounding-box diagonal")

    parents = np.array([p for p, _ in skel.bones])
    children = np.array([c for _, c in skel.bones])
    vectors = (pose.coords[children] - pose.coords[parents]) / scale
    return BoneVectorSet(vectors, scale, pose.coords[skel.root].copy())


def reconstruct_pose(bvs: BoneVectorSet, skel: SkeletonSpec) -> Pose:
    """Walk the tree from the root, accumulating scale * vector per bone."""
    coords = np.zeros((skel.num_joints, 2))
    coords[skel.root] = bvs.root
    for m in skel.topo_order:
        p, c = skel.bones[m]
        coords[c] = coords[p] + bvs.scale * bvs.vectors[m]
    return Pose(coords)


def angular_deviation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unsigned angle (radians, in [0, pi]) between matching bone vectors."""
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = (a * b).sum(axis=-1)
    return np.abs(np.arctan2(cross, dot))


def rotate_vectors(vectors: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles), np.sin(angles)
    x, y = vectors[..., 0], vectors[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


# ---------- Batched torch variants (differentiable) ----------

def bone_vectors_torch(coords: torch.Tensor, skel: SkeletonSpec, eps: float = 1e-6):
    """
    coords: (B, K, 2) -> vectors (B, M, 2), scale (B,), degenerate (B,) bool.
    Degenerate rows get scale 1 so the division stays finite; callers drop them.
    """
    parents = torch.tensor([p for p, _ in skel.bones], device=coords.device)
    children = torch.tensor([c for _, c in skel.bones], device=coords.device)
    span = coords.amax(dim=1) - coords.amin(dim=1)
    diag2 = (span ** 2).sum(dim=-1)
    degenerate = diag2 <= eps ** 2
    scale = torch.sqrt(diag2.clamp_min(1e-24))
    safe = torch.where(degenerate, torch.ones_like(scale), scale)
    vectors = (coords[:, children] - coords[:, parents]) / safe[:, None, None]
    return vectors, scale, degenerate
