import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from control.errors import RejectedInputError
from skeleton.skeleton import BoneVectorSet, SkeletonSpec


class PriorModel(nn.Module):
    """
    Learned implausibility distance over bone-vector sets.
    - encoder: two linear layers per bone, fed the bone's own vector and its parent bone's
      feature (zeros at the root), evaluated in kinematic-tree order
    - decoder: five linear layers over the concatenated bone features
    - softplus on the output, so the distance is >= 0 everywhere
    """

    def __init__(self, skel: SkeletonSpec, feature_dim: int = 32, hidden_dim: int = 128):
        super().__init__()
        self.skel = skel
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self._parent = skel.parent_bone
        self._order = skel.topo_order

        self.bone_encoders = nn.ModuleList([
            nn.Sequential(nn.Linear(2 + feature_dim, feature_dim), nn.ReLU(),
                          nn.Linear(feature_dim, feature_dim), nn.ReLU())
            for _ in range(skel.num_bones)
        ])
        dims = [skel.num_bones * feature_dim] + [hidden_dim] * 4 + [1]
        layers = []
        for i in range(5):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < 4:
                layers.append(nn.ReLU())
        self.decoder = nn.Sequential(*layers)

    def architecture(self) -> dict:
        return {"feature_dim": self.feature_dim, "hidden_dim": self.hidden_dim}

    def encode(self, vectors: torch.Tensor) -> torch.Tensor:
        B = vectors.shape[0]
        feats = [None] * self.skel.num_bones
        for m in self._order:
            p = self._parent[m]
            parent_feat = feats[p] if p >= 0 else vectors.new_zeros(B, self.feature_dim)
            feats[m] = self.bone_encoders[m](torch.cat([vectors[:, m], parent_feat], dim=-1))
        return torch.cat(feats, dim=-1)

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        """(B, M, 2) -> (B,) non-negative distances."""
        if vectors.ndim != 3 or vectors.shape[1:] != (self.skel.num_bones, 2):
            raise RejectedInputError(
                f"expected bone vectors (B, {self.skel.num_bones}, 2), got {tuple(vectors.shape)}")
        return F.softplus(self.decoder(self.encode(vectors))).squeeze(-1)


def freeze(prior: nn.Module) -> nn.Module:
    """Eval mode and no parameter gradients; inputs can still carry gradient."""
    prior.eval()
    for p in prior.parameters():
        p.requires_grad_(False)
    return prior


def prior_distance(prior: PriorModel, theta: BoneVectorSet) -> float:
    vectors = np.asarray(theta.vectors, dtype=np.float64)
    if not np.all(np.isfinite(vectors)):
        raise RejectedInputError("bone vectors must be finite")
    dtype = next(prior.parameters()).dtype
    was_training = prior.training
    prior.eval()
    try:
        with torch.no_grad():
            out = prior(torch.as_tensor(vectors, dtype=dtype)[None])
    finally:
        prior.train(was_training)
    return float(out[0])


def prior_regression_loss(prior: nn.Module, vectors: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and target distances."""
    return ((prior(vectors) - d.to(vectors.dtype)) ** 2).mean()
