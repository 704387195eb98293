from collections import Counter
from typing import Callable, Optional

import torch

from skeleton.heatmap import soft_argmax
from skeleton.skeleton import SkeletonSpec, bone_vectors_torch


def anatomical_loss(prior: Callable[[torch.Tensor], torch.Tensor], heatmaps: torch.Tensor,
                    skel: SkeletonSpec, scale: float, temperature: float = 0.1,
                    counter: Optional[Counter] = None) -> torch.Tensor:
    """
    Mean prior distance of the poses decoded from a batch of student heatmaps.
    - decoding is the soft-argmax, so gradient reaches the heatmaps
    - the prior should be frozen (see prior_model.freeze); only its inputs carry gradient
    - degenerate decoded poses add 0 and are counted under "degenerate_pose"
    """
    B = heatmaps.shape[0]
    coords = soft_argmax(heatmaps, scale, temperature)
    vectors, _scale, degenerate = bone_vectors_torch(coords, skel)
    dist = prior(vectors)
    dist = torch.where(degenerate, torch.zeros_like(dist), dist)
    if counter is not None:
        counter["degenerate_pose"] += int(degenerate.sum())
    return dist.sum() / B
