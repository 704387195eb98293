import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

import torch

from config.config import AdaptConfig
from control.errors import NonFiniteLossError, RejectedInputError
from models.training import heatmap_mse
from skeleton.heatmap import argmax_cells, gaussian_at_cells

TERMS = ("src_ocl", "ant", "pred_vis", "pred")


def pseudo_label(teacher_heatmaps: torch.Tensor, tau: float, sigma: float = 2.0):
    """
    Teacher heatmaps (B, K, H, W) -> (targets, mask, rows, cols).
    A joint is kept when its peak reaches tau; kept joints get a clean Gaussian at the
    argmax cell, dropped joints an all-zero target.
    """
    h = teacher_heatmaps.detach().clamp_min(0.0)
    rows, cols, peaks = argmax_cells(h)
    mask = peaks >= tau
    targets = gaussian_at_cells(rows, cols, mask, sigma, h.shape[-2:]).to(h.dtype)
    return targets, mask, rows, cols


def per_sample_error(student: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """e_i = sum_k m_ik * mean_cells((s - t)^2) / K  ->  (B,)"""
    if student.shape != targets.shape:
        raise RejectedInputError(f"student {tuple(student.shape)} vs targets {tuple(targets.shape)}")
    K = student.shape[1]
    per_joint = ((student - targets.to(student.dtype)) ** 2).mean(dim=(2, 3))
    return (per_joint * mask.to(student.dtype)).sum(dim=1) / K


def consistency_loss(student: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor,
                     visibility: Optional[torch.Tensor] = None, mode: str = "plain",
                     counter: Optional[Counter] = None) -> torch.Tensor:
    """
    Confidence-masked squared difference between (unwarped) student heatmaps and pseudo targets.
    - plain:    (1/|B|) * sum_i e_i
    - weighted: (1/(|B| * sum_i v_i)) * sum_i v_i e_i; zero visibility mass gives 0 and
                counts "zero_visibility"
    """
    e = per_sample_error(student, targets, mask)
    B = e.shape[0]
    if mode == "plain":
        return e.sum() / B
    if mode != "weighted":
        raise RejectedInputError(f"mode must be plain|weighted, got {mode}")
    if visibility is None:
        raise RejectedInputError("weighted consistency needs visibility scores")
    v = torch.as_tensor(visibility, dtype=e.dtype, device=e.device)
    total_v = v.sum()
    if float(total_v) == 0.0:
        if counter is not None:
            counter["zero_visibility"] += 1
        return e.sum() * 0.0
    return (v * e).sum() / (B * total_v)


def occluded_source_loss(student_heatmaps: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Heatmap MSE on occluded source images against targets of the unoccluded pose."""
    return heatmap_mse(student_heatmaps, targets, mask)


@dataclass
class CurriculumState:
    current_epoch: int
    total_epochs: int
    mode: str = "schedule"    # schedule | zero | one (ablation overrides)

    def __post_init__(self):
        if self.total_epochs <= 0:
            raise RejectedInputError(f"total_epochs must be > 0, got {self.total_epochs}")
        if self.current_epoch < 0:
            raise RejectedInputError(f"current_epoch must be >= 0, got {self.current_epoch}")

    @property
    def gamma(self) -> float:
        return curriculum_gamma(self)


def curriculum_gamma(state: CurriculumState) -> float:
    """exp(-epoch / total), epochs counted from 0."""
    if state.mode == "zero":
        return 0.0
    if state.mode == "one":
        return 1.0
    return math.exp(-state.current_epoch / state.total_epochs)


def total_loss(components: dict, cfg: AdaptConfig, state: Union[CurriculumState, float]):
    """
    src_ocl + lambda_a * ant + lambda_v * (gamma * pred_vis + (1 - gamma) * pred).
    Returns (loss, breakdown); any non-finite component raises NonFiniteLossError naming it.
    """
    gamma = state.gamma if isinstance(state, CurriculumState) else float(state)
    for term in TERMS:
        if term not in components:
            raise RejectedInputError(f"missing loss component '{term}'")
        value = components[term]
        if not math.isfinite(float(value)):
            raise NonFiniteLossError(term, float(value))

    vis = gamma * components["pred_vis"] + (1.0 - gamma) * components["pred"]
    loss = components["src_ocl"] + cfg.lambda_a * components["ant"] + cfg.lambda_v * vis
    if not math.isfinite(float(loss)):
        raise NonFiniteLossError("total", float(loss))

    breakdown = {term: float(components[term]) for term in TERMS}
    breakdown.update({"vis": float(vis), "gamma": gamma, "total": float(loss)})
    return loss, breakdown
