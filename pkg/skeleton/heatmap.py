from dataclasses import dataclass

import numpy as np
import torch

from control.errors import RejectedInputError
from skeleton.skeleton import Pose

# 64x64 grid for 256x256 images, sigma 2 cells
DEFAULT_GRID = (64, 64)
DEFAULT_SCALE = 4.0
DEFAULT_SIGMA = 2.0


@dataclass
class Heatmap:
    """K x Hh x Wh non-negative grid; cell (r, c) sits at image (c * scale, r * scale)."""
    values: np.ndarray
    grid_to_image_scale: float = DEFAULT_SCALE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise RejectedInputError(f"heatmap must be K x H x W, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise RejectedInputError("heatmap entries must be non-negative")

    @classmethod
    def from_network(cls, raw, scale: float = DEFAULT_SCALE) -> "Heatmap":
        """Wrap one raw network output channel stack; negatives are clamped to 0."""
        if isinstance(raw, torch.Tensor):
            raw = raw.detach().cpu().double().numpy()
        return cls(np.clip(raw, 0.0, None), scale)


def _nearest_cells(coords: np.ndarray, scale: float) -> np.ndarray:
    # round half up, never banker's rounding
    return np.floor(coords / scale + 0.5).astype(np.int64)


def render_targets(coords: np.ndarray, valid: np.ndarray, sigma: float,
                   grid=DEFAULT_GRID, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """
    Vectorized renderer for a batch of poses.
    coords (..., K, 2) image pixels, valid (..., K) -> float32 (..., K, Hh, Wh).
    """
    if sigma <= 0:
        raise RejectedInputError(f"sigma must be > 0, got {sigma}")
    Hh, Wh = grid
    if Hh < 8 or Wh < 8:
        raise RejectedInputError(f"heatmap grid must be at least 8x8, got {grid}")
    coords = np.asarray(coords, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not np.all(np.isfinite(coords[valid])):
        raise RejectedInputError("joint coordinates must be finite")

    safe = np.where(np.isfinite(coords), coords, 0.0)
    cells = _nearest_cells(safe, scale)
    col, row = cells[..., 0], cells[..., 1]
    inside = valid & (row >= 0) & (row < Hh) & (col >= 0) & (col < Wh)

    rr = np.arange(Hh, dtype=np.float64)[:, None]
    cc = np.arange(Wh, dtype=np.float64)[None, :]
    d2 = (rr - row[..., None, None]) ** 2 + (cc - col[..., None, None]) ** 2
    out = np.exp(-d2 / (2.0 * sigma ** 2))
    out *= inside[..., None, None]
    return out.astype(np.float32)


def render_heatmap(pose: Pose, sigma: float = DEFAULT_SIGMA, grid=DEFAULT_GRID,
                   scale: float = DEFAULT_SCALE) -> Heatmap:
    """Peak-1 Gaussian per valid in-bounds joint; everything else is an all-zero channel."""
    if not np.all(np.isfinite(pose.coords)):
        raise RejectedInputError("joint coordinates must be finite")
    values = render_targets(pose.coords, pose.valid_mask, sigma, grid, scale)
    return Heatmap(values, scale)


def decode_heatmap(h: Heatmap):
    """
    Per-channel argmax (ties -> smallest row-major index) mapped back to image pixels.
    Returns (Pose, confidences) where confidence is the channel's peak value.
    """
    K, Hh, Wh = h.values.shape
    flat = h.values.reshape(K, Hh * Wh)
    idx = np.argmax(flat, axis=1)
    rows, cols = idx // Wh, idx % Wh
    coords = np.stack([cols, rows], axis=1).astype(np.float64) * h.grid_to_image_scale
    conf = flat[np.arange(K), idx]
    return Pose(coords), conf


# ---------- Torch helpers used inside training loops ----------

def argmax_cells(heatmaps: torch.Tensor):
    """(B, K, H, W) -> rows (B, K), cols (B, K), peaks (B, K); first-index tie-break."""
    B, K, H, W = heatmaps.shape
    flat = heatmaps.reshape(B, K, H * W)
    idx = flat.argmax(dim=-1)
    peaks = flat.gather(-1, idx[..., None]).squeeze(-1)
    return idx // W, idx % W, peaks


def gaussian_at_cells(rows: torch.Tensor, cols: torch.Tensor, mask: torch.Tensor,
                      sigma: float, grid) -> torch.Tensor:
    """Clean peak-1 Gaussians centred on integer cells; masked-out channels are zero."""
    H, W = grid
    rr = torch.arange(H, dtype=torch.float32, device=rows.device).view(1, 1, H, 1)
    cc = torch.arange(W, dtype=torch.float32, device=rows.device).view(1, 1, 1, W)
    d2 = (rr - rows[..., None, None].float()) ** 2 + (cc - cols[..., None, None].float()) ** 2
    g = torch.exp(-d2 / (2.0 * sigma ** 2))
    return g * mask[..., None, None].float()


def soft_argmax(heatmaps: torch.Tensor, scale: float = DEFAULT_SCALE,
                temperature: float = 0.1) -> torch.Tensor:
    """
    Differentiable decode: softmax over cells of h / (temperature * peak).
    (B, K, H, W) -> (B, K, 2) image pixels (x, y).
    """
    B, K, H, W = heatmaps.shape
    h = heatmaps.clamp_min(0.0).reshape(B, K, H * W)
    peak = h.detach().amax(dim=-1, keepdim=True).clamp_min(1e-6)
    weights = torch.softmax(h / (temperature * peak), dim=-1).reshape(B, K, H, W)
    rows = torch.arange(H, dtype=heatmaps.dtype, device=heatmaps.device)
    cols = torch.arange(W, dtype=heatmaps.dtype, device=heatmaps.device)
    y = (weights.sum(dim=3) * rows).sum(dim=-1)
    x = (weights.sum(dim=2) * cols).sum(dim=-1)
    return torch.stack([x, y], dim=-1) * scale
