import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from config.config import AugmentConfig


def _rotation(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _shear(deg: float) -> np.ndarray:
    return np.array([[1.0, math.tan(math.radians(deg)), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _scaling(s: float) -> np.ndarray:
    return np.diag([s, s, 1.0])


@dataclass
class AugmentationTransform:
    """
    One affine draw (3 x 3, image pixels, applied about the image centre) plus photometric factors.
    - apply_points / invert_points map (x, y) pixel coordinates exactly
    - heatmap_matrix is the same map expressed in heatmap cells
    - photometric factors touch images only and have no inverse
    """
    matrix: np.ndarray
    brightness: float = 1.0
    contrast: float = 1.0
    image_size: int = 256
    heatmap_size: int = 64

    @classmethod
    def identity(cls, image_size: int = 256, heatmap_size: int = 64) -> "AugmentationTransform":
        return cls(np.eye(3), 1.0, 1.0, image_size, heatmap_size)

    @classmethod
    def sample(cls, cfg: AugmentConfig, rng: np.random.Generator, image_size: int = 256,
               heatmap_size: int = 64) -> "AugmentationTransform":
        # draw order is fixed so a seed always gives the same transform
        rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
        scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        tx, ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * image_size
        bright = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
        contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)

        c = image_size / 2.0
        m = _translation(c + tx, c + ty) @ _rotation(rot) @ _shear(shear) @ _scaling(scale) @ _translation(-c, -c)
        return cls(m, bright, contrast, image_size, heatmap_size)

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    @property
    def heatmap_matrix(self) -> np.ndarray:
        s = self.image_size / self.heatmap_size
        S = _scaling(s)
        return np.linalg.inv(S) @ self.matrix @ S

    def apply_points(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.matrix[:2, :2].T + self.matrix[:2, 2]

    def invert_points(self, xy: np.ndarray) -> np.ndarray:
        inv = self.inverse_matrix
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ inv[:2, :2].T + inv[:2, 2]


# ---------- Tensor warps ----------

def _normalized_theta(sample_mats: np.ndarray, size: int) -> torch.Tensor:
    """Pixel-space sampling matrices -> affine_grid thetas (align_corners=True convention)."""
    k = 2.0 / (size - 1)
    N = np.array([[k, 0.0, -1.0], [0.0, k, -1.0], [0.0, 0.0, 1.0]])
    thetas = N[None] @ sample_mats @ np.linalg.inv(N)[None]
    return torch.from_numpy(np.ascontiguousarray(thetas[:, :2, :]))


def _warp(x: torch.Tensor, sample_mats: np.ndarray) -> torch.Tensor:
    """out[q] = x[sample_mat @ q], bilinear with zero padding."""
    B, C, H, W = x.shape
    theta = _normalized_theta(sample_mats, W).to(device=x.device, dtype=x.dtype)
    grid = F.affine_grid(theta, (B, C, H, W), align_corners=True)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def warp_images(images: torch.Tensor, transforms) -> torch.Tensor:
    """Apply each transform (affine, then photometric) to its (3, S, S) image in [0, 1]."""
    mats = np.stack([t.inverse_matrix for t in transforms])
    out = _warp(images, mats)
    bright = torch.tensor([t.brightness for t in transforms], dtype=out.dtype).view(-1, 1, 1, 1)
    contrast = torch.tensor([t.contrast for t in transforms], dtype=out.dtype).view(-1, 1, 1, 1)
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    return (((out - mean) * contrast + mean) * bright).clamp(0.0, 1.0)


def warp_heatmaps(heatmaps: torch.Tensor, transforms) -> torch.Tensor:
    """Heatmaps in the original frame -> augmented frame."""
    return _warp(heatmaps, np.stack([np.linalg.inv(t.heatmap_matrix) for t in transforms]))


def unwarp_heatmaps(heatmaps: torch.Tensor, transforms) -> torch.Tensor:
    """Heatmaps in the augmented frame -> original frame (the inverse augmentation)."""
    return _warp(heatmaps, np.stack([t.heatmap_matrix for t in transforms]))


def cells_inside(cells_xy: np.ndarray, grid: int) -> np.ndarray:
    """(..., 2) cell coordinates (col, row) -> bool, rounded cell lies on the grid."""
    r = np.floor(cells_xy + 0.5)
    return np.all((r >= 0) & (r < grid), axis=-1)


def map_cells(cells_xy: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return cells_xy @ matrix[:2, :2].T + matrix[:2, 2]
