import numpy as np
from scipy.ndimage import gaussian_filter

from control.errors import ConfigError, RejectedInputError
from synth.styles import OcclusionSpec


def figure_bbox(figure_mask: np.ndarray):
    """(y0, x0, y1, x1) inclusive bounds of the figure, or the whole image if empty."""
    ys, xs = np.nonzero(figure_mask)
    if len(ys) == 0:
        h, w = figure_mask.shape
        return 0, 0, h - 1, w - 1
    return ys.min(), xs.min(), ys.max(), xs.max()


def patch_boxes(figure_mask: np.ndarray, occ: OcclusionSpec, seed: int) -> list:
    """
    Square patches centred on points drawn inside the figure's bounding box.
    A patch that would cross the border is shifted back inside, so every patch keeps
    its full size. Centres depend only on (mask, patch_count, seed), so a higher
    severity on the same seed gives larger squares that contain the smaller ones.
    """
    h, w = figure_mask.shape
    size = occ.patch_size
    if size > min(h, w):
        raise ConfigError(f"occluder patch {size}px does not fit a {h}x{w} image")
    rng = np.random.default_rng([seed, 0])
    y0, x0, y1, x1 = figure_bbox(figure_mask)
    boxes = []
    for _ in range(occ.patch_count):
        cy = int(rng.integers(y0, y1 + 1))
        cx = int(rng.integers(x0, x1 + 1))
        if size == 0:
            continue
        top = min(max(cy - size // 2, 0), h - size)
        left = min(max(cx - size // 2, 0), w - size)
        boxes.append((top, left, top + size, left + size))
    return boxes


def occluder_mask(figure_mask: np.ndarray, occ: OcclusionSpec, seed: int) -> np.ndarray:
    out = np.zeros(figure_mask.shape, dtype=bool)
    for top, left, bottom, right in patch_boxes(figure_mask, occ, seed):
        out[top:bottom, left:right] = True
    return out


def occlude(img: np.ndarray, figure_mask: np.ndarray, occ: OcclusionSpec, seed: int):
    """
    Composite occluder patches over the figure region.
    Returns (occluded image, visible silhouette = figure_mask AND NOT occluder).
    """
    figure_mask = np.asarray(figure_mask, dtype=bool)
    if img.shape[:2] != figure_mask.shape:
        raise RejectedInputError(f"mask shape {figure_mask.shape} does not match image {img.shape[:2]}")
    if occ.severity == 0:
        return img.copy(), figure_mask.copy()

    boxes = patch_boxes(figure_mask, occ, seed)
    # fill draws come from their own stream so placement never depends on fill type
    rng = np.random.default_rng([seed, 1])
    out = img.copy()
    hidden = np.zeros(figure_mask.shape, dtype=bool)
    for top, left, bottom, right in boxes:
        color = rng.integers(0, 256, size=3)
        ph, pw = bottom - top, right - left
        if occ.fill == "textured":
            noise = gaussian_filter(rng.standard_normal((ph, pw, 3)), sigma=(2.0, 2.0, 0))
            noise /= noise.std() + 1e-8
            patch = np.clip(color + 40.0 * noise, 0, 255)
        else:
            patch = np.broadcast_to(color, (ph, pw, 3))
        out[top:bottom, left:right] = patch.astype(np.uint8)
        hidden[top:bottom, left:right] = True
    return out, figure_mask & ~hidden
