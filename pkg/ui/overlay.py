import os

import numpy as np
from PIL import Image, ImageDraw

from skeleton.skeleton import Pose, SkeletonSpec

# Colors for the skeleton overlays (RGB)
COLORS = {
    "GT": (40, 220, 40),
    "PRED": (230, 40, 40),
}


def _draw_skeleton(draw: ImageDraw.ImageDraw, pose: Pose, skel: SkeletonSpec, color, width: int, r: int):
    xy = pose.coords
    for p, c in skel.bones:
        if pose.valid_mask[p] and pose.valid_mask[c]:
            draw.line([tuple(xy[p]), tuple(xy[c])], fill=color, width=width)
    for j, (x, y) in enumerate(xy):
        if pose.valid_mask[j]:
            draw.ellipse([x - r, y - r, x + r, y + r], outline=color, width=1)


def draw_overlay(image: np.ndarray, pred: Pose, gt: Pose, skel: SkeletonSpec, caption: str = "") -> Image.Image:
    """Ground truth in green, prediction in red, on top of the input image."""
    im = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(im)
    _draw_skeleton(draw, gt, skel, COLORS["GT"], 2, 3)
    _draw_skeleton(draw, pred, skel, COLORS["PRED"], 1, 2)
    if caption:
        draw.text((4, 4), caption, fill=(255, 255, 255))
    return im


def save_overlays(out_dir: str, items, skel: SkeletonSpec):
    """items: iterable of (name, image, pred, gt, caption); one PNG per item."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, image, pred, gt, caption in items:
        path = os.path.join(out_dir, f"{name}.png")
        draw_overlay(image, pred, gt, skel, caption).save(path)
        paths.append(path)
    return paths
