# Articulated stick person: joint angles from bounded ranges, drawn with PIL.
import math

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from synth.styles import DomainStyle, BASE_IMAGE_SIZE

# Names the generator can produce; a skeleton may use any subset of them
FIGURE_JOINTS = (
    "pelvis", "neck", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)

# Segment lengths as fractions of body height
LENGTHS = {
    "torso": 0.30, "head": 0.12, "shoulder": 0.11, "hip": 0.07,
    "upper_arm": 0.17, "forearm": 0.15, "thigh": 0.23, "shin": 0.22,
}

# Angle ranges in degrees; positive = away from the body midline
RANGES = {
    "lean": (-20.0, 20.0),
    "head": (-15.0, 15.0),
    "upper_arm": (-20.0, 160.0),
    "elbow": (0.0, 140.0),
    "thigh": (-15.0, 60.0),
    "knee": (0.0, 100.0),
}

HEIGHT_RANGE = (110.0, 170.0)
MARGIN = 10.0


def _dir(phi: float) -> np.ndarray:
    # angle measured from straight down (+y), positive towards +x
    return np.array([math.sin(phi), math.cos(phi)])


def sample_joints(rng: np.random.Generator, image_size: int = BASE_IMAGE_SIZE):
    """Draw one plausible figure inside the image; returns (joints by name, head radius)."""
    ratio = image_size / BASE_IMAGE_SIZE
    h = rng.uniform(*HEIGHT_RANGE) * ratio
    u = lambda key: math.radians(rng.uniform(*RANGES[key]))

    lean = u("lean")
    down = -lean                          # torso "down" direction
    J = {"pelvis": np.zeros(2)}
    J["neck"] = J["pelvis"] - LENGTHS["torso"] * h * _dir(down)
    J["head"] = J["neck"] - LENGTHS["head"] * h * _dir(down + u("head"))

    across = np.array([math.cos(lean), math.sin(lean)])   # perpendicular to the torso
    for side, sign in (("l", 1.0), ("r", -1.0)):
        J[f"{side}_shoulder"] = J["neck"] + sign * LENGTHS["shoulder"] * h * across
        J[f"{side}_hip"] = J["pelvis"] + sign * LENGTHS["hip"] * h * across

        phi_ua = down + sign * u("upper_arm")
        J[f"{side}_elbow"] = J[f"{side}_shoulder"] + LENGTHS["upper_arm"] * h * _dir(phi_ua)
        phi_fa = phi_ua - sign * u("elbow")
        J[f"{side}_wrist"] = J[f"{side}_elbow"] + LENGTHS["forearm"] * h * _dir(phi_fa)

        phi_th = 0.3 * down + sign * u("thigh")
        J[f"{side}_knee"] = J[f"{side}_hip"] + LENGTHS["thigh"] * h * _dir(phi_th)
        phi_sh = phi_th - sign * u("knee")
        J[f"{side}_ankle"] = J[f"{side}_knee"] + LENGTHS["shin"] * h * _dir(phi_sh)

    pts = np.stack(list(J.values()))
    head_r = 0.07 * h
    lo = pts.min(axis=0) - head_r - MARGIN * ratio
    hi = pts.max(axis=0) + head_r + MARGIN * ratio
    span = hi - lo
    if np.any(span > image_size):
        # shrink about the pelvis until it fits
        shrink = float(image_size / span.max())
        J = {k: v * shrink for k, v in J.items()}
        lo, hi, head_r = lo * shrink, hi * shrink, head_r * shrink
    offset = np.array([rng.uniform(-lo[0], image_size - hi[0]),
                       rng.uniform(-lo[1], image_size - hi[1])])
    return {k: v + offset for k, v in J.items()}, head_r


def render_background(rng: np.random.Generator, style: DomainStyle, image_size: int) -> np.ndarray:
    """Vertical two-colour gradient plus smoothed noise, float RGB in 0..255."""
    top = np.array([rng.uniform(*r) for r in style.background_palette[0]])
    bottom = np.array([rng.uniform(*r) for r in style.background_palette[1]])
    t = np.linspace(0.0, 1.0, image_size)[:, None, None]
    img = (1 - t) * top + t * bottom
    img = np.broadcast_to(img, (image_size, image_size, 3)).copy()
    if style.texture_noise > 0:
        noise = rng.standard_normal((image_size, image_size, 3))
        noise = gaussian_filter(noise, sigma=(style.texture_smooth, style.texture_smooth, 0))
        noise /= noise.std() + 1e-8
        img += style.texture_noise * noise
    return img


def draw_figure(img: np.ndarray, joints: dict, head_r: float, thickness: int,
                style: DomainStyle):
    """Paint the figure onto `img` (uint8 RGB); returns (image, figure mask bool)."""
    size = img.shape[0]
    canvas = Image.fromarray(img)
    mask = Image.new("L", (size, size), 0)
    dc, dm = ImageDraw.Draw(canvas), ImageDraw.Draw(mask)
    left, right, trunk = (tuple(c) for c in style.figure_palette)

    def seg(a, b, color):
        xy = [tuple(joints[a]), tuple(joints[b])]
        dc.line(xy, fill=color, width=thickness)
        dm.line(xy, fill=255, width=thickness)
        for p in xy:
            r = thickness / 2.0
            box = [p[0] - r, p[1] - r, p[0] + r, p[1] + r]
            dc.ellipse(box, fill=color)
            dm.ellipse(box, fill=255)

    torso = [tuple(joints[k]) for k in ("l_shoulder", "r_shoulder", "r_hip", "l_hip")]
    dc.polygon(torso, fill=trunk)
    dm.polygon(torso, fill=255)
    seg("pelvis", "neck", trunk)
    seg("neck", "head", trunk)
    hx, hy = joints["head"]
    dc.ellipse([hx - head_r, hy - head_r, hx + head_r, hy + head_r], fill=trunk)
    dm.ellipse([hx - head_r, hy - head_r, hx + head_r, hy + head_r], fill=255)

    for side, color in (("l", left), ("r", right)):
        seg(f"{side}_shoulder", f"{side}_elbow", color)
        seg(f"{side}_elbow", f"{side}_wrist", color)
        seg(f"{side}_hip", f"{side}_knee", color)
        seg(f"{side}_knee", f"{side}_ankle", color)

    return np.asarray(canvas, dtype=np.uint8).copy(), np.asarray(mask) > 0


def photometric(img: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    x = img.astype(np.float64) / 255.0
    x = ((x - 0.5) * contrast + 0.5) * brightness
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
