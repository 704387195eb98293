from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from config.config import Config
from control.errors import RejectedInputError
from skeleton.skeleton import Pose, SkeletonSpec
from synth.figure import sample_joints, render_background, draw_figure, photometric
from synth.occlusion import occlude
from synth.styles import DomainStyle, OcclusionSpec


@dataclass
class Sample:
    image: np.ndarray                 # H x W x 3 uint8
    pose: Optional[Pose]              # None when labels are withheld
    silhouette: np.ndarray            # H x W bool, visible figure pixels
    domain: str
    severity: int
    seed: int
    id: str = ""
    fill: str = "solid"
    meta: dict = field(default_factory=dict)


def _joint_array(joints: dict, skel: SkeletonSpec) -> np.ndarray:
    missing = [n for n in skel.joint_names if n not in joints]
    if missing:
        raise RejectedInputError(f"figure generator cannot produce joints {missing}")
    return np.stack([joints[n] for n in skel.joint_names])


def generate_sample(seed: int, style: DomainStyle, occ: OcclusionSpec,
                    skel: Optional[SkeletonSpec] = None) -> Sample:
    """
    Render one stick person in `style`, then occlude it.
    Fully determined by (seed, style, occ); separate random streams keep the
    figure identical across severities of the same seed.
    """
    if skel is None:
        skel = SkeletonSpec.load(Config.SKELETON_PATH)
    size = occ.image_size

    fig_rng = np.random.default_rng([seed, 10])
    bg_rng = np.random.default_rng([seed, 11])
    look_rng = np.random.default_rng([seed, 12])

    joints, head_r = sample_joints(fig_rng, size)
    background = render_background(bg_rng, style, size)
    background = np.clip(np.round(background), 0, 255).astype(np.uint8)
    thickness = int(look_rng.integers(style.limb_thickness[0], style.limb_thickness[1] + 1))
    thickness = max(1, int(round(thickness * size / 256)))
    image, figure_mask = draw_figure(background, joints, head_r, thickness, style)

    image, silhouette = occlude(image, figure_mask, occ, seed)
    image = photometric(image, look_rng.uniform(*style.brightness), look_rng.uniform(*style.contrast))

    pose = Pose(_joint_array(joints, skel))
    return Sample(image=image, pose=pose, silhouette=silhouette, domain=style.name,
                  severity=occ.severity, seed=seed, fill=occ.fill,
                  meta={"figure_pixels": int(figure_mask.sum()), "thickness": thickness})


def generate_split(n: int, base_seed: int, style: DomainStyle,
                   severities: Union[int, Sequence[int]], patch_count: int,
                   fill_mode: str, image_size: int, skel: SkeletonSpec,
                   prefix: str = "s", progress=None) -> list:
    """
    n samples with seeds base_seed .. base_seed + n - 1.
    A list of severities is sampled uniformly per sample (mixed-occlusion splits).
    """
    pick = np.random.default_rng([base_seed, 99])
    out = []
    for i in range(n):
        sev = int(pick.choice(severities)) if not isinstance(severities, int) else severities
        fill = fill_mode if fill_mode != "mixed" else str(pick.choice(["solid", "textured"]))
        occ = OcclusionSpec(severity=sev, patch_count=patch_count, fill=fill, image_size=image_size)
        s = generate_sample(base_seed + i, style, occ, skel)
        s.id = f"{prefix}{i:06d}"
        out.append(s)
        if progress is not None:
            progress.update(1)
    return out


def occlude_sample(sample: Sample, occ: OcclusionSpec, seed: int) -> Sample:
    """
    Occlude an already rendered clean sample (its silhouette is the full figure mask).
    Labels stay those of the unoccluded pose.
    """
    if sample.severity != 0:
        raise RejectedInputError(f"sample {sample.id} is already occluded (severity {sample.severity})")
    image, silhouette = occlude(sample.image, sample.silhouette, occ, seed)
    return Sample(image=image, pose=sample.pose, silhouette=silhouette, domain=sample.domain,
                  severity=occ.severity, seed=sample.seed, id=sample.id, fill=occ.fill,
                  meta=dict(sample.meta))
