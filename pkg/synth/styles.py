from dataclasses import dataclass, field, asdict

from control.errors import ConfigError

# Severity 1 -> 48 px, severity 5 -> 96 px on a 256 px image, linear in between
BASE_IMAGE_SIZE = 256
PATCH_MIN, PATCH_MAX = 48, 96
MAX_SEVERITY = 5


@dataclass(frozen=True)
class DomainStyle:
    """
    Appearance of one domain.
    - background_palette: two RGB ranges ((lo, hi) per channel) blended as a vertical gradient
    - limb_thickness: stroke width range in pixels (256 px reference)
    - texture_noise: std-dev of smoothed background noise (0..255 units)
    - brightness/contrast: multiplicative jitter ranges applied last
    """
    name: str
    background_palette: tuple
    limb_thickness: tuple
    texture_noise: float
    texture_smooth: float
    brightness: tuple = (1.0, 1.0)
    contrast: tuple = (1.0, 1.0)
    # left side, right side, torso/head; shared by both domains so L/R stays learnable
    figure_palette: tuple = ((225, 70, 60), (60, 200, 90), (235, 225, 200))

    def to_dict(self) -> dict:
        return asdict(self)


SOURCE_STYLE = DomainStyle(
    name="source",
    background_palette=(((30, 70), (50, 100), (110, 170)), ((60, 100), (80, 130), (150, 210))),
    limb_thickness=(5, 8),
    texture_noise=4.0,
    texture_smooth=3.0,
    brightness=(0.95, 1.05),
    contrast=(0.95, 1.05),
)

TARGET_STYLE = DomainStyle(
    name="target",
    background_palette=(((140, 210), (90, 140), (30, 80)), ((170, 230), (120, 170), (60, 110))),
    limb_thickness=(7, 12),
    texture_noise=26.0,
    texture_smooth=1.5,
    brightness=(0.7, 1.3),
    contrast=(0.7, 1.3),
)

STYLES = {"source": SOURCE_STYLE, "target": TARGET_STYLE}


def patch_size_for(severity: int, image_size: int = BASE_IMAGE_SIZE) -> int:
    """Occluder side length in pixels; 0 for severity 0."""
    if not 0 <= severity <= MAX_SEVERITY:
        raise ConfigError(f"occlusion severity must be in 0..{MAX_SEVERITY}, got {severity}")
    if severity == 0:
        return 0
    size = PATCH_MIN + (PATCH_MAX - PATCH_MIN) * (severity - 1) / (MAX_SEVERITY - 1)
    return int(round(size * image_size / BASE_IMAGE_SIZE))


@dataclass(frozen=True)
class OcclusionSpec:
    severity: int = 0
    patch_count: int = 2
    fill: str = "solid"             # solid | textured
    image_size: int = BASE_IMAGE_SIZE
    patch_size_override: int = field(default=0)   # > 0 forces a size (tests, custom sweeps)

    def __post_init__(self):
        if self.fill not in ("solid", "textured"):
            raise ConfigError(f"occluder fill must be solid|textured, got {self.fill}")
        if self.patch_count < 0:
            raise ConfigError("patch_count must be >= 0")
        patch_size_for(self.severity, self.image_size)   # validates severity

    @property
    def patch_size(self) -> int:
        if self.severity == 0:
            return 0
        return self.patch_size_override or patch_size_for(self.severity, self.image_size)
