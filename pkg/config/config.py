from dataclasses import dataclass, field, fields, asdict, is_dataclass
import hashlib
import json
import os
from typing import Any, Optional

from control.errors import ConfigError

CONFIG_VERSION = 1

# Directory holding the shipped skeleton definition
CONFIG_DIR = os.path.dirname(os.path.abspath(__file__))


@dataclass(frozen=True)
class Config:
    """
    Runtime settings that do not change results.
    Values can be overridden with environment variables if needed.
    """
    # Number of torch intra-op threads (0 = leave torch default)
    THREADS: int = int(os.getenv("POSEADAPT_THREADS", 0))

    # Depth of the background batch prefetch queue
    PREFETCH: int = int(os.getenv("POSEADAPT_PREFETCH", 4))

    # Console log level for the tagged loggers
    LOG_LEVEL: str = os.getenv("POSEADAPT_LOG_LEVEL", "INFO")

    # Skeleton shipped with the repo
    SKELETON_PATH: str = os.getenv("POSEADAPT_SKELETON", os.path.join(CONFIG_DIR, "skeleton_default.json"))


@dataclass
class DataConfig:
    """Synthetic benchmark geometry and split sizes."""
    image_size: int = 256
    heatmap_size: int = 64
    sigma: float = 2.0

    n_source: int = 2000
    n_source_occluded: int = 200      # preview split, severity drawn from target_severities
    n_target_adapt: int = 2000
    n_target_eval: int = 500
    n_sweep_eval: int = 200           # per severity level when --severity-sweep is set
    n_target_eval_clean: int = 200

    target_severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    patch_count: int = 2
    occluder_fill: str = "mixed"      # solid | textured | mixed

    # seeds are offset per split so splits never share a figure
    split_seed_stride: int = 1_000_000


@dataclass
class PoseNetConfig:
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    decoder_channels: list = field(default_factory=lambda: [128, 64, 64])
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    milestones_frac: list = field(default_factory=lambda: [45 / 70, 60 / 70])
    lr_decay: float = 0.1
    holdout_frac: float = 0.1


@dataclass
class PriorConfig:
    feature_dim: int = 32             # per-bone encoder width
    hidden_dim: int = 128             # decoder width
    epochs: int = 80
    batch_size: int = 256
    lr: float = 1e-3
    holdout_frac: float = 0.1

    negative_mode: str = "angle"      # angle | position
    vonmises_per_pose: int = 1
    kappa_range: list = field(default_factory=lambda: [0.5, 50.0])
    max_bones_perturbed: Optional[int] = None   # None = up to all bones
    n_model_negatives: int = 500
    relabel_threshold: float = 0.02


@dataclass
class AugmentConfig:
    rotation_deg: float = 0.0
    translate_frac: float = 0.0
    shear_deg: float = 0.0
    scale_range: list = field(default_factory=lambda: [1.0, 1.0])
    brightness: float = 0.0
    contrast: float = 0.0


def _strong_aug():
    return AugmentConfig(rotation_deg=30.0, translate_frac=0.05, shear_deg=10.0,
                         scale_range=[0.9, 1.1], brightness=0.25, contrast=0.25)


def _weak_aug():
    return AugmentConfig(brightness=0.05, contrast=0.05)


@dataclass
class AdaptConfig:
    tau: float = 0.5
    lambda_a: float = 1e-5
    lambda_v: float = 1.0
    alpha: float = 0.999

    epochs: int = 10
    iterations_per_epoch: int = 60
    batch_size: int = 32
    lr: float = 1e-4
    milestones_frac: list = field(default_factory=lambda: [45 / 70, 60 / 70])
    lr_decay: float = 0.1

    strong_aug: AugmentConfig = field(default_factory=_strong_aug)
    weak_aug: AugmentConfig = field(default_factory=_weak_aug)
    source_severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])

    # ablation switches
    use_src_ocl: bool = True
    use_pred: bool = True
    gamma_mode: str = "schedule"      # schedule | zero | one
    soft_argmax_temperature: float = 0.1


@dataclass
class ExperimentConfig:
    skeleton_path: str = Config.SKELETON_PATH
    data: DataConfig = field(default_factory=DataConfig)
    posenet: PoseNetConfig = field(default_factory=PoseNetConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "out"
    pck_alpha: float = 0.05
    overlay_n: int = 8
    config_version: int = CONFIG_VERSION

    # ---------- Serialization ----------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        # canonical form: sorted keys, no whitespace variance
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form (used in dataset manifests)."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def snapshot(self, path: str):
        """Write the resolved config next to a run's outputs."""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        version = d.get("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config_version {version} not supported (expected {CONFIG_VERSION})")
        cfg = _build(cls, d, "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                d = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        return cls.from_dict(d)

    # ---------- Validation ----------

    def validate(self):
        a, d = self.adapt, self.data
        if not 0.0 <= a.tau <= 1.0:
            raise ConfigError(f"adapt.tau must be in [0, 1], got {a.tau}")
        if a.lambda_a < 0 or a.lambda_v < 0:
            raise ConfigError("adapt.lambda_a and adapt.lambda_v must be >= 0")
        if not 0.0 <= a.alpha <= 1.0:
            raise ConfigError(f"adapt.alpha must be in [0, 1], got {a.alpha}")
        if a.gamma_mode not in ("schedule", "zero", "one"):
            raise ConfigError(f"adapt.gamma_mode must be schedule|zero|one, got {a.gamma_mode}")
        if d.heatmap_size < 8 or d.image_size % d.heatmap_size != 0:
            raise ConfigError("data.heatmap_size must be >= 8 and divide data.image_size")
        if d.occluder_fill not in ("solid", "textured", "mixed"):
            raise ConfigError(f"data.occluder_fill must be solid|textured|mixed, got {d.occluder_fill}")
        if any(not 1 <= s <= 5 for s in d.target_severities):
            raise ConfigError("data.target_severities must lie in 1..5")
        if self.prior.negative_mode not in ("angle", "position"):
            raise ConfigError(f"prior.negative_mode must be angle|position, got {self.prior.negative_mode}")
        return self


def _build(cls, d: dict, where: str):
    """Recursively build a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    defaults = cls()
    for name, f in known.items():
        if name not in d:
            continue
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), d[name], f"{where}.{name}")
        else:
            kwargs[name] = d[name]
    return cls(**kwargs)
