"""Hyper-parameter tables, loss weights and fitting configuration.

The module-level constants reproduce the training hyper-parameter table
(camera, bone counts, light ranges, learning rates, bank sizes). The
stage boundaries are fractions of the total iteration count, scaled from
the 800k-iteration schedule: articulation at 20k, discriminator in
(80k, 300k), deformation at 500k, loss-weight switch at 300k.

Usage:
    config = load_config("fit.json")
    stage = config.stage_at(iteration)
    weights = config.loss_weights_at(iteration)
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Tuple, Union

from sbsm_fit.errors import ConfigError

# ────────────────────────────────────────────────────────────────────────────
# Camera and scene

DEFAULT_FOV_DEG = 25.0
DEFAULT_CAMERA_POSITION = (0.0, 0.0, 10.0)
DEFAULT_IMAGE_SIZE = 256
TRANSLATION_BOX = (0.4, 0.4, 1.0)   # |t_x|, |t_y| < 0.4, |t_z| < 1.0
AMBIENT_RANGE = (0.0, 1.0)
DIFFUSE_RANGE = (0.5, 1.0)

# ────────────────────────────────────────────────────────────────────────────
# Skeleton

SPINE_BONES = 8
LEG_BONES = 3
N_LEGS = 4
ARTICULATED_BONES = SPINE_BONES + N_LEGS * LEG_BONES   # 20; B = 21 with the rigid slot
SKINNING_TEMPERATURE = 0.5
FOOT_HEIGHT_FRACTION = 0.4

# Euler XYZ limits in degrees per bone role; None = unconstrained axis.
ANGLE_LIMITS_DEG: Dict[str, Tuple[Any, Any, Any]] = {
    "spine": (None, None, (-6.0, 6.0)),
    "leg_upper": (None, (-10.0, 10.0), (-10.0, 10.0)),
    "leg_middle": (None, (0.0, 0.0), (0.0, 0.0)),
    "leg_lower": (None, (0.0, 0.0), (0.0, 0.0)),
}

# ────────────────────────────────────────────────────────────────────────────
# Semantic bank and features

BANK_SIZE = 60
KEY_DIM = 384
VALUE_DIM = 128
TOP_M = 10
FEATURE_DIM = 16

# ────────────────────────────────────────────────────────────────────────────
# Optimisation

LR_BANK = 1e-3
LR_OTHERS = 1e-4
BATCH_SIZE = 6
N_HYPOTHESES = 4
TAU_RANGE = (0.01, 1.0)
SOFT_SIGMA = 1e-4


@dataclass
class LossWeights:
    """Balancing weights of the overall objective.

    lambda_feat and lambda_hyp hold the early-schedule values; FitConfig
    swaps in the late values after the weight switch.
    """

    lambda_m: float = 10.0
    lambda_im: float = 1.0
    lambda_feat: float = 10.0
    lambda_def: float = 10.0
    lambda_art: float = 0.2
    lambda_hyp: float = 50.0
    lambda_adv: float = 0.1
    lambda_dt: float = 0.1
    r1_gamma: float = 10.0
    huber_delta: float = 1e-6
    hard_l1: bool = False

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name != "hard_l1" and (not isinstance(value, (int, float)) or value < 0):
                raise ConfigError(f"{f.name} must be a non-negative number, got {value!r}")

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes) -> "LossWeights":
        return LossWeights(**{**self.as_dict(), **changes})


@dataclass
class FitConfig:
    """Everything the staged fit needs besides targets and bank."""

    iterations: int = 400
    batch_size: int = BATCH_SIZE
    seed: int = 0
    articulation_start: float = 0.025
    discriminator_window: Tuple[float, float] = (0.10, 0.375)
    weight_switch: float = 0.375
    deformation_start: float = 0.625
    explore_until: float = 0.0075
    explore_decay_end: float = 0.025
    explore_floor: float = 0.2
    tau_start: float = TAU_RANGE[1]
    tau_end: float = TAU_RANGE[0]
    lr_bank: float = LR_BANK
    lr_others: float = LR_OTHERS
    lr_discriminator: float = LR_OTHERS
    lr_scores: float = 1e-2
    image_size: int = DEFAULT_IMAGE_SIZE
    fov_deg: float = DEFAULT_FOV_DEG
    camera_position: Tuple[float, float, float] = DEFAULT_CAMERA_POSITION
    sigma_soft: float = SOFT_SIGMA
    tau_s: float = SKINNING_TEMPERATURE
    top_m: int = TOP_M
    translation_box: Tuple[float, float, float] = TRANSLATION_BOX
    discriminator_enabled: bool = True
    lambda_feat_late: float = 1.0
    lambda_hyp_late: float = 500.0
    jobs: int = 1
    progress: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.discriminator_window = tuple(self.discriminator_window)
        self.camera_position = tuple(self.camera_position)
        self.translation_box = tuple(self.translation_box)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        lo, hi = self.discriminator_window
        for name, value in (
            ("articulation_start", self.articulation_start),
            ("discriminator_window[0]", lo),
            ("discriminator_window[1]", hi),
            ("weight_switch", self.weight_switch),
            ("deformation_start", self.deformation_start),
            ("explore_until", self.explore_until),
            ("explore_decay_end", self.explore_decay_end),
            ("explore_floor", self.explore_floor),
        ):
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if not self.articulation_start <= lo <= hi <= self.deformation_start:
            raise ConfigError(
                "stage fractions must increase: articulation_start <= discriminator window "
                f"<= deformation_start, got {self.articulation_start}, {self.discriminator_window}, "
                f"{self.deformation_start}"
            )
        if self.explore_decay_end < self.explore_until:
            raise ConfigError("explore_decay_end must not precede explore_until")
        if not (0.0 < self.fov_deg < 180.0):
            raise ConfigError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.sigma_soft <= 0.0:
            raise ConfigError(f"sigma_soft must be positive, got {self.sigma_soft}")
        if self.tau_start <= 0.0 or self.tau_end <= 0.0:
            raise ConfigError("hypothesis temperatures must be positive")
        for name in ("lr_bank", "lr_others", "lr_discriminator", "lr_scores"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.top_m < 1:
            raise ConfigError(f"top_m must be >= 1, got {self.top_m}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")

    # ── Schedule ─────────────────────────────────────────────────────────

    def boundary(self, fraction: float) -> int:
        """Iteration index at which a fractional boundary takes effect."""
        return int(math.floor(fraction * self.iterations))

    def stage_at(self, iteration: int) -> int:
        """1 = rigid + bank, 2 = articulation, 3 = instance deformation."""
        if iteration >= self.boundary(self.deformation_start):
            return 3
        if iteration >= self.boundary(self.articulation_start):
            return 2
        return 1

    def discriminator_active(self, iteration: int) -> bool:
        if not self.discriminator_enabled:
            return False
        lo, hi = self.discriminator_window
        return self.boundary(lo) <= iteration < self.boundary(hi)

    def loss_weights_at(self, iteration: int) -> LossWeights:
        if iteration >= self.boundary(self.weight_switch):
            return self.loss_weights.replace(
                lambda_feat=self.lambda_feat_late, lambda_hyp=self.lambda_hyp_late
            )
        return self.loss_weights

    def explore_probability(self, iteration: int) -> float:
        """Chance of sampling a hypothesis uniformly instead of the best one."""
        frac = iteration / self.iterations
        if frac < self.explore_until:
            return 1.0
        if frac >= self.explore_decay_end or self.explore_decay_end == self.explore_until:
            return self.explore_floor
        t = (frac - self.explore_until) / (self.explore_decay_end - self.explore_until)
        return 1.0 + t * (self.explore_floor - 1.0)

    def tau_at(self, iteration: int) -> float:
        """Hypothesis temperature, annealed log-linearly from tau_start to tau_end."""
        t = min(max(iteration / max(self.iterations - 1, 1), 0.0), 1.0)
        return math.exp((1.0 - t) * math.log(self.tau_start) + t * math.log(self.tau_end))

    # ── Serialization ────────────────────────────────────────────────────

    def as_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["loss_weights"] = self.loss_weights.as_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown fit config keys: {unknown}")
        data = dict(data)
        if "loss_weights" in data:
            lw = data["loss_weights"]
            lw_known = {f.name for f in fields(LossWeights)}
            lw_unknown = sorted(set(lw) - lw_known)
            if lw_unknown:
                raise ConfigError(f"unknown loss weight keys: {lw_unknown}")
            data["loss_weights"] = LossWeights(**lw)
        return cls(**data)


def load_config(path: Union[str, Path]) -> FitConfig:
    """Read a JSON config: either a flat FitConfig dict or {"fit": ..., "loss_weights": ...}."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "fit" in raw:
        unknown = sorted(set(raw) - {"fit", "loss_weights"})
        if unknown:
            raise ConfigError(f"{path}: unknown sections {unknown}")
        data = dict(raw["fit"])
        if "loss_weights" in raw:
            data["loss_weights"] = raw["loss_weights"]
        return FitConfig.from_dict(data)
    return FitConfig.from_dict(raw)


def save_config(config: FitConfig, path: Union[str, Path]) -> None:
    data = config.as_dict()
    lw = data.pop("loss_weights")
    Path(path).write_text(json.dumps({"fit": data, "loss_weights": lw}, indent=2), encoding="utf-8")
