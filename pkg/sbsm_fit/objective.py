"""Training losses, regularizers and the conditioned mask discriminator.

Pixel losses are means over pixels with channels summed per pixel, so the
loss weights do not depend on the image resolution. L1 terms go through a
Huber corner of width huber_delta (1e-6 by default); pass hard_l1=True
for the plain absolute value.

The overall objective is

    L = lambda_m L_m + lambda_im L_im + lambda_feat L_feat
        + lambda_hyp L_hyp + lambda_adv L_adv
        + lambda_art R_art + lambda_def R_def

Usage:
    dt = distance_transform(target_mask)
    parts = {"mask": mask_loss(soft_mask, target_mask, 0.1, dt=dt), ...}
    loss = total_loss(parts, config.loss_weights_at(iteration))
"""

import logging
from dataclasses import dataclass, fields
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from sbsm_fit.autodiff import (
    Tensor,
    TensorLike,
    as_tensor,
    backward,
    clip,
    concatenate,
    conv2d,
    detach,
    huber_abs,
    leaky_relu,
    log,
    parameter,
    reshape,
    sigmoid,
    square,
    tsum,
)
from sbsm_fit.config import LossWeights, VALUE_DIM
from sbsm_fit.errors import FitError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
R1_STEP = 1e-3

# loss term -> LossWeights attribute
TERM_WEIGHTS: Dict[str, str] = {
    "mask": "lambda_m",
    "image": "lambda_im",
    "feature": "lambda_feat",
    "hyp": "lambda_hyp",
    "adv": "lambda_adv",
    "art": "lambda_art",
    "deform": "lambda_def",
}


# ── Reconstruction losses ────────────────────────────────────────────────


def distance_transform(mask: np.ndarray, return_flag: bool = False):
    """Euclidean distance from every pixel to the nearest foreground pixel.

    An empty mask has no foreground; every pixel then gets the image
    diagonal and the result is flagged.
    """
    mask = np.asarray(mask) > 0.5
    if not mask.any():
        logger.warning("distance transform of an empty mask; using the image diagonal")
        dt = np.full(mask.shape, float(np.hypot(*mask.shape)))
        return (dt, True) if return_flag else dt
    dt = ndimage.distance_transform_edt(np.logical_not(mask))
    return (dt, False) if return_flag else dt


def _l1(x: TensorLike, delta: float, hard: bool) -> Tensor:
    return huber_abs(x, 0.0 if hard else delta)


def mask_loss(
    pred: TensorLike,
    target: np.ndarray,
    lambda_dt: float,
    dt: Optional[np.ndarray] = None,
) -> Tensor:
    """mean (pred - target)^2 + lambda_dt * mean |pred * dt(target)|.

    pred is a silhouette in [0, 1], so the L1 term is the plain weighted sum.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if dt is None:
        dt = distance_transform(target)
    err = pred - target
    return tsum(err * err) / float(target.size) + lambda_dt * tsum(pred * dt) / float(target.size)


def image_loss(
    pred: TensorLike,
    image: np.ndarray,
    pred_mask: TensorLike,
    target_mask: np.ndarray,
    huber_delta: float = 1e-6,
    hard_l1: bool = False,
) -> Tensor:
    """L1 photometric error on the intersection of predicted and target masks."""
    image = np.asarray(image, dtype=np.float64)
    overlap = as_tensor(pred_mask) * np.asarray(target_mask, dtype=np.float64)
    diff = (as_tensor(pred) - image) * reshape(overlap, overlap.shape + (1,))
    n_pixels = float(image.shape[0] * image.shape[1])
    return tsum(_l1(diff, huber_delta, hard_l1)) / n_pixels


def feature_loss(
    pred: TensorLike,
    features: np.ndarray,
    pred_mask: TensorLike,
    target_mask: np.ndarray,
) -> Tensor:
    """Squared feature error on the mask intersection."""
    features = np.asarray(features, dtype=np.float64)
    overlap = as_tensor(pred_mask) * np.asarray(target_mask, dtype=np.float64)
    diff = (as_tensor(pred) - features) * reshape(overlap, overlap.shape + (1,))
    n_pixels = float(features.shape[0] * features.shape[1])
    return tsum(square(diff)) / n_pixels


# ── Viewpoint hypotheses ─────────────────────────────────────────────────


def hyp_loss(score: TensorLike, rec_loss: TensorLike) -> Tensor:
    """(score - rec_loss)^2 with rec_loss treated as a constant."""
    return square(as_tensor(score) - detach(rec_loss))


def hypothesis_probs(scores, tau: float) -> np.ndarray:
    """softmax(-scores / tau)."""
    if tau <= 0.0:
        raise FitError(f"tau must be positive, got {tau}")
    s = -np.asarray(scores, dtype=np.float64) / tau
    p = np.exp(s - s.max())
    return p / p.sum()


# ── Regularizers ─────────────────────────────────────────────────────────


def def_regularizer(offsets: TensorLike) -> Tensor:
    """Mean squared norm of per-vertex offsets."""
    offsets = as_tensor(offsets)
    return tsum(square(offsets)) / float(max(offsets.shape[0], 1))


# ── Discriminator ────────────────────────────────────────────────────────


@dataclass(eq=False)
class Discriminator:
    """Strided 4x4 convolutions over [mask, broadcast phi_tilde] down to one logit."""

    weights: List[Tensor]
    biases: List[Tensor]
    image_size: int
    in_channels: int = 1 + VALUE_DIM

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        image_size: int,
        value_dim: int = VALUE_DIM,
        width: int = 16,
        max_width: int = 64,
        zero: bool = False,
    ) -> "Discriminator":
        """He-initialized stack; `zero` gives a discriminator that always outputs 0.

        Raises:
            FitError: if image_size is not a power of two >= 8.
        """
        if image_size < 8 or image_size & (image_size - 1):
            raise FitError(f"discriminator image size must be a power of two >= 8, got {image_size}")
        in_channels = 1 + value_dim
        weights, biases = [], []
        c_in, size, c_out = in_channels, image_size, width
        while size > 4:
            weights.append(cls._init(rng, (c_out, c_in, 4, 4), zero))
            biases.append(parameter(np.zeros(c_out)))
            c_in, size, c_out = c_out, size // 2, min(2 * c_out, max_width)
        weights.append(cls._init(rng, (1, c_in, 4, 4), zero))
        biases.append(parameter(np.zeros(1)))
        return cls(weights, biases, image_size, in_channels)

    @staticmethod
    def _init(rng: np.random.Generator, shape: Tuple[int, ...], zero: bool) -> Tensor:
        if zero:
            return parameter(np.zeros(shape))
        fan_in = shape[1] * shape[2] * shape[3]
        return parameter(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"w{i}": w for i, w in enumerate(self.weights)}
        params.update({f"b{i}": b for i, b in enumerate(self.biases)})
        return params

    def __call__(self, masks: TensorLike, phi_tilde: np.ndarray) -> Tensor:
        return discriminator_forward(self, masks, phi_tilde)


def discriminator_forward(disc: Discriminator, masks: TensorLike, phi_tilde) -> Tensor:
    """Logits (B,) for (B, H, W) masks conditioned on phi_tilde.

    phi_tilde is (value_dim,) or (B, value_dim); it is detached and
    broadcast over the image.
    """
    masks = as_tensor(masks)
    if masks.ndim == 2:
        masks = reshape(masks, (1,) + masks.shape)
    batch, h, w = masks.shape
    if h != disc.image_size or w != disc.image_size:
        raise FitError(f"discriminator expects {disc.image_size}x{disc.image_size} masks, got {h}x{w}")
    cond = detach(phi_tilde).data
    cond = np.broadcast_to(cond.reshape(-1, cond.shape[-1]), (batch, cond.shape[-1]))
    if cond.shape[1] + 1 != disc.in_channels:
        raise FitError(f"conditioning must have {disc.in_channels - 1} channels, got {cond.shape[1]}")
    cond_maps = np.broadcast_to(cond[:, :, None, None], (batch, cond.shape[1], h, w))
    x = concatenate([reshape(masks, (batch, 1, h, w)), Tensor(cond_maps)], axis=1)
    last = len(disc.weights) - 1
    for i, (weight, bias) in enumerate(zip(disc.weights, disc.biases)):
        if i < last:
            x = leaky_relu(conv2d(x, weight, bias, stride=2, padding=1), 0.2)
        else:
            x = conv2d(x, weight, bias, stride=1, padding=0)
    return reshape(x, (batch,))


def _log_prob(logits: Tensor) -> Tensor:
    return log(clip(sigmoid(logits), PROB_CLAMP, 1.0))


def _log_one_minus_prob(logits: Tensor) -> Tensor:
    return log(clip(1.0 - sigmoid(logits), PROB_CLAMP, 1.0))


def r1_penalty(disc: Discriminator, real: np.ndarray, phi_tilde, gamma: float) -> Tensor:
    """gamma / 2 * mean ||grad_mask D(real)||^2.

    The gradient norm is a central difference of D along the detached,
    normalized input gradient, which keeps the penalty first-order in the
    discriminator parameters.
    """
    real = np.asarray(real, dtype=np.float64)
    probe = Tensor(real, requires_grad=True)
    grads = backward(tsum(discriminator_forward(disc, probe, phi_tilde)))
    g = grads.get(probe, np.zeros_like(real))
    for p in disc.parameters().values():
        p.grad = None
    length = np.sqrt(np.sum(g * g, axis=(1, 2), keepdims=True))
    direction = np.where(length > 0.0, g / np.where(length > 0.0, length, 1.0), 0.0)
    plus = discriminator_forward(disc, real + R1_STEP * direction, phi_tilde)
    minus = discriminator_forward(disc, real - R1_STEP * direction, phi_tilde)
    slope = (plus - minus) / (2.0 * R1_STEP)
    return (0.5 * gamma) * tsum(square(slope)) / float(len(real))


def generator_loss(disc: Discriminator, fake: TensorLike, phi_tilde) -> Tensor:
    """Non-saturating generator objective -mean log D(fake)."""
    fake = as_tensor(fake)
    if fake.ndim == 2:
        fake = reshape(fake, (1,) + fake.shape)
    return -tsum(_log_prob(discriminator_forward(disc, fake, phi_tilde))) / float(fake.shape[0])


@dataclass
class AdversarialLosses:
    """Discriminator-side and generator-side objectives for one step."""

    disc_loss: Tensor
    gen_loss: Tensor
    adv: float
    r1: float


def adversarial_losses(
    disc: Discriminator,
    real: np.ndarray,
    fake: TensorLike,
    phi_tilde,
    r1_gamma: float = 10.0,
) -> AdversarialLosses:
    """Conditioned GAN losses on real target masks and random-view renders.

    adv = mean log D(real) + mean log(1 - D(fake)). The discriminator
    descends -adv plus the R1 penalty on real masks (fake detached); the
    generator descends the non-saturating -mean log D(fake).
    """
    real = np.asarray(real, dtype=np.float64)
    if real.ndim == 2:
        real = real[None]
    fake = as_tensor(fake)
    if fake.ndim == 2:
        fake = reshape(fake, (1,) + fake.shape)
    real_logits = discriminator_forward(disc, real, phi_tilde)
    fake_logits_d = discriminator_forward(disc, detach(fake), phi_tilde)
    adv = tsum(_log_prob(real_logits)) / float(len(real)) + tsum(
        _log_one_minus_prob(fake_logits_d)
    ) / float(fake.shape[0])
    penalty = r1_penalty(disc, real, phi_tilde, r1_gamma) if r1_gamma > 0.0 else Tensor(0.0)
    gen = generator_loss(disc, fake, phi_tilde)
    return AdversarialLosses(disc_loss=-adv + penalty, gen_loss=gen, adv=adv.item(), r1=penalty.item())


# ── Aggregation ──────────────────────────────────────────────────────────


@dataclass
class LossBreakdown:
    """Per-term values of one iteration (floats, for logging and CSV)."""

    mask: float = 0.0
    image: float = 0.0
    feature: float = 0.0
    hyp: float = 0.0
    adv: float = 0.0
    art: float = 0.0
    deform: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def as_array(self) -> List[float]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def from_parts(cls, parts: Mapping[str, TensorLike], weights: LossWeights) -> "LossBreakdown":
        values = {name: float(as_tensor(v).item()) for name, v in parts.items()}
        return cls(**values, total=float(as_tensor(total_loss(parts, weights)).item()))

    def mean_with(self, other: "LossBreakdown", count: int) -> "LossBreakdown":
        """Running mean after `count` previous entries."""
        return LossBreakdown(
            **{
                name: (getattr(self, name) * count + getattr(other, name)) / (count + 1)
                for name in self.as_dict()
            }
        )


def total_loss(parts: Mapping[str, Union[TensorLike, float]], weights: LossWeights):
    """Weighted sum of the provided terms; missing terms count as zero.

    Works on floats and on tensors alike.

    Raises:
        FitError: on an unknown term name.
    """
    total: Union[Tensor, float] = 0.0
    for name, value in parts.items():
        if name not in TERM_WEIGHTS:
            raise FitError(f"unknown loss term {name!r}; expected one of {sorted(TERM_WEIGHTS)}")
        total = total + getattr(weights, TERM_WEIGHTS[name]) * value
    return total


def check_finite(parts: Mapping[str, TensorLike]) -> None:
    """Raise FitError naming the first NaN or infinite term."""
    for name, value in parts.items():
        v = as_tensor(value).data
        if not np.all(np.isfinite(v)):
            raise FitError(f"loss term {name!r} is not finite ({float(np.asarray(v).reshape(-1)[0])})", term=name)
