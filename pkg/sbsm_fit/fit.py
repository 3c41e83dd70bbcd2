"""Staged analysis-by-synthesis fitting.

One call fits one batch of views of the same species:

    stage 1  bank (base shape), viewpoint hypotheses, translation, light
             and appearance; no articulation
    stage 2  skeleton instantiated on the current base shape; per-view
             joint angles join; the mask discriminator runs inside its window
    stage 3  skeleton re-instantiated; symmetric instance deformation joins;
             the discriminator is off

Every neural predictor of an amortized pipeline is replaced by free
per-view or per-instance parameters, each in its own optimizer group so a
stage switches groups on and off without touching their values.

Usage:
    result = fit_instance(targets, bank, FitConfig(iterations=400, image_size=64))
    result.views[0].pose, result.history[-1].total
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from sbsm_fit.autodiff import (
    Adam,
    Tensor,
    backward,
    matmul,
    norm,
    parameter,
    sigmoid,
    tanh,
    transpose,
)
from sbsm_fit.bank import BankQuery, SemanticBank, base_vertices, query_weights
from sbsm_fit.config import ARTICULATED_BONES, FitConfig, N_HYPOTHESES
from sbsm_fit.errors import FitError
from sbsm_fit.geometry import Mesh, symmetrize_field, vertex_normals
from sbsm_fit.objective import (
    AdversarialLosses,
    Discriminator,
    LossBreakdown,
    adversarial_losses,
    check_finite,
    def_regularizer,
    distance_transform,
    feature_loss,
    generator_loss,
    hyp_loss,
    hypothesis_probs,
    image_loss,
    mask_loss,
    total_loss,
)
from sbsm_fit.render import (
    Camera,
    Light,
    interpolate,
    rasterize,
    shade,
    soft_silhouette,
    to_image,
)
from sbsm_fit.skeleton import (
    AngleLimits,
    Pose,
    Skeleton,
    art_regularizer,
    instantiate_quadruped,
    lbs,
    lbs_pose,
    matrix_to_quaternion,
    skinning_weights,
    view_rotation,
)

logger = logging.getLogger(__name__)

QUADRANT = np.pi / 2.0


def camera_from_config(config: FitConfig) -> Camera:
    return Camera(
        fov_deg=config.fov_deg,
        position=config.camera_position,
        width=config.image_size,
        height=config.image_size,
    )


# ── Parameters ───────────────────────────────────────────────────────────


@dataclass
class ViewTarget:
    """One observed image with its mask, reduced feature map and embedding."""

    image: np.ndarray
    mask: np.ndarray
    features: np.ndarray
    phi: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = (np.asarray(self.mask, dtype=np.float64) > 0.5).astype(np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(-1)
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3):
            raise FitError(f"image must have shape ({h}, {w}, 3), got {self.image.shape}")
        if self.features.shape[:2] != (h, w):
            raise FitError(f"features must cover {h}x{w} pixels, got {self.features.shape}")


@dataclass(eq=False)
class HypothesisSet:
    """Four azimuth hypotheses, one per quadrant, with learned loss estimates.

    Hypothesis k has azimuth (k + sigmoid(raw_k)) * 90 degrees, so it never
    leaves [k * 90, (k + 1) * 90). Elevation and roll are shared.
    """

    azimuth_raw: Tensor
    scores: Tensor
    elevation: Tensor
    roll: Tensor

    @classmethod
    def initial(cls) -> "HypothesisSet":
        return cls(
            azimuth_raw=parameter(np.zeros(N_HYPOTHESES)),
            scores=parameter(np.zeros(N_HYPOTHESES)),
            elevation=parameter(0.0),
            roll=parameter(0.0),
        )

    def azimuth(self, k: int) -> Tensor:
        return (k + sigmoid(self.azimuth_raw[k])) * QUADRANT

    def azimuths(self) -> np.ndarray:
        return (np.arange(N_HYPOTHESES) + sigmoid(self.azimuth_raw).data) * QUADRANT

    def rotation(self, k: int) -> Tensor:
        return view_rotation(self.azimuth(k), self.elevation, self.roll)


@dataclass(eq=False)
class ViewParams:
    """Per-view free variables: hypotheses, translation, light, joint angles."""

    hypotheses: HypothesisSet
    translation_raw: Tensor
    light_raw: Tensor
    joint_angles: Tensor

    @classmethod
    def initial(cls, n_bones: int) -> "ViewParams":
        return cls(
            hypotheses=HypothesisSet.initial(),
            translation_raw=parameter(np.zeros(3)),
            light_raw=parameter(np.array([0.0, 0.0, 0.0, 0.0, 1.0])),
            joint_angles=parameter(np.zeros((n_bones, 3))),
        )

    def translation(self, box) -> Tensor:
        return tanh(self.translation_raw) * np.asarray(box)

    def light_terms(self):
        """(ambient in (0, 1), diffuse in (0.5, 1), unit direction)."""
        ambient = sigmoid(self.light_raw[0])
        diffuse = 0.5 + 0.5 * sigmoid(self.light_raw[1])
        raw_dir = self.light_raw[2:5]
        return ambient, diffuse, raw_dir / norm(raw_dir, eps=1e-12)

    def light(self) -> Light:
        ambient, diffuse, direction = self.light_terms()
        return Light(ambient.item(), diffuse.item(), tuple(direction.data.tolist()))


@dataclass(eq=False)
class InstanceParams:
    """Everything optimized besides the bank: per-view and per-instance variables."""

    views: List[ViewParams]
    delta: Tensor
    albedo_raw: Tensor
    features: Tensor

    @classmethod
    def initial(cls, n_views: int, n_vertices: int, feature_dim: int, n_bones: int) -> "InstanceParams":
        return cls(
            views=[ViewParams.initial(n_bones) for _ in range(n_views)],
            delta=parameter(np.zeros((n_vertices, 3))),
            albedo_raw=parameter(np.zeros((n_vertices, 3))),
            features=parameter(np.zeros((n_vertices, feature_dim))),
        )

    def groups(self) -> Dict[str, Dict[str, Tensor]]:
        view, scores, art = {}, {}, {}
        for i, v in enumerate(self.views):
            h = v.hypotheses
            view.update({
                f"{i}.azimuth": h.azimuth_raw, f"{i}.elevation": h.elevation, f"{i}.roll": h.roll,
                f"{i}.translation": v.translation_raw, f"{i}.light": v.light_raw,
            })
            scores[f"{i}.scores"] = h.scores
            art[f"{i}.joints"] = v.joint_angles
        return {
            "view": view,
            "scores": scores,
            "appearance": {"albedo": self.albedo_raw, "features": self.features},
            "articulation": art,
            "deformation": {"delta": self.delta},
        }


STAGE_GROUPS = {
    1: ("bank", "view", "scores", "appearance"),
    2: ("bank", "view", "scores", "appearance", "articulation"),
    3: ("bank", "view", "scores", "appearance", "articulation", "deformation"),
}


# ── Hypothesis sampling ──────────────────────────────────────────────────


def sample_hypothesis(
    hset: HypothesisSet,
    iteration: int,
    config: FitConfig,
    rng: np.random.Generator,
) -> int:
    """Uniform with the exploration probability, otherwise the lowest score."""
    if rng.random() < config.explore_probability(iteration):
        return int(rng.integers(N_HYPOTHESES))
    return int(np.argmin(hset.scores.data))


# ── Discriminator step ───────────────────────────────────────────────────


def update_discriminator(
    disc: Discriminator,
    optimizer: Adam,
    real: np.ndarray,
    fake: np.ndarray,
    phi_tilde: np.ndarray,
    iteration: int,
    config: FitConfig,
) -> Optional[AdversarialLosses]:
    """One discriminator step inside the configured window; None (no-op) outside it."""
    if not config.discriminator_active(iteration):
        return None
    losses = adversarial_losses(disc, real, np.asarray(fake), phi_tilde, config.loss_weights.r1_gamma)
    grads = backward(losses.disc_loss)
    optimizer.step(grads)
    return losses


# ── Result ───────────────────────────────────────────────────────────────


@dataclass
class ViewResult:
    name: str
    pose: Pose
    hypothesis: int
    probabilities: np.ndarray
    scores: np.ndarray
    azimuths: np.ndarray
    elevation: float
    roll: float
    light: Light


@dataclass
class FitResult:
    """Optimized shape, appearance and per-view poses with the loss history."""

    bank: SemanticBank
    query: BankQuery
    base: Mesh
    delta: np.ndarray
    albedo: np.ndarray
    features: np.ndarray
    skeleton: Optional[Skeleton]
    skin_weights: Optional[np.ndarray]
    views: List[ViewResult]
    history: List[LossBreakdown]
    stage_starts: Dict[int, int]
    skipped: List[str] = field(default_factory=list)

    @property
    def instance(self) -> Mesh:
        """Base shape plus the instance deformation, at rest."""
        return self.base.with_vertices(self.base.vertices + self.delta)

    def posed_mesh(self, view: int) -> Mesh:
        v = self.views[view]
        if self.skeleton is None:
            rot = v.pose.rotation_matrix()
            return self.instance.with_vertices(self.instance.vertices @ rot.T + v.pose.translation)
        return lbs_pose(self.instance, self.skeleton, self.skin_weights, v.pose)


# ── Fitting loop ─────────────────────────────────────────────────────────


class _Fitter:
    """Holds the mutable state of one fit_instance call."""

    def __init__(self, targets: Sequence[ViewTarget], bank: SemanticBank, config: FitConfig):
        self.config = config
        self.cam = camera_from_config(config)
        self.rng = np.random.default_rng(config.seed)
        self.template = bank.template
        self.faces = bank.template.faces
        self.bank = bank
        self.targets = list(targets)
        self.skipped = [t.name for t in self.targets if not t.mask.any()]
        for name in self.skipped:
            logger.warning("view %r has an empty target mask; skipping it", name)
        self.active = [i for i, t in enumerate(self.targets) if t.mask.any()]
        if not self.active:
            raise FitError("every target view has an empty mask")
        self.dts = {i: distance_transform(self.targets[i].mask) for i in self.active}
        for t in self.targets:
            if t.phi.shape != (bank.key_dim,):
                raise FitError(f"embedding of {t.name!r} has dimension {t.phi.shape[0]}, bank keys have {bank.key_dim}")
        self.phi_mean = np.mean([self.targets[i].phi for i in self.active], axis=0)
        self.top_m = min(config.top_m, bank.size)

        feature_dim = self.targets[0].features.shape[2]
        self.bank_params = bank.as_parameters()
        self.params = InstanceParams.initial(len(self.targets), bank.template.n_vertices, feature_dim, ARTICULATED_BONES)
        self.optimizer = Adam()
        self.optimizer.add_group("bank", self.bank_params, config.lr_bank)
        groups = self.params.groups()
        for name in ("view", "appearance", "articulation", "deformation"):
            self.optimizer.add_group(name, groups[name], config.lr_others)
        self.optimizer.add_group("scores", groups["scores"], config.lr_scores)

        self.disc: Optional[Discriminator] = None
        self.disc_optimizer: Optional[Adam] = None
        if config.discriminator_enabled:
            disc_rng = np.random.default_rng(self.rng.integers(2**63))
            self.disc = Discriminator.create(disc_rng, config.image_size, value_dim=bank.value_dim)
            self.disc_optimizer = Adam()
            self.disc_optimizer.add_group("discriminator", self.disc.parameters(), config.lr_discriminator)

        self.skeleton: Optional[Skeleton] = None
        self.skin: Optional[np.ndarray] = None
        self.limits: Optional[AngleLimits] = None
        self.stage = 0
        self.stage_starts: Dict[int, int] = {}
        self.fallback_logged = False

    # ── graph pieces ──

    def bank_query(self):
        weights, fallback = query_weights(self.bank_params["keys"], self.phi_mean, self.top_m)
        if fallback and not self.fallback_logged:
            logger.warning("bank query fell back to uniform weights over the top-%d tokens", self.top_m)
            self.fallback_logged = True
        phi_tilde = weights.data @ self.bank_params["values"].data
        return weights, phi_tilde

    def rest_vertices(self, weights: Tensor) -> Tensor:
        base = base_vertices(self.template, weights, self.bank_params["offsets"])
        if self.stage >= 3:
            return base + symmetrize_field(self.params.delta, self.template.mirror_partner)
        return base

    def pose_vertices(self, rest: Tensor, view: ViewParams, rotation: Tensor) -> Tensor:
        t = view.translation(self.config.translation_box)
        if self.skeleton is None:
            return matmul(rest, transpose(rotation)) + t
        return lbs(rest, self.skeleton, self.skin, rotation, t, view.joint_angles)

    def render_losses(self, posed: Tensor, view: ViewParams, target: ViewTarget, index: int, lw):
        soft = soft_silhouette(posed, self.faces, self.cam, self.config.sigma_soft)
        posed_mesh = Mesh(posed.data, self.faces)
        buffers = rasterize(posed_mesh, self.cam, jobs=self.config.jobs)
        normals = interpolate(buffers, self.faces, vertex_normals(posed, self.faces))
        albedo = interpolate(buffers, self.faces, sigmoid(self.params.albedo_raw))
        ambient, diffuse, direction = view.light_terms()
        rgb = to_image(buffers, shade(normals, albedo, ambient, diffuse, direction))
        feats = to_image(buffers, interpolate(buffers, self.faces, self.params.features))
        return {
            "mask": mask_loss(soft, target.mask, lw.lambda_dt, dt=self.dts[index]),
            "image": image_loss(rgb, target.image, soft, target.mask, lw.huber_delta, lw.hard_l1),
            "feature": feature_loss(feats, target.features, soft, target.mask),
        }

    # ── schedule ──

    def enter_stage(self, stage: int, iteration: int, weights: Tensor) -> None:
        logger.info("stage %d starts at iteration %d", stage, iteration)
        self.stage = stage
        self.stage_starts[stage] = iteration
        if stage >= 2:
            base = self.template.with_vertices(
                base_vertices(self.template, weights.data, self.bank_params["offsets"].data).data
            )
            self.skeleton = instantiate_quadruped(base)
            self.skin = skinning_weights(base, self.skeleton, self.config.tau_s)
            self.limits = AngleLimits.for_skeleton(self.skeleton)

    def step(self, iteration: int) -> LossBreakdown:
        config = self.config
        stage = config.stage_at(iteration)
        weights, phi_tilde = self.bank_query()
        while self.stage < stage:
            self.enter_stage(self.stage + 1, iteration, weights)
        lw = config.loss_weights_at(iteration)
        disc_on = self.disc is not None and config.discriminator_active(iteration)

        n = min(config.batch_size, len(self.active))
        batch = self.rng.choice(self.active, size=n, replace=False)
        rest = self.rest_vertices(weights)
        total: Tensor = Tensor(0.0)
        record = LossBreakdown()
        real, fake = [], []
        for count, index in enumerate(batch):
            view, target = self.params.views[index], self.targets[index]
            k = sample_hypothesis(view.hypotheses, iteration, config, self.rng)
            posed = self.pose_vertices(rest, view, view.hypotheses.rotation(k))
            parts = self.render_losses(posed, view, target, index, lw)
            rec = total_loss(parts, lw)
            parts["hyp"] = hyp_loss(view.hypotheses.scores[k], rec)
            if self.skeleton is not None:
                parts["art"] = art_regularizer(view.joint_angles)
            if stage >= 3:
                parts["deform"] = def_regularizer(symmetrize_field(self.params.delta, self.template.mirror_partner))
            if disc_on:
                azimuth = self.rng.uniform(0.0, 2.0 * np.pi)
                h = view.hypotheses
                random_view = self.pose_vertices(rest, view, view_rotation(azimuth, h.elevation, h.roll))
                fake_mask = soft_silhouette(random_view, self.faces, self.cam, config.sigma_soft)
                parts["adv"] = generator_loss(self.disc, fake_mask, phi_tilde)
                real.append(target.mask)
                fake.append(fake_mask.data)
            check_finite(parts)
            total = total + total_loss(parts, lw)
            record = record.mean_with(LossBreakdown.from_parts(parts, lw), count)

        total = total / float(n)
        grads = backward(total)
        self.optimizer.step(grads, active=STAGE_GROUPS[stage])
        if self.limits is not None:
            for view in self.params.views:
                view.joint_angles.data[...] = self.limits.clamp(view.joint_angles.data)
        if disc_on:
            update_discriminator(
                self.disc, self.disc_optimizer, np.stack(real), np.stack(fake), phi_tilde, iteration, config
            )
        logger.debug("iteration %d stage %d %s", iteration, stage, record.as_dict())
        return record

    def run(self) -> FitResult:
        config = self.config
        history: List[LossBreakdown] = []
        was_on = False
        for iteration in tqdm(range(config.iterations), desc="fit", disable=not config.progress):
            on = config.discriminator_enabled and config.discriminator_active(iteration)
            if on != was_on:
                logger.info("discriminator %s at iteration %d", "on" if on else "off", iteration)
                was_on = on
            history.append(self.step(iteration))
        return self.result(history)

    def result(self, history: List[LossBreakdown]) -> FitResult:
        weights, phi_tilde = self.bank_query()
        bank = self.bank.from_parameters(self.bank_params)
        base = self.template.with_vertices(
            base_vertices(self.template, weights.data, bank.offsets).data
        )
        partner = self.template.mirror_partner
        delta = symmetrize_field(self.params.delta.data, partner).data if self.stage >= 3 else np.zeros_like(base.vertices)
        tau = self.config.tau_at(self.config.iterations - 1)
        views = []
        for index, (target, view) in enumerate(zip(self.targets, self.params.views)):
            h = view.hypotheses
            probs = hypothesis_probs(h.scores.data, tau)
            best = int(np.argmax(probs))
            rotation = h.rotation(best).data
            angles = view.joint_angles.data.copy() if self.skeleton is not None else np.zeros_like(view.joint_angles.data)
            views.append(
                ViewResult(
                    name=target.name or f"view{index}",
                    pose=Pose(
                        matrix_to_quaternion(rotation),
                        view.translation(self.config.translation_box).data,
                        angles,
                    ),
                    hypothesis=best,
                    probabilities=probs,
                    scores=h.scores.data.copy(),
                    azimuths=h.azimuths(),
                    elevation=h.elevation.item(),
                    roll=h.roll.item(),
                    light=view.light(),
                )
            )
        return FitResult(
            bank=bank,
            query=BankQuery(weights=weights.data, phi_tilde=phi_tilde, fallback=self.fallback_logged),
            base=base,
            delta=delta,
            albedo=sigmoid(self.params.albedo_raw).data,
            features=self.params.features.data.copy(),
            skeleton=self.skeleton,
            skin_weights=self.skin,
            views=views,
            history=history,
            stage_starts=dict(self.stage_starts),
            skipped=self.skipped,
        )


def fit_instance(targets: Sequence[ViewTarget], bank: SemanticBank, config: FitConfig) -> FitResult:
    """Fit bank, viewpoints, articulation and instance shape to a batch of views.

    Raises:
        FitError: if no view has a nonempty mask, target sizes disagree with
            the configured camera, or a loss term turns NaN (named in the error).
    """
    if not targets:
        raise FitError("need at least one target view")
    size = (config.image_size, config.image_size)
    for t in targets:
        if t.mask.shape != size:
            raise FitError(f"target {t.name!r} is {t.mask.shape}, camera renders {size}")
        if t.features.shape[2] != targets[0].features.shape[2]:
            raise FitError(f"target {t.name!r} has {t.features.shape[2]} feature channels, expected {targets[0].features.shape[2]}")
    return _Fitter(targets, bank, config).run()
