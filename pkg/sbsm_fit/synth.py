"""Procedural quadrupeds with ground truth, rendered views and synthetic banks.

A synthetic quadruped is an ellipsoid body on four tube legs, optionally
with a head sphere and a tail tube, built left side first and mirrored so
the mesh is exactly symmetric about x = 0. Every vertex carries a part id,
a canonical 16-dim feature vector and an albedo. The feature map is a fixed
random linear map of (|x|, y, z, part one-hot) shared by all instances, so
the same body location gets the same features across species.

Usage:
    scene = synth_quadruped(SynthSpec(leg_bend_deg=20.0))
    views = generate_views(scene, Camera(width=64, height=64), n_views=8, bias=0.8)
    bank = make_bank(scene.mesh, np.random.default_rng(0))
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from sbsm_fit.bank import SemanticBank
from sbsm_fit.config import (
    BANK_SIZE,
    FEATURE_DIM,
    KEY_DIM,
    SKINNING_TEMPERATURE,
    TOP_M,
    VALUE_DIM,
)
from sbsm_fit.errors import ConfigError
from sbsm_fit.geometry import Mesh, icosphere, merge
from sbsm_fit.render import Camera, Light, project_points, render_view
from sbsm_fit.skeleton import (
    KEYPOINT_NAMES,
    N_LEGS,
    SPINE_BONES,
    Pose,
    Skeleton,
    instantiate_quadruped,
    keypoint_positions,
    lbs_pose,
    matrix_to_quaternion,
    posed_joints,
    skinning_weights,
    view_rotation,
)

logger = logging.getLogger(__name__)

# Part ids
BODY, LEG, HEAD, TAIL = 0, 1, 2, 3
PART_NAMES = ("body", "leg", "head", "tail")
PART_ALBEDO = np.array([
    [0.62, 0.46, 0.30],
    [0.48, 0.34, 0.24],
    [0.70, 0.55, 0.38],
    [0.40, 0.30, 0.20],
])

FEATURE_SEED = 1729
EMBEDDING_SEED = 4099
FRONTAL_HALF_WIDTH_DEG = 45.0
JOINT_DEPTH_SLACK = 0.35
DEFAULT_LIGHT = Light(ambient=0.4, diffuse=0.6, direction=(0.3, 0.5, 1.0))


@dataclass
class SynthSpec:
    """Shape, pose and view-sampling parameters of one synthetic species."""

    body_length: float = 2.0
    body_width: float = 0.8
    body_height: float = 0.7
    leg_length: float = 0.9
    leg_radius: float = 0.12
    head_radius: float = 0.3
    tail_length: float = 0.6
    neck: bool = True
    tail: bool = True
    leg_bend_deg: float = 0.0
    elevation_deg: float = 10.0
    bias: float = 0.0
    image_noise: float = 0.0
    feature_noise: float = 0.0
    subdivisions: int = 2
    segments: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("body_length", "body_width", "body_height", "leg_length", "leg_radius",
                     "head_radius", "tail_length"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.bias <= 1.0:
            raise ConfigError(f"bias must be in [0, 1], got {self.bias}")
        if self.image_noise < 0.0 or self.feature_noise < 0.0:
            raise ConfigError("noise levels must be non-negative")
        if self.segments < 4 or self.segments % 2:
            raise ConfigError(f"segments must be an even number >= 4, got {self.segments}")
        if self.subdivisions < 0:
            raise ConfigError(f"subdivisions must be >= 0, got {self.subdivisions}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {unknown}")
        return cls(**data)


@dataclass
class SynthScene:
    """One synthetic instance at rest with its ground-truth rig and fields."""

    spec: SynthSpec
    mesh: Mesh
    parts: np.ndarray
    skeleton: Skeleton
    skin_weights: np.ndarray
    features: np.ndarray
    albedo: np.ndarray
    embedding: np.ndarray

    def articulated_pose(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> Pose:
        return Pose(rotation, np.asarray(translation, dtype=np.float64), leg_bend_angles(self.spec.leg_bend_deg))


@dataclass
class KeypointSet:
    """Named 2D keypoints in pixel coordinates with visibility flags."""

    names: Tuple[str, ...]
    xy: np.ndarray
    visible: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.names = tuple(self.names)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if not len(self.names) == len(self.xy) == len(self.visible):
            raise ValueError(
                f"names, xy and visible must align, got {len(self.names)}, {len(self.xy)}, {len(self.visible)}"
            )
        x, y = self.xy[:, 0], self.xy[:, 1]
        inside = (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)
        if np.any(self.visible & ~inside):
            raise ValueError("visible keypoints must lie inside the image")

    def as_dict(self) -> dict:
        return {
            "names": list(self.names),
            "xy": self.xy.tolist(),
            "visible": self.visible.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointSet":
        return cls(data["names"], data["xy"], data["visible"], data["width"], data["height"])


@dataclass
class SynthView:
    """A rendered observation with its ground truth."""

    name: str
    image: np.ndarray
    mask: np.ndarray
    features: np.ndarray
    phi: np.ndarray
    keypoints: KeypointSet
    pose: Pose
    azimuth: float


# ── Mesh construction ────────────────────────────────────────────────────


def _tube(
    centers: np.ndarray,
    radius: float,
    e1: np.ndarray,
    e2: np.ndarray,
    segments: int,
    start_cap: np.ndarray,
    end_cap: np.ndarray,
) -> Mesh:
    """Closed tube through ring centers; faces point outward when e1 x e2 follows the ring order."""
    theta = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    verts = [c + radius * ring for c in centers]
    vertices = np.concatenate(verts + [start_cap[None], end_cap[None]])
    n_rings = len(centers)
    start, end = n_rings * segments, n_rings * segments + 1
    faces = []
    for i in range(n_rings - 1):
        for k in range(segments):
            a = i * segments + k
            b = i * segments + (k + 1) % segments
            c = (i + 1) * segments + (k + 1) % segments
            d = (i + 1) * segments + k
            faces += [(a, b, d), (b, c, d)]
    last = (n_rings - 1) * segments
    for k in range(segments):
        k1 = (k + 1) % segments
        faces.append((k1, k, start))
        faces.append((last + k, last + k1, end))
    return Mesh(vertices, np.array(faces))


def _mirror(mesh: Mesh) -> Mesh:
    return Mesh(mesh.vertices * np.array([-1.0, 1.0, 1.0]), mesh.faces[:, ::-1])


def _build_parts(spec: SynthSpec) -> List[Tuple[Mesh, int]]:
    half_l, half_w, half_h = spec.body_length / 2.0, spec.body_width / 2.0, spec.body_height / 2.0
    body_y = spec.leg_length + 0.4 * spec.body_height
    body = icosphere(spec.subdivisions)
    body = body.with_vertices(body.vertices * np.array([half_w, half_h, half_l]) + np.array([0.0, body_y, 0.0]))
    parts: List[Tuple[Mesh, int]] = [(body, BODY)]

    x_axis, y_axis, z_axis = np.eye(3)
    n_rings = 4
    tip = 0.5 * spec.leg_radius
    for z0 in (0.6 * half_l, -0.6 * half_l):
        x0 = 0.55 * half_w
        ys = np.linspace(body_y, tip, n_rings)
        centers = np.stack([np.full(n_rings, x0), ys, np.full(n_rings, z0)], axis=1)
        leg = _tube(centers, spec.leg_radius, x_axis, z_axis, spec.segments,
                    start_cap=centers[0], end_cap=np.array([x0, 0.0, z0]))
        parts += [(leg, LEG), (_mirror(leg), LEG)]

    if spec.neck:
        head = icosphere(max(spec.subdivisions - 1, 0), radius=spec.head_radius)
        offset = np.array([0.0, body_y + 0.45 * spec.body_height, half_l + 0.1])
        parts.append((head.with_vertices(head.vertices + offset), HEAD))
    if spec.tail:
        z_start = -half_l + 0.1
        zs = np.linspace(z_start, z_start - spec.tail_length, 3)
        centers = np.stack([np.zeros(3), np.full(3, body_y), zs], axis=1)
        radius = 0.4 * spec.leg_radius
        tail = _tube(centers, radius, y_axis, x_axis, spec.segments,
                     start_cap=centers[0], end_cap=centers[-1] - np.array([0.0, 0.0, radius]))
        parts.append((tail, TAIL))
    return parts


def leg_bend_angles(bend_deg: float) -> np.ndarray:
    """Joint angles that swing every upper leg bone by bend_deg about x."""
    angles = np.zeros((SPINE_BONES + 3 * N_LEGS, 3))
    angles[SPINE_BONES::3, 0] = np.deg2rad(bend_deg)
    return angles


def canonical_features(vertices: np.ndarray, parts: np.ndarray, scale: float) -> np.ndarray:
    """Fixed random map of (|x|, y, z, part one-hot) to FEATURE_DIM channels."""
    rng = np.random.default_rng(FEATURE_SEED)
    projection = rng.standard_normal((3 + len(PART_NAMES), FEATURE_DIM))
    position = np.abs(vertices) * np.array([1.0, 0.0, 0.0]) + vertices * np.array([0.0, 1.0, 1.0])
    inputs = np.concatenate([position / scale, np.eye(len(PART_NAMES))[parts]], axis=1)
    return np.tanh(inputs @ projection / np.sqrt(inputs.shape[1]))


def species_embedding(spec: SynthSpec, dim: int = KEY_DIM) -> np.ndarray:
    """Deterministic image-level embedding of the species' shape parameters."""
    descriptor = np.array([
        spec.body_length, spec.body_width, spec.body_height, spec.leg_length,
        spec.leg_radius, float(spec.neck), float(spec.tail), 1.0,
    ])
    rng = np.random.default_rng(EMBEDDING_SEED)
    return rng.standard_normal((dim, len(descriptor))) @ descriptor


def synth_quadruped(spec: Optional[SynthSpec] = None) -> SynthScene:
    """Build the rest mesh, its ground-truth skeleton and per-vertex fields."""
    spec = spec or SynthSpec()
    parts = _build_parts(spec)
    mesh = merge(*(m for m, _ in parts))
    labels = np.concatenate([np.full(m.n_vertices, label) for m, label in parts])

    vertices = mesh.vertices.copy()
    vertices[np.abs(vertices[:, 0]) < 1e-12, 0] = 0.0
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    vertices[:, 1] -= 0.5 * (lo[1] + hi[1])
    mesh = mesh.with_vertices(vertices)

    skel = instantiate_quadruped(mesh)
    skin = skinning_weights(mesh, skel, SKINNING_TEMPERATURE)
    rng = np.random.default_rng(spec.seed)
    shade_jitter = 1.0 + 0.05 * np.tanh(rng.standard_normal(len(PART_NAMES)))
    albedo = np.clip(PART_ALBEDO[labels] * shade_jitter[labels, None], 0.0, 1.0)
    features = canonical_features(vertices, labels, spec.body_length)
    logger.debug("synthetic quadruped: %d vertices, %d faces", mesh.n_vertices, mesh.n_faces)
    return SynthScene(
        spec=spec,
        mesh=mesh,
        parts=labels,
        skeleton=skel,
        skin_weights=skin,
        features=features,
        albedo=albedo,
        embedding=species_embedding(spec),
    )


# ── Views ────────────────────────────────────────────────────────────────


def sample_azimuths(n: int, bias: float, rng: np.random.Generator) -> np.ndarray:
    """Azimuths in degrees in [0, 360): a `bias` fraction frontal, the rest uniform."""
    frontal = rng.random(n) < bias
    near = rng.uniform(-FRONTAL_HALF_WIDTH_DEG, FRONTAL_HALF_WIDTH_DEG, n)
    anywhere = rng.uniform(0.0, 360.0, n)
    return np.where(frontal, near, anywhere) % 360.0


def view_keypoints(scene: SynthScene, pose: Pose, cam: Camera, depth: np.ndarray, mask: np.ndarray) -> KeypointSet:
    """Project the 11 skeleton keypoints; visible when on the mask and near the z-buffer."""
    heads, tails = posed_joints(scene.skeleton, pose)
    points = keypoint_positions(scene.skeleton, heads, tails)
    pixels, z, valid = project_points(cam, points)
    visible = np.zeros(len(points), dtype=bool)
    for i, ((px, py), zi) in enumerate(zip(pixels, z)):
        if not valid[i] or not (0 <= px < cam.width and 0 <= py < cam.height):
            continue
        col, row = int(px), int(py)
        visible[i] = mask[row, col] > 0 and zi <= depth[row, col] + JOINT_DEPTH_SLACK
    return KeypointSet(KEYPOINT_NAMES, pixels, visible, cam.width, cam.height)


def _render_one(
    scene: SynthScene,
    cam: Camera,
    azimuth: float,
    seed: np.random.SeedSequence,
    light: Light,
    name: str,
) -> SynthView:
    spec = scene.spec
    rotation = view_rotation(np.deg2rad(azimuth), np.deg2rad(spec.elevation_deg)).data
    pose = scene.articulated_pose(matrix_to_quaternion(rotation))
    posed = lbs_pose(scene.mesh, scene.skeleton, scene.skin_weights, pose)
    buffers = render_view(posed, cam, scene.albedo, light, scene.features)
    rng = np.random.default_rng(seed)
    on = buffers.mask > 0
    image = buffers.rgb
    features = buffers.feature
    if spec.image_noise > 0.0:
        noise = spec.image_noise * rng.standard_normal(image.shape)
        image = np.where(on[..., None], np.clip(image + noise, 1.0 / 255.0, 1.0), 0.0)
    if spec.feature_noise > 0.0:
        noise = spec.feature_noise * rng.standard_normal(features.shape)
        features = np.where(on[..., None], features + noise, 0.0)
    phi = scene.embedding
    if spec.feature_noise > 0.0:
        phi = phi + spec.feature_noise * np.linalg.norm(phi) / np.sqrt(phi.size) * rng.standard_normal(phi.shape)
    return SynthView(
        name=name,
        image=image,
        mask=buffers.mask,
        features=features,
        phi=phi,
        keypoints=view_keypoints(scene, pose, cam, buffers.depth, buffers.mask),
        pose=pose,
        azimuth=float(azimuth),
    )


def generate_views(
    scene: SynthScene,
    cam: Camera,
    n_views: int,
    bias: Optional[float] = None,
    seed: Optional[int] = None,
    jobs: int = 1,
    light: Light = DEFAULT_LIGHT,
    azimuths: Optional[Sequence[float]] = None,
) -> List[SynthView]:
    """Render n_views observations of the articulated scene.

    Azimuths and per-view noise seeds are drawn up front, so the output does
    not depend on `jobs`. Pass `azimuths` (degrees) to fix the viewpoints.
    """
    if n_views < 1:
        raise ConfigError(f"n_views must be >= 1, got {n_views}")
    bias = scene.spec.bias if bias is None else bias
    if not 0.0 <= bias <= 1.0:
        raise ConfigError(f"bias must be in [0, 1], got {bias}")
    seed = scene.spec.seed if seed is None else seed
    root = np.random.SeedSequence(seed)
    az_seed, *view_seeds = root.spawn(n_views + 1)
    if azimuths is None:
        azimuths = sample_azimuths(n_views, bias, np.random.default_rng(az_seed))
    elif len(azimuths) != n_views:
        raise ConfigError(f"need {n_views} azimuths, got {len(azimuths)}")
    names = [f"view{i:03d}" for i in range(n_views)]

    def render(i: int) -> SynthView:
        return _render_one(scene, cam, float(azimuths[i]), view_seeds[i], light, names[i])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(render, range(n_views)))
    return [render(i) for i in range(n_views)]


# ── Synthetic banks ──────────────────────────────────────────────────────


def make_bank(
    template: Mesh,
    rng: np.random.Generator,
    size: int = BANK_SIZE,
    key_dim: int = KEY_DIM,
    value_dim: int = VALUE_DIM,
    top_m: int = TOP_M,
    variants: Sequence[SynthScene] = (),
) -> SemanticBank:
    """Random bank over `template`; the first tokens hold the given variants.

    A variant token's key is the variant's embedding and its offset field is
    the variant's rest mesh minus the template (same topology required).
    """
    bank = SemanticBank.initial(template, rng, size=size, key_dim=key_dim, value_dim=value_dim, top_m=top_m)
    if len(variants) > size:
        raise ConfigError(f"{len(variants)} variants do not fit a bank of {size}")
    keys, offsets = bank.keys.copy(), bank.offsets.copy()
    for i, scene in enumerate(variants):
        if scene.mesh.n_vertices != template.n_vertices:
            raise ConfigError(
                f"variant {i} has {scene.mesh.n_vertices} vertices, template has {template.n_vertices}"
            )
        keys[i] = species_embedding(scene.spec, key_dim)
        offsets[i] = scene.mesh.vertices - template.vertices
    return SemanticBank(keys, bank.values, offsets, template, top_m=bank.top_m)
