"""Quadruped skeleton, skinning weights, linear blend skinning and joint limits.

Bone numbering: slot 1 is the global rigid transform; articulated bones
are reported as b = 2..21 (index + 2), stored 0-based internally:

    0..3    spine chain from the mesh center toward the +z extreme
    4..7    spine chain from the mesh center toward the -z extreme
    8..19   legs, three bones each (upper, middle, lower), in the order
            front-left, front-right, back-left, back-right

Each bone is the segment from its head (the parent-side joint, also its
rotation pivot) to its tail. Joint angles are intrinsic XYZ Euler angles
in radians, expressed in model axes (x = left/right, y = up, z = front/back),
so leg swing is a rotation about x.

Usage:
    skel = instantiate_quadruped(base_mesh)
    weights = skinning_weights(base_mesh, skel, tau_s=0.5)
    pose = Pose.rest(skel.n_bones)
    posed = lbs_pose(base_mesh, skel, weights, pose)
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from sbsm_fit.autodiff import (
    Tensor,
    TensorLike,
    as_tensor,
    cos,
    matmul,
    reshape,
    sin,
    square,
    stack,
    tsum,
)
from sbsm_fit.config import (
    ANGLE_LIMITS_DEG,
    FOOT_HEIGHT_FRACTION,
    LEG_BONES,
    N_LEGS,
    SKINNING_TEMPERATURE,
    SPINE_BONES,
)
from sbsm_fit.errors import SkeletonError
from sbsm_fit.geometry import Mesh

logger = logging.getLogger(__name__)

SkinWeights = np.ndarray

ROOT = -1
QUADRANTS = ("front-left", "front-right", "back-left", "back-right")
KEYPOINT_NAMES = (
    "foot_front_left", "foot_front_right", "foot_back_left", "foot_back_right",
    "knee_front_left", "knee_front_right", "knee_back_left", "knee_back_right",
    "spine_front", "spine_back", "centroid",
)
LEG_ROLES = ("leg_upper", "leg_middle", "leg_lower")


@dataclass(frozen=True)
class Bone:
    """One articulated bone as reported to users (1-based slot numbering)."""

    index: int
    parent: int
    head: Tuple[float, float, float]
    tail: Tuple[float, float, float]
    role: str


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Rest-pose bone tree. parents[i] < i, or ROOT for bones hanging off the rigid slot."""

    heads: np.ndarray
    tails: np.ndarray
    parents: np.ndarray
    roles: Tuple[str, ...]

    def __post_init__(self):
        heads = np.asarray(self.heads, dtype=np.float64).reshape(-1, 3)
        tails = np.asarray(self.tails, dtype=np.float64).reshape(-1, 3)
        parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        roles = tuple(self.roles)
        n = len(heads)
        if n < 1:
            raise SkeletonError("skeleton needs at least one bone")
        if tails.shape != heads.shape or parents.shape != (n,) or len(roles) != n:
            raise SkeletonError(
                f"heads, tails, parents and roles must agree on {n} bones, got "
                f"{tails.shape[0]}, {parents.shape[0]}, {len(roles)}"
            )
        for i, p in enumerate(parents):
            if not (p == ROOT or 0 <= p < i):
                raise SkeletonError(f"bone {i} has parent {p}; parents must precede children")
        if not (np.all(np.isfinite(heads)) and np.all(np.isfinite(tails))):
            raise SkeletonError("joints must be finite")
        unknown = sorted(set(roles) - set(ANGLE_LIMITS_DEG))
        if unknown:
            raise SkeletonError(f"unknown bone roles {unknown}")
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "tails", tails)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "roles", roles)

    @property
    def n_bones(self) -> int:
        return len(self.heads)

    @property
    def bones(self) -> List[Bone]:
        return [
            Bone(
                index=i + 2,
                parent=1 if p == ROOT else int(p) + 2,
                head=tuple(self.heads[i].tolist()),
                tail=tuple(self.tails[i].tolist()),
                role=self.roles[i],
            )
            for i, p in enumerate(self.parents)
        ]

    def leg_bones(self, leg: int) -> np.ndarray:
        """0-based indices of the (upper, middle, lower) bones of a leg."""
        start = SPINE_BONES + LEG_BONES * leg
        return np.arange(start, start + LEG_BONES)


# ── Instantiation ────────────────────────────────────────────────────────


def _chain(start: np.ndarray, end: np.ndarray, n: int) -> np.ndarray:
    """n + 1 equally spaced joints from start to end."""
    t = np.arange(n + 1)[:, None] / n
    return start + t * (end - start)


def _argmin_lowest_index(values: np.ndarray) -> int:
    return int(np.flatnonzero(values == values.min())[0])


def _spine_end(vertices: np.ndarray, sign: float) -> np.ndarray:
    """Extreme vertex along sign * z; ties go to the smallest |x|, then the lower index."""
    depth = sign * vertices[:, 2]
    candidates = np.flatnonzero(depth == depth.max())
    return vertices[candidates[_argmin_lowest_index(np.abs(vertices[candidates, 0]))]]


def find_feet(vertices: np.ndarray) -> Dict[str, int]:
    """Lowest vertex per xz-quadrant of the low-vertex centroid.

    Low vertices lie in the bottom 40% of the height range; their xz
    centroid is the quadrant origin. Ties go to the lower vertex index.

    Raises:
        SkeletonError: "missing leg" naming the first empty quadrant.
    """
    y = vertices[:, 1]
    cutoff = y.min() + FOOT_HEIGHT_FRACTION * (y.max() - y.min())
    low = np.flatnonzero(y < cutoff)
    origin = vertices[low][:, [0, 2]].mean(axis=0)
    dx = vertices[low, 0] - origin[0]
    dz = vertices[low, 2] - origin[1]
    members = {
        "front-left": (dz >= 0) & (dx >= 0),
        "front-right": (dz >= 0) & (dx < 0),
        "back-left": (dz < 0) & (dx >= 0),
        "back-right": (dz < 0) & (dx < 0),
    }
    feet = {}
    for quadrant in QUADRANTS:
        candidates = low[members[quadrant]]
        if not len(candidates):
            raise SkeletonError(f"missing leg: no low vertices in the {quadrant} quadrant", quadrant)
        feet[quadrant] = int(candidates[_argmin_lowest_index(y[candidates])])
    return feet


def instantiate_quadruped(mesh: Mesh) -> Skeleton:
    """Fit the 8-bone spine and four 3-bone legs to a rest-pose mesh.

    Raises:
        SkeletonError: if the mesh is flat along y or z, or a leg quadrant
            has no low vertices.
    """
    v = mesh.vertices
    extent = mesh.extent()
    if extent[1] <= 0.0 or extent[2] <= 0.0:
        raise SkeletonError(f"mesh needs nonzero extent along y and z, got {extent.tolist()}")

    center = v.mean(axis=0)
    front = _spine_end(v, 1.0)
    back = _spine_end(v, -1.0)
    half = SPINE_BONES // 2
    front_joints = _chain(center, front, half)
    back_joints = _chain(center, back, half)

    heads: List[np.ndarray] = []
    tails: List[np.ndarray] = []
    parents: List[int] = []
    roles: List[str] = []
    for offset, joints in ((0, front_joints), (half, back_joints)):
        for k in range(half):
            heads.append(joints[k])
            tails.append(joints[k + 1])
            parents.append(ROOT if k == 0 else offset + k - 1)
            roles.append("spine")

    # spine joint j -> bone whose tail it is (ROOT for the shared center)
    spine_joints = np.concatenate([center[None], front_joints[1:], back_joints[1:]])
    joint_owner = [ROOT] + list(range(half)) + list(range(half, SPINE_BONES))

    feet = find_feet(v)
    for quadrant in QUADRANTS:
        foot = v[feet[quadrant]]
        d = np.sum((spine_joints - foot) ** 2, axis=1)
        attach = _argmin_lowest_index(d)
        joints = _chain(spine_joints[attach], foot, LEG_BONES)
        for k in range(LEG_BONES):
            heads.append(joints[k])
            tails.append(joints[k + 1])
            parents.append(joint_owner[attach] if k == 0 else len(heads) - 2)
            roles.append(LEG_ROLES[k])

    skel = Skeleton(np.array(heads), np.array(tails), np.array(parents), tuple(roles))
    logger.info(
        "instantiated skeleton with %d bones (spine %.3f units per bone)",
        skel.n_bones,
        float(np.linalg.norm(front - center)) / half,
    )
    return skel


# ── Skinning ─────────────────────────────────────────────────────────────


def point_segment_sqdist(p, a, b) -> float:
    """Exact squared distance from p to the segment between a and b."""
    p, a, b = (np.asarray(x, dtype=np.float64) for x in (p, a, b))
    return float(segment_sqdist(p[None], a[None], b[None])[0, 0])


def segment_sqdist(points: np.ndarray, heads: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """(N, B) squared distances from every point to every segment."""
    ab = tails - heads                                     # (B, 3)
    ap = points[:, None, :] - heads[None, :, :]            # (N, B, 3)
    denom = np.sum(ab * ab, axis=1)                        # (B,)
    safe = np.where(denom > 0.0, denom, 1.0)
    r = np.clip(np.sum(ap * ab[None], axis=2) / safe, 0.0, 1.0)
    r = np.where(denom > 0.0, r, 0.0)
    diff = ap - r[..., None] * ab[None]
    return np.sum(diff * diff, axis=2)


def skinning_weights(mesh: Mesh, skel: Skeleton, tau_s: float = SKINNING_TEMPERATURE) -> SkinWeights:
    """Softmax over bones of negative squared vertex-to-bone distance / tau_s."""
    if tau_s <= 0.0:
        raise SkeletonError(f"tau_s must be positive, got {tau_s}")
    d = segment_sqdist(mesh.vertices, skel.heads, skel.tails)
    logits = -(d - d.min(axis=1, keepdims=True)) / tau_s
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


# ── Rotations ────────────────────────────────────────────────────────────


def euler_xyz_matrix(angles: TensorLike) -> Tensor:
    """Rotation matrices Rx(a) @ Ry(b) @ Rz(c) for (..., 3) angle triples."""
    angles = as_tensor(angles)
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = cos(a), sin(a), cos(b), sin(b), cos(c), sin(c)
    rows = [
        cb * cc, -(cb * sc), sb,
        ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -(sa * cb),
        sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb,
    ]
    return reshape(stack(rows, axis=-1), angles.shape[:-1] + (3, 3))


def quaternion_to_matrix(q: TensorLike) -> Tensor:
    """Rotation matrix of a (w, x, y, z) quaternion, normalized first."""
    q = as_tensor(q)
    q = q / (tsum(square(q)) ** 0.5)
    w, x, y, z = q[0], q[1], q[2], q[3]
    rows = [
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ]
    return reshape(stack(rows), (3, 3))


def matrix_to_quaternion(m: np.ndarray) -> np.ndarray:
    """(w, x, y, z) with w >= 0 for a proper rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    trace = np.trace(m)
    if trace > 0.0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0.0 else q


def view_rotation(azimuth: TensorLike, elevation: TensorLike = 0.0, roll: TensorLike = 0.0) -> Tensor:
    """Object rotation Rz(roll) @ Rx(elevation) @ Ry(azimuth), angles in radians.

    Azimuth 0 shows the +z (front) side to a camera on the +z axis.
    """
    az, el, ro = as_tensor(azimuth), as_tensor(elevation), as_tensor(roll)
    zero, one = Tensor(0.0), Tensor(1.0)
    ry = reshape(stack([cos(az), zero, sin(az), zero, one, zero, -sin(az), zero, cos(az)]), (3, 3))
    rx = reshape(stack([one, zero, zero, zero, cos(el), -sin(el), zero, sin(el), cos(el)]), (3, 3))
    rz = reshape(stack([cos(ro), -sin(ro), zero, sin(ro), cos(ro), zero, zero, zero, one]), (3, 3))
    return matmul(rz, matmul(rx, ry))


def slerp(q0: np.ndarray, q1: np.ndarray, alpha: float) -> np.ndarray:
    """Shortest-arc spherical interpolation of unit quaternions."""
    q0 = np.asarray(q0, dtype=np.float64) / np.linalg.norm(q0)
    q1 = np.asarray(q1, dtype=np.float64) / np.linalg.norm(q1)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-12:
        q = q0 + alpha * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = np.arccos(dot)
    return (np.sin((1.0 - alpha) * theta) * q0 + np.sin(alpha * theta) * q1) / np.sin(theta)


# ── Pose ─────────────────────────────────────────────────────────────────


@dataclass
class Pose:
    """Rigid slot (unit quaternion + translation) and per-bone Euler angles."""

    rotation: np.ndarray
    translation: np.ndarray
    joint_angles: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        length = np.linalg.norm(rotation)
        if not np.isfinite(length) or length == 0.0:
            raise SkeletonError(f"rotation must be a nonzero quaternion, got {rotation.tolist()}")
        self.rotation = rotation / length
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def rest(cls, n_bones: int) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.zeros((n_bones, 3)))

    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation).data

    def in_box(self, box: Sequence[float]) -> bool:
        return bool(np.all(np.abs(self.translation) < np.asarray(box)))

    def as_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "joint_angles": self.joint_angles.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(data["rotation"], data["translation"], data["joint_angles"])


def interpolate_poses(a: Pose, b: Pose, alpha: float) -> Pose:
    """Slerp the rigid rotation, blend translation and joint angles linearly."""
    if a.joint_angles.shape != b.joint_angles.shape:
        raise SkeletonError("poses must have the same number of bones")
    return Pose(
        slerp(a.rotation, b.rotation, alpha),
        (1.0 - alpha) * a.translation + alpha * b.translation,
        (1.0 - alpha) * a.joint_angles + alpha * b.joint_angles,
    )


# ── Linear blend skinning ────────────────────────────────────────────────


def bone_transforms(
    skel: Skeleton,
    root_rotation: TensorLike,
    translation: TensorLike,
    joint_angles: TensorLike,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Global bone rotations and offsets composed down the tree.

    A rest point x attached to bone b maps to R[b] @ x + T[b].

    Returns:
        (R (B, 3, 3), T (B, 3), posed heads (B, 3))
    """
    root = as_tensor(root_rotation)
    t = as_tensor(translation)
    local = euler_xyz_matrix(joint_angles)
    heads = skel.heads
    rotations: List[Tensor] = []
    posed_heads: List[Tensor] = []
    for i, p in enumerate(skel.parents):
        if p == ROOT:
            parent_rot = root
            head = matmul(root, heads[i]) + t
        else:
            parent_rot = rotations[p]
            head = matmul(parent_rot, heads[i] - heads[p]) + posed_heads[p]
        rotations.append(matmul(parent_rot, local[i]))
        posed_heads.append(head)
    rot = stack(rotations)
    posed = stack(posed_heads)
    offset = posed - reshape(matmul(rot, reshape(Tensor(heads), (-1, 3, 1))), (-1, 3))
    return rot, offset, posed


def lbs(
    vertices: TensorLike,
    skel: Skeleton,
    weights: SkinWeights,
    root_rotation: TensorLike,
    translation: TensorLike,
    joint_angles: TensorLike,
) -> Tensor:
    """Differentiable linear blend skinning of (N, 3) rest vertices."""
    verts = as_tensor(vertices)
    rot, offset, _ = bone_transforms(skel, root_rotation, translation, joint_angles)
    n_bones = skel.n_bones
    blended_rot = reshape(matmul(weights, reshape(rot, (n_bones, 9))), (-1, 3, 3))
    blended_offset = matmul(weights, offset)
    moved = reshape(matmul(blended_rot, reshape(verts, (-1, 3, 1))), (-1, 3))
    return moved + blended_offset


def lbs_pose(mesh: Mesh, skel: Skeleton, weights: SkinWeights, pose: Pose) -> Mesh:
    """Pose a rest mesh; faces are unchanged."""
    if weights.shape != (mesh.n_vertices, skel.n_bones):
        raise SkeletonError(
            f"weights must have shape ({mesh.n_vertices}, {skel.n_bones}), got {weights.shape}"
        )
    posed = lbs(
        mesh.vertices, skel, weights, quaternion_to_matrix(pose.rotation), pose.translation, pose.joint_angles
    )
    return mesh.with_vertices(posed.data)


def posed_joints(skel: Skeleton, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """Posed (heads, tails) by the same chain as lbs."""
    rot, _, heads = bone_transforms(
        skel, quaternion_to_matrix(pose.rotation), pose.translation, pose.joint_angles
    )
    bone = (skel.tails - skel.heads)[..., None]
    tails = heads.data + (rot.data @ bone)[..., 0]
    return heads.data, tails


def keypoint_positions(skel: Skeleton, heads: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """The 11 named keypoints (KEYPOINT_NAMES order) from a set of joints."""
    legs = [skel.leg_bones(l) for l in range(N_LEGS)]
    feet = [tails[leg[-1]] for leg in legs]
    knees = [heads[leg[-1]] for leg in legs]
    half = SPINE_BONES // 2
    spine = [tails[half - 1], tails[SPINE_BONES - 1], heads[0]]
    return np.array(feet + knees + spine)


# ── Joint limits ─────────────────────────────────────────────────────────


@dataclass
class AngleLimits:
    """Per-bone Euler bounds in radians; +-inf for free axes."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64).reshape(-1, 3)
        self.upper = np.asarray(self.upper, dtype=np.float64).reshape(-1, 3)
        if self.lower.shape != self.upper.shape:
            raise SkeletonError("lower and upper limits must have the same shape")
        if np.any(self.lower > self.upper):
            raise SkeletonError("every lower limit must be <= its upper limit")

    @classmethod
    def for_skeleton(cls, skel: Skeleton) -> "AngleLimits":
        lower = np.full((skel.n_bones, 3), -np.inf)
        upper = np.full((skel.n_bones, 3), np.inf)
        for i, role in enumerate(skel.roles):
            for axis, bounds in enumerate(ANGLE_LIMITS_DEG[role]):
                if bounds is not None:
                    lower[i, axis], upper[i, axis] = np.deg2rad(bounds)
        return cls(lower, upper)

    def clamp(self, angles: np.ndarray) -> np.ndarray:
        return np.clip(angles, self.lower, self.upper)


def clamp_angles(pose: Pose, limits: AngleLimits) -> Pose:
    """Componentwise projection of the joint angles onto the limits."""
    if limits.lower.shape != pose.joint_angles.shape:
        raise SkeletonError(
            f"limits cover {limits.lower.shape[0]} bones, pose has {pose.joint_angles.shape[0]}"
        )
    return Pose(pose.rotation, pose.translation, limits.clamp(pose.joint_angles))


def art_regularizer(pose: Union[Pose, TensorLike]) -> Tensor:
    """Mean over articulated bones of the squared Euler-angle norm."""
    angles = as_tensor(pose.joint_angles if isinstance(pose, Pose) else pose)
    return tsum(square(angles)) / float(max(angles.shape[0], 1))


# ── Serialization ────────────────────────────────────────────────────────


def skeleton_to_dict(skel: Skeleton) -> dict:
    return {
        "bones": [
            {"index": b.index, "parent": b.parent, "role": b.role, "head": list(b.head), "tail": list(b.tail)}
            for b in skel.bones
        ]
    }


def skeleton_from_dict(data: dict) -> Skeleton:
    bones = sorted(data["bones"], key=lambda b: b["index"])
    for expected, b in enumerate(bones, start=2):
        if b["index"] != expected:
            raise SkeletonError(f"bone indices must run from 2 without gaps, got {b['index']}")
    return Skeleton(
        np.array([b["head"] for b in bones]),
        np.array([b["tail"] for b in bones]),
        np.array([ROOT if b["parent"] == 1 else b["parent"] - 2 for b in bones]),
        tuple(b["role"] for b in bones),
    )
