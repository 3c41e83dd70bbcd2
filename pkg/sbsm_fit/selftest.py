"""Fast acceptance checks run by `sbsm-fit eval --self-test`.

Each check returns a CheckResult instead of raising, so one broken
invariant does not hide the others. The rasterizer and distance-transform
oracles here are naive per-pixel loops.

Usage:
    results = run_self_test(seed=0)
    ok = all(r.passed for r in results)
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from sbsm_fit.autodiff import Tensor, backward, finite_diff_check, parameter, tsum
from sbsm_fit.bank import interpolate_bases, query, synthesize_base
from sbsm_fit.geometry import Mesh, icosphere, symmetrize
from sbsm_fit.metrics import eval_iou, eval_keypoint_transfer, visible_vertices
from sbsm_fit.objective import (
    Discriminator,
    def_regularizer,
    discriminator_forward,
    distance_transform,
    feature_loss,
    hyp_loss,
    image_loss,
    mask_loss,
)
from sbsm_fit.render import Camera, project_points, rasterize, shade, soft_silhouette
from sbsm_fit.skeleton import AngleLimits, Pose, art_regularizer, clamp_angles, lbs, lbs_pose
from sbsm_fit.synth import KeypointSet, SynthSpec, make_bank, synth_quadruped

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# ── Oracles ──────────────────────────────────────────────────────────────


def brute_force_raster(mesh: Mesh, cam: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """(face_index, depth) by testing every pixel against every face in order."""
    screen, depth, valid = project_points(cam, mesh.vertices)
    face_index = np.full((cam.height, cam.width), -1, dtype=np.int64)
    zbuf = np.full((cam.height, cam.width), np.inf)
    for f, (a, b, c) in enumerate(mesh.faces):
        if not (valid[a] and valid[b] and valid[c]):
            continue
        ax, ay = screen[a]
        bx, by = screen[b]
        cx, cy = screen[c]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        for row in range(cam.height):
            py = row + 0.5
            for col in range(cam.width):
                px = col + 0.5
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if not ((w0 >= 0 and w1 >= 0 and w2 >= 0) or (w0 <= 0 and w1 <= 0 and w2 <= 0)):
                    continue
                z = 1.0 / (w0 / area / depth[a] + w1 / area / depth[b] + w2 / area / depth[c])
                if z < zbuf[row, col]:
                    zbuf[row, col] = z
                    face_index[row, col] = f
    return face_index, zbuf


def brute_force_distance(mask: np.ndarray) -> np.ndarray:
    """O(N^2) distance from every pixel to the nearest foreground pixel."""
    mask = np.asarray(mask) > 0.5
    h, w = mask.shape
    fg = np.argwhere(mask)
    if not len(fg):
        return np.full((h, w), float(np.hypot(h, w)))
    rows, cols = np.mgrid[0:h, 0:w]
    out = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            d2 = (fg[:, 0] - rows[r, c]) ** 2 + (fg[:, 1] - cols[r, c]) ** 2
            out[r, c] = math.sqrt(float(d2.min()))
    return out


def random_triangle_scene(rng: np.random.Generator, n_faces: int) -> Mesh:
    """Independent random triangles in front of the default camera."""
    vertices = np.column_stack([
        rng.uniform(-1.5, 1.5, 3 * n_faces),
        rng.uniform(-1.5, 1.5, 3 * n_faces),
        rng.uniform(-1.0, 1.0, 3 * n_faces),
    ])
    return Mesh(vertices, np.arange(3 * n_faces).reshape(n_faces, 3))


# ── Checks ───────────────────────────────────────────────────────────────


def _structural(seed: int) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    scene = synth_quadruped(SynthSpec(subdivisions=1, segments=6))
    mesh, skel, skin = scene.mesh, scene.skeleton, scene.skin_weights
    results = []

    posed = lbs_pose(mesh, skel, skin, Pose.rest(skel.n_bones))
    err = float(np.abs(posed.vertices - mesh.vertices).max())
    results.append(CheckResult("lbs_rest_identity", err <= 1e-12, f"max error {err:.2e}"))

    err = float(np.abs(skin.sum(axis=1) - 1.0).max())
    results.append(CheckResult("skinning_rows_sum_to_one", err <= 1e-9, f"max error {err:.2e}"))

    bank = make_bank(mesh, rng, size=12, key_dim=16, value_dim=8, top_m=4)
    phi = rng.standard_normal(16)
    w1, w2 = query(bank, phi).weights, query(bank, 3.7 * phi).weights
    err = max(abs(w1.sum() - 1.0), float(np.abs(w1 - w2).max()))
    results.append(CheckResult("bank_weights_normalized_and_scale_invariant", err <= 1e-9, f"max error {err:.2e}"))

    field = rng.standard_normal((mesh.n_vertices, 3))
    once = symmetrize(field, mesh)
    err = float(np.abs(symmetrize(once, mesh) - once).max())
    results.append(CheckResult("symmetrize_idempotent", err <= 1e-12, f"max error {err:.2e}"))

    limits = AngleLimits.for_skeleton(skel)
    pose = Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), rng.normal(0.0, 0.5, (skel.n_bones, 3)))
    once = clamp_angles(pose, limits)
    twice = clamp_angles(once, limits)
    results.append(CheckResult("clamp_angles_idempotent", bool(np.array_equal(once.joint_angles, twice.joint_angles))))

    vertices = parameter(mesh.vertices)
    score = parameter(0.3)
    rec = tsum(vertices * vertices)
    grads = backward(hyp_loss(score, rec))
    leak = vertices in grads and bool(np.any(grads[vertices]))
    disc = Discriminator.create(rng, 8, value_dim=4, width=4, max_width=4)
    phi_t = parameter(rng.standard_normal(4))
    grads = backward(tsum(discriminator_forward(disc, rng.random((2, 8, 8)), phi_t)))
    leak = leak or (phi_t in grads and bool(np.any(grads[phi_t])))
    results.append(CheckResult("detach_contracts", not leak))

    weights_a = query(bank, phi).weights
    weights_b = query(bank, rng.standard_normal(16)).weights
    alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
    va = synthesize_base(bank, weights_a).vertices
    vb = synthesize_base(bank, weights_b).vertices
    err = max(
        float(np.abs(m.vertices - ((1 - a) * va + a * vb)).max())
        for a, m in zip(alphas, interpolate_bases(bank, weights_a, weights_b, alphas))
    )
    results.append(CheckResult("interpolation_linear", err <= 1e-9, f"max error {err:.2e}"))
    return results


def _raster_oracle(seed: int, scenes: int = 5, size: int = 24) -> CheckResult:
    rng = np.random.default_rng(seed)
    cam = Camera(width=size, height=size, fov_deg=30.0)
    worst = 0.0
    for _ in range(scenes):
        mesh = random_triangle_scene(rng, int(rng.integers(1, 8)))
        buffers = rasterize(mesh, cam)
        faces, depth = brute_force_raster(mesh, cam)
        if not np.array_equal(faces >= 0, buffers.face_index >= 0):
            return CheckResult("rasterizer_oracle", False, "coverage differs")
        hit = faces >= 0
        if hit.any():
            worst = max(worst, float(np.abs(depth[hit] - buffers.depth[hit]).max()))
    return CheckResult("rasterizer_oracle", worst <= 1e-9, f"max depth error {worst:.2e}")


def _distance_oracle(seed: int, masks: int = 10, size: int = 16) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(masks):
        mask = rng.random((size, size)) < rng.uniform(0.02, 0.3)
        err = float(np.abs(distance_transform(mask) - brute_force_distance(mask)).max())
        if err > 1e-12:
            return CheckResult("distance_transform_oracle", False, f"max error {err:.2e}")
    return CheckResult("distance_transform_oracle", True)


def run_gradient_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    cam = Camera(width=16, height=16)
    sphere = icosphere(1, radius=1.2)
    target = rasterize(sphere.with_vertices(sphere.vertices * 0.9), cam).mask
    dt = distance_transform(target)
    vertices = parameter(sphere.vertices)

    def silhouette_loss() -> Tensor:
        return mask_loss(soft_silhouette(vertices, sphere.faces, cam, 1e-2), target, 0.1, dt=dt)

    results = []
    err = finite_diff_check(silhouette_loss, [vertices], max_coords=15, seed=seed, abs_tol=GRAD_FLOOR)
    results.append(CheckResult("grad_soft_silhouette_mask_loss", err < GRAD_TOL, f"max rel error {err:.2e}"))

    normals = parameter(rng.standard_normal((10, 3)))
    albedo = rng.random((10, 3))
    ambient, diffuse = parameter(0.3), parameter(0.7)
    direction = np.array([0.2, 0.4, 0.9]) / np.linalg.norm([0.2, 0.4, 0.9])
    probe = rng.standard_normal((10, 3))

    def shading() -> Tensor:
        return tsum(shade(normals, albedo, ambient, diffuse, direction) * probe)

    err = finite_diff_check(shading, [normals, ambient, diffuse], seed=seed, abs_tol=GRAD_FLOOR)
    results.append(CheckResult("grad_shading", err < GRAD_TOL, f"max rel error {err:.2e}"))

    scene = synth_quadruped(SynthSpec(subdivisions=0, segments=4, neck=False, tail=False))
    angles = parameter(rng.normal(0.0, 0.2, (scene.skeleton.n_bones, 3)))
    rotation = np.eye(3)
    weights = rng.standard_normal((scene.mesh.n_vertices, 3))

    def skinning() -> Tensor:
        posed = lbs(scene.mesh.vertices, scene.skeleton, scene.skin_weights, rotation, np.zeros(3), angles)
        return tsum(posed * weights)

    err = finite_diff_check(skinning, [angles], max_coords=20, seed=seed, abs_tol=GRAD_FLOOR)
    results.append(CheckResult("grad_lbs_chain", err < GRAD_TOL, f"max rel error {err:.2e}"))

    target_mask = (rng.random((6, 6)) < 0.6).astype(np.float64)
    pred_mask = parameter(rng.uniform(0.1, 0.9, (6, 6)))
    rendered = parameter(rng.random((6, 6, 3)))
    image = rng.random((6, 6, 3))

    def photometric() -> Tensor:
        return image_loss(rendered, image, pred_mask, target_mask)

    err = finite_diff_check(photometric, [rendered, pred_mask], seed=seed, abs_tol=GRAD_FLOOR)
    results.append(CheckResult("grad_image_loss", err < GRAD_TOL, f"max rel error {err:.2e}"))

    predicted = parameter(rng.standard_normal((6, 6, 4)))
    features = rng.standard_normal((6, 6, 4))

    def feature_error() -> Tensor:
        return feature_loss(predicted, features, pred_mask, target_mask)

    err = finite_diff_check(feature_error, [predicted, pred_mask], seed=seed, abs_tol=GRAD_FLOOR)
    results.append(CheckResult("grad_feature_loss", err < GRAD_TOL, f"max rel error {err:.2e}"))

    offsets = parameter(rng.normal(0.0, 0.1, (12, 3)))
    err = finite_diff_check(lambda: def_regularizer(offsets), [offsets], seed=seed, abs_tol=GRAD_FLOOR)
    results.append(CheckResult("grad_def_regularizer", err < GRAD_TOL, f"max rel error {err:.2e}"))

    err = finite_diff_check(lambda: art_regularizer(angles), [angles], max_coords=20, seed=seed, abs_tol=GRAD_FLOOR)
    results.append(CheckResult("grad_art_regularizer", err < GRAD_TOL, f"max rel error {err:.2e}"))
    return results


def _metric_sanity() -> List[CheckResult]:
    cam = Camera(width=48, height=48)
    scene = synth_quadruped(SynthSpec(subdivisions=1, segments=6))
    mesh = scene.mesh
    pixels, _, _ = project_points(cam, mesh.vertices)
    shown = np.flatnonzero(visible_vertices(mesh, cam))
    picks = shown[np.linspace(0, len(shown) - 1, 8).astype(int)]
    kps = KeypointSet([f"k{i}" for i in range(len(picks))], pixels[picks], np.ones(len(picks), bool), 48, 48)
    pck = eval_keypoint_transfer(mesh, mesh, kps, kps, cam)
    mask = rasterize(mesh, cam).mask
    return [
        CheckResult("self_transfer_pck", pck == 1.0, f"PCK {pck:.3f}"),
        CheckResult("iou_identity", eval_iou(mask, mask) == 1.0),
    ]


def _guard(name: str, fn: Callable[[], List[CheckResult]]) -> List[CheckResult]:
    try:
        return fn()
    except Exception as exc:
        logger.exception("self-test %s raised", name)
        return [CheckResult(name, False, f"{type(exc).__name__}: {exc}")]


def run_self_test(seed: int = 0) -> List[CheckResult]:
    """Structural identities, oracles, gradient suite and metric sanity."""
    results: List[CheckResult] = []
    results += _guard("structural", lambda: _structural(seed))
    results += _guard("rasterizer_oracle", lambda: [_raster_oracle(seed)])
    results += _guard("distance_transform_oracle", lambda: [_distance_oracle(seed)])
    results += _guard("gradients", lambda: run_gradient_suite(seed))
    results += _guard("metrics", _metric_sanity)
    for r in results:
        log = logger.info if r.passed else logger.error
        log("%-45s %s %s", r.name, "ok" if r.passed else "FAILED", r.detail)
    return results
