"""Evaluation metrics: mask IoU, keypoint transfer and linear-mapping PCK.

Keypoint transfer maps every visible source keypoint to its nearest visible
projected vertex, follows that vertex to the target reconstruction and
scores the projection against the target annotation. A vertex is visible
when some pixel within 1.5 px of its projection has a z-buffer depth at or
beyond the vertex depth (minus a 1e-2 tolerance).

Linear-mapping PCK fits one set of weights per keypoint over the projected
vertices, shared across all instances, by unconstrained least squares.

Usage:
    iou = eval_iou(pred_mask, target_mask)
    pck = eval_keypoint_transfer(src_mesh, tgt_mesh, src_kps, tgt_kps, cam)
    summary = aggregate_metrics([view_metrics(...) for ...])
"""

import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from sbsm_fit.geometry import Mesh
from sbsm_fit.render import Camera, RenderBuffers, project_points, rasterize
from sbsm_fit.skeleton import Pose
from sbsm_fit.synth import KeypointSet

logger = logging.getLogger(__name__)

PCK_THRESHOLD = 0.1
VISIBILITY_RADIUS_PX = 1.5
VISIBILITY_DEPTH_TOL = 1e-2


def eval_iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a = np.asarray(pred) > 0.5
    b = np.asarray(target) > 0.5
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def pck(pred_xy: np.ndarray, target: KeypointSet, threshold: float = PCK_THRESHOLD) -> float:
    """Fraction of visible target keypoints predicted within threshold * image size."""
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    if len(pred_xy) != len(target.xy):
        raise ValueError(f"expected {len(target.xy)} predictions, got {len(pred_xy)}")
    if not target.visible.any():
        return math.nan
    limit = threshold * max(target.width, target.height)
    dist = np.linalg.norm(pred_xy - target.xy, axis=1)
    return float(np.mean(dist[target.visible] < limit))


# ── Keypoint transfer ────────────────────────────────────────────────────


def visible_vertices(
    mesh: Mesh,
    cam: Camera,
    buffers: Optional[RenderBuffers] = None,
    radius: float = VISIBILITY_RADIUS_PX,
    tol: float = VISIBILITY_DEPTH_TOL,
) -> np.ndarray:
    """Boolean (N,) flags: the vertex wins the z-buffer near its projection."""
    if buffers is None:
        buffers = rasterize(mesh, cam)
    pixels, depth, valid = project_points(cam, mesh.vertices)
    visible = np.zeros(mesh.n_vertices, dtype=bool)
    reach = int(math.ceil(radius))
    base = np.floor(pixels).astype(np.int64)
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            col, row = base[:, 0] + dx, base[:, 1] + dy
            inside = valid & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
            near = np.hypot(col + 0.5 - pixels[:, 0], row + 0.5 - pixels[:, 1]) <= radius
            ok = inside & near
            zbuf = np.full(mesh.n_vertices, -np.inf)
            zbuf[ok] = buffers.depth[row[ok], col[ok]]
            visible |= ok & (zbuf >= depth - tol)
    return visible


def transfer_keypoints(
    source: Mesh,
    target: Mesh,
    source_kps: KeypointSet,
    cam: Camera,
) -> np.ndarray:
    """Predicted target-image positions (K, 2); NaN rows for unusable keypoints."""
    if source.n_vertices != target.n_vertices:
        raise ValueError(
            f"reconstructions must share topology, got {source.n_vertices} and {target.n_vertices} vertices"
        )
    out = np.full((len(source_kps.xy), 2), np.nan)
    vis = np.flatnonzero(visible_vertices(source, cam))
    if not len(vis):
        return out
    src_px, _, _ = project_points(cam, source.vertices[vis])
    tgt_px, _, _ = project_points(cam, target.vertices[vis])
    tree = cKDTree(src_px)
    idx = np.flatnonzero(source_kps.visible)
    if len(idx):
        _, nearest = tree.query(source_kps.xy[idx])
        out[idx] = tgt_px[nearest]
    return out


def eval_keypoint_transfer(
    source: Mesh,
    target: Mesh,
    source_kps: KeypointSet,
    target_kps: KeypointSet,
    cam: Camera,
    threshold: float = PCK_THRESHOLD,
) -> float:
    """PCK of keypoints carried from a source image to a target image.

    Only keypoints visible in both images count; NaN when there are none.
    """
    pred = transfer_keypoints(source, target, source_kps, cam)
    both = source_kps.visible & target_kps.visible
    if not both.any():
        return math.nan
    limit = threshold * max(target_kps.width, target_kps.height)
    dist = np.linalg.norm(pred[both] - target_kps.xy[both], axis=1)
    return float(np.mean(dist < limit))


# ── Linear-mapping PCK ───────────────────────────────────────────────────


def fit_linear_keypoints(
    projections: Sequence[np.ndarray],
    keypoints: Sequence[KeypointSet],
) -> np.ndarray:
    """Least-squares weights (K, N) mapping projected vertices to keypoints.

    Each keypoint's weights are shared by x and y and across instances;
    only visible annotations enter the fit.
    """
    if not projections or len(projections) != len(keypoints):
        raise ValueError("need one projection per keypoint set, and at least one")
    n_kps = len(keypoints[0].xy)
    n_vertices = np.asarray(projections[0]).shape[0]
    weights = np.zeros((n_kps, n_vertices))
    for j in range(n_kps):
        rows, rhs = [], []
        for proj, kps in zip(projections, keypoints):
            if kps.visible[j]:
                proj = np.asarray(proj, dtype=np.float64)
                rows += [proj[:, 0], proj[:, 1]]
                rhs += [kps.xy[j, 0], kps.xy[j, 1]]
        if rows:
            weights[j] = np.linalg.lstsq(np.stack(rows), np.array(rhs), rcond=None)[0]
    return weights


def eval_pck_linear(
    projections: Sequence[np.ndarray],
    keypoints: Sequence[KeypointSet],
    threshold: float = PCK_THRESHOLD,
    weights: Optional[np.ndarray] = None,
) -> float:
    """PCK of linearly mapped keypoints; fits the weights on this set unless given."""
    if weights is None:
        weights = fit_linear_keypoints(projections, keypoints)
    scores = [
        pck(weights @ np.asarray(proj, dtype=np.float64), kps, threshold)
        for proj, kps in zip(projections, keypoints)
    ]
    counts = [int(kps.visible.sum()) for kps in keypoints]
    total = sum(counts)
    if total == 0:
        return math.nan
    return float(sum(s * c for s, c in zip(scores, counts) if c) / total)


# ── Reports ──────────────────────────────────────────────────────────────


def rotation_error_deg(pred: Pose, true: Pose) -> float:
    """Geodesic angle between two rigid rotations."""
    rel = pred.rotation_matrix() @ true.rotation_matrix().T
    cosine = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


def azimuth_error_deg(pred_deg: float, true_deg: float) -> float:
    diff = (pred_deg - true_deg) % 360.0
    return float(min(diff, 360.0 - diff))


def view_metrics(
    pred_mask: np.ndarray,
    target_mask: np.ndarray,
    pred_pose: Optional[Pose] = None,
    true_pose: Optional[Pose] = None,
    pred_azimuth_deg: Optional[float] = None,
    true_azimuth_deg: Optional[float] = None,
) -> Dict[str, float]:
    """Per-view numbers for the report; pose terms only when both sides are given."""
    metrics = {"iou": eval_iou(pred_mask, target_mask)}
    if pred_pose is not None and true_pose is not None:
        metrics["rotation_error_deg"] = rotation_error_deg(pred_pose, true_pose)
    if pred_azimuth_deg is not None and true_azimuth_deg is not None:
        metrics["azimuth_error_deg"] = azimuth_error_deg(pred_azimuth_deg, true_azimuth_deg)
    return metrics


def aggregate_metrics(per_view: List[Dict[str, float]]) -> Dict[str, float]:
    """Mean of per-view values for every key, skipping NaN entries."""
    keys = sorted({k for m in per_view for k in m})
    summary = {}
    for key in keys:
        values = [m[key] for m in per_view if key in m and not math.isnan(m[key])]
        summary[key] = float(np.mean(values)) if values else math.nan
    summary["n_views"] = float(len(per_view))
    return summary
