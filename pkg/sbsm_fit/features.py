"""Principal-component reduction of dense feature maps.

High-dimensional per-pixel features are reduced to FEATURE_DIM channels by
PCA fitted on all foreground pixels of a view set. lift_features goes the
other way for synthetic data: it embeds canonical features in a larger
noisy space so the reduction runs on something shaped like a real
self-supervised feature map.

Usage:
    raw = lift_features(canonical_maps, raw_dim=64, rng=rng, noise=0.05, masks=masks)
    projection, reduced = pca_reduce(raw, out_dim=16, masks=masks)
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from sbsm_fit.config import FEATURE_DIM

logger = logging.getLogger(__name__)

Maps = Union[np.ndarray, Sequence[np.ndarray]]


@dataclass
class PcaProjection:
    """Mean and orthonormal components (D, k), largest variance first."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.components.shape[0]

    @property
    def out_dim(self) -> int:
        return self.components.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components.T + self.mean


def _rows(maps: Maps, masks: Optional[Sequence[np.ndarray]]) -> Tuple[np.ndarray, bool]:
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return maps.astype(np.float64), True
    chunks = []
    for i, m in enumerate(maps):
        m = np.asarray(m, dtype=np.float64)
        flat = m.reshape(-1, m.shape[-1])
        if masks is not None:
            flat = flat[np.asarray(masks[i]).reshape(-1) > 0.5]
        chunks.append(flat)
    return np.concatenate(chunks), False


def pca_reduce(
    maps: Maps,
    out_dim: int = FEATURE_DIM,
    masks: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[PcaProjection, Union[np.ndarray, List[np.ndarray]]]:
    """Fit PCA on the (foreground) rows and project every map.

    `maps` is either an (N, D) matrix or a sequence of (H, W, D) maps. With
    masks, only foreground pixels enter the fit and reduced maps are zero on
    the background. Components beyond the data rank complete an orthonormal
    basis with zero explained variance.

    Raises:
        ValueError: if out_dim is not in [1, D] or there are no rows.
    """
    rows, is_matrix = _rows(maps, masks)
    n, dim = rows.shape
    if n == 0:
        raise ValueError("no feature rows to fit (all masks empty?)")
    if not 1 <= out_dim <= dim:
        raise ValueError(f"out_dim must be in [1, {dim}], got {out_dim}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / max(n - 1, 1)
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval, kind="stable")[::-1]
    eigval, eigvec = np.clip(eigval[order], 0.0, None), eigvec[:, order]
    # sign convention: largest-magnitude entry of each component is positive
    peak = np.argmax(np.abs(eigvec), axis=0)
    eigvec = eigvec * np.sign(eigvec[peak, np.arange(dim)])
    total = float(eigval.sum())
    ratio = eigval / total if total > 0.0 else np.zeros_like(eigval)
    projection = PcaProjection(
        mean=mean,
        components=eigvec[:, :out_dim],
        explained_variance=eigval[:out_dim],
        explained_ratio=ratio[:out_dim],
    )
    logger.info("PCA %d -> %d keeps %.1f%% of the variance", dim, out_dim, 100.0 * ratio[:out_dim].sum())
    if is_matrix:
        return projection, projection.transform(rows)
    reduced = []
    for i, m in enumerate(maps):
        z = projection.transform(np.asarray(m, dtype=np.float64))
        if masks is not None:
            z = z * (np.asarray(masks[i]) > 0.5)[..., None]
        reduced.append(z)
    return projection, reduced


def reconstruction_error(rows: np.ndarray, projection: PcaProjection) -> float:
    """Sum of squared residuals after projecting onto the components."""
    rows = np.asarray(rows, dtype=np.float64)
    residual = rows - projection.inverse(projection.transform(rows))
    return float(np.sum(residual * residual))


def lift_features(
    maps: Sequence[np.ndarray],
    raw_dim: int,
    rng: np.random.Generator,
    noise: float = 0.0,
    masks: Optional[Sequence[np.ndarray]] = None,
) -> List[np.ndarray]:
    """Embed (H, W, d) maps into raw_dim channels by one random linear map plus noise."""
    if not maps:
        return []
    d = np.asarray(maps[0]).shape[-1]
    if raw_dim < d:
        raise ValueError(f"raw_dim must be >= {d}, got {raw_dim}")
    lift = rng.standard_normal((d, raw_dim)) / np.sqrt(d)
    out = []
    for i, m in enumerate(maps):
        raw = np.asarray(m, dtype=np.float64) @ lift
        if noise > 0.0:
            raw = raw + noise * rng.standard_normal(raw.shape)
        if masks is not None:
            raw = raw * (np.asarray(masks[i]) > 0.5)[..., None]
        out.append(raw)
    return out
