"""Semantic bank of skinned models.

A key/value memory over base shapes. An image embedding phi (dim 384) is
compared to every key by cosine similarity; the top_m survivors, clamped
at zero and renormalized, blend the value embeddings into a latent shape
embedding phi_tilde (dim 128) and blend the per-token vertex-offset fields
into a base shape over the shared template mesh.

Every offset field is kept mirror-symmetric across x = 0, so every blend
is symmetric too.

Usage:
    bank = SemanticBank(keys, values, offsets, template)
    result = query(bank, phi)
    base = synthesize_base(bank, result.weights)

    # batch of images of one species: a single query on the mean embedding
    result = batch_mean_embedding([phi_a, phi_b], bank)
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sbsm_fit.autodiff import Tensor, TensorLike, as_tensor, norm, parameter, relu, reshape, where
from sbsm_fit.config import BANK_SIZE, KEY_DIM, TOP_M, VALUE_DIM
from sbsm_fit.errors import BankError
from sbsm_fit.geometry import Mesh, symmetrize_field

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOLERANCE = 1e-9
TEMPLATE_FILE = "template.obj"

Embedding = np.ndarray


@dataclass(eq=False)
class SemanticBank:
    """K learned (key, value, offset field) triples over one template mesh.

    Keys are unit-normalized and offset fields symmetrized on construction.
    """

    keys: np.ndarray
    values: np.ndarray
    offsets: np.ndarray
    template: Mesh
    top_m: int = TOP_M

    def __post_init__(self):
        keys = np.array(self.keys, dtype=np.float64)
        values = np.array(self.values, dtype=np.float64)
        offsets = np.array(self.offsets, dtype=np.float64)
        if keys.ndim != 2 or len(keys) < 1:
            raise BankError(f"keys must be a non-empty (K, D) array, got shape {keys.shape}")
        k = len(keys)
        if values.ndim != 2 or len(values) != k:
            raise BankError(f"values must have shape ({k}, D), got {values.shape}")
        expected = (k, self.template.n_vertices, 3)
        if offsets.shape != expected:
            raise BankError(f"offsets must have shape {expected}, got {offsets.shape}")
        for name, arr in (("keys", keys), ("values", values), ("offsets", offsets)):
            if not np.all(np.isfinite(arr)):
                raise BankError(f"{name} contain non-finite entries")
        lengths = np.linalg.norm(keys, axis=1)
        if np.any(lengths == 0.0):
            raise BankError(f"key {int(np.argmin(lengths))} is the zero vector")
        if not 1 <= self.top_m <= k:
            raise BankError(f"top_m must be in [1, {k}], got {self.top_m}")
        partner = self.template.mirror_partner
        self.keys = keys / lengths[:, None]
        self.values = values
        self.offsets = np.stack([symmetrize_field(o, partner).data for o in offsets])

    @property
    def size(self) -> int:
        return len(self.keys)

    @property
    def key_dim(self) -> int:
        return self.keys.shape[1]

    @property
    def value_dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def initial(
        cls,
        template: Mesh,
        rng: np.random.Generator,
        size: int = BANK_SIZE,
        key_dim: int = KEY_DIM,
        value_dim: int = VALUE_DIM,
        top_m: int = TOP_M,
        offset_scale: float = 0.0,
    ) -> "SemanticBank":
        """Random keys and values; offsets start at zero unless offset_scale > 0."""
        keys = rng.standard_normal((size, key_dim))
        values = rng.standard_normal((size, value_dim)) / np.sqrt(value_dim)
        offsets = offset_scale * rng.standard_normal((size, template.n_vertices, 3))
        return cls(keys, values, offsets, template, top_m=min(top_m, size))

    # ── Optimisation hooks ───────────────────────────────────────────────

    def as_parameters(self) -> Dict[str, Tensor]:
        """Fresh leaf tensors over copies of the bank arrays."""
        return {
            "keys": parameter(self.keys),
            "values": parameter(self.values),
            "offsets": parameter(self.offsets),
        }

    def from_parameters(self, params: Dict[str, Tensor]) -> "SemanticBank":
        """New bank from optimized parameters (keys renormalized, offsets resymmetrized)."""
        return SemanticBank(
            params["keys"].data,
            params["values"].data,
            params["offsets"].data,
            self.template,
            top_m=self.top_m,
        )

    # ── Flat serialization ───────────────────────────────────────────────

    def to_matrix(self) -> np.ndarray:
        """(K, key_dim + value_dim + 3N) rows: key, value, flattened offsets."""
        return np.concatenate(
            [self.keys, self.values, self.offsets.reshape(self.size, -1)], axis=1
        )

    def manifest(self) -> dict:
        return {
            "K": self.size,
            "key_dim": self.key_dim,
            "value_dim": self.value_dim,
            "n_vertices": self.template.n_vertices,
            "top_m": self.top_m,
            "template": TEMPLATE_FILE,
            "dims": {"key": self.key_dim, "value": self.value_dim, "offset": 3 * self.template.n_vertices},
        }

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, manifest: dict, template: Mesh) -> "SemanticBank":
        matrix = np.asarray(matrix, dtype=np.float64)
        kd, vd = int(manifest["key_dim"]), int(manifest["value_dim"])
        n = template.n_vertices
        if int(manifest.get("n_vertices", n)) != n:
            raise BankError(
                f"manifest expects {manifest['n_vertices']} template vertices, got {n}"
            )
        dims = manifest.get("dims")
        if dims is not None and (int(dims["key"]), int(dims["value"]), int(dims["offset"])) != (kd, vd, 3 * n):
            raise BankError(f"manifest dims {dims} disagree with key_dim={kd}, value_dim={vd}, offset={3 * n}")
        width = kd + vd + 3 * n
        if matrix.ndim != 2 or matrix.shape != (int(manifest["K"]), width):
            raise BankError(f"bank tensor must have shape ({manifest['K']}, {width}), got {matrix.shape}")
        return cls(
            matrix[:, :kd],
            matrix[:, kd : kd + vd],
            matrix[:, kd + vd :].reshape(-1, n, 3),
            template,
            top_m=int(manifest["top_m"]),
        )


@dataclass
class BankQuery:
    """Result of a bank lookup; weights cover all K slots."""

    weights: np.ndarray
    phi_tilde: np.ndarray
    fallback: bool = False

    @property
    def active(self) -> np.ndarray:
        """Indices of tokens with nonzero weight."""
        return np.flatnonzero(self.weights > 0.0)


# ── Query ────────────────────────────────────────────────────────────────


def _check_phi(phi: np.ndarray, dim: int) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if phi.shape != (dim,):
        raise BankError(f"embedding must have dimension {dim}, got {phi.shape[0]}")
    if not np.all(np.isfinite(phi)):
        raise BankError("embedding contains non-finite entries")
    if not np.any(phi):
        raise BankError("embedding must be nonzero")
    return phi


def query_weights(keys: TensorLike, phi: TensorLike, top_m: int) -> Tuple[Tensor, bool]:
    """Differentiable truncated cosine-similarity weights.

    Similarities outside the top_m (lower index wins ties) are dropped,
    survivors are clamped at zero and renormalized. Dropped tokens get no
    gradient. When every survivor is <= 0 the weights fall back to uniform
    over the top_m set, as constants.

    Returns:
        (weights over all K slots, fallback flag)
    """
    keys, phi = as_tensor(keys), as_tensor(phi)
    unit_keys = keys / norm(keys, axis=-1, keepdims=True, eps=1e-300)
    unit_phi = phi / norm(phi, eps=1e-300)
    cos = unit_keys @ unit_phi
    order = np.argsort(-cos.data, kind="stable")[:top_m]
    keep = np.zeros(len(cos.data), dtype=bool)
    keep[order] = True
    survivors = where(keep, relu(cos), 0.0)
    total = survivors.sum()
    if total.data <= 0.0:
        return Tensor(keep / float(top_m)), True
    return survivors / total, False


def query(bank: SemanticBank, phi: Embedding) -> BankQuery:
    """Look up an image embedding.

    Raises:
        BankError: if phi has the wrong dimension or is zero.
    """
    phi = _check_phi(phi, bank.key_dim)
    weights, fallback = query_weights(bank.keys, phi, bank.top_m)
    if fallback:
        logger.warning(
            "all top-%d similarities are <= 0; using uniform weights over them", bank.top_m
        )
    w = weights.data
    return BankQuery(weights=w, phi_tilde=w @ bank.values, fallback=fallback)


def batch_mean_embedding(phis: Sequence[Embedding], bank: SemanticBank) -> BankQuery:
    """Query on the arithmetic mean of a batch of embeddings.

    The query is nonlinear, so this is in general not the mean of the
    per-image queries.
    """
    if not len(phis):
        raise BankError("batch must contain at least one embedding")
    stacked = np.stack([_check_phi(p, bank.key_dim) for p in phis])
    return query(bank, stacked.mean(axis=0))


# ── Base shapes ──────────────────────────────────────────────────────────


def _check_weights(weights, k: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (k,):
        raise BankError(f"weights must have length {k}, got {w.shape[0]}")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise BankError("weights must be finite and nonnegative")
    total = float(w.sum())
    if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise BankError(f"weights must sum to 1 within {WEIGHT_SUM_TOLERANCE}, got {total!r}")
    return w


def synthesize_base(bank: SemanticBank, weights) -> Mesh:
    """Template plus the weighted blend of offset fields.

    Raises:
        BankError: if weights are negative or do not sum to 1 within 1e-9.
    """
    w = _check_weights(weights, bank.size)
    blended = np.tensordot(w, bank.offsets, axes=1)
    return bank.template.with_vertices(bank.template.vertices + blended)


def base_vertices(
    template: Mesh,
    weights: TensorLike,
    offsets: TensorLike,
) -> Tensor:
    """Differentiable base-shape vertices from weights and (K, N, 3) offsets.

    The blend is projected back onto symmetric fields, so offsets being
    optimized never break the mirror symmetry of the result.
    """
    offsets = as_tensor(offsets)
    k, n = offsets.shape[0], offsets.shape[1]
    blended = reshape(as_tensor(weights) @ reshape(offsets, (k, n * 3)), (n, 3))
    return template.vertices + symmetrize_field(blended, template.mirror_partner)


def interpolate_bases(
    bank: SemanticBank,
    weights_a,
    weights_b,
    alphas: Sequence[float],
) -> List[Mesh]:
    """Base shapes along the straight path between two weight vectors."""
    wa = _check_weights(weights_a, bank.size)
    wb = _check_weights(weights_b, bank.size)
    meshes = []
    for alpha in alphas:
        if not 0.0 <= alpha <= 1.0:
            raise BankError(f"alpha must be in [0, 1], got {alpha}")
        w = (1.0 - alpha) * wa + alpha * wb
        meshes.append(synthesize_base(bank, w / w.sum()))
    return meshes


def fuse_random(
    bank: SemanticBank,
    n_tokens: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, Mesh]:
    """Blend a random subset of n_tokens tokens with Dirichlet weights."""
    if not 1 <= n_tokens <= bank.size:
        raise BankError(f"n_tokens must be in [1, {bank.size}], got {n_tokens}")
    chosen = rng.choice(bank.size, size=n_tokens, replace=False)
    weights = np.zeros(bank.size)
    weights[chosen] = rng.dirichlet(np.ones(n_tokens))
    weights /= weights.sum()
    return weights, synthesize_base(bank, weights)


def describe(bank: SemanticBank, phi: Optional[Embedding] = None) -> dict:
    """Summary used by the bank inspect command."""
    sims = bank.keys @ bank.keys.T
    np.fill_diagonal(sims, -np.inf)
    magnitudes = np.linalg.norm(bank.offsets, axis=2).mean(axis=1)
    summary = {
        **bank.manifest(),
        "max_key_similarity": float(sims.max()) if bank.size > 1 else None,
        "mean_offset_norm": magnitudes.tolist(),
        "template_extent": bank.template.extent().tolist(),
    }
    if phi is not None:
        result = query(bank, phi)
        summary["query"] = {
            "active": result.active.tolist(),
            "weights": result.weights[result.active].tolist(),
            "fallback": result.fallback,
        }
    return summary
