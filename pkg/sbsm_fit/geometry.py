"""Triangle meshes, normals, bilateral symmetry and Wavefront OBJ I/O.

Canonical model frame: x = left/right (the symmetry axis, mirror plane
x = 0), y = up, z = front/back.

A VertexField is a plain (N, D) array aligned with a mesh's vertices:
D = 3 for offsets and normals, D = 16 for canonical features.

Usage:
    mesh = load_obj("template.obj")
    normals = compute_normals(mesh)
    offsets = symmetrize(raw_offsets, mesh)   # exact mirror equivariance
    save_obj(mesh.with_vertices(mesh.vertices + offsets), "deformed.obj")
"""

import logging
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from sbsm_fit.autodiff import (
    Tensor,
    TensorLike,
    as_tensor,
    concatenate,
    cross,
    norm,
    scatter_add,
)
from sbsm_fit.errors import MeshError, ObjParseError, SymmetryError

logger = logging.getLogger(__name__)

VertexField = np.ndarray

MIRROR = np.array([-1.0, 1.0, 1.0])
MIRROR_TOLERANCE = 1e-6
FALLBACK_NORMAL = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertices (N, 3) in model units and faces (F, 3) as vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            bad = int(np.argwhere(~np.isfinite(vertices))[0, 0])
            raise MeshError(f"vertex {bad} has non-finite coordinates")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError(
                f"face indices must be in [0, {len(vertices)}), "
                f"got range [{faces.min()}, {faces.max()}]"
            )
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, new positions."""
        return Mesh(vertices, self.faces)

    def extent(self) -> np.ndarray:
        """Axis-aligned size along x, y, z."""
        if not len(self.vertices):
            return np.zeros(3)
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)

    @cached_property
    def mirror_partner(self) -> np.ndarray:
        """Index of each vertex's mirror image across x = 0 (involution)."""
        return mirror_pairs(self.vertices)


# ── Normals ──────────────────────────────────────────────────────────────


def vertex_normals(vertices: TensorLike, faces: np.ndarray) -> Tensor:
    """Differentiable area-weighted vertex normals.

    Unnormalized face normals (length = twice the face area) are summed
    onto their corners and normalized. Vertices with no nondegenerate
    incident face come out as zero vectors.
    """
    verts = as_tensor(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    face_normals = cross(v1 - v0, v2 - v0)
    summed = scatter_add(
        concatenate([face_normals, face_normals, face_normals], axis=0),
        np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]]),
        verts.shape[0],
    )
    return summed / norm(summed, axis=-1, keepdims=True, eps=1e-30)


def compute_normals(mesh: Mesh, return_flags: bool = False):
    """Unit area-weighted per-vertex normals.

    Degenerate faces contribute nothing. A vertex with no nondegenerate
    incident face gets (0, 1, 0) and is flagged.

    Returns:
        (N, 3) normals, or (normals, flags) when return_flags is set.
    """
    normals = vertex_normals(mesh.vertices, mesh.faces).data.copy()
    flags = np.linalg.norm(normals, axis=1) < 0.5
    if flags.any():
        normals[flags] = FALLBACK_NORMAL
        logger.warning(
            "%d vertices have no nondegenerate incident face; using (0, 1, 0)",
            int(flags.sum()),
        )
    if return_flags:
        return normals, flags
    return normals


# ── Bilateral symmetry ───────────────────────────────────────────────────


def mirror_pairs(vertices: np.ndarray, tol: float = MIRROR_TOLERANCE) -> np.ndarray:
    """Pair every vertex with its nearest mirror image across x = 0.

    Raises:
        SymmetryError: naming the first off-plane vertex without a partner,
            or a vertex whose pairing is ambiguous (duplicates).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if not len(vertices):
        return np.zeros(0, dtype=np.int64)
    dist, partner = cKDTree(vertices).query(vertices * MIRROR)
    partner = np.asarray(partner, dtype=np.int64)
    on_plane = np.abs(vertices[:, 0]) <= tol
    partner[on_plane] = np.flatnonzero(on_plane)
    unpaired = np.flatnonzero((dist > tol) & ~on_plane)
    if len(unpaired):
        i = int(unpaired[0])
        raise SymmetryError(
            f"vertex {i} at {vertices[i].tolist()} has no mirror partner within {tol}",
            vertex=i,
        )
    broken = np.flatnonzero(partner[partner] != np.arange(len(vertices)))
    if len(broken):
        i = int(broken[0])
        raise SymmetryError(f"vertex {i} has an ambiguous mirror partner", vertex=i)
    return partner


def symmetrize_field(field: TensorLike, partner: np.ndarray) -> Tensor:
    """Differentiable projection onto mirror-symmetric fields.

    Each vertex takes the average of its own value and its partner's
    mirrored value. For 3-vectors the x component flips under the mirror;
    other widths are treated as mirror-invariant.
    """
    field = as_tensor(field)
    sign = MIRROR if field.shape[-1] == 3 else np.ones(field.shape[-1])
    return 0.5 * (field + field[partner] * sign)


def symmetrize(field: VertexField, mesh: Mesh) -> VertexField:
    """Mirror-equivariant version of a per-vertex field on `mesh`."""
    field = np.asarray(field, dtype=np.float64)
    if len(field) != mesh.n_vertices:
        raise MeshError(f"field length must be {mesh.n_vertices}, got {len(field)}")
    return symmetrize_field(field, mesh.mirror_partner).data


# ── Construction helpers ─────────────────────────────────────────────────


def weld(mesh: Mesh, tol: float = 1e-9) -> Mesh:
    """Merge vertices that coincide on a `tol` grid; drop collapsed faces."""
    keys = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    vertices = mesh.vertices[first[order]]
    faces = remap[inverse][mesh.faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return Mesh(vertices, faces[keep])


def merge(*meshes: Mesh) -> Mesh:
    """Concatenate meshes into one (no welding)."""
    vertices, faces, offset = [], [], 0
    for m in meshes:
        vertices.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return Mesh(np.concatenate(vertices), np.concatenate(faces))


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> Mesh:
    """Unit icosahedron refined by midpoint subdivision, projected to the sphere."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    vertices = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = vertices[i] + vertices[j]
                vertices.append(m / np.linalg.norm(m))
                cache[key] = len(vertices) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return Mesh(np.array(vertices) * radius, np.array(faces))


def has_consistent_winding(mesh: Mesh) -> bool:
    """True when no directed edge is shared by two faces."""
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    return len(np.unique(edges, axis=0)) == len(edges)


def orient_faces(mesh: Mesh) -> Mesh:
    """Make face winding consistent, counter-clockwise seen from outside.

    Orientation is propagated across manifold edges (exactly two faces).
    A closed component is then flipped as a whole if its signed volume is
    negative; an open one keeps the orientation most of its faces had.

    Raises:
        MeshError: if a component is not orientable.
    """
    n = mesh.n_faces
    if n == 0:
        return mesh
    halves = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    owner = np.tile(np.arange(n), 3)
    forward = halves[:, 0] < halves[:, 1]
    _, edge_id, counts = np.unique(np.sort(halves, axis=1), axis=0, return_inverse=True, return_counts=True)
    edge_id = edge_id.reshape(-1)
    manifold = counts[edge_id] == 2
    paired = np.flatnonzero(manifold)[np.argsort(edge_id[manifold], kind="stable")]
    first, second = paired[0::2], paired[1::2]

    neighbors: list = [[] for _ in range(n)]
    for a, b, same in zip(owner[first], owner[second], forward[first] == forward[second]):
        neighbors[a].append((b, bool(same)))
        neighbors[b].append((a, bool(same)))

    flip = np.full(n, -1, dtype=np.int64)
    component = np.full(n, -1, dtype=np.int64)
    n_components = 0
    for seed in range(n):
        if flip[seed] >= 0:
            continue
        flip[seed], component[seed] = 0, n_components
        queue = deque([seed])
        while queue:
            f = queue.popleft()
            for g, same in neighbors[f]:
                want = flip[f] ^ int(same)
                if flip[g] < 0:
                    flip[g], component[g] = want, n_components
                    queue.append(g)
                elif flip[g] != want:
                    raise MeshError(f"mesh is not orientable (conflict at face {g})")
        n_components += 1

    faces = np.where(flip[:, None] == 1, mesh.faces[:, [0, 2, 1]], mesh.faces)
    v = mesh.vertices[faces]
    volume = np.bincount(component, np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])), n_components)
    is_open = np.zeros(n_components, dtype=bool)
    is_open[component[owner[~manifold]]] = True
    size = np.bincount(component, minlength=n_components)
    flipped = np.bincount(component, flip, n_components)
    invert = np.where(is_open, flipped > size / 2.0, volume < 0.0)
    flip ^= invert[component].astype(np.int64)
    if not flip.any():
        return mesh
    logger.info("reoriented %d of %d faces", int(flip.sum()), n)
    return Mesh(mesh.vertices, np.where(flip[:, None] == 1, mesh.faces[:, [0, 2, 1]], mesh.faces))


# ── Wavefront OBJ ────────────────────────────────────────────────────────

_IGNORED_RECORDS = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l"}


def _parse_index(token: str, n_vertices: int, line_number: int) -> int:
    head = token.split("/")[0]
    try:
        index = int(head)
    except ValueError:
        raise ObjParseError(f"invalid face index {token!r}", line_number) from None
    if index == 0:
        raise ObjParseError("face index 0 is invalid (OBJ indices are 1-based)", line_number)
    if index < 0:
        index = n_vertices + index + 1
        if index < 1:
            raise ObjParseError(f"relative face index {token!r} out of range", line_number)
    return index - 1


def load_obj(path: Union[str, Path]) -> Mesh:
    """Read v/f records; polygons are fan-triangulated, faces oriented outward.

    Raises:
        ObjParseError: on a malformed record, with its line number.
    """
    vertices: list = []
    faces: list = []
    face_lines: list = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            keyword, *fields = line.split()
            if keyword == "v":
                if len(fields) < 3:
                    raise ObjParseError("vertex needs 3 coordinates", line_number)
                try:
                    vertices.append([float(x) for x in fields[:3]])
                except ValueError:
                    raise ObjParseError(f"invalid vertex coordinates {fields[:3]}", line_number) from None
            elif keyword == "f":
                if len(fields) < 3:
                    raise ObjParseError("face needs at least 3 vertices", line_number)
                polygon = [_parse_index(tok, len(vertices), line_number) for tok in fields]
                for k in range(1, len(polygon) - 1):
                    faces.append((polygon[0], polygon[k], polygon[k + 1]))
                    face_lines.append(line_number)
            elif keyword not in _IGNORED_RECORDS:
                raise ObjParseError(f"unknown record {keyword!r}", line_number)
    for face, line_number in zip(faces, face_lines):
        if max(face) >= len(vertices):
            raise ObjParseError(f"face index {max(face) + 1} exceeds vertex count {len(vertices)}", line_number)
    mesh = Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    if mesh.n_faces and not has_consistent_winding(mesh):
        logger.warning("%s: inconsistent face winding, reorienting", path)
    return orient_faces(mesh)


def save_obj(mesh: Mesh, path: Union[str, Path]) -> None:
    """Write v/f records with full float precision."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def face_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
