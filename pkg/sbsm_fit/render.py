"""Pinhole camera, z-buffered rasterization, soft silhouettes and Lambertian shading.

Two rendering paths share one camera:

- rasterize() is the hard path: nearest surface per pixel through a
  z-buffer, perspective-correct barycentrics, interpolated vertex
  attributes. Pixel centers sit at (i + 0.5, j + 0.5); a center on a
  triangle edge counts as covered. Depth ties keep the lower face index.
- soft_silhouette() is the differentiable path for the mask: every
  pixel/triangle pair contributes sigmoid(+-d^2 / sigma) with d the
  distance from the pixel center to the projected triangle boundary, in
  normalized device units.

Attributes (features, albedo, normals) are differentiable with respect to
their vertex values through interpolate(), using the barycentrics of the
hard pass as constants.

Usage:
    cam = Camera(width=64, height=64)
    buffers = rasterize(mesh, cam, {"feature": features, "albedo": albedo})
    rgb = shade_lambertian(buffers, buffers.attributes["albedo"], Light(0.3, 0.7, (0, 0, 1)))
    mask = soft_silhouette(posed_vertices, mesh.faces, cam, sigma_soft=1e-4)
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from sbsm_fit.autodiff import (
    Tensor,
    TensorLike,
    as_tensor,
    clip,
    exp,
    log_sigmoid,
    matmul,
    minimum,
    norm,
    relu,
    reshape,
    scatter_add,
    stack,
    tsum,
    where,
)
from sbsm_fit.config import DEFAULT_CAMERA_POSITION, DEFAULT_FOV_DEG, DEFAULT_IMAGE_SIZE
from sbsm_fit.errors import RenderError
from sbsm_fit.geometry import Mesh, compute_normals

logger = logging.getLogger(__name__)

TILE = 16
NEAR = 1e-3
FACE_CHUNK = 256
SOFT_CUTOFF = 40.0  # pairs with exterior logit below -SOFT_CUTOFF are dropped


# ── Camera ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Camera:
    """Look-at pinhole camera with a horizontal field of view."""

    fov_deg: float = DEFAULT_FOV_DEG
    position: Tuple[float, float, float] = DEFAULT_CAMERA_POSITION
    width: int = DEFAULT_IMAGE_SIZE
    height: int = DEFAULT_IMAGE_SIZE
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: Tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise RenderError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise RenderError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        forward = np.subtract(self.target, self.position, dtype=np.float64)
        if np.linalg.norm(forward) == 0.0:
            raise RenderError("camera position must differ from its target")
        right = np.cross(forward, self.up)
        if np.linalg.norm(right) == 0.0:
            raise RenderError("up vector must not be parallel to the viewing direction")

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)

    @property
    def basis(self) -> np.ndarray:
        """Rows: right, up, forward (unit vectors)."""
        forward = np.subtract(self.target, self.position, dtype=np.float64)
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right /= np.linalg.norm(right)
        return np.stack([right, np.cross(right, forward), forward])

    @property
    def focal(self) -> float:
        """Focal length in normalized device units (x spans [-1, 1])."""
        return 1.0 / np.tan(np.deg2rad(self.fov_deg) / 2.0)

    @property
    def aspect(self) -> float:
        return self.width / self.height

    def ndc_to_pixel(self, ndc: np.ndarray) -> np.ndarray:
        ndc = np.asarray(ndc, dtype=np.float64)
        px = (ndc[..., 0] + 1.0) * self.width / 2.0
        py = (1.0 - ndc[..., 1]) * self.height / 2.0
        return np.stack([px, py], axis=-1)

    def pixel_centers_ndc(self) -> np.ndarray:
        """(H*W, 2) NDC coordinates of pixel centers, row-major."""
        xs = 2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0
        ys = 1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def project_tensor(cam: Camera, points: TensorLike) -> Tuple[Tensor, Tensor]:
    """Differentiable projection to (NDC xy (N, 2), depth (N,))."""
    rel = as_tensor(points) - cam.origin
    right, up, forward = cam.basis
    depth = matmul(rel, forward)
    x = cam.focal * matmul(rel, right) / depth
    y = cam.focal * cam.aspect * matmul(rel, up) / depth
    return stack([x, y], axis=-1), depth


def project_points(cam: Camera, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel coordinates (N, 2), depth (N,), valid flags (N,)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = points - cam.origin
    right, up, forward = cam.basis
    depth = rel @ forward
    valid = depth > NEAR
    safe = np.where(valid, depth, 1.0)
    ndc = np.stack(
        [cam.focal * (rel @ right) / safe, cam.focal * cam.aspect * (rel @ up) / safe], axis=1
    )
    pixels = cam.ndc_to_pixel(ndc)
    pixels[~valid] = np.nan
    return pixels, depth, valid


def project(cam: Camera, p) -> Tuple[float, float, float, bool]:
    """Project one point: (pixel x, pixel y, depth, valid)."""
    pixels, depth, valid = project_points(cam, np.asarray(p, dtype=np.float64)[None])
    return float(pixels[0, 0]), float(pixels[0, 1]), float(depth[0]), bool(valid[0])


# ── Hard rasterization ───────────────────────────────────────────────────


@dataclass
class RenderBuffers:
    """Per-pixel outputs of the hard rasterizer; H x W images, row 0 at the top."""

    mask: np.ndarray
    depth: np.ndarray
    face_index: np.ndarray
    bary: np.ndarray
    normal: np.ndarray
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)
    rgb: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def covered(self) -> np.ndarray:
        """Flat indices of covered pixels, row-major."""
        return np.flatnonzero(self.face_index.reshape(-1) >= 0)

    @property
    def feature(self) -> np.ndarray:
        return self.attributes["feature"]


def _empty_buffers(cam: Camera) -> RenderBuffers:
    h, w = cam.height, cam.width
    return RenderBuffers(
        mask=np.zeros((h, w)),
        depth=np.full((h, w), np.inf),
        face_index=np.full((h, w), -1, dtype=np.int64),
        bary=np.zeros((h, w, 3)),
        normal=np.zeros((h, w, 3)),
    )


def _raster_tile(
    screen: np.ndarray,
    depth: np.ndarray,
    faces: np.ndarray,
    candidates: np.ndarray,
    x0: int,
    x1: int,
    y0: int,
    y1: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-buffer one tile. Returns (depth, face, bary) for its pixels, row-major."""
    gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    px, py = gx.reshape(-1), gy.reshape(-1)
    best_z = np.full(px.shape, np.inf)
    best_f = np.full(px.shape, -1, dtype=np.int64)
    best_b = np.zeros(px.shape + (3,))
    cols = np.arange(len(px))
    for start in range(0, len(candidates), FACE_CHUNK):
        chunk = candidates[start : start + FACE_CHUNK]
        tri = faces[chunk]
        ax, ay = screen[tri[:, 0], 0][:, None], screen[tri[:, 0], 1][:, None]
        bx, by = screen[tri[:, 1], 0][:, None], screen[tri[:, 1], 1][:, None]
        cx, cy = screen[tri[:, 2], 0][:, None], screen[tri[:, 2], 1][:, None]
        w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        inside &= area != 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            l0, l1, l2 = w0 / area, w1 / area, w2 / area
            z0, z1, z2 = (depth[tri[:, k]][:, None] for k in range(3))
            inv = l0 / z0 + l1 / z1 + l2 / z2
            z = np.where(inside, 1.0 / inv, np.inf)
        k = np.argmin(z, axis=0)
        zmin = z[k, cols]
        better = zmin < best_z
        if not better.any():
            continue
        kb, cb = k[better], cols[better]
        zb = zmin[better]
        best_z[better] = zb
        best_f[better] = chunk[kb]
        best_b[better] = np.stack(
            [l0[kb, cb] / z0[kb, 0], l1[kb, cb] / z1[kb, 0], l2[kb, cb] / z2[kb, 0]], axis=1
        ) * zb[:, None]
    return best_z, best_f, best_b


def rasterize(
    mesh: Mesh,
    cam: Camera,
    attrs: Optional[Mapping[str, np.ndarray]] = None,
    jobs: int = 1,
) -> RenderBuffers:
    """Hard z-buffer rendering of `mesh` with perspective-correct attributes.

    Back faces are kept. Faces with a vertex at or behind the near plane
    are skipped. Tiles of 16x16 pixels are independent and may run on a
    thread pool (`jobs` > 1) without changing the result.
    """
    buffers = _empty_buffers(cam)
    attrs = dict(attrs or {})
    for name, values in attrs.items():
        if len(values) != mesh.n_vertices:
            raise RenderError(f"attribute {name!r} has {len(values)} rows, mesh has {mesh.n_vertices} vertices")
    if mesh.n_faces == 0:
        buffers.attributes = {
            name: np.zeros((cam.height, cam.width, np.asarray(v).reshape(len(v), -1).shape[1]))
            for name, v in attrs.items()
        }
        return buffers

    screen, depth, valid = project_points(cam, mesh.vertices)
    faces = mesh.faces
    keep = np.flatnonzero(valid[faces].all(axis=1))
    tri = screen[faces[keep]]
    lo, hi = tri.min(axis=1), tri.max(axis=1)

    tiles = [
        (x0, min(x0 + TILE, cam.width), y0, min(y0 + TILE, cam.height))
        for y0 in range(0, cam.height, TILE)
        for x0 in range(0, cam.width, TILE)
    ]

    def run(tile):
        x0, x1, y0, y1 = tile
        hit = (hi[:, 0] >= x0 + 0.5) & (lo[:, 0] <= x1 - 0.5) & (hi[:, 1] >= y0 + 0.5) & (lo[:, 1] <= y1 - 0.5)
        return _raster_tile(screen, depth, faces, keep[hit], x0, x1, y0, y1)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tiles))
    else:
        results = [run(t) for t in tiles]

    for (x0, x1, y0, y1), (z, f, b) in zip(tiles, results):
        shape = (y1 - y0, x1 - x0)
        buffers.depth[y0:y1, x0:x1] = z.reshape(shape)
        buffers.face_index[y0:y1, x0:x1] = f.reshape(shape)
        buffers.bary[y0:y1, x0:x1] = b.reshape(shape + (3,))
    buffers.mask = (buffers.face_index >= 0).astype(np.float64)

    normals = compute_normals(mesh)
    n = interpolate_array(buffers, mesh.faces, normals)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    buffers.normal = np.where(length > 0.0, n / np.where(length > 0.0, length, 1.0), 0.0)
    buffers.attributes = {
        name: interpolate_array(buffers, mesh.faces, np.asarray(values, dtype=np.float64))
        for name, values in attrs.items()
    }
    return buffers


def interpolate_array(buffers: RenderBuffers, faces: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Barycentric interpolation of per-vertex values; zeros off the mask."""
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(len(values), -1)
    out = np.zeros((buffers.height * buffers.width, flat.shape[1]))
    pix = buffers.covered
    if len(pix):
        tri = faces[buffers.face_index.reshape(-1)[pix]]
        bary = buffers.bary.reshape(-1, 3)[pix]
        out[pix] = np.einsum("pk,pkc->pc", bary, flat[tri])
    return out.reshape((buffers.height, buffers.width) + values.shape[1:])


# ── Differentiable attribute path ────────────────────────────────────────


def interpolate(buffers: RenderBuffers, faces: np.ndarray, values: TensorLike) -> Tensor:
    """(P, C) values at the covered pixels (buffers.covered order)."""
    values = as_tensor(values)
    pix = buffers.covered
    tri = faces[buffers.face_index.reshape(-1)[pix]]
    bary = buffers.bary.reshape(-1, 3)[pix]
    return (
        values[tri[:, 0]] * bary[:, 0:1]
        + values[tri[:, 1]] * bary[:, 1:2]
        + values[tri[:, 2]] * bary[:, 2:3]
    )


def to_image(buffers: RenderBuffers, pixel_values: TensorLike) -> Tensor:
    """Scatter (P, C) covered-pixel values into an (H, W, C) image, zeros elsewhere."""
    pixel_values = as_tensor(pixel_values)
    flat = scatter_add(pixel_values, buffers.covered, buffers.height * buffers.width)
    return reshape(flat, (buffers.height, buffers.width) + pixel_values.shape[1:])


# ── Soft silhouette ──────────────────────────────────────────────────────


def _pair_grid(lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expand per-face inclusive pixel ranges into (face, x, y) pair arrays."""
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nx * ny
    face = np.repeat(np.arange(len(counts)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(int(counts.sum())) - starts
    x = lo[face, 0] + local % nx[face]
    y = lo[face, 1] + local // nx[face]
    return face, x, y


def _edge_sqdist(p: Tensor, a: Tensor, b: Tensor) -> Tensor:
    ab = b - a
    ap = p - a
    t = clip(tsum(ap * ab, axis=-1, keepdims=True) / (tsum(ab * ab, axis=-1, keepdims=True) + 1e-30), 0.0, 1.0)
    diff = ap - t * ab
    return tsum(diff * diff, axis=-1)


def soft_silhouette(
    vertices: TensorLike,
    faces: np.ndarray,
    cam: Camera,
    sigma_soft: float,
) -> Tensor:
    """Differentiable (H, W) silhouette: 1 - prod over triangles of (1 - alpha).

    alpha = sigmoid(s * d^2 / sigma_soft), s = +1 for pixel centers inside
    the projected triangle and -1 outside. Triangles with a vertex behind
    the near plane are skipped.

    Raises:
        RenderError: if sigma_soft <= 0.
    """
    if sigma_soft <= 0.0:
        raise RenderError(f"sigma_soft must be positive, got {sigma_soft}")
    h, w = cam.height, cam.width
    faces = np.asarray(faces, dtype=np.int64)
    ndc, depth = project_tensor(cam, vertices)
    keep = np.flatnonzero((depth.data[faces] > NEAR).all(axis=1)) if len(faces) else np.zeros(0, dtype=np.int64)
    if not len(keep):
        return Tensor(np.zeros((h, w)))

    faces = faces[keep]
    tri = ndc.data[faces]                                       # (F, 3, 2)
    margin = np.sqrt(SOFT_CUTOFF * sigma_soft)
    lo_ndc, hi_ndc = tri.min(axis=1) - margin, tri.max(axis=1) + margin
    # NDC box -> inclusive pixel index range (y flips)
    lo = np.stack([
        np.ceil((lo_ndc[:, 0] + 1.0) * w / 2.0 - 0.5),
        np.ceil((1.0 - hi_ndc[:, 1]) * h / 2.0 - 0.5),
    ], axis=1)
    hi = np.stack([
        np.floor((hi_ndc[:, 0] + 1.0) * w / 2.0 - 0.5),
        np.floor((1.0 - lo_ndc[:, 1]) * h / 2.0 - 0.5),
    ], axis=1)
    lo = np.clip(lo, 0, [w - 1, h - 1]).astype(np.int64)
    hi = np.clip(hi, -1, [w - 1, h - 1]).astype(np.int64)
    face, x, y = _pair_grid(lo, hi)
    if not len(face):
        return Tensor(np.zeros((h, w)))

    centers = cam.pixel_centers_ndc()
    pixel = y * w + x
    p = centers[pixel]

    # inside/outside and cutoff decided on values, then the graph is built for survivors
    a, b, c = tri[face, 0], tri[face, 1], tri[face, 2]

    def edge(u, v):
        return (v[:, 0] - u[:, 0]) * (p[:, 1] - u[:, 1]) - (v[:, 1] - u[:, 1]) * (p[:, 0] - u[:, 0])

    e0, e1, e2 = edge(b, c), edge(c, a), edge(a, b)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))

    def sqdist_np(u, v):
        uv, up = v - u, p - u
        t = np.clip(np.sum(up * uv, axis=1) / (np.sum(uv * uv, axis=1) + 1e-30), 0.0, 1.0)
        d = up - t[:, None] * uv
        return np.sum(d * d, axis=1)

    d2 = np.minimum(np.minimum(sqdist_np(a, b), sqdist_np(b, c)), sqdist_np(c, a))
    survive = inside | (d2 < SOFT_CUTOFF * sigma_soft)
    face, pixel, p, inside = face[survive], pixel[survive], p[survive], inside[survive]
    if not len(face):
        return Tensor(np.zeros((h, w)))

    verts = faces[face]
    ta, tb, tc = ndc[verts[:, 0]], ndc[verts[:, 1]], ndc[verts[:, 2]]
    pt = Tensor(p)
    dist = minimum(minimum(_edge_sqdist(pt, ta, tb), _edge_sqdist(pt, tb, tc)), _edge_sqdist(pt, tc, ta))
    sign = np.where(inside, 1.0, -1.0)
    logit = dist * (sign / sigma_soft)
    # log(1 - alpha) = log_sigmoid(-logit)
    log_empty = scatter_add(log_sigmoid(-logit), pixel, h * w)
    return reshape(1.0 - exp(log_empty), (h, w))


# ── Shading ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Light:
    """Ambient and diffuse intensity with a unit direction (toward the light)."""

    ambient: float
    diffuse: float
    direction: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.ambient <= 1.0:
            raise RenderError(f"ambient must be in [0, 1], got {self.ambient}")
        if not 0.0 <= self.diffuse <= 1.0:
            raise RenderError(f"diffuse must be in [0, 1], got {self.diffuse}")
        d = np.asarray(self.direction, dtype=np.float64)
        length = np.linalg.norm(d)
        if length == 0.0 or not np.isfinite(length):
            raise RenderError(f"light direction must be a nonzero vector, got {self.direction}")
        object.__setattr__(self, "direction", tuple((d / length).tolist()))


def shade(
    normals: TensorLike,
    albedo: TensorLike,
    ambient: TensorLike,
    diffuse: TensorLike,
    direction: TensorLike,
) -> Tensor:
    """Differentiable (k_a + k_d * max(0, <l, n>)) * albedo, clipped to [0, 1].

    normals are renormalized per row; rows of zeros stay dark apart from
    the ambient term.
    """
    normals = as_tensor(normals)
    unit = normals / norm(normals, axis=-1, keepdims=True, eps=1e-12)
    cosine = relu(matmul(unit, as_tensor(direction)))
    intensity = as_tensor(ambient) + as_tensor(diffuse) * cosine
    return clip(reshape(intensity, intensity.shape + (1,)) * albedo, 0.0, 1.0)


def shade_lambertian(buffers: RenderBuffers, albedo: np.ndarray, light: Light) -> np.ndarray:
    """(H, W, 3) Lambertian image from the buffers' normals; zero off the mask."""
    albedo = np.asarray(albedo, dtype=np.float64)
    if albedo.shape != buffers.normal.shape:
        raise RenderError(f"albedo must have shape {buffers.normal.shape}, got {albedo.shape}")
    pix = buffers.covered
    out = np.zeros((buffers.height * buffers.width, 3))
    if len(pix):
        values = shade(
            buffers.normal.reshape(-1, 3)[pix],
            albedo.reshape(-1, 3)[pix],
            light.ambient,
            light.diffuse,
            np.asarray(light.direction),
        )
        out[pix] = values.data
    return out.reshape(buffers.height, buffers.width, 3)


def render_view(
    mesh: Mesh,
    cam: Camera,
    albedo: np.ndarray,
    light: Light,
    features: Optional[np.ndarray] = None,
    jobs: int = 1,
) -> RenderBuffers:
    """Hard render with albedo/feature attributes and the shaded image filled in."""
    attrs = {"albedo": albedo}
    if features is not None:
        attrs["feature"] = features
    buffers = rasterize(mesh, cam, attrs, jobs=jobs)
    buffers.rgb = shade_lambertian(buffers, buffers.attributes["albedo"], light)
    return buffers
