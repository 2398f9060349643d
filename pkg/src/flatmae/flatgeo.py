"""Flat-map grid construction and surface-to-pixel resampling.

A flattened cortical mesh is rasterized onto a regular pixel grid. Each pixel
center that falls inside a triangle made only of valid vertices gets the three
barycentric weights of that triangle; everything else is background. The
weights are stored as a sparse ``(n_valid_pixels, n_vertices)`` matrix so that
resampling a whole run is a single sparse matrix product.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionError, EmptyMeshError, FormatError, ValidationError

__all__ = [
    "FlatMesh",
    "ResampleGrid",
    "FlatFrame",
    "load_mesh",
    "save_mesh",
    "build_grid",
    "resample_frame",
    "resample_frames",
    "save_grid",
    "load_grid",
    "FlatMapResampler",
]

MESH_MAGIC = b"FMESH1\0"
GRID_MAGIC = b"FGRID1\0"

# barycentric coordinates down to -INSIDE_TOL count as inside (no cracks on shared edges)
INSIDE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class FlatMesh:
    """Flattened surface mesh.

    ``vertex_xyz`` is ``(V, 3)`` in flat-map millimetres, ``triangles`` is
    ``(F, 3)`` vertex indices and ``valid_vertex`` is a ``(V,)`` bool mask.
    """

    vertex_xyz: np.ndarray
    triangles: np.ndarray
    valid_vertex: np.ndarray

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.vertex_xyz, dtype=np.float64)
        tri = np.ascontiguousarray(self.triangles, dtype=np.int64)
        valid = np.ascontiguousarray(self.valid_vertex, dtype=bool)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValidationError(f"vertex_xyz must be (V, 3), got {xyz.shape}")
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise ValidationError(f"triangles must be (F, 3), got {tri.shape}")
        if valid.shape != (xyz.shape[0],):
            raise ValidationError("valid_vertex must have one entry per vertex")
        n_vert = xyz.shape[0]
        if tri.size and (tri.min() < 0 or tri.max() >= n_vert):
            bad = int(tri.max()) if tri.max() >= n_vert else int(tri.min())
            raise ValidationError(
                f"triangle index {bad} out of range for {n_vert} vertices"
            )
        if not np.isfinite(xyz).all():
            raise ValidationError("vertex coordinates must be finite")
        if np.any(xyz[valid, 2] != 0.0):
            raise ValidationError("valid vertices must have z == 0")
        if tri.size:
            a, b, c = (xyz[tri[:, k]] for k in range(3))
            area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if np.any(area2 == 0.0):
                raise ValidationError(
                    f"{int(np.sum(area2 == 0.0))} degenerate (zero-area) triangles"
                )
        for name, arr in (("vertex_xyz", xyz), ("triangles", tri), ("valid_vertex", valid)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return self.vertex_xyz.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.valid_vertex.sum())

    def valid_triangles(self) -> np.ndarray:
        """Triangles whose three vertices are all valid, in face order."""
        return self.triangles[self.valid_vertex[self.triangles].all(axis=1)]


@dataclass(frozen=True, eq=False)
class ResampleGrid:
    """Pixel grid plus the sparse barycentric weights mapping vertices to pixels.

    Row ``i`` of the image has its pixel centres at
    ``y = origin_y + (height - i - 0.5) * pixel_mm`` so that images display
    with +y pointing up; column ``j`` is at ``x = origin_x + (j + 0.5) * pixel_mm``.
    """

    height: int
    width: int
    pixel_mm: float
    origin_xy: tuple[float, float]
    valid_pixel: np.ndarray
    weights: sp.csr_matrix
    _hash: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        valid = np.ascontiguousarray(self.valid_pixel, dtype=bool)
        if valid.shape != (self.height, self.width):
            raise ValidationError("valid_pixel shape does not match grid dims")
        if self.weights.shape[0] != int(valid.sum()):
            raise ValidationError("one weight row is required per valid pixel")
        valid.setflags(write=False)
        object.__setattr__(self, "valid_pixel", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_vertices(self) -> int:
        return self.weights.shape[1]

    @property
    def n_valid(self) -> int:
        return self.weights.shape[0]

    def pixel_weights(self, k: int) -> list[tuple[int, float]]:
        """(vertex, weight) pairs for the k-th valid pixel in row-major order."""
        lo, hi = self.weights.indptr[k], self.weights.indptr[k + 1]
        return [
            (int(v), float(w))
            for v, w in zip(self.weights.indices[lo:hi], self.weights.data[lo:hi])
        ]

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates of all pixel centres, each ``(height, width)``."""
        ox, oy = self.origin_xy
        xs = ox + (np.arange(self.width) + 0.5) * self.pixel_mm
        ys = oy + (self.height - np.arange(self.height) - 0.5) * self.pixel_mm
        return np.meshgrid(xs, ys)

    def digest(self) -> bytes:
        """32-byte SHA-256 of the canonical FGRID1 encoding."""
        if not self._hash:
            object.__setattr__(self, "_hash", hashlib.sha256(_grid_bytes(self)).digest())
        return self._hash


@dataclass(frozen=True, eq=False)
class FlatFrame:
    """One resampled image; background pixels hold exactly 0."""

    pixels: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != self.valid.shape:
            raise DimensionError(
                f"pixels {self.pixels.shape} and valid mask {self.valid.shape} differ"
            )


# ---------------------------------------------------------------- mesh I/O


def save_mesh(mesh: FlatMesh, path) -> None:
    with open(path, "wb") as f:
        f.write(MESH_MAGIC)
        f.write(struct.pack("<II", mesh.n_vertices, mesh.n_triangles))
        f.write(mesh.vertex_xyz.astype("<f4").tobytes())
        f.write(mesh.triangles.astype("<u4").tobytes())
        f.write(mesh.valid_vertex.astype("u1").tobytes())


def load_mesh(path) -> FlatMesh:
    """Read an FMESH1 file and validate it."""
    buf = Path(path).read_bytes()
    if not buf.startswith(MESH_MAGIC):
        raise FormatError(f"{path}: bad magic, expected FMESH1")
    off = len(MESH_MAGIC)
    if len(buf) < off + 8:
        raise FormatError(f"{path}: truncated header")
    n_vert, n_tri = struct.unpack_from("<II", buf, off)
    off += 8
    expected = off + n_vert * 12 + n_tri * 12 + n_vert
    if len(buf) != expected:
        raise FormatError(
            f"{path}: payload is {len(buf)} bytes, dims imply {expected}"
        )
    xyz = np.frombuffer(buf, "<f4", n_vert * 3, off).reshape(n_vert, 3)
    off += n_vert * 12
    tri = np.frombuffer(buf, "<u4", n_tri * 3, off).reshape(n_tri, 3)
    off += n_tri * 12
    valid = np.frombuffer(buf, "u1", n_vert, off)
    if np.any(valid > 1):
        raise FormatError(f"{path}: valid flags must be 0 or 1")
    return FlatMesh(xyz.astype(np.float64), tri.astype(np.int64), valid.astype(bool))


# ---------------------------------------------------------------- grid build


def _barycentric(xy_tri: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points (px, py) w.r.t. triangles ``(n, 3, 2)``."""
    xa, ya = xy_tri[:, 0, 0], xy_tri[:, 0, 1]
    xb, yb = xy_tri[:, 1, 0], xy_tri[:, 1, 1]
    xc, yc = xy_tri[:, 2, 0], xy_tri[:, 2, 1]
    det = (yb - yc) * (xa - xc) + (xc - xb) * (ya - yc)
    l1 = ((yb - yc) * (px - xc) + (xc - xb) * (py - yc)) / det
    l2 = ((yc - ya) * (px - xc) + (xa - xc) * (py - yc)) / det
    return np.stack([l1, l2, 1.0 - l1 - l2], axis=1)


def build_grid(mesh: FlatMesh, height: int, width: int, pixel_mm: float) -> ResampleGrid:
    """Fit a ``height x width`` grid to the valid vertices and compute weights.

    The grid is centred on the bounding box of the valid vertices. A pixel
    covered by several triangles takes the first one in face order.
    """
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    if not pixel_mm > 0:
        raise ValueError("pixel_mm must be > 0")
    tri = mesh.valid_triangles()
    if len(tri) == 0:
        raise EmptyMeshError("mesh has no triangle with three valid vertices")

    xy = mesh.vertex_xyz[:, :2]
    vxy = xy[mesh.valid_vertex]
    lo, hi = vxy.min(axis=0), vxy.max(axis=0)
    cx, cy = (lo + hi) / 2.0
    ox = cx - width * pixel_mm / 2.0
    oy = cy - height * pixel_mm / 2.0

    # candidate pixel ranges from each triangle's bounding box
    txy = xy[tri]  # (F, 3, 2)
    tmin, tmax = txy.min(axis=1), txy.max(axis=1)
    pad = 1e-9
    j0 = np.ceil((tmin[:, 0] - ox) / pixel_mm - 0.5 - pad).astype(np.int64)
    j1 = np.floor((tmax[:, 0] - ox) / pixel_mm - 0.5 + pad).astype(np.int64)
    i0 = np.ceil(height - 0.5 - (tmax[:, 1] - oy) / pixel_mm - pad).astype(np.int64)
    i1 = np.floor(height - 0.5 - (tmin[:, 1] - oy) / pixel_mm + pad).astype(np.int64)
    j0, j1 = np.maximum(j0, 0), np.minimum(j1, width - 1)
    i0, i1 = np.maximum(i0, 0), np.minimum(i1, height - 1)
    ncol = np.maximum(j1 - j0 + 1, 0)
    nrow = np.maximum(i1 - i0 + 1, 0)
    count = ncol * nrow

    total = int(count.sum())
    tri_id = np.repeat(np.arange(len(tri)), count)
    start = np.repeat(np.cumsum(count) - count, count)
    local = np.arange(total) - start
    nc = ncol[tri_id]
    ii = i0[tri_id] + local // np.maximum(nc, 1)
    jj = j0[tri_id] + local % np.maximum(nc, 1)
    px = ox + (jj + 0.5) * pixel_mm
    py = oy + (height - ii - 0.5) * pixel_mm

    bary = _barycentric(txy[tri_id], px, py)
    inside = np.all(bary >= -INSIDE_TOL, axis=1)
    pix = (ii * width + jj)[inside]
    bary = bary[inside]
    tri_id = tri_id[inside]

    # candidates are enumerated in face order, so the first hit is the lowest face
    pix_u, first = np.unique(pix, return_index=True)
    bary = np.clip(bary[first], 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)
    verts = tri[tri_id[first]]

    valid = np.zeros(height * width, dtype=bool)
    valid[pix_u] = True
    n_valid = len(pix_u)
    weights = sp.csr_matrix(
        (bary.ravel(), verts.ravel(), np.arange(0, 3 * n_valid + 1, 3)),
        shape=(n_valid, mesh.n_vertices),
    )
    return ResampleGrid(
        height=int(height),
        width=int(width),
        pixel_mm=float(pixel_mm),
        origin_xy=(float(ox), float(oy)),
        valid_pixel=valid.reshape(height, width),
        weights=weights,
    )


# ---------------------------------------------------------------- resampling


def resample_frames(grid: ResampleGrid, vertex_values: np.ndarray) -> np.ndarray:
    """Resample ``(V,)`` or ``(V, T)`` vertex data to ``(H, W)`` or ``(T, H, W)``."""
    values = np.asarray(vertex_values)
    if values.shape[0] != grid.n_vertices:
        raise DimensionError(
            f"got {values.shape[0]} vertex values for a {grid.n_vertices}-vertex grid"
        )
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    dtype = np.result_type(values.dtype, np.float32)
    inner = grid.weights @ values  # (n_valid, T)
    out = np.zeros((values.shape[1], grid.height * grid.width), dtype=dtype)
    out[:, grid.valid_pixel.ravel()] = inner.T
    out = out.reshape(values.shape[1], grid.height, grid.width)
    return out[0] if squeeze else out


def resample_frame(grid: ResampleGrid, vertex_values: np.ndarray) -> FlatFrame:
    values = np.asarray(vertex_values)
    if values.ndim != 1:
        raise DimensionError("resample_frame takes one value per vertex")
    return FlatFrame(resample_frames(grid, values), grid.valid_pixel)


# ---------------------------------------------------------------- grid I/O


def _grid_bytes(grid: ResampleGrid) -> bytes:
    w = grid.weights
    buf = io.BytesIO()
    buf.write(GRID_MAGIC)
    buf.write(struct.pack("<III", grid.height, grid.width, grid.n_vertices))
    buf.write(struct.pack("<ddd", grid.pixel_mm, *grid.origin_xy))
    buf.write(np.packbits(grid.valid_pixel.ravel()).tobytes())
    buf.write(struct.pack("<I", w.nnz))
    buf.write(w.indptr.astype("<u4").tobytes())
    buf.write(w.indices.astype("<u4").tobytes())
    buf.write(w.data.astype("<f8").tobytes())
    return buf.getvalue()


def save_grid(grid: ResampleGrid, path) -> None:
    Path(path).write_bytes(_grid_bytes(grid))


def load_grid(path) -> ResampleGrid:
    buf = Path(path).read_bytes()
    if not buf.startswith(GRID_MAGIC):
        raise FormatError(f"{path}: bad magic, expected FGRID1")
    try:
        off = len(GRID_MAGIC)
        height, width, n_vert = struct.unpack_from("<III", buf, off)
        off += 12
        pixel_mm, ox, oy = struct.unpack_from("<ddd", buf, off)
        off += 24
        nbits = height * width
        nbytes = (nbits + 7) // 8
        valid = np.unpackbits(np.frombuffer(buf, "u1", nbytes, off))[:nbits].astype(bool)
        off += nbytes
        (nnz,) = struct.unpack_from("<I", buf, off)
        off += 4
        n_valid = int(valid.sum())
        indptr = np.frombuffer(buf, "<u4", n_valid + 1, off).astype(np.int64)
        off += 4 * (n_valid + 1)
        indices = np.frombuffer(buf, "<u4", nnz, off).astype(np.int64)
        off += 4 * nnz
        data = np.frombuffer(buf, "<f8", nnz, off).copy()
        off += 8 * nnz
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated FGRID1 payload") from exc
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    weights = sp.csr_matrix((data, indices, indptr), shape=(n_valid, n_vert))
    return ResampleGrid(
        height=height,
        width=width,
        pixel_mm=pixel_mm,
        origin_xy=(ox, oy),
        valid_pixel=valid.reshape(height, width),
        weights=weights,
    )


# ---------------------------------------------------------------- estimator


class FlatMapResampler(TransformerMixin, BaseEstimator):
    """Fit a flat-map grid to a mesh, then map vertex data to images.

    >>> resampler = FlatMapResampler(height=224, width=560, pixel_mm=1.2)
    >>> frames = resampler.fit(mesh).transform(run_values)  # (V, T) -> (T, H, W)
    """

    def __init__(self, height: int = 224, width: int = 560, pixel_mm: float = 1.2):
        self.height = height
        self.width = width
        self.pixel_mm = pixel_mm

    def fit(self, mesh: FlatMesh, y=None):
        if not isinstance(mesh, FlatMesh):
            raise TypeError("FlatMapResampler.fit expects a FlatMesh")
        self.grid_ = build_grid(mesh, self.height, self.width, self.pixel_mm)
        self.n_features_in_ = mesh.n_vertices
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        return resample_frames(self.grid_, np.asarray(X))

    @property
    def valid_pixel_(self) -> np.ndarray:
        check_is_fitted(self, "grid_")
        return self.grid_.valid_pixel
