"""Voxel grids and the operations that build and sample them.

Addressing convention: the value at integer index (i, j, k) is the sample at
the voxel *center* located at ``origin + (i, j, k) * voxel_size`` in world
space.  This convention is used by every module in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree


class GridKind(Enum):
    SIGNED_DF = "sdf"
    UNSIGNED_DF = "df"
    HEATMAP = "heatmap"
    WEIGHT = "weight"


@dataclass
class VoxelGrid:
    """Dense scalar field over a regular grid with world placement metadata.

    ``truncation`` is in meters; 0 means untruncated.  ``values`` is indexed
    ``values[ix, iy, iz]``.
    """

    dims: tuple
    voxel_size: float
    origin: np.ndarray
    truncation: float
    kind: GridKind
    values: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.values is None:
            self.values = np.zeros(self.dims)
        else:
            self.values = np.asarray(self.values, dtype=float).reshape(self.dims)
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @classmethod
    def empty(cls, dims, voxel_size, origin, truncation=0.0, kind=GridKind.SIGNED_DF,
              fill=0.0):
        g = cls(dims, voxel_size, np.asarray(origin, dtype=float), truncation, kind)
        g.values.fill(fill)
        return g

    def copy(self):
        return VoxelGrid(self.dims, self.voxel_size, self.origin.copy(),
                         self.truncation, self.kind, self.values.copy())

    # -- world <-> voxel -----------------------------------------------------

    def world_to_voxel(self, p):
        """Continuous voxel coordinates of world points (single or batch)."""
        return (np.asarray(p, dtype=float) - self.origin) / self.voxel_size

    def voxel_to_world(self, idx):
        return self.origin + np.asarray(idx, dtype=float) * self.voxel_size

    def world_to_vox_matrix(self):
        m = np.eye(4)
        m[:3, :3] /= self.voxel_size
        m[:3, 3] = -self.origin / self.voxel_size
        return m

    def vox_to_world_matrix(self):
        m = np.eye(4)
        m[:3, :3] *= self.voxel_size
        m[:3, 3] = self.origin
        return m

    def voxel_centers(self):
        """World coordinates of all voxel centers, shape (N, 3), x-fastest.

        Cached; dims, origin, and voxel_size are treated as immutable."""
        cached = getattr(self, "_centers", None)
        if cached is None:
            ii = np.stack(np.meshgrid(
                np.arange(self.dims[0]), np.arange(self.dims[1]),
                np.arange(self.dims[2]),
                indexing="ij"), axis=-1).reshape(-1, 3)
            cached = self.voxel_to_world(ii)
            self._centers = cached
        return cached

    def validate(self):
        """Check the kind-dependent value invariants; raises on violation."""
        if self.values.shape != self.dims:
            raise ValueError("values shape does not match dims")
        v = self.values
        if self.kind is GridKind.SIGNED_DF and self.truncation > 0:
            if np.any(np.abs(v) > self.truncation + 1e-9):
                raise ValueError("signed DF values exceed truncation")
        elif self.kind is GridKind.UNSIGNED_DF:
            if np.any(v < 0):
                raise ValueError("unsigned DF values must be non-negative")
        elif self.kind is GridKind.HEATMAP:
            if np.any(v < 0) or np.any(v > 1):
                raise ValueError("heatmap values must lie in [0, 1]")
        return self


@dataclass
class DepthImage:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    depth: np.ndarray  # (height, width), meters; 0 = invalid
    camera_to_world: np.ndarray  # 4x4 rigid

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.depth = np.asarray(self.depth, dtype=float).reshape(self.height, self.width)
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=float).reshape(4, 4)
        if np.any(self.depth[np.isfinite(self.depth)] < 0):
            raise ValueError("depths must be non-negative")


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) world meters
    triangles: np.ndarray  # (T, 3) int indices
    category: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=int).reshape(-1, 3)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles):
            a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if np.any(areas <= 1e-12):
                raise ValueError("degenerate triangle (area <= 1e-12)")

    def triangle_areas(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, m):
        m = np.asarray(m, dtype=float)
        v = self.vertices @ m[:3, :3].T + m[:3, 3]
        return TriangleMesh(v, self.triangles.copy(), self.category)


# ---------------------------------------------------------------------------
# Fusion


def fuse_depth(grid: VoxelGrid, weights: VoxelGrid, image: DepthImage,
               active=None):
    """Integrate one depth image into a truncated signed DF (Curless-Levoy).

    Mutates ``grid`` and ``weights`` in place and returns them.  Per-sample
    weight is fixed at 1.

    ``active`` optionally restricts the update to a flat voxel index array.
    Voxels farther than the truncation band from every surface only ever
    receive votes equal to the +truncation fill, so callers that know where
    the geometry is can skip them without changing the fused values.
    """
    if grid.dims != weights.dims or not np.allclose(grid.origin, weights.origin) \
            or grid.voxel_size != weights.voxel_size:
        raise ValueError("grid and weights must share dims, origin and voxel_size")
    if grid.truncation <= 0:
        raise ValueError("fusion requires a positive truncation")
    if abs(np.linalg.det(image.camera_to_world)) < 1e-12:
        raise ValueError("non-invertible camera pose")

    world_to_cam = np.linalg.inv(image.camera_to_world)
    # gathered float32 centers are cached across calls with the same active
    # set; pixel indices and the truncation band are insensitive to float32
    cache = getattr(grid, "_fuse_pts", None)
    if cache is not None and cache[0] is active:
        pts = cache[1]
    else:
        pts = grid.voxel_centers()
        if active is not None:
            pts = pts[active]
        pts = pts.astype(np.float32)
        grid._fuse_pts = (active, pts)
    cam = pts @ world_to_cam[:3, :3].T.astype(np.float32) \
        + world_to_cam[:3, 3].astype(np.float32)
    z = cam[:, 2]
    mask = z > 1e-9
    zs = np.where(mask, z, 1.0)
    u = np.round(image.fx * cam[:, 0] / zs + image.cx).astype(int)
    v = np.round(image.fy * cam[:, 1] / zs + image.cy).astype(int)
    mask &= (u >= 0) & (u < image.width) & (v >= 0) & (v < image.height)
    d_obs = np.zeros(len(pts))
    d_obs[mask] = image.depth[v[mask], u[mask]]
    mask &= d_obs > 0
    d = d_obs - z
    mask &= d > -grid.truncation

    idx = np.flatnonzero(mask)
    tsdf = np.clip(d[idx], -grid.truncation, grid.truncation)
    if active is not None:
        idx = active[idx]
    vals = grid.values.reshape(-1)
    w = weights.values.reshape(-1)
    vals[idx] = (vals[idx] * w[idx] + tsdf) / (w[idx] + 1.0)
    w[idx] += 1.0
    return grid, weights


# ---------------------------------------------------------------------------
# Mesh -> unsigned distance field


def _point_triangle_distance_sq(p, a, b, c):
    """Squared distances from points ``p`` (N,3) to one triangle (a, b, c)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ap @ ab
    d2 = ap @ ac
    bp = p - b
    d3 = bp @ ab
    d4 = bp @ ac
    cp = p - c
    d5 = cp @ ab
    d6 = cp @ ac

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_bc = (d4 - d3) + (d5 - d6)
    w_edge_bc = np.divide(d4 - d3, denom_bc, out=np.zeros_like(d4),
                          where=np.abs(denom_bc) > 0)

    # face region barycentric coordinates
    denom = va + vb + vc
    v = np.divide(vb, denom, out=np.zeros_like(vb), where=np.abs(denom) > 0)
    w = np.divide(vc, denom, out=np.zeros_like(vc), where=np.abs(denom) > 0)

    t_ab = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=np.abs(d1 - d3) > 0)
    t_ac = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=np.abs(d2 - d6) > 0)

    closest = a + v[:, None] * ab + w[:, None] * ac
    # vertex regions
    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    # edge regions
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[:, None], a + np.clip(t_ab, 0, 1)[:, None] * ab, closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[:, None], a + np.clip(t_ac, 0, 1)[:, None] * ac, closest)
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(on_bc[:, None], b + np.clip(w_edge_bc, 0, 1)[:, None] * (c - b),
                       closest)
    diff = p - closest
    return np.einsum("ij,ij->i", diff, diff)


def point_mesh_distance(points, mesh: TriangleMesh):
    """Exact min point-to-triangle distance for a batch of points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    # the nearest-vertex distance (an achievable distance, since vertices
    # lie on the mesh) seeds the running best so the AABB prune is tight
    # from the start
    d0, _ = cKDTree(mesh.vertices).query(points)
    best = d0**2
    tri_pts = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    lo_t = tri_pts.min(axis=1)
    hi_t = tri_pts.max(axis=1)
    # visit triangles nearest the query cloud first so the prune tightens
    # quickly; a point only needs the exact test when its distance to the
    # triangle's AABB (a lower bound) beats its current best
    center = points.mean(axis=0)
    order = np.argsort(np.linalg.norm(tri_pts.mean(axis=1) - center, axis=1))
    for t in order:
        gap = np.maximum(np.maximum(lo_t[t] - points, points - hi_t[t]), 0.0)
        live = np.einsum("ij,ij->i", gap, gap) < best
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            continue
        a, b, c = tri_pts[t]
        d2 = _point_triangle_distance_sq(points[idx], a, b, c)
        best[idx] = np.minimum(best[idx], d2)
    return np.sqrt(best)


def mesh_to_df(mesh: TriangleMesh, dims=(32, 32, 32), padding=0.0):
    """Exact unsigned distance field of a mesh on a grid over its padded AABB."""
    if len(mesh.triangles) == 0:
        raise ValueError("empty mesh")
    dims = tuple(int(d) for d in dims)
    if min(dims) < 2:
        raise ValueError("dims must be >= 2 per axis")
    lo, hi = mesh.aabb()
    lo = lo - padding
    hi = hi + padding
    extent = hi - lo
    voxel_size = float(np.max(extent / (np.asarray(dims) - 1)))
    center = (lo + hi) / 2.0
    origin = center - (np.asarray(dims) - 1) * voxel_size / 2.0
    grid = VoxelGrid.empty(dims, voxel_size, origin, truncation=0.0,
                           kind=GridKind.UNSIGNED_DF)
    grid.values = point_mesh_distance(grid.voxel_centers(), mesh).reshape(dims)
    return grid


# ---------------------------------------------------------------------------
# Trilinear sampling


def sample_trilinear_batch(grid: VoxelGrid, p_world):
    """Trilinear values and world-space gradients for a batch of points.

    Out-of-grid points get value 0 (heatmap/weight kinds) or ``truncation``
    (distance kinds) with zero gradient, making the lookup a total function.
    """
    p = np.atleast_2d(np.asarray(p_world, dtype=float))
    u = grid.world_to_voxel(p)
    dims = np.asarray(grid.dims)
    # tolerance absorbs round-off for points exactly on the boundary faces
    eps = 1e-9
    inside = np.all((u >= -eps) & (u <= dims - 1 + eps), axis=1)

    uc = np.clip(u, 0, dims - 1)
    base = np.minimum(np.floor(uc).astype(int), dims - 2)
    f = uc - base

    vals = grid.values
    ix, iy, iz = base[:, 0], base[:, 1], base[:, 2]
    c = np.empty((len(p), 2, 2, 2))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c[:, dx, dy, dz] = vals[ix + dx, iy + dy, iz + dz]

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = np.stack([1 - fx, fx], axis=1)
    wy = np.stack([1 - fy, fy], axis=1)
    wz = np.stack([1 - fz, fz], axis=1)
    dwx = np.stack([-np.ones_like(fx), np.ones_like(fx)], axis=1)
    dwy = np.stack([-np.ones_like(fy), np.ones_like(fy)], axis=1)
    dwz = np.stack([-np.ones_like(fz), np.ones_like(fz)], axis=1)

    value = np.einsum("nxyz,nx,ny,nz->n", c, wx, wy, wz)
    gx = np.einsum("nxyz,nx,ny,nz->n", c, dwx, wy, wz)
    gy = np.einsum("nxyz,nx,ny,nz->n", c, wx, dwy, wz)
    gz = np.einsum("nxyz,nx,ny,nz->n", c, wx, wy, dwz)
    grad = np.stack([gx, gy, gz], axis=1) / grid.voxel_size

    outside_value = 0.0
    if grid.kind in (GridKind.SIGNED_DF, GridKind.UNSIGNED_DF):
        outside_value = grid.truncation
    value = np.where(inside, value, outside_value)
    grad = np.where(inside[:, None], grad, 0.0)
    return value, grad


def sample_trilinear(grid: VoxelGrid, p_world):
    """Single-point convenience wrapper; returns (value, gradient per meter)."""
    value, grad = sample_trilinear_batch(grid, np.asarray(p_world, dtype=float)[None, :])
    return float(value[0]), grad[0]


# ---------------------------------------------------------------------------
# Pyramids


def _pad_to_even(a, kind: GridKind):
    pad = [(0, d % 2) for d in a.shape]
    if all(p == (0, 0) for p in pad):
        return a
    mode = "constant" if kind is GridKind.HEATMAP else "edge"
    return np.pad(a, pad, mode=mode)


def _downsample(grid: VoxelGrid):
    a = _pad_to_even(grid.values, grid.kind)
    nx, ny, nz = a.shape
    blocks = a.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2)
    if grid.kind is GridKind.HEATMAP:
        coarse = blocks.max(axis=(1, 3, 5))
    else:
        coarse = blocks.mean(axis=(1, 3, 5))
    return VoxelGrid(
        coarse.shape,
        grid.voxel_size * 2.0,
        grid.origin + grid.voxel_size / 2.0,
        grid.truncation,
        grid.kind,
        coarse,
    )


def build_pyramid(grid: VoxelGrid, levels: int):
    """Coarse-to-fine list of grids; heatmaps max-pool, distance fields mean-pool."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [grid]
    for _ in range(levels - 1):
        out.append(_downsample(out[-1]))
    out.reverse()
    return out
