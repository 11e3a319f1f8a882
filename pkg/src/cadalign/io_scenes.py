"""Serialization and synthetic scene generation.

File formats
------------
``.vgrid``  binary voxel grid: 16-byte magic+version, dims (3 x u32 LE),
            voxel_size (f64 LE), origin (3 x f64 LE), truncation (f64 LE),
            kind (u8), values as f32 LE in x-fastest order, trailing CRC32.
``scene.json``       scene description with placed models, ground-truth
                     poses, symmetry tags, keypoint pairs, and CAD meshes.
``alignments.json``  {scene_id, aligned_models: [{cad_id, category,
                     trs: {translation, rotation wxyz, scale}, cost,
                     confidence}]}
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .geometry import (OrientedBox, Symmetry, SymmetryTag, decompose, obb_iou,
                       so3_exp, trs_to_matrix)
from .grids import DepthImage, GridKind, TriangleMesh, VoxelGrid, fuse_depth, \
    mesh_to_df

VGRID_MAGIC = b"CADALIGN.VGRID01"
_KIND_CODES = {GridKind.SIGNED_DF: 0, GridKind.UNSIGNED_DF: 1,
               GridKind.HEATMAP: 2, GridKind.WEIGHT: 3}
_KIND_FROM_CODE = {v: k for k, v in _KIND_CODES.items()}


class GridFormatError(ValueError):
    pass


def save_grid(grid: VoxelGrid, path):
    header = VGRID_MAGIC
    header += struct.pack("<3I", *grid.dims)
    header += struct.pack("<d", grid.voxel_size)
    header += struct.pack("<3d", *grid.origin)
    header += struct.pack("<d", grid.truncation)
    header += struct.pack("<B", _KIND_CODES[grid.kind])
    payload = np.asarray(grid.values, dtype="<f4").flatten(order="F").tobytes()
    blob = header + payload
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_grid(path):
    blob = Path(path).read_bytes()
    if len(blob) < len(VGRID_MAGIC) + 49:
        raise GridFormatError(f"{path}: truncated grid file")
    if blob[:16] != VGRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic or unsupported version")
    crc_stored, = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise GridFormatError(f"{path}: checksum mismatch")
    off = 16
    dims = struct.unpack_from("<3I", blob, off); off += 12
    voxel_size, = struct.unpack_from("<d", blob, off); off += 8
    origin = struct.unpack_from("<3d", blob, off); off += 24
    truncation, = struct.unpack_from("<d", blob, off); off += 8
    kind_code, = struct.unpack_from("<B", blob, off); off += 1
    n = dims[0] * dims[1] * dims[2]
    expected = off + 4 * n + 4
    if len(blob) != expected:
        raise GridFormatError(f"{path}: size mismatch ({len(blob)} != {expected})")
    values = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
    values = values.reshape(dims, order="F").astype(float)
    return VoxelGrid(dims, voxel_size, np.array(origin), truncation,
                     _KIND_FROM_CODE[kind_code], values)


# ---------------------------------------------------------------------------
# Scene description


@dataclass
class PlacedModel:
    cad_id: str
    category: str
    pose: np.ndarray  # 4x4, model -> world
    sym: SymmetryTag = field(default_factory=SymmetryTag)
    keypoint_pairs: list = field(default_factory=list)  # (cad point, scan point)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(4, 4)
        if self.keypoint_pairs and len(self.keypoint_pairs) < 6:
            raise ValueError("placed models need at least 6 keypoint pairs "
                             "when pairs are present")


@dataclass
class SceneData:
    scene_id: str
    scan: VoxelGrid
    instances: list  # PlacedModel
    cad_meshes: dict  # cad_id -> TriangleMesh
    cad_dfs: dict  # cad_id -> VoxelGrid[UnsignedDF]

    def categories(self):
        return {i.cad_id: i.category for i in self.instances}


def _pose_to_json(pose):
    t, q, s = decompose(pose)
    return {"translation": list(t), "rotation": list(q), "scale": list(s)}


def _pose_from_json(d):
    q = np.asarray(d["rotation"], dtype=float)
    return trs_to_matrix(d["translation"], q / np.linalg.norm(q), d["scale"])


def _sym_to_json(sym: SymmetryTag):
    return {"kind": sym.kind.value, "axis": list(sym.axis)}


def _sym_from_json(d):
    return SymmetryTag(Symmetry(d["kind"]), np.asarray(d["axis"], dtype=float))


def save_scene(scene: SceneData, directory):
    """Write scene.json plus the scan and CAD grids as .vgrid files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_grid(scene.scan, directory / "scan.vgrid")
    cads = []
    for cad_id, mesh in scene.cad_meshes.items():
        grid_name = f"cad_{cad_id}.vgrid"
        save_grid(scene.cad_dfs[cad_id], directory / grid_name)
        cads.append({
            "cad_id": cad_id,
            "category": mesh.category,
            "df_grid": grid_name,
            "vertices": mesh.vertices.tolist(),
            "triangles": mesh.triangles.tolist(),
        })
    doc = {
        "scene_id": scene.scene_id,
        "scan_grid": "scan.vgrid",
        "placed_models": [{
            "cad_id": m.cad_id,
            "category": m.category,
            "pose": _pose_to_json(m.pose),
            "sym": _sym_to_json(m.sym),
            "keypoint_pairs": [{"cad": list(np.asarray(c, dtype=float)),
                                "scan": list(np.asarray(s, dtype=float))}
                               for c, s in m.keypoint_pairs],
        } for m in scene.instances],
        "cads": cads,
    }
    (directory / "scene.json").write_text(json.dumps(doc, indent=1))


def load_scene(directory):
    directory = Path(directory)
    doc = json.loads((directory / "scene.json").read_text())
    scan = load_grid(directory / doc["scan_grid"])
    meshes = {}
    dfs = {}
    for cad in doc["cads"]:
        meshes[cad["cad_id"]] = TriangleMesh(
            np.asarray(cad["vertices"], dtype=float),
            np.asarray(cad["triangles"], dtype=int), cad["category"])
        dfs[cad["cad_id"]] = load_grid(directory / cad["df_grid"])
    instances = [PlacedModel(
        m["cad_id"], m["category"], _pose_from_json(m["pose"]),
        _sym_from_json(m["sym"]),
        [(np.asarray(p["cad"], dtype=float), np.asarray(p["scan"], dtype=float))
         for p in m["keypoint_pairs"]],
    ) for m in doc["placed_models"]]
    return SceneData(doc["scene_id"], scan, instances, meshes, dfs)


# ---------------------------------------------------------------------------
# Alignments


@dataclass
class AlignedModel:
    cad_id: str
    category: str
    pose: np.ndarray
    cost: float = 0.0
    confidence: float = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(4, 4)


def save_alignments(scene_id, aligned, path):
    doc = {
        "scene_id": scene_id,
        "aligned_models": [{
            "cad_id": a.cad_id,
            "category": a.category,
            "trs": _pose_to_json(a.pose),
            "cost": a.cost,
            "confidence": a.confidence,
        } for a in aligned],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_alignments(path):
    doc = json.loads(Path(path).read_text())
    aligned = [AlignedModel(a["cad_id"], a["category"], _pose_from_json(a["trs"]),
                            a.get("cost", 0.0), a.get("confidence"))
               for a in doc["aligned_models"]]
    return doc["scene_id"], aligned


# ---------------------------------------------------------------------------
# Procedural CAD models


class Generator(Enum):
    BOX = "box"
    CYLINDER = "cylinder"
    CHAIR_LIKE = "chair_like"
    TABLE_LIKE = "table_like"
    L_SHELF = "l_shelf"


GENERATOR_CATEGORY = {
    Generator.BOX: "cabinet",
    Generator.CYLINDER: "trash bin",
    Generator.CHAIR_LIKE: "chair",
    Generator.TABLE_LIKE: "table",
    Generator.L_SHELF: "bookshelf",
}

GENERATOR_SYMMETRY = {
    Generator.BOX: Symmetry.C2,
    Generator.CYLINDER: Symmetry.CINF,
    Generator.CHAIR_LIKE: Symmetry.NONE,
    Generator.TABLE_LIKE: Symmetry.C2,
    Generator.L_SHELF: Symmetry.NONE,
}


@dataclass
class ProceduralModel:
    generator: Generator
    seed: int = 0
    size_range: tuple = (0.4, 0.8)  # overall extent bounds, meters


def _box(center, size):
    """Axis-aligned cuboid as 8 vertices / 12 triangles."""
    c = np.asarray(center, dtype=float)
    h = np.asarray(size, dtype=float) / 2.0
    v = np.array([[x, y, z] for x in (-h[0], h[0]) for y in (-h[1], h[1])
                  for z in (-h[2], h[2])]) + c
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # x faces
        (0, 4, 5, 1), (2, 3, 7, 6),  # y faces
        (0, 2, 6, 4), (1, 5, 7, 3),  # z faces
    ]
    tris = []
    for a, b, c_, d in quads:
        tris.append((a, b, c_))
        tris.append((a, c_, d))
    return v, np.array(tris)


def _merge(parts):
    verts = []
    tris = []
    off = 0
    for v, t in parts:
        verts.append(v)
        tris.append(t + off)
        off += len(v)
    return np.vstack(verts), np.vstack(tris)


def _centered(verts, tris, category):
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    return TriangleMesh(verts - (lo + hi) / 2.0, tris, category)


def build_mesh(model: ProceduralModel):
    """Deterministic procedural mesh for a generator and seed, centered so
    its AABB midpoint is the model-space origin (the symmetry axis is +y
    through the origin)."""
    rng = np.random.default_rng(model.seed)
    lo, hi = model.size_range
    ext = rng.uniform(lo, hi, size=3)
    g = model.generator
    cat = GENERATOR_CATEGORY[g]
    if g is Generator.BOX:
        parts = [_box((0, 0, 0), ext)]
    elif g is Generator.CYLINDER:
        r = ext[0] / 2.0
        parts = [_cylinder(r, ext[1], segments=16)]
    elif g is Generator.CHAIR_LIKE:
        w, h, d = ext
        seat_y = 0.45 * h
        seat = _box((0, seat_y, 0), (w, 0.14 * h, d))
        back = _box((0, seat_y + 0.3 * h, -d / 2 + 0.07 * d),
                    (w, 0.6 * h, 0.14 * d))
        legs = [_box((sx * (w / 2 - 0.09 * w), seat_y / 2, sz * (d / 2 - 0.09 * d)),
                     (0.18 * w, seat_y, 0.18 * d))
                for sx in (-1, 1) for sz in (-1, 1)]
        parts = [seat, back] + legs
    elif g is Generator.TABLE_LIKE:
        w, h, d = ext[0] * 1.4, ext[1], ext[2] * 1.4
        top = _box((0, h - 0.07 * h, 0), (w, 0.14 * h, d))
        legs = [_box((sx * (w / 2 - 0.08 * w), (h - 0.14 * h) / 2,
                      sz * (d / 2 - 0.08 * d)),
                     (0.16 * w, h - 0.14 * h, 0.16 * d))
                for sx in (-1, 1) for sz in (-1, 1)]
        parts = [top] + legs
    else:  # L_SHELF
        w, h, d = ext[0], ext[1] * 1.5, ext[2] * 0.6
        upright = _box((-w / 2 + 0.1 * w, 0, 0), (0.2 * w, h, d))
        shelf = _box((0.1 * w, h / 2 - 0.1 * h, 0), (w, 0.2 * h, d))
        base = _box((0.1 * w, -h / 2 + 0.1 * h, 0), (w, 0.2 * h, d))
        parts = [upright, shelf, base]
    verts, tris = _merge(parts)
    return _centered(verts, tris, cat)


def _cylinder(radius, height, segments=16):
    ang = np.arange(segments) * (2.0 * np.pi / segments)
    ring = np.stack([radius * np.cos(ang), np.zeros(segments),
                     radius * np.sin(ang)], axis=1)
    bot = ring + np.array([0, -height / 2, 0])
    top = ring + np.array([0, height / 2, 0])
    verts = np.vstack([bot, top,
                       [[0, -height / 2, 0]], [[0, height / 2, 0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append((i, j, segments + i))
        tris.append((j, segments + j, segments + i))
        tris.append((cb, j, i))
        tris.append((ct, segments + i, segments + j))
    return verts, np.array(tris)


# ---------------------------------------------------------------------------
# Depth rendering


def render_depth(meshes, width, height, fx, fy, cx, cy, camera_to_world):
    """Per-pixel nearest ray-triangle z-depth over a list of meshes; misses
    are 0."""
    cam = np.asarray(camera_to_world, dtype=float)
    R = cam[:3, :3]
    origin = cam[:3, 3]
    u = np.arange(width)
    v = np.arange(height)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu, dtype=float)],
                        axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ R.T  # z-depth equals the ray parameter t
    depth = np.full(len(dirs), np.inf)

    for mesh in meshes:
        tris = mesh.vertices[mesh.triangles]
        if len(tris) == 0:
            continue
        # cull rays outside the mesh's projected AABB: each object only
        # covers a small part of the image
        lo, hi = mesh.aabb()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        cc = (corners - origin) @ R  # camera coords
        if np.all(cc[:, 2] <= 1e-6):
            continue  # entirely behind the camera
        if np.any(cc[:, 2] <= 1e-6):
            mask = slice(None)  # straddles the image plane; test all rays
        else:
            us = fx * cc[:, 0] / cc[:, 2] + cx
            vs = fy * cc[:, 1] / cc[:, 2] + cy
            u0 = max(int(np.floor(us.min())) - 1, 0)
            u1 = min(int(np.ceil(us.max())) + 1, width - 1)
            v0 = max(int(np.floor(vs.min())) - 1, 0)
            v1 = min(int(np.ceil(vs.max())) + 1, height - 1)
            if u0 > u1 or v0 > v1:
                continue
            box = np.zeros((height, width), dtype=bool)
            box[v0:v1 + 1, u0:u1 + 1] = True
            mask = box.reshape(-1)
        sub = depth[mask]
        _raycast_chunk(origin, dirs[mask], tris, sub)
        depth[mask] = sub
    depth[~np.isfinite(depth)] = 0.0
    return DepthImage(width, height, fx, fy, cx, cy,
                      depth.reshape(height, width), cam)


def _raycast_chunk(origin, dirs, tri, depth):
    """Plane-intersection ray casting for all rays against a chunk of
    triangles; updates the running minimum ray parameter in place.

    Each triangle's normal and barycentric metric are precomputed so the
    per-ray work reduces to three (rays x triangles) matrix products,
    avoiding the per-ray cross products of Moller-Trumbore.
    """
    # float32 throughout: the (rays x triangles) intermediates are memory
    # bandwidth bound and depth precision stays well below the TSDF noise
    dirs = np.asarray(dirs, dtype=np.float32)
    tri = np.asarray(tri, dtype=np.float32)
    origin = np.asarray(origin, dtype=np.float32)
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    n = np.cross(e1, e2)  # (T, 3), unnormalized
    # barycentric metric (first fundamental form) inverse, per triangle
    g11 = np.einsum("tk,tk->t", e1, e1)
    g12 = np.einsum("tk,tk->t", e1, e2)
    g22 = np.einsum("tk,tk->t", e2, e2)
    det_g = g11 * g22 - g12 * g12
    ok_t = det_g > 1e-14
    inv_det_g = np.where(ok_t, 1.0 / np.where(ok_t, det_g, 1.0), 0.0)

    s = origin[None, :] - v0  # (T, 3)
    num = -np.einsum("tk,tk->t", s, n)  # (T,)
    den = dirs @ n.T  # (N, T)
    ok = ok_t[None, :] & (np.abs(den) > 1e-9)
    t = np.where(ok, num[None, :] / np.where(ok, den, 1.0), np.inf)
    # hit point offset from v0: w = s + t * d; barycentrics via dot products,
    # each a single matmul plus broadcasting
    se1 = np.einsum("tk,tk->t", s, e1)
    se2 = np.einsum("tk,tk->t", s, e2)
    de1 = dirs @ e1.T  # (N, T)
    de2 = dirs @ e2.T
    with np.errstate(invalid="ignore"):  # inf * 0 for masked-out rays
        we1 = se1[None, :] + t * de1
        we2 = se2[None, :] + t * de2
        u = (g22 * we1 - g12 * we2) * inv_det_g
        v = (g11 * we2 - g12 * we1) * inv_det_g
        eps = 1e-9
        hit = (ok & (t > 1e-6)
               & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps))
    t = np.where(hit, t, np.inf)
    np.minimum(depth, t.min(axis=1), out=depth)


# ---------------------------------------------------------------------------
# Scene generation


class PlacementError(RuntimeError):
    pass


DEFAULT_GENERATORS = (Generator.CHAIR_LIKE, Generator.TABLE_LIKE,
                      Generator.BOX, Generator.CYLINDER, Generator.L_SHELF)


def _look_at(eye, target, up=(0.0, 1.0, 0.0)):
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = fwd
    m[:3, 3] = eye
    return m


def _model_obb(mesh: TriangleMesh, pose):
    lo, hi = mesh.aabb()
    m = np.eye(4)
    m[:3, :3] = np.diag(np.maximum(hi - lo, 1e-6))
    m[:3, 3] = (lo + hi) / 2.0
    return OrientedBox(np.asarray(pose) @ m)


def _cull_below(mesh: TriangleMesh, y_cut):
    """Drop triangles lying entirely below the world height ``y_cut``."""
    tri_y = mesh.vertices[mesh.triangles][:, :, 1]
    keep = tri_y.max(axis=1) >= y_cut
    if not np.any(keep):
        return None
    return TriangleMesh(mesh.vertices, mesh.triangles[keep], mesh.category)


def generate_scene(models=4, generators=DEFAULT_GENERATORS, extent=2.5,
                   noise_sigma=0.0, seed=0, voxel_size=0.03, truncation=0.15,
                   views=32, image_size=(112, 84), keypoints_per_model=8,
                   scale_range=(0.8, 1.2), size_range=(0.4, 0.8),
                   leg_occlusion_height=None):
    """Procedural scene with ground truth: place models with random yaw,
    translation and per-axis scale, render >= 32 noisy depth views around
    the scene, and fuse them into a signed DF scan grid.

    Returns a SceneData whose instances carry ground-truth poses, symmetry
    tags, and >= 6 keypoint pairs per object.

    ``leg_occlusion_height`` (world meters) optionally omits geometry below
    that height from the rendered fusion views, simulating partial scans
    with missing legs; ground truth is unaffected.
    """
    rng = np.random.default_rng(seed)
    instances = []
    meshes = {}
    dfs = {}
    placed_boxes = []
    world_meshes = []

    for i in range(models):
        gen = generators[int(rng.integers(len(generators)))]
        cad_id = f"{gen.value}_{i:02d}"
        mesh = build_mesh(ProceduralModel(gen, seed=int(rng.integers(2**31)),
                                          size_range=size_range))
        sym = SymmetryTag(GENERATOR_SYMMETRY[gen])
        scale = rng.uniform(*scale_range, size=3)
        if sym.kind is Symmetry.CINF:
            scale[2] = scale[0]  # keep the continuous symmetry physical
        lo, hi = mesh.aabb()
        margin = 0.6 * float(np.max(hi - lo))
        if extent <= 2 * margin:
            raise PlacementError(
                f"extent {extent} too small for model {i} "
                f"(needs > {2 * margin:.2f})")
        for attempt in range(1000):
            yaw = rng.uniform(0, 2 * np.pi)
            R = so3_exp(np.array([0.0, yaw, 0.0]))
            tx, tz = rng.uniform(-extent / 2 + margin, extent / 2 - margin, size=2)
            ty = 0.0  # objects float so every face is observable from orbit
            pose = np.eye(4)
            pose[:3, :3] = R * scale[np.newaxis, :]
            pose[:3, 3] = (tx, ty, tz)
            box = _model_obb(mesh, pose)
            if all(obb_iou(box, other) < 1e-12 for other in placed_boxes):
                break
        else:
            raise PlacementError(f"could not place model {i} in extent {extent}")
        placed_boxes.append(box)
        meshes[cad_id] = mesh
        dfs[cad_id] = mesh_to_df(mesh, (32, 32, 32),
                                 padding=0.12 * float(np.max(hi - lo)))
        world_meshes.append(mesh.transformed(pose))
        n_kp = max(6, min(keypoints_per_model, len(mesh.vertices)))
        vidx = rng.choice(len(mesh.vertices), size=n_kp, replace=False)
        pairs = [(mesh.vertices[j].copy(),
                  pose[:3, :3] @ mesh.vertices[j] + pose[:3, 3]) for j in vidx]
        instances.append(PlacedModel(cad_id, mesh.category, pose, sym, pairs))

    # scan grid over the placed geometry
    if world_meshes:
        los = np.min([m.aabb()[0] for m in world_meshes], axis=0)
        his = np.max([m.aabb()[1] for m in world_meshes], axis=0)
    else:
        los = np.full(3, -extent / 2)
        his = np.full(3, extent / 2)
    pad = truncation + 2 * voxel_size
    origin = los - pad
    dims = tuple(int(np.ceil(e / voxel_size)) + 1 for e in (his + pad - origin))
    scan = VoxelGrid.empty(dims, voxel_size, origin, truncation,
                           GridKind.SIGNED_DF, fill=truncation)
    weights = VoxelGrid.empty(dims, voxel_size, origin, 0.0, GridKind.WEIGHT)

    # fusion only needs voxels near geometry: anything farther than the
    # truncation band from every surface keeps the +truncation fill
    margin = truncation + 5.0 * max(noise_sigma, 0.0) + 2 * voxel_size
    near = np.zeros(dims, dtype=bool)
    for m in world_meshes:
        m_lo, m_hi = m.aabb()
        i0 = np.maximum(np.floor((m_lo - margin - origin) / voxel_size), 0)
        i1 = np.minimum(np.ceil((m_hi + margin - origin) / voxel_size),
                        np.asarray(dims) - 1)
        i0 = i0.astype(int)
        i1 = i1.astype(int)
        near[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1] = True
    active = np.flatnonzero(near.reshape(-1))

    render_meshes = world_meshes
    if leg_occlusion_height is not None:
        render_meshes = [m for m in (_cull_below(m, leg_occlusion_height)
                                     for m in world_meshes) if m is not None]

    center = (los + his) / 2.0
    radius = 0.6 * float(np.linalg.norm(his - los)) + 0.8
    width, height = image_size
    fx = fy = 0.9 * width
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    elevations = (0.35, -0.35, 0.95, -0.95)  # both hemispheres: all faces observed
    for k in range(views):
        az = 2.0 * np.pi * k / views
        elev = elevations[k % len(elevations)]
        eye = center + radius * np.array([np.cos(az) * np.cos(elev),
                                          np.sin(elev),
                                          np.sin(az) * np.cos(elev)])
        cam = _look_at(eye, center)
        img = render_depth(render_meshes, width, height, fx, fy, cx, cy, cam)
        if noise_sigma > 0:
            noise = rng.normal(0.0, noise_sigma, img.depth.shape)
            img.depth = np.where(img.depth > 0,
                                 np.maximum(img.depth + noise, 1e-3), 0.0)
        fuse_depth(scan, weights, img, active=active)
    return SceneData(f"scene_{seed:08d}", scan, instances, meshes, dfs)
