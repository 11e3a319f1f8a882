"""Correspondence heatmaps over the CAD domain, the associated losses, the
oracle correspondence provider, training-sample assembly, and Otsu-based
correspondence filtering.

The oracle provider mirrors the training-data generation path: a scan
keypoint near a ground-truth-aligned model is mapped into that model's voxel
grid and splatted (with its symmetry orbit) as an unnormalized Gaussian with
peak exactly 1.  A learned predictor can be slotted in anywhere a heatmap
provider is expected; nothing downstream assumes the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .geometry import Symmetry, SymmetryTag, decompose, so3_exp
from .grids import GridKind, VoxelGrid

CAD_DIMS = (32, 32, 32)


@dataclass
class Heatmap:
    """Per-voxel correspondence probability over a CAD model's domain."""

    grid: VoxelGrid
    cad_id: str = ""

    def __post_init__(self):
        if self.grid.kind is not GridKind.HEATMAP:
            raise ValueError("heatmap grid must have kind HEATMAP")


@dataclass
class CorrespondencePair:
    scan_point: np.ndarray
    cad_id: str
    heatmap: Heatmap
    compatibility: float
    scale_pred: np.ndarray

    def __post_init__(self):
        self.scan_point = np.asarray(self.scan_point, dtype=float).reshape(3)
        self.scale_pred = np.asarray(self.scale_pred, dtype=float).reshape(3)
        if not 0.0 <= self.compatibility <= 1.0:
            raise ValueError("compatibility must lie in [0, 1]")


class Polarity(Enum):
    POSITIVE = "positive"
    NEGATIVE_RANDOM = "negative_random"
    NEGATIVE_HARD = "negative_hard"


@dataclass
class TrainingSample:
    scan_crop: VoxelGrid  # 64^3 signed DF centered on the keypoint
    cad_df: VoxelGrid  # 32^3 unsigned DF
    target_heatmap: Heatmap
    compat_label: int
    scale_label: np.ndarray
    polarity: Polarity


@dataclass
class SampleSetConfig:
    augmentation_factor: int = 10
    blur_sigma: float = 2.0
    seed: int = 0


# ---------------------------------------------------------------------------
# Target heatmaps


def symmetry_orbit(point, sym: SymmetryTag):
    """Model-space images of a point under its rotational symmetry group.

    The symmetry axis passes through the model-space origin.  Cinf is
    approximated by 36 samples at 10 degree steps.
    """
    point = np.asarray(point, dtype=float)
    if sym is None or sym.kind is Symmetry.NONE:
        return [point]
    if sym.kind is Symmetry.CINF:
        angles = np.arange(36) * (2.0 * np.pi / 36.0)
    else:
        fold = 2 if sym.kind is Symmetry.C2 else 4
        angles = np.arange(fold) * (2.0 * np.pi / fold)
    return [so3_exp(sym.axis * ang) @ point for ang in angles]


def make_target_heatmap(cad_grid: VoxelGrid, cad_keypoint, sym: SymmetryTag = None,
                        sigma=2.0, cad_id=""):
    """Splat a model-space keypoint (and its symmetry orbit) into the CAD grid.

    Each orbit point is projected to its nearest voxel; the value at voxel x
    is max over splats of exp(-||x - k||^2 / (2 sigma^2)) in voxel units, so
    the peak is exactly 1.
    """
    dims = np.asarray(cad_grid.dims)
    u0 = cad_grid.world_to_voxel(np.asarray(cad_keypoint, dtype=float))
    if np.any(u0 < -0.5) or np.any(u0 > dims - 0.5):
        raise ValueError("keypoint outside the CAD grid")

    centers = []
    for img in symmetry_orbit(cad_keypoint, sym):
        u = np.round(cad_grid.world_to_voxel(img))
        if np.all(u >= 0) and np.all(u <= dims - 1):
            centers.append(u)
    values = np.zeros(cad_grid.dims)
    reach = int(np.ceil(4.0 * sigma))  # beyond 4 sigma the splat is ~0
    for k in centers:
        lo = np.maximum(k.astype(int) - reach, 0)
        hi = np.minimum(k.astype(int) + reach + 1, dims)
        ax = [np.arange(lo[i], hi[i]) - k[i] for i in range(3)]
        d2 = (ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2
              + ax[2][None, None, :] ** 2)
        box = values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        np.maximum(box, np.exp(-d2 / (2.0 * sigma**2)), out=box)
    grid = VoxelGrid(cad_grid.dims, cad_grid.voxel_size, cad_grid.origin.copy(),
                     0.0, GridKind.HEATMAP, values)
    return Heatmap(grid, cad_id)


def zero_heatmap(cad_grid: VoxelGrid, cad_id=""):
    grid = VoxelGrid(cad_grid.dims, cad_grid.voxel_size, cad_grid.origin.copy(),
                     0.0, GridKind.HEATMAP, np.zeros(cad_grid.dims))
    return Heatmap(grid, cad_id)


# ---------------------------------------------------------------------------
# Heatmap combination and losses


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def combine_heatmaps(raw, like: VoxelGrid = None, cad_id=""):
    """Combine a raw network output S into the final heatmap H = H1 * H2,
    with H1 = sigmoid(S) element-wise and H2 = softmax over the whole domain."""
    raw = np.asarray(raw, dtype=float)
    h = np.clip(_sigmoid(raw) * _softmax(raw), 0.0, 1.0)
    if like is None:
        like = VoxelGrid.empty(raw.shape, 1.0, np.zeros(3), kind=GridKind.HEATMAP)
    grid = VoxelGrid(raw.shape, like.voxel_size, like.origin.copy(), 0.0,
                     GridKind.HEATMAP, h)
    return Heatmap(grid, cad_id)


_LOG_EPS = 1e-12
POSITIVE_WEIGHT = 64.0
NLL_WEIGHT = 64.0


def loss_heatmap(raw, target):
    """Weighted BCE + NLL heatmap loss.

    Positive voxels (target > 1e-3, i.e. anywhere the blurred target carries
    mass) get BCE weight 64; the NLL term weights every voxel by 64.
    """
    raw = np.asarray(raw, dtype=float)
    h_gt = target.grid.values if isinstance(target, Heatmap) else np.asarray(target)
    if raw.shape != h_gt.shape:
        raise ValueError("shape mismatch between raw output and target")
    w = np.where(h_gt > 1e-3, POSITIVE_WEIGHT, 1.0)
    h1 = _sigmoid(raw)
    bce = -(h_gt * np.log(np.maximum(h1, _LOG_EPS))
            + (1.0 - h_gt) * np.log(np.maximum(1.0 - h1, _LOG_EPS)))
    h2 = _softmax(raw)
    nll = -h_gt * np.log(np.maximum(h2, _LOG_EPS))
    return float(np.sum(w * bce) + NLL_WEIGHT * np.sum(nll))


def loss_compat(x, label):
    """BCE on sigmoid(x) against a {0, 1} compatibility label."""
    p = _sigmoid(float(x))
    label = float(label)
    return float(-(label * np.log(max(p, _LOG_EPS))
                   + (1.0 - label) * np.log(max(1.0 - p, _LOG_EPS))))


def loss_scale(x, s_gt):
    return float(np.sum((np.asarray(x, dtype=float) - np.asarray(s_gt, dtype=float))**2))


def loss_total(l_heatmap, l_compat, l_scale, positive):
    """Combined loss 1.0*L_H + 0.1*L_compat + 0.2*L_scale; the heatmap and
    scale terms are masked out for negative samples."""
    mask = 1.0 if positive else 0.0
    return 1.0 * mask * l_heatmap + 0.1 * l_compat + 0.2 * mask * l_scale


# ---------------------------------------------------------------------------
# Oracle correspondences


def oracle_correspondences(scan: VoxelGrid, keypoints, instances, cad_dfs,
                           sigma=2.0, surface_dist_voxels=3.0):
    """Build correspondence pairs from ground truth, mirroring the
    training-data generation path.

    ``instances`` is a sequence of objects with attributes
    (cad_id, category, pose, sym) where pose maps model space to world.
    ``cad_dfs`` maps cad_id -> VoxelGrid[UnsignedDF].

    A keypoint within ``surface_dist_voxels * scan.voxel_size`` of a model's
    surface yields a positive pair against the nearest such model; keypoints
    matching nothing yield compatibility-0 pairs against every CAD.
    """
    from .grids import sample_trilinear_batch  # local to avoid cycle at import time

    instances = list(instances)
    pts = np.array([np.asarray(getattr(kp, "position", kp), dtype=float)
                    for kp in keypoints]).reshape(-1, 3)
    n = len(pts)
    max_dist = surface_dist_voxels * scan.voxel_size

    # distance of every keypoint to every instance's surface, world meters
    dists = np.full((len(instances), n), np.inf)
    model_pts = np.empty((len(instances), n, 3))
    scales = []
    for i, inst in enumerate(instances):
        pose = np.asarray(inst.pose, dtype=float)
        inv = np.linalg.inv(pose)
        q = pts @ inv[:3, :3].T + inv[:3, 3]
        model_pts[i] = q
        df = cad_dfs[inst.cad_id]
        inside = np.all((q >= df.origin)
                        & (q <= df.origin + (np.asarray(df.dims) - 1)
                           * df.voxel_size), axis=1)
        _, _, scale = decompose(pose)
        scales.append(scale)
        if np.any(inside):
            d_model, _ = sample_trilinear_batch(df, q[inside])
            dists[i, inside] = d_model * float(np.mean(scale))

    shared_zero = {cad_id: zero_heatmap(df, cad_id)
                   for cad_id, df in cad_dfs.items()}
    pairs = []
    best = np.argmin(dists, axis=0) if instances else np.zeros(n, dtype=int)
    for j in range(n):
        i = int(best[j])
        if instances and dists[i, j] < max_dist:
            inst = instances[i]
            df = cad_dfs[inst.cad_id]
            heatmap = make_target_heatmap(df, model_pts[i, j], inst.sym,
                                          sigma=sigma, cad_id=inst.cad_id)
            pairs.append(CorrespondencePair(pts[j], inst.cad_id, heatmap, 1.0,
                                            scales[i]))
        else:
            for cad_id in cad_dfs:
                pairs.append(CorrespondencePair(
                    pts[j], cad_id, shared_zero[cad_id], 0.0, np.ones(3)))
    return pairs


# ---------------------------------------------------------------------------
# Training samples


def extract_crop(scan: VoxelGrid, center_world, size=64):
    """Cut a size^3 sub-grid centered on a world point; outside voxels are
    padded with +truncation (free space)."""
    c = np.round(scan.world_to_voxel(np.asarray(center_world, dtype=float))).astype(int)
    half = size // 2
    lo = c - half
    pad_val = scan.truncation if scan.truncation > 0 else 0.0
    out = np.full((size, size, size), pad_val)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(lo + size, scan.dims)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - lo
        dst_hi = dst_lo + (src_hi - src_lo)
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            scan.values[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    origin = scan.voxel_to_world(lo)
    return VoxelGrid((size, size, size), scan.voxel_size, origin, scan.truncation,
                     GridKind.SIGNED_DF, out)


def generate_training_samples(scenes, cfg: SampleSetConfig = None):
    """Assemble positive and negative training samples from annotated scenes.

    Each scene must expose: scan (VoxelGrid), instances (with cad_id,
    category, pose, sym, keypoint_pairs), cad_meshes and cad_dfs dicts.
    Positives = annotated + augmentation_factor surface-sampled pairs per
    annotation; negatives = one random-point/random-CAD plus one
    keypoint/wrong-class-CAD per positive (overall ratio 1:2).
    """
    from .keypoints import sample_surface_pairs

    if cfg is None:
        cfg = SampleSetConfig()
    rng = np.random.default_rng(cfg.seed)
    positives = []
    annotated = []  # (scene, instance, scan keypoint) for hard negatives

    for scene in scenes:
        if len(scene.instances) < 1:
            raise ValueError(f"scene {getattr(scene, 'scene_id', '?')} has no "
                             "aligned models")
        for inst in scene.instances:
            df = scene.cad_dfs[inst.cad_id]
            _, _, gt_scale = decompose(inst.pose)
            ann = [(np.asarray(cp, dtype=float), np.asarray(sp, dtype=float))
                   for cp, sp in inst.keypoint_pairs]
            aug = sample_surface_pairs(
                scene.cad_meshes[inst.cad_id], scene.scan, inst.pose,
                cfg.augmentation_factor * len(ann), rng=rng)
            for cad_pt, scan_pt in ann + list(aug):
                heatmap = make_target_heatmap(df, cad_pt, inst.sym,
                                              sigma=cfg.blur_sigma, cad_id=inst.cad_id)
                positives.append(TrainingSample(
                    extract_crop(scene.scan, scan_pt), df, heatmap, 1, gt_scale,
                    Polarity.POSITIVE))
            for _, scan_pt in ann:
                annotated.append((scene, inst, scan_pt))

    n_p = len(positives)
    samples = list(positives)
    all_cads = [(scene, cad_id) for scene in scenes for cad_id in scene.cad_dfs]
    categories = {cad_id: _category_of(scene, cad_id)
                  for scene, cad_id in all_cads}
    if len(set(categories.values())) < 2:
        raise ValueError("hard negatives require at least two CAD categories")

    # negatives mode 1: random scan voxel, random CAD
    for _ in range(n_p):
        scene, cad_id = all_cads[rng.integers(len(all_cads))]
        idx = rng.integers(0, np.asarray(scene.scan.dims))
        point = scene.scan.voxel_to_world(idx)
        df = scene.cad_dfs[cad_id]
        samples.append(TrainingSample(
            extract_crop(scene.scan, point), df, zero_heatmap(df, cad_id), 0,
            np.ones(3), Polarity.NEGATIVE_RANDOM))

    # negatives mode 2: annotated keypoint, wrong-class CAD
    for _ in range(n_p):
        scene, inst, scan_pt = annotated[rng.integers(len(annotated))]
        wrong = [(s, cid) for s, cid in all_cads
                 if categories[cid] != inst.category]
        s, cad_id = wrong[rng.integers(len(wrong))]
        df = s.cad_dfs[cad_id]
        samples.append(TrainingSample(
            extract_crop(scene.scan, scan_pt), df, zero_heatmap(df, cad_id), 0,
            np.ones(3), Polarity.NEGATIVE_HARD))
    return samples


def _category_of(scene, cad_id):
    for inst in scene.instances:
        if inst.cad_id == cad_id:
            return inst.category
    return scene.cad_meshes[cad_id].category


# ---------------------------------------------------------------------------
# Otsu filtering


class OtsuResult(NamedTuple):
    threshold: float
    degenerate: bool


def otsu_threshold(scores):
    """256-bin Otsu threshold over scores in [0, 1].

    Ties break toward the lower threshold.  All-identical scores are flagged
    degenerate and return that value.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size < 2:
        raise ValueError("otsu_threshold needs at least 2 scores")
    if np.all(scores == scores[0]):
        return OtsuResult(float(scores[0]), True)
    nbins = 256
    hist, edges = np.histogram(np.clip(scores, 0.0, 1.0), bins=nbins, range=(0.0, 1.0))
    total = hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)[:-1]
    w1 = total - w0
    cum_mean = np.cumsum(hist * centers)[:-1]
    mean_total = np.sum(hist * centers)
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(cum_mean, w0, out=np.zeros(nbins - 1), where=valid)
    mu1 = np.divide(mean_total - cum_mean, w1, out=np.zeros(nbins - 1), where=valid)
    var_between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    t = int(np.argmax(var_between))  # first max = lower threshold on ties
    return OtsuResult(float(edges[t + 1]), False)


def filter_correspondences(pairs):
    """Keep pairs whose compatibility exceeds the Otsu threshold over all
    compatibilities; degenerate (all-equal) score sets keep everything."""
    pairs = list(pairs)
    if len(pairs) < 2:
        return pairs
    result = otsu_threshold([p.compatibility for p in pairs])
    if result.degenerate:
        return pairs
    return [p for p in pairs if p.compatibility > result.threshold]
