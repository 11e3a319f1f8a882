"""Candidate confidence scoring, pruning, and the greedy symmetry-aware
alignment benchmark with threshold sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (SymmetryTag, decompose, rotation_error, scale_error,
                       translation_error)
from .grids import GridKind, VoxelGrid, sample_trilinear_batch

TABLE_CLASSES = ["bath", "bookshelf", "cabinet", "chair", "display", "sofa",
                 "table", "trash bin", "other"]


@dataclass
class GroundTruthEntry:
    cad_id: str
    category: str
    pose: np.ndarray  # 4x4, model -> world
    sym: SymmetryTag = field(default_factory=SymmetryTag)
    keypoint_pairs: list = field(default_factory=list)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(4, 4)
        if not self.category:
            raise ValueError("category must be non-empty")
        decompose(self.pose)  # must be decomposable


@dataclass
class EvalConfig:
    t_translation: float = 0.20  # meters
    t_rotation: float = 20.0  # degrees
    t_scale: float = 20.0  # percent
    sort_by_confidence: bool = False

    def __post_init__(self):
        if min(self.t_translation, self.t_rotation, self.t_scale) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class EvalResult:
    per_class: dict  # category -> accuracy percent
    instance_accuracy: float
    class_accuracy: float
    verdicts: list  # (index, matched: bool, (e_t, e_r, e_s) or None)
    n_candidates: int
    n_positive: int


# ---------------------------------------------------------------------------
# Confidence and pruning


def confidence(pose, scan: VoxelGrid, cad: VoxelGrid, tau=0.15):
    """Free-space agreement of an aligned CAD model with the scan SDF.

    Occupied CAD voxels (distance below one voxel size) are mapped through
    the pose into the scan; c is the mean squared scan SDF over those that
    land in seen space (sdf > -tau).  Lower is better.  Also returns the
    fraction of occupied voxels landing in seen space.
    """
    if cad.kind is not GridKind.UNSIGNED_DF:
        raise ValueError("cad grid must be an unsigned DF")
    occ = cad.values < cad.voxel_size
    if not np.any(occ):
        raise ValueError("CAD grid has no occupied voxels")
    idx = np.argwhere(occ)
    model_pts = cad.voxel_to_world(idx)
    pose = np.asarray(pose, dtype=float)
    world = model_pts @ pose[:3, :3].T + pose[:3, 3]

    u = scan.world_to_voxel(world)
    in_grid = np.all((u >= 0) & (u <= np.asarray(scan.dims) - 1), axis=1)
    sdf = np.zeros(len(world))
    if np.any(in_grid):
        vals, _ = sample_trilinear_batch(scan, world[in_grid])
        sdf[in_grid] = vals
    seen = in_grid & (sdf > -tau)
    c = float(np.sum(np.where(seen, sdf, 0.0) ** 2) / len(model_pts))
    return c, float(np.mean(seen))


def prune(candidates, scan: VoxelGrid, cad_dfs, tau=0.15, min_seen=0.30,
          min_separation=0.3):
    """Drop candidates seen too little, rank the rest by confidence (lower
    is better), and drop any candidate within ``min_separation`` meters of a
    better-ranked kept one."""
    scored = []
    for cand in candidates:
        c, seen = confidence(cand.pose, scan, cad_dfs[cand.cad_id], tau=tau)
        cand.confidence = c
        cand.seen_fraction = seen
        if seen >= min_seen:
            scored.append(cand)
    scored.sort(key=lambda c: c.confidence)
    kept = []
    for cand in scored:
        t = np.asarray(cand.pose)[:3, 3]
        if any(np.linalg.norm(t - np.asarray(k.pose)[:3, 3]) < min_separation
               for k in kept):
            continue
        kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# Greedy evaluation (order-sensitive by specification)


def pose_errors(pose_pred, pose_gt, sym: SymmetryTag):
    tp, qp, sp = decompose(pose_pred)
    tg, qg, sg = decompose(pose_gt)
    return (translation_error(tp, tg), rotation_error(qp, qg, sym),
            scale_error(sp, sg))


def evaluate(aligned, gt, cfg: EvalConfig = None):
    """Greedy benchmark: each candidate (cad_id, category, pose) in input
    order consumes the first remaining ground-truth entry of equal category
    within all three error thresholds."""
    if cfg is None:
        cfg = EvalConfig()
    aligned = list(aligned)
    remaining = list(gt)
    verdicts = []
    positives_by_class = {}
    counts_by_class = {}
    n_pos = 0
    for i, (cad_id, category, pose) in enumerate(aligned):
        counts_by_class[category] = counts_by_class.get(category, 0) + 1
        matched = False
        errors = None
        for k, entry in enumerate(remaining):
            if entry.category != category:
                continue
            e = pose_errors(pose, entry.pose, entry.sym)
            if (e[0] <= cfg.t_translation and e[1] <= cfg.t_rotation
                    and e[2] <= cfg.t_scale):
                matched = True
                errors = e
                del remaining[k]  # by index: entries hold arrays, == is unusable
                break
        if matched:
            n_pos += 1
            positives_by_class[category] = positives_by_class.get(category, 0) + 1
        verdicts.append((i, matched, errors))

    n = len(aligned)
    classes = set(counts_by_class) | {e.category for e in gt}
    per_class = {}
    for c in sorted(classes):
        nc = counts_by_class.get(c, 0)
        per_class[c] = 100.0 * positives_by_class.get(c, 0) / nc if nc else 0.0
    instance = 100.0 * n_pos / n if n else 0.0
    class_avg = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(per_class, instance, class_avg, verdicts, n, n_pos)


def evaluate_candidates(candidates, categories, gt, cfg: EvalConfig = None):
    """Evaluate AlignmentCandidate objects; with cfg.sort_by_confidence the
    candidates are pre-sorted best-confidence-first."""
    if cfg is None:
        cfg = EvalConfig()
    cands = list(candidates)
    if cfg.sort_by_confidence:
        cands.sort(key=lambda c: np.inf if c.confidence is None else c.confidence)
    aligned = [(c.cad_id, categories[c.cad_id], c.pose) for c in cands]
    return evaluate(aligned, gt, cfg)


def threshold_sweep(aligned, gt, block, thresholds, cfg: EvalConfig = None):
    """Accuracy as one threshold block varies with the other two at their
    defaults; returns a list of (threshold, instance accuracy)."""
    if cfg is None:
        cfg = EvalConfig()
    if block not in ("translation", "rotation", "scale"):
        raise ValueError(f"unknown threshold block: {block}")
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("threshold grid must be sorted ascending")
    curve = []
    for t in thresholds:
        c = replace(cfg, **{f"t_{block}": t})
        curve.append((t, evaluate(aligned, gt, c).instance_accuracy))
    return curve


def format_accuracy_table(result: EvalResult):
    """Per-class CSV rows in the benchmark's column layout; categories
    outside the named set aggregate into 'other'."""
    cols = []
    for c in TABLE_CLASSES[:-1]:
        cols.append(result.per_class.get(c, 0.0))
    other = [v for k, v in result.per_class.items() if k not in TABLE_CLASSES[:-1]]
    cols.append(float(np.mean(other)) if other else 0.0)
    header = TABLE_CLASSES + ["class avg.", "avg."]
    values = cols + [result.class_accuracy, result.instance_accuracy]
    return header, values
