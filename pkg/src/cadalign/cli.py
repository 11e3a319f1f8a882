"""Command-line pipeline: scene generation, voxelization, keypoints,
correspondences, alignment, pruning, evaluation, and threshold sweeps.

Every subcommand validates its inputs, writes a resolved-config snapshot
next to its outputs, and exits 0 on success, 2 on a validation error, and 3
on a numerical failure.  Outputs are deterministic for fixed seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import benchmark, correspond, io_scenes, keypoints, solvers
from .correspond import CorrespondencePair, Heatmap
from .geometry import pose_to_matrix
from .grids import GridKind, TriangleMesh, VoxelGrid, mesh_to_df
from .io_scenes import AlignedModel, GridFormatError, load_scene

VALIDATION_ERRORS = (ValueError, KeyError, FileNotFoundError, NotADirectoryError,
                     GridFormatError, json.JSONDecodeError)
NUMERICAL_ERRORS = (np.linalg.LinAlgError, FloatingPointError,
                    solvers.DegenerateCorrespondences,
                    keypoints.ExhaustionError, io_scenes.PlacementError)


def _write_snapshot(args, out_path):
    """Resolved-config snapshot next to the subcommand's main output."""
    doc = {k: v for k, v in sorted(vars(args).items())
           if k not in ("func",) and not k.startswith("_")}
    for k, v in doc.items():
        if isinstance(v, Path):
            doc[k] = str(v)
    out_path = Path(out_path)
    snap = out_path / "config.json" if out_path.is_dir() \
        else out_path.with_suffix(out_path.suffix + ".config.json")
    snap.write_text(json.dumps(doc, indent=1, sort_keys=True))


def _load_obj(path):
    """Minimal Wavefront OBJ reader (v/f records, fan triangulation)."""
    verts = []
    tris = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for i in range(1, len(idx) - 1):
                tris.append((idx[0], idx[i], idx[i + 1]))
    if not tris:
        raise ValueError(f"{path}: no faces found")
    return TriangleMesh(np.asarray(verts), np.asarray(tris))


# ---------------------------------------------------------------------------
# Pipeline stages shared between subcommands and the e2e driver


def detect_scene_keypoints(scene, k=0.04, window_radius=2, nms_radius=0.08,
                           max_count=512):
    return keypoints.detect_harris(scene.scan, k=k, window_radius=window_radius,
                                   nms_radius=nms_radius, max_count=max_count)


def oracle_pairs(scene, kps, sigma=2.0, surface_dist_voxels=3.0):
    return correspond.oracle_correspondences(
        scene.scan, kps, scene.instances, scene.cad_dfs, sigma=sigma,
        surface_dist_voxels=surface_dist_voxels)


def align_all(pairs, lambda_s=0.01, pyramid_levels=3, yaw_steps=12,
              jitter=0.0, max_iterations=100, min_pairs=6, jobs=1,
              candidates_per_cad=1, refine_top=3, sym_of=None):
    """Filter correspondences, group by CAD, and run the multi-restart LM
    alignment per CAD; returns candidates merged in sorted cad_id order.

    ``sym_of`` optionally maps cad_id to a SymmetryTag so the solver can
    shrink its restart yaw fan to one symmetry period."""
    sym_of = sym_of or {}
    pairs = correspond.filter_correspondences(pairs)
    groups = {}
    for p in pairs:
        if p.compatibility > 0:
            groups.setdefault(p.cad_id, []).append(p)
    cad_ids = sorted(cid for cid, ps in groups.items() if len(ps) >= min_pairs)
    cfg = solvers.SolverConfig(max_iterations=max_iterations,
                               restart_yaw_steps=yaw_steps,
                               restart_jitter=jitter,
                               refine_top=refine_top)

    def solve(cid):
        problem = solvers.AlignmentProblem(cid, groups[cid], lambda_s=lambda_s,
                                           pyramid_levels=pyramid_levels,
                                           sym=sym_of.get(cid))
        n = len(groups[cid])
        cands = solvers.align_multi(problem, cfg)[:candidates_per_cad]
        # triage can refine only bad seeds; retry exhaustively (wider scale
        # fan, full refinement) when the best fit explains too few
        # correspondences
        if not cands or cands[0].cost > 0.05 * n + 0.5:
            full = replace(cfg, refine_top=8,
                           restart_yaw_steps=max(12, yaw_steps),
                           restart_scales=(0.7, 1.0, 1.3))
            retry = solvers.align_multi(problem, full)[:candidates_per_cad]
            if retry and (not cands or retry[0].cost < cands[0].cost):
                cands = retry
        # abstain rather than emit a pose that explains almost nothing
        if cands and cands[0].cost > 0.3 * n:
            cands = []
        return cands

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_cad = list(pool.map(solve, cad_ids))
    else:
        per_cad = [solve(cid) for cid in cad_ids]
    return [c for cands in per_cad for c in cands]


def ground_truth_of(scene):
    return [benchmark.GroundTruthEntry(m.cad_id, m.category, m.pose, m.sym,
                                       m.keypoint_pairs)
            for m in scene.instances]


def run_e2e(seed, models, noise, extent=None, views=32, jobs=1,
            yaw_steps=12, max_keypoints=512, nms_radius=0.08,
            eval_cfg=None):
    """gen-scene -> oracle correspond -> align -> prune -> evaluate."""
    if extent is None:
        extent = 1.6 + 0.3 * models
    scene = io_scenes.generate_scene(models=models, extent=extent,
                                     noise_sigma=noise, seed=seed, views=views,
                                     size_range=(0.35, 0.6))
    kps = detect_scene_keypoints(scene, nms_radius=nms_radius,
                                 max_count=max_keypoints)
    pairs = oracle_pairs(scene, kps)
    candidates = align_all(pairs, yaw_steps=yaw_steps, jobs=jobs,
                           sym_of={i.cad_id: i.sym for i in scene.instances})
    kept = benchmark.prune(candidates, scene.scan, scene.cad_dfs)
    cfg = eval_cfg or benchmark.EvalConfig(sort_by_confidence=True)
    result = benchmark.evaluate_candidates(kept, scene.categories(),
                                           ground_truth_of(scene), cfg)
    return scene, kept, result


def _write_eval_csv(result, path):
    header, values = benchmark.format_accuracy_table(result)
    lines = [",".join(header),
             ",".join(f"{v:.4f}" for v in values)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Correspondence archives (.npz)


def save_pairs(pairs, path):
    np.savez_compressed(
        path,
        scan_points=np.array([p.scan_point for p in pairs]),
        cad_ids=np.array([p.cad_id for p in pairs]),
        compat=np.array([p.compatibility for p in pairs]),
        scales=np.array([p.scale_pred for p in pairs]),
        heatmaps=np.array([p.heatmap.grid.values for p in pairs],
                          dtype=np.float32),
    )


def load_pairs(path, scene):
    z = np.load(path, allow_pickle=False)
    pairs = []
    for i in range(len(z["cad_ids"])):
        cad_id = str(z["cad_ids"][i])
        geo = scene.cad_dfs[cad_id]
        grid = VoxelGrid(geo.dims, geo.voxel_size, geo.origin.copy(), 0.0,
                         GridKind.HEATMAP, z["heatmaps"][i].astype(float))
        pairs.append(CorrespondencePair(z["scan_points"][i], cad_id,
                                        Heatmap(grid, cad_id),
                                        float(z["compat"][i]), z["scales"][i]))
    return pairs


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_scene(args):
    scene = io_scenes.generate_scene(
        models=args.models, extent=args.extent, noise_sigma=args.noise,
        seed=args.seed, voxel_size=args.voxel_size, truncation=args.truncation,
        views=args.views, leg_occlusion_height=args.leg_occlusion_height)
    io_scenes.save_scene(scene, args.out)
    _write_snapshot(args, args.out)
    print(f"wrote scene {scene.scene_id} with {len(scene.instances)} models "
          f"to {args.out}")
    return 0


def cmd_voxelize(args):
    if args.obj:
        mesh = _load_obj(args.obj)
    else:
        scene = load_scene(args.scene)
        if args.cad_id not in scene.cad_meshes:
            raise ValueError(f"unknown cad_id {args.cad_id!r}; scene has "
                             f"{sorted(scene.cad_meshes)}")
        mesh = scene.cad_meshes[args.cad_id]
    df = mesh_to_df(mesh, dims=(args.dims,) * 3, padding=args.padding)
    io_scenes.save_grid(df, args.out)
    _write_snapshot(args, args.out)
    print(f"wrote {args.dims}^3 distance field to {args.out}")
    return 0


def cmd_keypoints(args):
    if args.grid:
        grid = io_scenes.load_grid(args.grid)
    else:
        grid = load_scene(args.scene).scan
    kps = keypoints.detect_harris(grid, k=args.k, window_radius=args.window_radius,
                                  nms_radius=args.nms_radius,
                                  max_count=args.max_count)
    doc = {"keypoints": [{"position": list(kp.position),
                          "response": kp.response} for kp in kps]}
    Path(args.out).write_text(json.dumps(doc, indent=1))
    _write_snapshot(args, args.out)
    print(f"wrote {len(kps)} keypoints to {args.out}")
    return 0


def _read_keypoints(path):
    doc = json.loads(Path(path).read_text())
    return [keypoints.Keypoint(np.asarray(k["position"], dtype=float),
                               float(k["response"]))
            for k in doc["keypoints"]]


def cmd_correspond(args):
    scene = load_scene(args.scene)
    if args.keypoints:
        kps = _read_keypoints(args.keypoints)
    else:
        kps = detect_scene_keypoints(scene, nms_radius=args.nms_radius,
                                     max_count=args.max_count)
    pairs = oracle_pairs(scene, kps, sigma=args.sigma,
                         surface_dist_voxels=args.surface_dist_voxels)
    save_pairs(pairs, args.out)
    _write_snapshot(args, args.out)
    print(f"wrote {len(pairs)} correspondence pairs to {args.out}")
    return 0


def _save_candidates(scene_id, candidates, categories, path):
    aligned = [AlignedModel(c.cad_id, categories[c.cad_id], c.pose,
                            c.cost, c.confidence) for c in candidates]
    io_scenes.save_alignments(scene_id, aligned, path)


def cmd_align(args):
    scene = load_scene(args.scene)
    pairs = load_pairs(args.corr, scene)
    candidates = align_all(pairs, lambda_s=args.lambda_s,
                           pyramid_levels=args.pyramid_levels,
                           yaw_steps=args.yaw_steps, jitter=args.jitter,
                           max_iterations=args.max_iterations, jobs=args.jobs,
                           sym_of={i.cad_id: i.sym for i in scene.instances})
    _save_candidates(scene.scene_id, candidates, scene.categories(), args.out)
    _write_snapshot(args, args.out)
    print(f"wrote {len(candidates)} alignment candidates to {args.out}")
    return 0


def cmd_align_pairs(args):
    scene = load_scene(args.scene)
    cfg = solvers.CmaesConfig(population=args.population,
                              generations=args.generations,
                              sigma0=args.sigma0, seed=args.seed)
    aligned = []
    for inst in scene.instances:
        if not inst.keypoint_pairs:
            raise ValueError(f"instance {inst.cad_id} has no keypoint pairs")
        params = solvers.cmaes_solve_pairs(inst.keypoint_pairs, cfg)
        pose = pose_to_matrix(params)
        cad = np.array([c for c, _ in inst.keypoint_pairs])
        scan = np.array([s for _, s in inst.keypoint_pairs])
        moved = cad @ pose[:3, :3].T + pose[:3, 3]
        cost = float(np.sum((moved - scan) ** 2))
        aligned.append(AlignedModel(inst.cad_id, inst.category, pose, cost))
    io_scenes.save_alignments(scene.scene_id, aligned, args.out)
    _write_snapshot(args, args.out)
    print(f"wrote {len(aligned)} pair-based alignments to {args.out}")
    return 0


def cmd_ransac_align(args):
    scene = load_scene(args.scene)
    kps = detect_scene_keypoints(scene, nms_radius=args.nms_radius)
    if len(kps) < 3:
        raise ValueError("fewer than 3 scan keypoints detected")
    scan_kp = np.array([k.position for k in kps])
    scan_desc = np.array([solvers.local_df_descriptor(scene.scan, p)
                          for p in scan_kp])
    scan_desc = np.abs(scan_desc)
    cfg = solvers.RansacConfig(iterations=args.iterations,
                               inlier_dist=args.inlier_dist,
                               top_k=args.top_k, seed=args.seed)
    # class-average ground-truth scale, as the baseline fixes scale per class
    from .geometry import decompose
    by_cat = {}
    for inst in scene.instances:
        by_cat.setdefault(inst.category, []).append(decompose(inst.pose)[2])
    class_scale = {c: np.mean(s, axis=0) for c, s in by_cat.items()}

    rng = np.random.default_rng(args.seed)
    aligned = []
    for cad_id in sorted(scene.cad_meshes):
        mesh = scene.cad_meshes[cad_id]
        df = scene.cad_dfs[cad_id]
        cad_kp = keypoints.sample_mesh_surface(mesh, args.cad_keypoints, rng)
        cad_desc = np.array([solvers.local_df_descriptor(df, p) for p in cad_kp])
        category = scene.categories()[cad_id]
        try:
            cands = solvers.ransac_align(scan_kp, scan_desc, cad_kp, cad_desc,
                                         class_scale[category], cfg,
                                         cad_id=cad_id, category=category)
        except ValueError:
            continue
        for c in cands[:1]:
            aligned.append(AlignedModel(cad_id, category, c.pose, c.cost))
    io_scenes.save_alignments(scene.scene_id, aligned, args.out)
    _write_snapshot(args, args.out)
    print(f"wrote {len(aligned)} RANSAC alignments to {args.out}")
    return 0


def cmd_prune(args):
    scene = load_scene(args.scene)
    _, aligned = io_scenes.load_alignments(args.alignments)
    kept = benchmark.prune(aligned, scene.scan, scene.cad_dfs, tau=args.tau,
                           min_seen=args.min_seen,
                           min_separation=args.min_separation)
    io_scenes.save_alignments(scene.scene_id, kept, args.out)
    _write_snapshot(args, args.out)
    print(f"kept {len(kept)} of {len(aligned)} candidates -> {args.out}")
    return 0


def _eval_cfg(args):
    return benchmark.EvalConfig(t_translation=args.t_translation,
                                t_rotation=args.t_rotation,
                                t_scale=args.t_scale)


def _load_aligned_tuples(path):
    _, aligned = io_scenes.load_alignments(path)
    return [(a.cad_id, a.category, a.pose) for a in aligned]


def cmd_evaluate(args):
    scene = load_scene(args.scene)
    aligned = _load_aligned_tuples(args.alignments)
    result = benchmark.evaluate(aligned, ground_truth_of(scene), _eval_cfg(args))
    _write_eval_csv(result, args.out)
    _write_snapshot(args, args.out)
    header, values = benchmark.format_accuracy_table(result)
    print(",".join(header))
    print(",".join(f"{v:.2f}" for v in values))
    print(f"instance accuracy: {result.instance_accuracy:.2f}% "
          f"({result.n_positive}/{result.n_candidates})")
    return 0


def cmd_sweep(args):
    scene = load_scene(args.scene)
    aligned = _load_aligned_tuples(args.alignments)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    curve = benchmark.threshold_sweep(aligned, ground_truth_of(scene),
                                     args.block, thresholds, _eval_cfg(args))
    lines = ["threshold,accuracy"]
    lines += [f"{t},{a:.4f}" for t, a in curve]
    Path(args.out).write_text("\n".join(lines) + "\n")
    _write_snapshot(args, args.out)
    print(f"wrote {len(curve)}-point {args.block} sweep to {args.out}")
    return 0


def cmd_e2e(args):
    scene, kept, result = run_e2e(args.seed, args.models, args.noise,
                                  extent=args.extent, views=args.views,
                                  jobs=args.jobs,
                                  eval_cfg=benchmark.EvalConfig(
                                      t_translation=args.t_translation,
                                      t_rotation=args.t_rotation,
                                      t_scale=args.t_scale,
                                      sort_by_confidence=True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io_scenes.save_scene(scene, out)
    _save_candidates(scene.scene_id, kept, scene.categories(),
                     out / "alignments.json")
    _write_eval_csv(result, out / "eval.csv")
    _write_snapshot(args, out)
    header, values = benchmark.format_accuracy_table(result)
    print(",".join(header))
    print(",".join(f"{v:.2f}" for v in values))
    print(f"instance accuracy: {result.instance_accuracy:.2f}% "
          f"({result.n_positive}/{result.n_candidates})")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_thresholds(p):
    p.add_argument("--t-translation", type=float, default=0.20)
    p.add_argument("--t-rotation", type=float, default=20.0)
    p.add_argument("--t-scale", type=float, default=20.0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cadalign",
        description="Align CAD models to fused scan geometry with 9DoF poses.")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file whose entries override flags")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.0, help="depth noise sigma, m")
    p.add_argument("--extent", type=float, default=2.5)
    p.add_argument("--voxel-size", type=float, default=0.03)
    p.add_argument("--truncation", type=float, default=0.15)
    p.add_argument("--views", type=int, default=32)
    p.add_argument("--leg-occlusion-height", type=float, default=None,
                   help="omit geometry below this world height from fusion views")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("voxelize", help="mesh to unsigned distance field")
    p.add_argument("--obj", type=Path, default=None)
    p.add_argument("--scene", type=Path, default=None)
    p.add_argument("--cad-id", default=None)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--padding", type=float, default=0.0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("keypoints", help="3D Harris keypoint detection")
    p.add_argument("--grid", type=Path, default=None)
    p.add_argument("--scene", type=Path, default=None)
    p.add_argument("--k", type=float, default=0.04)
    p.add_argument("--window-radius", type=int, default=2)
    p.add_argument("--nms-radius", type=float, default=0.08)
    p.add_argument("--max-count", type=int, default=512)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_keypoints)

    p = sub.add_parser("correspond", help="oracle correspondence heatmaps")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--keypoints", type=Path, default=None)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--surface-dist-voxels", type=float, default=3.0)
    p.add_argument("--nms-radius", type=float, default=0.08)
    p.add_argument("--max-count", type=int, default=512)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_correspond)

    p = sub.add_parser("align", help="heatmap-energy LM alignment")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--corr", type=Path, required=True)
    p.add_argument("--lambda-s", type=float, default=0.01)
    p.add_argument("--pyramid-levels", type=int, default=3)
    p.add_argument("--yaw-steps", type=int, default=12)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("align-pairs", help="CMA-ES keypoint-pair alignment")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--generations", type=int, default=500)
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_align_pairs)

    p = sub.add_parser("ransac-align", help="descriptor RANSAC baseline")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--inlier-dist", type=float, default=0.20)
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--cad-keypoints", type=int, default=64)
    p.add_argument("--nms-radius", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ransac_align)

    p = sub.add_parser("prune", help="free-space confidence pruning")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--alignments", type=Path, required=True)
    p.add_argument("--tau", type=float, default=0.15)
    p.add_argument("--min-seen", type=float, default=0.30)
    p.add_argument("--min-separation", type=float, default=0.3)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("evaluate", help="greedy benchmark evaluation")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--alignments", type=Path, required=True)
    _add_thresholds(p)
    p.add_argument("--out", type=Path, required=True, help="eval.csv path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="accuracy vs threshold curve")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--alignments", type=Path, required=True)
    p.add_argument("--block", choices=("translation", "rotation", "scale"),
                   required=True)
    p.add_argument("--thresholds", required=True,
                   help="comma-separated ascending grid")
    _add_thresholds(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("e2e", help="generate, correspond, align, prune, evaluate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--extent", type=float, default=None)
    p.add_argument("--views", type=int, default=32)
    p.add_argument("--jobs", type=int, default=1)
    _add_thresholds(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_e2e)
    return parser


def _apply_config_file(args):
    if args.config is None:
        return args
    doc = json.loads(Path(args.config).read_text())
    known = set(vars(args))
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if attr not in known:
            raise ValueError(f"unknown config key {key!r}")
        setattr(args, attr, Path(value) if isinstance(getattr(args, attr), Path)
                else value)
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args)
        if args.subcommand == "voxelize" and bool(args.obj) == bool(args.scene):
            raise ValueError("voxelize needs exactly one of --obj or --scene")
        if args.subcommand == "keypoints" and bool(args.grid) == bool(args.scene):
            raise ValueError("keypoints needs exactly one of --grid or --scene")
        if args.subcommand == "voxelize" and args.scene and not args.cad_id:
            raise ValueError("--cad-id is required with --scene")
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
