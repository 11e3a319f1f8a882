"""Solver oracles: finite-difference Jacobian checks, exact-recovery
fixtures built from voxel-center keypoints, CMA-ES on analytic functions,
and closed-form RANSAC ground truth."""

import numpy as np
import pytest

from cadalign.correspond import CorrespondencePair, Heatmap, make_target_heatmap
from cadalign.geometry import (PoseParams, Symmetry, SymmetryTag, decompose,
                               pose_to_matrix, rotation_error, scale_error,
                               se3_exp, se3_log, translation_error)
from cadalign.grids import GridKind, VoxelGrid
from cadalign import solvers
from cadalign.solvers import (AlignmentProblem, CmaEs, CmaesConfig,
                              DegenerateCorrespondences, RansacConfig,
                              SolverConfig, align_multi, cmaes_solve_pairs,
                              jacobian, lm_solve, local_df_descriptor,
                              make_default_restarts, poses_close, ransac_align,
                              residuals, retract)


def cad_grid():
    return VoxelGrid.empty((32, 32, 32), 0.02, -np.full(3, 15.5 * 0.02), 0.0,
                           GridKind.UNSIGNED_DF)


def make_problem(rng, gt: PoseParams, n_pairs=8, lambda_s=0.01, sym=None,
                 voxel_center_keypoints=True):
    """Pairs generated from a known pose; with voxel-center keypoints the
    ground truth is an exact zero of the heatmap part of the energy."""
    grid = cad_grid()
    m = pose_to_matrix(gt)
    pairs = []
    seen = set()
    while len(pairs) < n_pairs:
        idx = tuple(rng.integers(6, 26, 3))
        if idx in seen:
            continue
        seen.add(idx)
        kp = grid.voxel_to_world(idx)
        if not voxel_center_keypoints:
            kp = kp + rng.uniform(-0.01, 0.01, 3)
        scan_pt = m[:3, :3] @ kp + m[:3, 3]
        pairs.append(CorrespondencePair(
            scan_pt, "cad", make_target_heatmap(grid, kp, sym=sym), 1.0,
            gt.s.copy()))
    return AlignmentProblem("cad", pairs, lambda_s=lambda_s, sym=sym)


def random_state(rng):
    a = np.concatenate([rng.uniform(-1.0, 1.0, 3), rng.uniform(-0.5, 0.5, 3)])
    return PoseParams(a, rng.uniform(0.7, 1.3, 3))


# ---------------------------------------------------------------------------
# Residual and Jacobian conventions


def test_residual_layout_and_gt_values(rng):
    gt = PoseParams(np.array([0.0, 0.3, 0.0, 0.2, -0.1, 0.05]), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=6, lambda_s=0.0)
    r = residuals(gt, problem)
    assert r.shape == (9,)
    assert np.all(np.abs(r[:6]) < 1e-12)  # exact peaks at voxel centers
    assert np.all(r[6:] == 0.0)  # lambda_s = 0 zeroes the scale rows


def test_residual_out_of_grid_is_one(rng):
    gt = PoseParams(np.zeros(6), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=4, lambda_s=0.0)
    far = PoseParams(np.array([0, 0, 0, 50.0, 0, 0]), np.ones(3))
    r = residuals(far, problem)
    assert np.all(r[:4] == 1.0)


def test_residual_scale_rows(rng):
    gt = PoseParams(np.zeros(6), np.array([1.1, 0.9, 1.0]))
    problem = make_problem(rng, gt, n_pairs=4, lambda_s=0.04)
    r = residuals(gt, problem)
    assert np.allclose(r[4:], 0.2 * gt.s)


def fd_jacobian(params, problem, h=1e-6):
    J = np.empty((len(problem.pairs) + 3, 9))
    for i in range(9):
        e = np.zeros(9)
        e[i] = h
        rp = residuals(retract(params, e), problem)
        rm = residuals(retract(params, -e), problem)
        J[:, i] = (rp - rm) / (2 * h)
    return J


def jacobian_fd_check(states, seed=0):
    """Max relative row error of the analytic Jacobian vs central FD over
    random states; rows with negligible norm are skipped."""
    rng = np.random.default_rng(seed)
    gt = PoseParams(np.array([0.0, 0.4, 0.0, 0.2, 0.1, -0.1]), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=8, lambda_s=0.01,
                           voxel_center_keypoints=False)
    geo = problem._geos[problem.pyramid_levels - 1]
    worst = 0.0
    for _ in range(states):
        params = random_state(rng)
        # the interpolant's gradient is discontinuous across cell faces;
        # skip pair rows whose FD stencil can straddle one (the mapped point
        # moves < 1e-3 voxels under the 1e-6 parameter step)
        q, _ = solvers._model_points(params, problem.scan_points)
        frac = geo.world_to_voxel(q) % 1.0
        near_face = np.any(np.minimum(frac, 1.0 - frac) < 1e-3, axis=1)
        J = jacobian(params, problem)
        F = fd_jacobian(params, problem)
        for row in range(J.shape[0]):
            if row < len(near_face) and near_face[row]:
                continue
            n = np.linalg.norm(J[row])
            d = np.linalg.norm(J[row] - F[row])
            if n <= 1e-8 or d < 1e-9:
                # near-zero rows (splat tails) sit at the FD round-off floor
                continue
            worst = max(worst, d / n)
    return worst


def test_jacobian_matches_finite_differences():
    assert jacobian_fd_check(50) < 1e-4


def test_retract_zero_is_identity(rng):
    p = random_state(rng)
    q = retract(p, np.zeros(9))
    assert np.allclose(q.rigid_matrix(), p.rigid_matrix(), atol=1e-12)
    assert np.allclose(q.s, p.s)


def test_retract_left_multiplies(rng):
    p = random_state(rng)
    d = rng.uniform(-0.2, 0.2, 9)
    q = retract(p, d)
    assert np.allclose(q.rigid_matrix(), se3_exp(d[:6]) @ p.rigid_matrix(),
                       atol=1e-12)
    assert np.allclose(q.s, p.s + d[6:])


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


def pose_errors(got: PoseParams, want: PoseParams, sym=None):
    tg, qg, sg = decompose(pose_to_matrix(got))
    tw, qw, sw = decompose(pose_to_matrix(want))
    return (translation_error(tg, tw), rotation_error(qg, qw, sym),
            scale_error(sg, sw))


def test_lm_recovers_perturbed_pose(rng):
    gt = PoseParams(np.array([0.0, 0.5, 0.0, 0.3, -0.1, 0.2]),
                    np.array([1.1, 0.9, 1.05]))
    problem = make_problem(rng, gt, n_pairs=8, lambda_s=0.0)
    init = retract(gt, [0.05, -0.08, 0.04, 0.03, -0.02, 0.04,
                        0.05, -0.05, 0.03])
    cand = lm_solve(problem, init)
    t_err, r_err, s_err = pose_errors(cand.params, gt)
    assert cand.cost < 1e-4
    assert t_err < 0.005 and r_err < 0.5 and s_err < 1.0


def test_lm_stable_at_ground_truth(rng):
    gt = PoseParams(np.array([0.0, -0.3, 0.0, 0.1, 0.0, -0.2]), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=8, lambda_s=0.0)
    cand = lm_solve(problem, gt)
    t_err, r_err, s_err = pose_errors(cand.params, gt)
    assert t_err < 1e-6 and r_err < 1e-3 and s_err < 1e-3


def test_lm_cost_not_worse_than_init(rng):
    gt = PoseParams(np.zeros(6), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=8, lambda_s=0.01)
    for _ in range(5):
        init = random_state(rng)
        cand = lm_solve(problem, init)
        c0 = float(residuals(init, problem) @ residuals(init, problem))
        assert cand.cost <= c0 + 1e-12


def test_lm_handles_uniform_heatmaps():
    grid = cad_grid()
    flat = VoxelGrid(grid.dims, grid.voxel_size, grid.origin.copy(), 0.0,
                     GridKind.HEATMAP, np.full(grid.dims, 0.4))
    pairs = [CorrespondencePair(np.zeros(3) + 0.05 * k, "cad",
                                Heatmap(flat, "cad"), 1.0, np.ones(3))
             for k in range(4)]
    problem = AlignmentProblem("cad", pairs, lambda_s=0.0)
    # gradients vanish everywhere: LM cannot step, but must return cleanly
    cand = lm_solve(problem, PoseParams(np.zeros(6), np.ones(3)))
    assert cand.cost == pytest.approx(4 * 0.36)


def test_lambda_s_shrinks_scale(rng):
    gt = PoseParams(np.array([0.0, 0.2, 0.0, 0.1, 0.0, 0.0]), np.ones(3))
    norms = []
    for lam in (0.0, 0.5, 5.0):
        problem = make_problem(np.random.default_rng(4), gt, n_pairs=8,
                               lambda_s=lam)
        cand = lm_solve(problem, gt)
        norms.append(np.linalg.norm(cand.params.s))
    assert norms[1] <= norms[0] + 1e-9
    assert norms[2] <= norms[1] + 1e-9


# ---------------------------------------------------------------------------
# Restarts and align_multi


def test_default_restart_counts(rng):
    gt = PoseParams(np.zeros(6), np.ones(3))
    base = make_problem(np.random.default_rng(5), gt, n_pairs=6)
    assert len(make_default_restarts(base, yaw_steps=8)) == 8
    assert len(make_default_restarts(base, yaw_steps=8, scales=(0.8, 1.0))) == 16
    sym_c4 = AlignmentProblem("cad", base.pairs, sym=SymmetryTag(Symmetry.C4))
    assert len(make_default_restarts(sym_c4, yaw_steps=8)) == 2
    sym_inf = AlignmentProblem("cad", base.pairs, sym=SymmetryTag(Symmetry.CINF))
    assert len(make_default_restarts(sym_inf, yaw_steps=8)) == 1


def test_align_multi_recovers_yaw_pose(rng):
    gt = PoseParams(np.array([0.0, 0.4, 0.0, 0.3, 0.1, -0.2]),
                    np.array([1.0, 1.0, 1.0]))
    problem = make_problem(rng, gt, n_pairs=8, lambda_s=0.0)
    kept = align_multi(problem, SolverConfig(restart_yaw_steps=8))
    assert kept
    assert [c.cost for c in kept] == sorted(c.cost for c in kept)
    t_err, r_err, s_err = pose_errors(kept[0].params, gt)
    assert t_err < 0.02 and r_err < 2.0 and s_err < 3.0
    # deduplication: no two kept poses are near-identical
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert not poses_close(kept[i].params, kept[j].params)


def test_align_multi_explicit_single_restart(rng):
    gt = PoseParams(np.array([0.0, 0.2, 0.0, 0.1, 0.0, 0.1]), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=8, lambda_s=0.0)
    kept = align_multi(problem, SolverConfig(restarts=[gt]))
    assert len(kept) == 1 and kept[0].cost < 1e-8


def test_align_multi_triage_matches_untriaged(rng):
    gt = PoseParams(np.array([0.0, 0.6, 0.0, 0.2, -0.1, 0.1]), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=8, lambda_s=0.0)
    full = align_multi(problem, SolverConfig(restart_yaw_steps=8))
    triaged = align_multi(problem, SolverConfig(restart_yaw_steps=8,
                                                refine_top=3))
    assert triaged[0].cost < 1e-6
    assert poses_close(triaged[0].params, full[0].params)


def test_align_multi_rejects_empty_restarts(rng):
    gt = PoseParams(np.zeros(6), np.ones(3))
    problem = make_problem(rng, gt, n_pairs=6)
    with pytest.raises(ValueError):
        align_multi(problem, SolverConfig(restarts=[]))


# ---------------------------------------------------------------------------
# CMA-ES


def test_cmaes_sphere_9d():
    es = CmaEs(np.full(9, 3.0), sigma0=1.0, seed=0)
    _, best = es.run(lambda x: float(x @ x), generations=300, ftol=1e-8)
    assert best < 1e-8


def test_cmaes_shifted_quadratic():
    target = np.linspace(-1, 1, 9)
    es = CmaEs(np.zeros(9), sigma0=0.5, seed=1)
    x, best = es.run(lambda v: float(np.sum((v - target) ** 2)),
                     generations=300, ftol=1e-10)
    assert np.allclose(x, target, atol=1e-4)


def exact_pairs(gt: PoseParams, n, rng):
    m = pose_to_matrix(gt)
    cad = rng.uniform(-0.4, 0.4, (n, 3))
    scan = cad @ m[:3, :3].T + m[:3, 3]
    return list(zip(cad, scan))


def pair_rms(params, pairs):
    m = pose_to_matrix(params)
    cad = np.array([c for c, _ in pairs])
    scan = np.array([s for _, s in pairs])
    d = cad @ m[:3, :3].T + m[:3, 3] - scan
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def test_cmaes_pairs_recovers_pose(rng):
    gt = PoseParams(np.array([0.1, 0.7, -0.2, 0.4, 0.1, -0.3]),
                    np.array([1.2, 0.8, 1.0]))
    pairs = exact_pairs(gt, 6, rng)
    got = cmaes_solve_pairs(pairs, CmaesConfig(seed=0))
    assert pair_rms(got, pairs) < 1e-3


def test_cmaes_pairs_too_few():
    with pytest.raises(ValueError):
        cmaes_solve_pairs([(np.zeros(3), np.zeros(3))] * 5)


def test_cmaes_pairs_order_insensitive(rng):
    gt = PoseParams(np.array([0.0, 0.5, 0.1, 0.2, -0.1, 0.3]),
                    np.array([0.9, 1.1, 1.0]))
    pairs = exact_pairs(gt, 8, rng)
    a = cmaes_solve_pairs(pairs, CmaesConfig(seed=2))
    b = cmaes_solve_pairs(pairs[::-1], CmaesConfig(seed=2))
    assert pair_rms(a, pairs) < 1e-3
    assert pair_rms(b, pairs) < 1e-3


def test_cmaes_pairs_translation_equivariant(rng):
    gt = PoseParams(np.array([0.0, 0.3, 0.0, 0.1, 0.2, 0.0]), np.ones(3))
    pairs = exact_pairs(gt, 6, rng)
    shift = np.array([0.5, -0.2, 0.3])
    shifted = [(c, s + shift) for c, s in pairs]
    a = cmaes_solve_pairs(pairs, CmaesConfig(seed=0))
    b = cmaes_solve_pairs(shifted, CmaesConfig(seed=0))
    assert pair_rms(a, pairs) < 5e-3
    assert pair_rms(b, shifted) < 5e-3
    ta = pose_to_matrix(a)[:3, 3]
    tb = pose_to_matrix(b)[:3, 3]
    assert np.allclose(tb - ta, shift, atol=2e-2)


# ---------------------------------------------------------------------------
# RANSAC baseline


def ransac_fixture(rng, yaw=0.7, t=(0.4, 0.1, -0.3), scale=(1.2, 0.9, 1.1),
                   outliers=0, noise=0.0):
    corners = np.array([[sx, sy, sz] for sx in (-0.3, 0.3)
                        for sy in (-0.3, 0.3) for sz in (-0.3, 0.3)])
    extra = rng.uniform(-0.3, 0.3, (4, 3))
    cad_kp = np.vstack([corners, extra])
    cad_desc = rng.normal(0, 1, (len(cad_kp), 16))
    R = np.array([[np.cos(yaw), 0, np.sin(yaw)],
                  [0, 1, 0],
                  [-np.sin(yaw), 0, np.cos(yaw)]])
    scan_kp = (cad_kp * np.asarray(scale)) @ R.T + np.asarray(t)
    scan_kp = scan_kp + rng.normal(0, noise, scan_kp.shape)
    scan_desc = cad_desc.copy()
    if outliers:
        scan_kp = np.vstack([scan_kp, rng.uniform(-1.5, 1.5, (outliers, 3))])
        scan_desc = np.vstack([scan_desc,
                               rng.normal(0, 1, (outliers, 16))])
    return scan_kp, scan_desc, cad_kp, cad_desc, np.asarray(scale), R, np.asarray(t)


def yaw_error_deg(pose, scale, R_gt):
    R = pose[:3, :3] / scale[np.newaxis, :]
    c = np.clip((np.trace(R_gt.T @ R) - 1) / 2, -1, 1)
    return np.degrees(np.arccos(c))


def test_ransac_noise_free_recovery(rng):
    scan_kp, scan_d, cad_kp, cad_d, scale, R_gt, t_gt = ransac_fixture(rng)
    cands = ransac_align(scan_kp, scan_d, cad_kp, cad_d, scale,
                         RansacConfig(seed=0))
    assert cands
    best = cands[0]
    assert np.linalg.norm(best.pose[:3, 3] - t_gt) < 0.05
    assert yaw_error_deg(best.pose, scale, R_gt) < 5.0


def test_ransac_with_outliers(rng):
    scan_kp, scan_d, cad_kp, cad_d, scale, R_gt, t_gt = \
        ransac_fixture(rng, outliers=12)
    cands = ransac_align(scan_kp, scan_d, cad_kp, cad_d, scale,
                         RansacConfig(seed=1))
    assert cands
    assert np.linalg.norm(cands[0].pose[:3, 3] - t_gt) < 0.05
    assert yaw_error_deg(cands[0].pose, scale, R_gt) < 5.0


def test_ransac_deterministic(rng):
    scan_kp, scan_d, cad_kp, cad_d, scale, _, _ = ransac_fixture(rng)
    a = ransac_align(scan_kp, scan_d, cad_kp, cad_d, scale, RansacConfig(seed=7))
    b = ransac_align(scan_kp, scan_d, cad_kp, cad_d, scale, RansacConfig(seed=7))
    assert len(a) == len(b)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.pose, cb.pose)


def test_ransac_collinear_degenerate(rng):
    # all keypoints on the yaw axis: rotation unobservable
    cad_kp = np.array([[0.0, y, 0.0] for y in np.linspace(-0.3, 0.3, 6)])
    cad_desc = rng.normal(0, 1, (6, 16))
    scan_kp = cad_kp + np.array([0.2, 0.0, 0.1])
    with pytest.raises(DegenerateCorrespondences):
        ransac_align(scan_kp, cad_desc.copy(), cad_kp, cad_desc,
                     np.ones(3), RansacConfig(seed=0))


def test_ransac_descriptor_length_mismatch(rng):
    with pytest.raises(ValueError):
        ransac_align(np.zeros((3, 3)), np.zeros((3, 8)), np.zeros((3, 3)),
                     np.zeros((3, 16)), np.ones(3))


def test_local_df_descriptor_shape_and_constancy():
    grid = VoxelGrid.empty((16, 16, 16), 0.05, np.zeros(3), 0.0,
                           GridKind.UNSIGNED_DF, fill=0.25)
    d = local_df_descriptor(grid, [0.4, 0.4, 0.4], radius=2)
    assert d.shape == (125,)
    assert np.allclose(d, 0.25)
