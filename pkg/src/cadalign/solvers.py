"""Alignment optimizers.

* ``lm_solve`` / ``align_multi``: Levenberg-Marquardt minimization of the
  heatmap energy sum_j (1 - H_j(c_vox))^2 + lambda_s ||s||^2 over 9 pose
  parameters, coarse-to-fine over heatmap pyramids, with multi-restart.
* ``cmaes_solve_pairs``: CMA-ES over the 9 parameters from exact keypoint
  pairs (the annotation-time alignment path).
* ``ransac_align``: descriptor-matching RANSAC baseline estimating
  translation plus up-right (yaw-only) rotation at a fixed class scale.

Pose convention: the optimized transform maps model space to world
(translate * rotate * scale, produced by ``pose_to_matrix``); the heatmap
residual looks points up through its inverse.  The LM parameterization is a
local 9-vector increment delta = (rotation 3, translation 3, scale 3): the
rigid part updates by a left-multiplied SE(3) exponential and the scale adds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .correspond import CorrespondencePair
from .geometry import (OrientedBox, PoseParams, Symmetry, SymmetryTag,
                       decompose, pose_to_matrix, rotation_error, se3_exp,
                       se3_exp_batch, se3_log, so3_exp, translation_error,
                       scale_error)
from .grids import VoxelGrid, build_pyramid, sample_trilinear_batch


@dataclass
class AlignmentProblem:
    cad_id: str
    pairs: list
    lambda_s: float = 0.01
    pyramid_levels: int = 3
    sym: SymmetryTag = None  # optional; shrinks the restart yaw fan

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("alignment problem needs at least one pair")
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be >= 0")
        self._pyramids = [build_pyramid(p.heatmap.grid, self.pyramid_levels)
                          for p in self.pairs]
        self._points = np.array([p.scan_point for p in self.pairs])
        g0 = self.pairs[0].heatmap.grid
        self._uniform = all(
            p.heatmap.grid.dims == g0.dims
            and p.heatmap.grid.voxel_size == g0.voxel_size
            and np.allclose(p.heatmap.grid.origin, g0.origin)
            for p in self.pairs)
        if self._uniform:
            # all heatmaps share grid geometry (same CAD domain): stack the
            # per-pair fields per level so sampling vectorizes over pairs
            self._stacks = [np.stack([pyr[lvl].values for pyr in self._pyramids])
                            for lvl in range(self.pyramid_levels)]
            self._geos = [self._pyramids[0][lvl]
                          for lvl in range(self.pyramid_levels)]
            # flattened per-pair fields + corner offsets for one-gather
            # trilinear sampling
            self._flats = [s.reshape(len(self.pairs), -1) for s in self._stacks]
            self._corner_offsets = []
            for lvl in range(self.pyramid_levels):
                dx, dy, dz = self._geos[lvl].dims
                sx, sy = dy * dz, dz
                self._corner_offsets.append(np.array(
                    [cx * sx + cy * sy + cz
                     for cx in (0, 1) for cy in (0, 1) for cz in (0, 1)]))
            self._rows = np.arange(len(self.pairs))

    def heatmaps_at_level(self, level):
        return [pyr[level] for pyr in self._pyramids]

    @property
    def scan_points(self):
        return self._points

    def model_center(self):
        g = self.pairs[0].heatmap.grid
        return g.origin + (np.asarray(g.dims) - 1) * g.voxel_size / 2.0

    def model_extent(self):
        g = self.pairs[0].heatmap.grid
        return float(np.max(np.asarray(g.dims) - 1) * g.voxel_size)


@dataclass
class SolverConfig:
    max_iterations: int = 100
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    damping_max: float = 1e10
    convergence_tol: float = 1e-9
    restarts: list = None  # list of PoseParams; None = derive from clusters
    restart_yaw_steps: int = 4
    restart_jitter: float = 0.0  # meters; > 0 adds a 3x3x3 offset fan
    restart_scales: tuple = (1.0,)  # initial uniform-scale fan
    refine_top: int = None  # None: refine every restart through all levels
    seed: int = 0

    def __post_init__(self):
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")


@dataclass
class AlignmentCandidate:
    cad_id: str
    pose: np.ndarray  # 4x4, model -> world
    params: PoseParams
    cost: float
    confidence: float = None
    seen_fraction: float = None
    flagged: bool = False

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("cost must be >= 0")


def retract(params: PoseParams, delta):
    """Apply a local increment: left-multiplied SE(3) exp on the rigid part,
    additive on scale."""
    delta = np.asarray(delta, dtype=float).reshape(9)
    rigid = se3_exp(delta[:6]) @ params.rigid_matrix()
    out = PoseParams(se3_log(rigid), params.s + delta[6:])
    out._rigid = se3_exp(out.a)  # renormalized through the log roundtrip
    return out


def _model_points(params: PoseParams, scan_points):
    """Map scan points into model space through the inverse pose."""
    E = params.rigid_matrix()
    y = (scan_points - E[:3, 3]) @ E[:3, :3]  # R^T (p - t), batched
    return y / params.s[np.newaxis, :], E


def _sample_own_field(problem: AlignmentProblem, level, q):
    """Sample pair j's heatmap at point q_j for all pairs; values (N,) and
    world-space gradients (N, 3)."""
    if not problem._uniform:
        heatmaps = problem.heatmaps_at_level(level)
        vals = np.empty(len(heatmaps))
        grads = np.empty((len(heatmaps), 3))
        for j, hm in enumerate(heatmaps):
            v, g = sample_trilinear_batch(hm, q[j:j + 1])
            vals[j] = v[0]
            grads[j] = g[0]
        return vals, grads

    geo = problem._geos[level]
    n = len(q)
    u = geo.world_to_voxel(q)
    dims = np.asarray(geo.dims)
    eps = 1e-9  # boundary round-off tolerance, as in sample_trilinear_batch
    inside = np.all((u >= -eps) & (u <= dims - 1 + eps), axis=1)
    uc = np.clip(u, 0, dims - 1)
    base = np.minimum(np.floor(uc).astype(int), dims - 2)
    f = uc - base
    # gather all 8 corners of every pair's own field in one fancy index
    sy = dims[2]
    sx = dims[1] * sy
    flat_base = base[:, 0] * sx + base[:, 1] * sy + base[:, 2]
    c = problem._flats[level][
        problem._rows[:, None],
        flat_base[:, None] + problem._corner_offsets[level][None, :]]
    c = c.reshape(n, 2, 2, 2)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = np.stack([1 - fx, fx], axis=1)
    wy = np.stack([1 - fy, fy], axis=1)
    wz = np.stack([1 - fz, fz], axis=1)
    cz = np.einsum("nxyz,nz->nxy", c, wz)
    czy = np.einsum("nxy,ny->nx", cz, wy)
    vals = np.einsum("nx,nx->n", czy, wx)
    gx = czy[:, 1] - czy[:, 0]
    cy_ = np.einsum("nxy,nx->ny", cz, wx)
    gy = cy_[:, 1] - cy_[:, 0]
    cxy = np.einsum("nxyz,nx,ny->nz", c, wx, wy)
    gz = cxy[:, 1] - cxy[:, 0]
    grads = np.stack([gx, gy, gz], axis=1) / geo.voxel_size
    vals = np.where(inside, vals, 0.0)
    grads = np.where(inside[:, None], grads, 0.0)
    return vals, grads


def residuals(params: PoseParams, problem: AlignmentProblem, level=None):
    """Residual vector: 1 - H_j at the mapped point per pair, then
    sqrt(lambda_s) * s per scale axis.  ``level=None`` means finest."""
    level = problem.pyramid_levels - 1 if level is None else level
    q, _ = _model_points(params, problem.scan_points)
    vals, _ = _sample_own_field(problem, level, q)
    n = len(vals)
    r = np.empty(n + 3)
    r[:n] = 1.0 - vals
    r[n:] = math.sqrt(problem.lambda_s) * params.s
    return r


def jacobian(params: PoseParams, problem: AlignmentProblem, level=None):
    """Analytic Jacobian of ``residuals`` w.r.t. the local increment,
    shape (N + 3, 9) with columns (rotation, translation, scale)."""
    level = problem.pyramid_levels - 1 if level is None else level
    pts = problem.scan_points
    q, E = _model_points(params, pts)
    Rt = E[:3, :3].T
    inv_s = 1.0 / params.s
    _, grads = _sample_own_field(problem, level, q)
    n = len(pts)
    J = np.zeros((n + 3, 9))
    hats = np.zeros((n, 3, 3))
    hats[:, 0, 1] = -pts[:, 2]
    hats[:, 0, 2] = pts[:, 1]
    hats[:, 1, 0] = pts[:, 2]
    hats[:, 1, 2] = -pts[:, 0]
    hats[:, 2, 0] = -pts[:, 1]
    hats[:, 2, 1] = pts[:, 0]
    dq_dw = inv_s[None, :, None] * np.einsum("ab,nbc->nac", Rt, hats)
    J[:n, :3] = -np.einsum("na,nab->nb", grads, dq_dw)
    J[:n, 3:6] = grads @ (inv_s[:, None] * Rt)
    J[:n, 6:9] = grads * q * inv_s[None, :]
    J[n:, 6:9] = math.sqrt(problem.lambda_s) * np.eye(3)
    return J


def _cost(r):
    return float(r @ r)


# ---------------------------------------------------------------------------
# Batched restart triage: many LM solves in lockstep.  State is kept as rigid
# matrices E (R, 4, 4) plus scales s (R, 3); the Lie-algebra coordinates are
# only recovered once at the end, so each trial step needs just one batched
# SE(3) exponential.


def _sample_batch(problem, level, q, want_grads):
    """Sample pair j's heatmap at q[r, j] for all restarts r; values (R, N)
    and, if requested, world-space gradients (R, N, 3)."""
    geo = problem._geos[level]
    nr, n = q.shape[0], q.shape[1]
    u = geo.world_to_voxel(q.reshape(-1, 3)).reshape(nr, n, 3)
    dims = np.asarray(geo.dims)
    eps = 1e-9
    inside = np.all((u >= -eps) & (u <= dims - 1 + eps), axis=2)
    uc = np.clip(u, 0, dims - 1)
    base = np.minimum(np.floor(uc).astype(int), dims - 2)
    f = uc - base
    sy = dims[2]
    sx = dims[1] * sy
    flat_base = base[..., 0] * sx + base[..., 1] * sy + base[..., 2]
    c = problem._flats[level][
        problem._rows[None, :, None],
        flat_base[..., None] + problem._corner_offsets[level][None, None, :]]
    c = c.reshape(nr, n, 2, 2, 2)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    wx = np.stack([1 - fx, fx], axis=-1)
    wy = np.stack([1 - fy, fy], axis=-1)
    wz = np.stack([1 - fz, fz], axis=-1)
    cz = np.einsum("rnxyz,rnz->rnxy", c, wz)
    czy = np.einsum("rnxy,rny->rnx", cz, wy)
    vals = np.where(inside, np.einsum("rnx,rnx->rn", czy, wx), 0.0)
    if not want_grads:
        return vals, None
    gx = czy[..., 1] - czy[..., 0]
    cy_ = np.einsum("rnxy,rnx->rny", cz, wx)
    gy = cy_[..., 1] - cy_[..., 0]
    cxy = np.einsum("rnxyz,rnx,rny->rnz", c, wx, wy)
    gz = cxy[..., 1] - cxy[..., 0]
    grads = np.stack([gx, gy, gz], axis=-1) / geo.voxel_size
    grads = np.where(inside[..., None], grads, 0.0)
    return vals, grads


def _residuals_batch(problem, level, E, s, want_grads=False):
    """Batched ``residuals``; returns (r, q, grads) with r (R, N + 3)."""
    pts = problem.scan_points
    y = np.einsum("rnk,rkc->rnc", pts[None, :, :] - E[:, None, :3, 3],
                  E[:, :3, :3])
    q = y / s[:, None, :]
    vals, grads = _sample_batch(problem, level, q, want_grads)
    nr, n = vals.shape
    r = np.empty((nr, n + 3))
    r[:, :n] = 1.0 - vals
    r[:, n:] = math.sqrt(problem.lambda_s) * s
    return r, q, grads


def _jacobian_batch(problem, E, s, q, grads):
    """Batched analytic Jacobian, shape (R, N + 3, 9)."""
    pts = problem.scan_points
    nr, n = q.shape[0], q.shape[1]
    Rt = E[:, :3, :3].transpose(0, 2, 1)
    inv_s = 1.0 / s
    hats = np.zeros((n, 3, 3))
    hats[:, 0, 1] = -pts[:, 2]
    hats[:, 0, 2] = pts[:, 1]
    hats[:, 1, 0] = pts[:, 2]
    hats[:, 1, 2] = -pts[:, 0]
    hats[:, 2, 0] = -pts[:, 1]
    hats[:, 2, 1] = pts[:, 0]
    J = np.zeros((nr, n + 3, 9))
    dq_dw = inv_s[:, None, :, None] * np.einsum("rab,nbc->rnac", Rt, hats)
    J[:, :n, :3] = -np.einsum("rna,rnab->rnb", grads, dq_dw)
    J[:, :n, 3:6] = np.einsum("rna,rab->rnb", grads, inv_s[:, :, None] * Rt)
    J[:, :n, 6:9] = grads * q * inv_s[:, None, :]
    J[:, n:, 6:9] = math.sqrt(problem.lambda_s) * np.eye(3)
    return J


def _lm_level_batch(problem, E, s, level, cfg, max_iter=25, tol=1e-5):
    """One LM pass at one pyramid level for all restarts in lockstep.

    Returns updated (E, s), final costs, and no-step flags.  Semantics match
    ``_lm_level`` per restart; restarts whose cost decrease falls below
    ``tol`` (or that cannot step) simply stop early.
    """
    nr = len(E)
    E = E.copy()
    s = s.copy()
    mu = np.full(nr, cfg.damping_init)
    flags = np.zeros(nr, bool)
    active = np.ones(nr, bool)
    r, _, _ = _residuals_batch(problem, level, E, s)
    cost = np.einsum("rm,rm->r", r, r)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        rE, rs = E[idx], s[idx]
        r_a, q, grads = _residuals_batch(problem, level, rE, rs,
                                         want_grads=True)
        J = _jacobian_batch(problem, rE, rs, q, grads)
        JtJ = np.einsum("rma,rmb->rab", J, J)
        g = np.einsum("rma,rm->ra", J, r_a)
        damp = np.maximum(np.einsum("rii->ri", JtJ), 1e-12)
        pending = np.ones(idx.size, bool)
        stepped = np.zeros(idx.size, bool)
        decrease = np.zeros(idx.size)
        while pending.any():
            pid = np.flatnonzero(pending)
            A = JtJ[pid].copy()
            A[:, np.arange(9), np.arange(9)] += mu[idx[pid], None] * damp[pid]
            try:
                delta = np.linalg.solve(A, -g[pid][..., None])[..., 0]
            except np.linalg.LinAlgError:
                delta = np.stack([
                    np.linalg.lstsq(A[k], -g[pid[k]], rcond=None)[0]
                    for k in range(len(pid))])
            step = se3_exp_batch(delta[:, :6])
            E_t = step @ E[idx[pid]]
            s_t = s[idx[pid]] + delta[:, 6:]
            r_t, _, _ = _residuals_batch(problem, level, E_t, s_t)
            c_t = np.einsum("rm,rm->r", r_t, r_t)
            improved = c_t < cost[idx[pid]]
            good = pid[improved]
            gi = idx[good]
            E[gi] = E_t[improved]
            s[gi] = s_t[improved]
            decrease[good] = cost[gi] - c_t[improved]
            cost[gi] = c_t[improved]
            mu[gi] = np.maximum(mu[gi] * cfg.damping_down, 1e-12)
            stepped[good] = True
            pending[good] = False
            bad = idx[pid[~improved]]
            mu[bad] *= cfg.damping_up
            over = mu[idx] > cfg.damping_max
            flags[idx] |= pending & over
            pending &= ~over
        done = ~stepped | (decrease < tol)
        active[idx[done]] = False
    return E, s, cost, flags


def lm_solve(problem: AlignmentProblem, init: PoseParams,
             cfg: SolverConfig = None):
    """Coarse-to-fine Levenberg-Marquardt from one initialization."""
    if cfg is None:
        cfg = SolverConfig()
    params = init.copy()
    flagged = False
    for level in range(problem.pyramid_levels):
        params, level_flag = _lm_level(problem, params, level, cfg)
        flagged = flagged or level_flag
    cost = _cost(residuals(params, problem))
    return AlignmentCandidate(problem.cad_id, pose_to_matrix(params), params,
                              cost, flagged=flagged)


def _lm_level(problem, params, level, cfg, max_iter=None, tol=None):
    mu = cfg.damping_init
    r = residuals(params, problem, level)
    cost = _cost(r)
    flagged = False
    if max_iter is None:
        max_iter = cfg.max_iterations
    if tol is None:
        tol = cfg.convergence_tol
    for _ in range(max_iter):
        J = jacobian(params, problem, level)
        JtJ = J.T @ J
        g = J.T @ r
        stepped = False
        while mu <= cfg.damping_max:
            damp = np.diag(np.maximum(np.diagonal(JtJ), 1e-12))
            try:
                delta = np.linalg.solve(JtJ + mu * damp, -g)
            except np.linalg.LinAlgError:
                mu *= cfg.damping_up
                continue
            trial = retract(params, delta)
            r_trial = residuals(trial, problem, level)
            c_trial = _cost(r_trial)
            if c_trial < cost:
                params, r = trial, r_trial
                decrease = cost - c_trial
                cost = c_trial
                mu = max(mu * cfg.damping_down, 1e-12)
                stepped = True
                break
            mu *= cfg.damping_up
        if not stepped:
            flagged = mu > cfg.damping_max
            break
        if decrease < tol:
            break
    return params, flagged


# ---------------------------------------------------------------------------
# Restarts


def cluster_points(points, link_dist):
    """Greedy centroid clustering: each point joins the nearest cluster
    within link_dist or starts a new one.  Returns centroid array."""
    points = np.asarray(points, dtype=float)
    centroids = []
    members = []
    for p in points:
        if centroids:
            d = np.linalg.norm(np.array(centroids) - p, axis=1)
            i = int(np.argmin(d))
            if d[i] < link_dist:
                members[i].append(p)
                centroids[i] = np.mean(members[i], axis=0)
                continue
        centroids.append(p.copy())
        members.append([p])
    return np.array(centroids)


def make_default_restarts(problem: AlignmentProblem, yaw_steps=4, jitter=0.0,
                          scales=(1.0,)):
    """Restart poses at keypoint-cluster centroids crossed with a yaw fan
    and an initial uniform-scale fan, optionally expanded by a 3x3x3
    translation jitter.

    When the problem carries a symmetry tag, the energy is periodic in yaw
    (the target heatmaps hold the whole symmetry orbit), so the fan only
    needs to cover one period: pi for C2, pi/2 for C4, a single yaw for Cinf.
    """
    extent = problem.model_extent()
    centroids = cluster_points(problem.scan_points, 0.6 * extent)
    offsets = [np.zeros(3)]
    if jitter > 0:
        offsets = [np.array([dx, dy, dz])
                   for dx in (-jitter, 0, jitter)
                   for dy in (-jitter, 0, jitter)
                   for dz in (-jitter, 0, jitter)]
    span = 2.0 * np.pi
    if problem.sym is not None:
        span /= {Symmetry.NONE: 1, Symmetry.C2: 2,
                 Symmetry.C4: 4, Symmetry.CINF: max(yaw_steps, 1)}[
                     problem.sym.kind]
    steps = max(int(round(max(yaw_steps, 1) * span / (2.0 * np.pi))), 1)
    c_model = problem.model_center()
    restarts = []
    for c in centroids:
        for off in offsets:
            for k in range(steps):
                yaw = span * k / steps
                R = so3_exp(np.array([0.0, yaw, 0.0]))
                rigid = np.eye(4)
                rigid[:3, :3] = R
                rigid[:3, 3] = c + off - R @ c_model
                a = se3_log(rigid)
                for s0 in scales:
                    restarts.append(PoseParams(a.copy(), np.full(3, s0)))
    return restarts


def poses_close(pa: PoseParams, pb: PoseParams, t_tol=0.1, r_tol=5.0, s_tol=5.0):
    try:
        ta, qa, sa = decompose(pose_to_matrix(pa))
        tb, qb, sb = decompose(pose_to_matrix(pb))
    except ValueError:  # degenerate scale; treat as distinct
        return False
    return (translation_error(ta, tb) < t_tol
            and rotation_error(qa, qb) < r_tol
            and scale_error(sa, sb) < s_tol)


def _canonical_scale(cand: AlignmentCandidate):
    """Fold an even number of negative scale axes into the rotation (an
    equal pose); drop candidates with a mirror (odd negatives) or a
    collapsed axis."""
    s = cand.params.s
    if np.any(np.abs(s) <= 1e-9):
        return None
    signs = np.sign(s)
    if np.all(signs > 0):
        return cand
    if np.prod(signs) < 0:
        return None
    E = se3_exp(cand.params.a)
    E[:3, :3] = E[:3, :3] @ np.diag(signs)
    params = PoseParams(se3_log(E), np.abs(s))
    return AlignmentCandidate(cand.cad_id, pose_to_matrix(params), params,
                              cand.cost, cand.confidence, cand.seen_fraction,
                              cand.flagged)


def align_multi(problem: AlignmentProblem, cfg: SolverConfig = None):
    """One LM solve per restart; deduplicate near-identical poses and sort
    by cost ascending."""
    if cfg is None:
        cfg = SolverConfig()
    restarts = cfg.restarts
    if restarts is None:
        restarts = make_default_restarts(problem, cfg.restart_yaw_steps,
                                         cfg.restart_jitter,
                                         cfg.restart_scales)
    if not restarts:
        raise ValueError("restart list must be non-empty")
    if (cfg.refine_top is None or len(restarts) <= cfg.refine_top
            or not problem._uniform):
        candidates = [lm_solve(problem, init, cfg) for init in restarts]
    else:
        # triage: optimize every restart through all but the finest level in
        # one batched LM (sampling cost is per-pair, not per-voxel, so the
        # extra levels are cheap), then push the best few distinct basins
        # through the finest level; ranking at the coarsest level alone is
        # unreliable because its heatmaps are too blurred
        triage_level = problem.pyramid_levels - 2
        E = np.stack([p.rigid_matrix() for p in restarts])
        s = np.stack([p.s for p in restarts])
        flags = np.zeros(len(restarts), bool)
        for level in range(triage_level + 1):
            E, s, costs, level_flags = _lm_level_batch(
                problem, E, s, level, cfg, max_iter=25, tol=1e-5)
            flags |= level_flags
            if level < triage_level:
                # narrow to the better half (the winner basin is essentially
                # never in the bottom half even at the blurred coarse level)
                keep = np.argsort(costs, kind="stable")[
                    :max(16, len(costs) // 2)]
                E, s, flags = E[keep], s[keep], flags[keep]
        order = np.argsort(costs, kind="stable")
        # refine distinct basins only: duplicates of one triage minimum
        # would otherwise crowd out the runner-up
        picked = []
        for i in order:
            p = PoseParams(se3_log(E[i]), s[i])
            if any(poses_close(p, q) for q, _ in picked):
                continue
            picked.append((p, bool(flags[i])))
            if len(picked) >= cfg.refine_top:
                break
        Eb = np.stack([p.rigid_matrix() for p, _ in picked])
        sb = np.stack([p.s for p, _ in picked])
        fb = np.array([flag for _, flag in picked])
        for level in range(triage_level + 1, problem.pyramid_levels):
            Eb, sb, costs, level_flags = _lm_level_batch(
                problem, Eb, sb, level, cfg,
                max_iter=cfg.max_iterations, tol=cfg.convergence_tol)
            fb |= level_flags
        candidates = []
        for i in range(len(picked)):
            p = PoseParams(se3_log(Eb[i]), sb[i])
            candidates.append(AlignmentCandidate(
                problem.cad_id, pose_to_matrix(p), p,
                float(costs[i]), flagged=bool(fb[i])))
    # scale positivity is enforced at candidate acceptance, not per iteration
    candidates = [_canonical_scale(c) for c in candidates]
    candidates = [c for c in candidates if c is not None]
    candidates.sort(key=lambda c: c.cost)
    kept = []
    for cand in candidates:
        if any(poses_close(cand.params, k.params) for k in kept):
            continue
        kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# CMA-ES


@dataclass
class CmaesConfig:
    population: int = None  # default 4 + floor(3 ln n)
    generations: int = 500
    sigma0: float = 1.0
    ftol: float = 1e-14
    seed: int = 0


class CmaEs:
    """Standard (mu/mu_w, lambda) CMA-ES with rank-one and rank-mu updates."""

    def __init__(self, x0, sigma0, popsize=None, seed=0):
        self.n = len(x0)
        self.mean = np.asarray(x0, dtype=float).copy()
        self.sigma = float(sigma0)
        self.lam = popsize or 4 + int(3 * np.log(self.n))
        self.mu = self.lam // 2
        w = np.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights**2)
        n, mueff = self.n, self.mueff
        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.cs = (mueff + 2) / (n + mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff)
        self.cmu = min(1 - self.c1,
                       2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        self.damps = 1 + 2 * max(0, np.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.rng = np.random.default_rng(seed)
        self.best_x = self.mean.copy()
        self.best_f = np.inf

    def ask(self):
        # eigendecomposition each generation; n = 9 keeps this cheap
        d, B = np.linalg.eigh(self.C)
        d = np.sqrt(np.maximum(d, 1e-20))
        self._B, self._d = B, d
        z = self.rng.standard_normal((self.lam, self.n))
        return self.mean + self.sigma * (z @ np.diag(d) @ B.T)

    def tell(self, xs, fs):
        order = np.argsort(fs)
        if fs[order[0]] < self.best_f:
            self.best_f = float(fs[order[0]])
            self.best_x = xs[order[0]].copy()
        sel = xs[order[: self.mu]]
        old_mean = self.mean
        self.mean = self.weights @ sel
        y = (self.mean - old_mean) / self.sigma
        B, d = self._B, self._d
        c_inv_sqrt = B @ np.diag(1.0 / d) @ B.T
        self.ps = ((1 - self.cs) * self.ps
                   + np.sqrt(self.cs * (2 - self.cs) * self.mueff) * (c_inv_sqrt @ y))
        hsig = (np.linalg.norm(self.ps)
                / np.sqrt(1 - (1 - self.cs) ** (2 * (self._gen + 1)))
                < (1.4 + 2 / (self.n + 1)) * self.chi_n)
        self.pc = ((1 - self.cc) * self.pc
                   + hsig * np.sqrt(self.cc * (2 - self.cc) * self.mueff) * y)
        ys = (sel - old_mean) / self.sigma
        rank_mu = sum(w * np.outer(yi, yi) for w, yi in zip(self.weights, ys))
        self.C = ((1 - self.c1 - self.cmu) * self.C
                  + self.c1 * (np.outer(self.pc, self.pc)
                               + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
                  + self.cmu * rank_mu)
        self.C = (self.C + self.C.T) / 2.0
        self.sigma *= np.exp(
            (self.cs / self.damps) * (np.linalg.norm(self.ps) / self.chi_n - 1))

    def run(self, f, generations, ftol):
        for g in range(generations):
            self._gen = g
            xs = self.ask()
            fs = np.array([f(x) for x in xs])
            self.tell(xs, fs)
            if self.best_f < ftol or self.sigma < 1e-13:
                break
        return self.best_x, self.best_f


def cmaes_minimize(f, x0, sigma0, cfg: CmaesConfig = None):
    """Minimize an arbitrary function with CMA-ES, with stagnation restarts
    inside the generation budget; returns (best_x, best_f)."""
    if cfg is None:
        cfg = CmaesConfig()
    budget = cfg.generations
    best_x = np.asarray(x0, dtype=float).copy()
    best_f = np.inf
    attempt = 0
    rng = np.random.default_rng(cfg.seed)
    while budget > 0:
        if attempt == 0:
            start = np.asarray(x0, dtype=float)
            sigma = sigma0
        else:
            start = np.asarray(x0, dtype=float) + rng.normal(0, sigma0, len(best_x))
            sigma = sigma0 * 2.0
        es = CmaEs(start, sigma, popsize=cfg.population,
                   seed=cfg.seed + 7919 * attempt)
        gens = min(budget, cfg.generations)
        x, fx = es.run(f, gens, cfg.ftol)
        budget -= es._gen + 1
        if fx < best_f:
            best_f, best_x = fx, x
        if best_f < cfg.ftol:
            break
        attempt += 1
    return best_x, best_f


def cmaes_solve_pairs(pairs, cfg: CmaesConfig = None):
    """Solve a 9DoF pose from exact (cad point, scan point) pairs by CMA-ES
    on the summed squared point-to-point distance."""
    if cfg is None:
        cfg = CmaesConfig()
    if len(pairs) < 6:
        raise ValueError("need at least 6 keypoint pairs")
    cad = np.array([np.asarray(c, dtype=float) for c, _ in pairs])
    scan = np.array([np.asarray(p, dtype=float) for _, p in pairs])

    def f(x):
        m = pose_to_matrix(PoseParams(x[:6], x[6:]))
        moved = cad @ m[:3, :3].T + m[:3, 3]
        return float(np.sum((moved - scan) ** 2))

    x0 = np.zeros(9)
    x0[3:6] = scan.mean(axis=0) - cad.mean(axis=0)
    x0[6:] = 1.0
    best, _ = cmaes_minimize(f, x0, cfg.sigma0, cfg)
    return PoseParams(best[:6], best[6:])


# ---------------------------------------------------------------------------
# RANSAC baseline


@dataclass
class RansacConfig:
    iterations: int = 2000
    inlier_dist: float = 0.20
    height_max_diff: float = 0.8
    top_k: int = 8
    min_inliers: int = 3
    max_models: int = 10
    seed: int = 0


class DegenerateCorrespondences(RuntimeError):
    """All minimal samples were degenerate (yaw unobservable)."""


def local_df_descriptor(grid: VoxelGrid, position, radius=2):
    """Plumbing descriptor: flattened 5^3 patch of trilinear DF samples
    around a point at voxel_size spacing."""
    o = np.arange(-radius, radius + 1) * grid.voxel_size
    offs = np.stack(np.meshgrid(o, o, o, indexing="ij"), axis=-1).reshape(-1, 3)
    vals, _ = sample_trilinear_batch(grid, np.asarray(position) + offs)
    return vals


def _estimate_yaw_translation(cad_pts, scan_pts):
    """Closed-form least-squares yaw (about +y) and translation; returns
    (R, t) or None when the yaw is unobservable."""
    qm = cad_pts.mean(axis=0)
    pm = scan_pts.mean(axis=0)
    q = cad_pts - qm
    p = scan_pts - pm
    a = float(np.sum(p[:, 0] * q[:, 0] + p[:, 2] * q[:, 2]))
    b = float(np.sum(p[:, 0] * q[:, 2] - p[:, 2] * q[:, 0]))
    if a * a + b * b < 1e-18:
        return None
    yaw = math.atan2(b, a)
    R = so3_exp(np.array([0.0, yaw, 0.0]))
    t = pm - R @ qm
    return R, t


def _collinear(pts, tol=1e-9):
    v1 = pts[1] - pts[0]
    v2 = pts[2] - pts[0]
    return np.linalg.norm(np.cross(v1, v2)) < tol


def ransac_align(scan_keypoints, scan_descriptors, cad_keypoints,
                 cad_descriptors, class_scale, cfg: RansacConfig = None,
                 cad_id="", category=""):
    """RANSAC alignment from descriptor correspondences at a fixed class
    scale; emits one candidate per accepted model, marking off used scan
    keypoints for subsequent models."""
    if cfg is None:
        cfg = RansacConfig()
    scan_kp = np.asarray(scan_keypoints, dtype=float).reshape(-1, 3)
    cad_kp = np.asarray(cad_keypoints, dtype=float).reshape(-1, 3)
    scan_d = np.asarray(scan_descriptors, dtype=float)
    cad_d = np.asarray(cad_descriptors, dtype=float)
    if scan_d.shape[1] != cad_d.shape[1]:
        raise ValueError("descriptor lengths differ")
    scale = np.asarray(class_scale, dtype=float).reshape(3)
    cad_scaled = cad_kp * scale[np.newaxis, :]

    # candidate correspondences: per scan keypoint, top-k by descriptor L2
    # among cad keypoints with a compatible height
    corr = []
    for i in range(len(scan_kp)):
        ok = np.abs(scan_kp[i, 1] - cad_scaled[:, 1]) < cfg.height_max_diff
        js = np.flatnonzero(ok)
        if len(js) == 0:
            continue
        dist = np.linalg.norm(cad_d[js] - scan_d[i], axis=1)
        order = np.argsort(dist, kind="stable")[: cfg.top_k]
        corr.extend((i, int(js[j])) for j in order)
    if len(corr) < 3:
        raise ValueError("fewer than 3 candidate correspondences")

    rng = np.random.default_rng(cfg.seed)
    available = np.ones(len(scan_kp), dtype=bool)
    candidates = []
    cad_lo = cad_kp.min(axis=0)
    cad_hi = cad_kp.max(axis=0)

    for _ in range(cfg.max_models):
        active = [(i, j) for i, j in corr if available[i]]
        if len(active) < 3:
            break
        p_all = scan_kp[[i for i, _ in active]]
        q_all = cad_scaled[[j for _, j in active]]
        best = None
        any_nondegenerate = False
        for _ in range(cfg.iterations):
            sel = rng.choice(len(active), size=3, replace=False)
            q3 = q_all[sel]
            if _collinear(q3):
                continue
            est = _estimate_yaw_translation(q3, p_all[sel])
            if est is None:
                continue
            any_nondegenerate = True
            R, t = est
            d = np.linalg.norm(q_all @ R.T + t - p_all, axis=1)
            inl = d < cfg.inlier_dist
            n_inl = int(inl.sum())
            if best is None or n_inl > best[0]:
                best = (n_inl, R, t, inl)
        if not any_nondegenerate:
            if not candidates:
                raise DegenerateCorrespondences(
                    "all correspondence samples are collinear")
            break
        n_inl, R, t, inl = best
        if n_inl < cfg.min_inliers:
            break
        # refine on the inlier set
        est = _estimate_yaw_translation(q_all[inl], p_all[inl])
        if est is not None:
            R, t = est
        d = np.linalg.norm(q_all @ R.T + t - p_all, axis=1)
        inl = d < cfg.inlier_dist
        pose = np.eye(4)
        pose[:3, :3] = R * scale[np.newaxis, :]
        pose[:3, 3] = t
        cost = float(np.sum(d[inl] ** 2))
        candidates.append(AlignmentCandidate(cad_id, pose,
                                             PoseParams(se3_log(_rigid(R, t)),
                                                        scale.copy()),
                                             cost))
        # mark off inlier keypoints and keypoints inside the aligned box
        for (i, _), is_in in zip(active, inl):
            if is_in:
                available[i] = False
        box = _aligned_box(pose, cad_lo, cad_hi)
        inside = _points_in_box(scan_kp, box)
        available &= ~inside
    return candidates


def _rigid(R, t):
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = t
    return m


def _aligned_box(pose, lo, hi):
    center = (lo + hi) / 2.0
    size = np.maximum(hi - lo, 1e-6)
    m = np.eye(4)
    m[:3, :3] = np.diag(size)
    m[:3, 3] = center
    return OrientedBox(np.asarray(pose) @ m)


def _points_in_box(points, box: OrientedBox):
    inv = np.linalg.inv(box.transform)
    local = points @ inv[:3, :3].T + inv[:3, 3]
    return np.all(np.abs(local) <= 0.5, axis=1)
