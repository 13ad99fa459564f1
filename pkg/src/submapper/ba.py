"""Bundle adjustment over a submap's keyframes and landmarks.

Levenberg-Marquardt on Huber-robustified reprojection error, exploiting
the camera/point sparsity pattern via Schur elimination of the point
blocks. Camera pose updates are left-multiplicative se(3) steps; when
focal estimation is enabled each camera carries its own focal scalar as
a seventh parameter. At least one camera block must be fixed to anchor
the gauge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .multiview import CameraIntrinsics
from .sim3 import SE3, se3_exp

BEHIND_CAMERA_RESIDUAL = 1e6


@dataclass
class BAOptions:
    max_iterations: int = 50
    function_tolerance: float = 1e-12
    huber_delta: float = 2.0
    estimate_focal: bool = False


@dataclass
class BAProblem:
    K: CameraIntrinsics
    poses: list
    points: np.ndarray
    obs_cam: np.ndarray
    obs_pt: np.ndarray
    obs_pix: np.ndarray
    fixed_cameras: np.ndarray
    fixed_points: np.ndarray | None = None
    focals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.obs_cam = np.asarray(self.obs_cam, dtype=np.int64)
        self.obs_pt = np.asarray(self.obs_pt, dtype=np.int64)
        self.obs_pix = np.asarray(self.obs_pix, dtype=float)
        self.fixed_cameras = np.asarray(self.fixed_cameras, dtype=bool)
        if self.fixed_points is None:
            self.fixed_points = np.zeros(len(self.points), dtype=bool)
        if self.focals is None:
            self.focals = np.full(len(self.poses), self.K.focal)
        self.focals = np.asarray(self.focals, dtype=float)

    def validate(self):
        n_cam, n_pt = len(self.poses), len(self.points)
        if not self.fixed_cameras.any():
            raise ValueError("no gauge anchor: at least one camera must be fixed")
        if len(self.obs_cam) and (self.obs_cam.max() >= n_cam
                                  or self.obs_pt.max() >= n_pt):
            raise ValueError("observation references a missing block")
        return self


def reprojection_residual(K, pose, X, pixel, focal=None):
    """Projected-minus-observed pixel residual and a behind-camera flag."""
    f = K.focal if focal is None else focal
    xc = pose.R @ np.asarray(X, dtype=float) + pose.t
    if xc[2] <= 0.0:
        return np.full(2, BEHIND_CAMERA_RESIDUAL), True
    uv = np.array([f * xc[0] / xc[2] + K.cx, f * xc[1] / xc[2] + K.cy])
    return uv - np.asarray(pixel, dtype=float), False


def _residuals_and_jacobians(problem, estimate_focal):
    """Batched residuals (m,2) and Jacobians wrt camera and point blocks."""
    Rs = np.stack([p.R for p in problem.poses])
    ts = np.stack([p.t for p in problem.poses])
    ci, pi = problem.obs_cam, problem.obs_pt
    X = problem.points[pi]
    xc = np.einsum('mij,mj->mi', Rs[ci], X) + ts[ci]
    z = xc[:, 2]
    behind = z <= 1e-9
    zsafe = np.where(behind, 1.0, z)
    f = problem.focals[ci]
    u = f * xc[:, 0] / zsafe + problem.K.cx
    v = f * xc[:, 1] / zsafe + problem.K.cy
    r = np.column_stack([u, v]) - problem.obs_pix
    r[behind] = BEHIND_CAMERA_RESIDUAL

    m = len(ci)
    cpb = 7 if estimate_focal else 6
    f_z = f / zsafe
    # d(uv)/d(xc)
    Jc_x = np.zeros((m, 2, 3))
    Jc_x[:, 0, 0] = f_z
    Jc_x[:, 1, 1] = f_z
    Jc_x[:, 0, 2] = -f_z * xc[:, 0] / zsafe
    Jc_x[:, 1, 2] = -f_z * xc[:, 1] / zsafe
    # d(xc)/d(se3 left update) = [-skew(xc) | I]
    Jx_cam = np.zeros((m, 3, 6))
    Jx_cam[:, 0, 1] = xc[:, 2]
    Jx_cam[:, 0, 2] = -xc[:, 1]
    Jx_cam[:, 1, 0] = -xc[:, 2]
    Jx_cam[:, 1, 2] = xc[:, 0]
    Jx_cam[:, 2, 0] = xc[:, 1]
    Jx_cam[:, 2, 1] = -xc[:, 0]
    Jx_cam[:, 0, 3] = 1.0
    Jx_cam[:, 1, 4] = 1.0
    Jx_cam[:, 2, 5] = 1.0
    J_cam = np.zeros((m, 2, cpb))
    J_cam[:, :, :6] = Jc_x @ Jx_cam
    if estimate_focal:
        J_cam[:, 0, 6] = xc[:, 0] / zsafe
        J_cam[:, 1, 6] = xc[:, 1] / zsafe
    J_pt = Jc_x @ Rs[ci]
    J_cam[behind] = 0.0
    J_pt[behind] = 0.0
    return r, J_cam, J_pt, behind


def _huber_weights(r, delta):
    """IRLS weights and robust cost for per-observation residual norms."""
    norms = np.linalg.norm(r, axis=1)
    w = np.ones_like(norms)
    big = norms > delta
    w[big] = delta / norms[big]
    cost = np.where(big, delta * (2.0 * norms - delta), norms ** 2).sum()
    return w, cost


def _pair_structure(problem):
    """Per-point observation pair indices for the Schur off-diagonal term."""
    order = np.argsort(problem.obs_pt, kind='stable')
    pts, starts = np.unique(problem.obs_pt[order], return_index=True)
    pair_a, pair_b = [], []
    bounds = np.append(starts, len(order))
    for k in range(len(pts)):
        o = order[bounds[k]:bounds[k + 1]]
        a, b = np.meshgrid(o, o, indexing='ij')
        pair_a.append(a.ravel())
        pair_b.append(b.ravel())
    if not pair_a:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(pair_a), np.concatenate(pair_b)


def solve_ba(problem, opts=None):
    """Refine the problem in place; returns (rms, info).

    info carries 'iterations' (accepted-step log), 'converged', and
    'behind_count'. The accepted cost sequence is non-increasing.
    """
    opts = opts or BAOptions()
    problem.validate()
    n_cam = len(problem.poses)
    n_pt = len(problem.points)
    cpb = 7 if opts.estimate_focal else 6
    free_cam = ~problem.fixed_cameras
    free_pt = ~problem.fixed_points
    # Fixed camera blocks pin the 6 pose parameters (the gauge); the focal
    # scalar is not a gauge freedom and stays free for every camera.
    cam_param_mask = np.repeat(free_cam, cpb)
    if opts.estimate_focal:
        cam_param_mask = cam_param_mask.reshape(n_cam, cpb)
        cam_param_mask[:, 6] = True
        cam_param_mask = cam_param_mask.reshape(-1)
    pair_a, pair_b = _pair_structure(problem)
    m = len(problem.obs_cam)

    def evaluate():
        r, J_cam, J_pt, behind = _residuals_and_jacobians(
            problem, opts.estimate_focal)
        w, cost = _huber_weights(r, opts.huber_delta)
        sw = np.sqrt(w)[:, None]
        return r * sw, J_cam * sw[:, :, None], J_pt * sw[:, :, None], \
            cost, behind

    r, J_cam, J_pt, cost, behind = evaluate()
    log = [cost]
    lam = 1e-4
    # Below float-noise cost per observation there is nothing to gain.
    cost_floor = 1e-18 * max(m, 1)
    converged = cost <= cost_floor
    ci, pi = problem.obs_cam, problem.obs_pt
    for _ in range(opts.max_iterations):
        if converged:
            break
        # Normal-equation blocks.
        U = np.zeros((n_cam, cpb, cpb))
        np.add.at(U, ci, np.einsum('mic,mid->mcd', J_cam, J_cam))
        V = np.zeros((n_pt, 3, 3))
        np.add.at(V, pi, np.einsum('mic,mid->mcd', J_pt, J_pt))
        W = np.einsum('mic,mid->mcd', J_cam, J_pt)  # block per observation
        b_cam = np.zeros((n_cam, cpb))
        np.add.at(b_cam, ci, -np.einsum('mic,mi->mc', J_cam, r))
        b_pt = np.zeros((n_pt, 3))
        np.add.at(b_pt, pi, -np.einsum('mic,mi->mc', J_pt, r))

        accepted = False
        for _try in range(8):
            Ud = U.copy()
            Ud[:, np.arange(cpb), np.arange(cpb)] += lam * np.maximum(
                U[:, np.arange(cpb), np.arange(cpb)], 1.0)
            Vd = V.copy()
            Vd[:, np.arange(3), np.arange(3)] += lam * np.maximum(
                V[:, np.arange(3), np.arange(3)], 1.0)
            Vd[~free_pt] = np.eye(3)
            try:
                V_inv = np.linalg.inv(Vd)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            V_inv[~free_pt] = 0.0

            # Reduced camera system S dx = g.
            S = np.zeros((n_cam, n_cam, cpb, cpb))
            S[np.arange(n_cam), np.arange(n_cam)] = Ud
            if len(pair_a):
                corr = np.einsum('kcd,kde,kfe->kcf', W[pair_a],
                                 V_inv[pi[pair_a]], W[pair_b])
                np.add.at(S, (ci[pair_a], ci[pair_b]), -corr)
            # g_c = b_cam_c - sum_obs W_obs V_inv_pt b_pt
            g = b_cam.copy()
            contrib = np.einsum('mcd,md->mc', W,
                                np.einsum('mde,me->md', V_inv[pi], b_pt[pi]))
            np.add.at(g, ci, -contrib)

            S_full = S.transpose(0, 2, 1, 3).reshape(n_cam * cpb, n_cam * cpb)
            g_full = g.reshape(-1)
            Sf = S_full[np.ix_(cam_param_mask, cam_param_mask)]
            gf = g_full[cam_param_mask]
            try:
                dx_cam_f = np.linalg.solve(Sf, gf) if Sf.size else np.zeros(0)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            dx_cam = np.zeros(n_cam * cpb)
            dx_cam[cam_param_mask] = dx_cam_f
            dx_cam = dx_cam.reshape(n_cam, cpb)

            # Back-substitute point updates.
            rhs = b_pt.copy()
            np.add.at(rhs, pi, -np.einsum('mcd,mc->md', W, dx_cam[ci]))
            dx_pt = np.einsum('kde,ke->kd', V_inv, rhs)
            dx_pt[~free_pt] = 0.0

            # Apply trial step.
            old_poses = list(problem.poses)
            old_points = problem.points
            old_focals = problem.focals
            problem.poses = [se3_exp(dx_cam[c, :6]).compose_after(p)
                             if free_cam[c] else p
                             for c, p in enumerate(problem.poses)]
            problem.points = problem.points + dx_pt
            if opts.estimate_focal:
                problem.focals = problem.focals + dx_cam[:, 6]
            r_new, Jc_new, Jp_new, cost_new, behind = evaluate()
            if cost_new < cost:
                r, J_cam, J_pt = r_new, Jc_new, Jp_new
                prev_cost = cost
                cost = cost_new
                log.append(cost)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if (cost <= cost_floor or prev_cost - cost
                        <= opts.function_tolerance * max(cost, 1.0)):
                    converged = True
                break
            problem.poses = old_poses
            problem.points = old_points
            problem.focals = old_focals
            lam *= 10.0
        if not accepted or converged:
            converged = converged or not accepted
            break

    final_norms = np.linalg.norm(r, axis=1)
    rms = float(np.sqrt((final_norms ** 2).mean())) if m else 0.0
    info = {"iterations": log, "converged": converged,
            "behind_count": int(behind.sum())}
    return rms, info
