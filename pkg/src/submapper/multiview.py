"""Camera model and multiview estimators.

Pose convention is camera-from-world everywhere: ``x_cam = R @ X + t``.
Relative poses returned by `estimate_relative_pose` map points from the
first camera's frame into the second's.

RANSAC loops are seeded and deterministic; minimal solvers for the
essential matrix and PnP are delegated to OpenCV, while hypothesis
sampling, inlier scoring and refit policy live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .sim3 import SE3, Sim3, sim3_apply


class EstimationError(RuntimeError):
    """A geometric estimator could not produce a model."""


class PnPFailure(EstimationError):
    """Too few PnP inliers (tracking-lost signal)."""


class LinkRejected(EstimationError):
    """A 3D-3D similarity link had too few inliers."""


class DegenerateTriangulationError(EstimationError):
    """Triangulation rays nearly parallel or baseline zero."""


class RankDeficiencyError(EstimationError):
    """Point configuration is degenerate (collinear or coincident)."""


@dataclass
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int = 0
    height: int = 0

    def matrix(self):
        return np.array([[self.focal, 0.0, self.cx],
                         [0.0, self.focal, self.cy],
                         [0.0, 0.0, 1.0]])

    def in_bounds(self, uv, margin=0.0):
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= margin) & (uv[:, 0] <= self.width - 1 - margin)
                & (uv[:, 1] >= margin) & (uv[:, 1] <= self.height - 1 - margin))


@dataclass
class RansacConfig:
    max_iterations: int = 1000
    inlier_threshold: float = 2.0
    min_inliers: int = 12
    seed: int = 0
    confidence: float = 0.999


@dataclass
class Correspondence2D3D:
    landmark_id: int
    world_point: np.ndarray
    pixel: np.ndarray


@dataclass
class Correspondences3D:
    """3D-3D correspondences between two maps, struct-of-arrays layout."""

    ids_a: np.ndarray
    ids_b: np.ndarray
    points_a: np.ndarray
    points_b: np.ndarray

    def __len__(self):
        return len(self.points_a)

    def subset(self, mask):
        return Correspondences3D(self.ids_a[mask], self.ids_b[mask],
                                 self.points_a[mask], self.points_b[mask])


def project(K, pose, X):
    """Pixel of a world point, or None when at or behind the camera."""
    xc = pose.R @ np.asarray(X, dtype=float) + pose.t
    if xc[2] <= 0.0:
        return None
    return np.array([K.focal * xc[0] / xc[2] + K.cx,
                     K.focal * xc[1] / xc[2] + K.cy])


def project_points(K, pose, X):
    """Vectorized projection of (n, 3) points -> (pixels, in-front mask)."""
    xc = np.asarray(X, dtype=float) @ pose.R.T + pose.t
    z = xc[:, 2]
    valid = z > 1e-12
    zsafe = np.where(valid, z, 1.0)
    uv = np.empty((len(xc), 2))
    uv[:, 0] = K.focal * xc[:, 0] / zsafe + K.cx
    uv[:, 1] = K.focal * xc[:, 1] / zsafe + K.cy
    return uv, valid


def triangulation_angle(pose_a, pose_b, X):
    """Angle in degrees between the two viewing rays of X."""
    X = np.asarray(X, dtype=float)
    ra = X - pose_a.center()
    rb = X - pose_b.center()
    na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateTriangulationError("point coincides with a camera center")
    c = np.clip(np.dot(ra, rb) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def _rays(K, pose, pix):
    """World-frame unit ray directions and the camera center."""
    pix = np.atleast_2d(pix)
    d = np.column_stack([(pix[:, 0] - K.cx) / K.focal,
                         (pix[:, 1] - K.cy) / K.focal,
                         np.ones(len(pix))])
    d = d @ pose.R  # R.T applied to each row
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d, pose.center()


def triangulate_points(pose_a, pose_b, K, pix_a, pix_b, min_angle_deg=1.0,
                       refine_iters=5):
    """Two-view triangulation of match arrays.

    Returns (points (n,3), ray angle in degrees (n,), ok mask). Entries
    failing the minimum-angle test have ok=False and unreliable points.
    """
    da, ca = _rays(K, pose_a, pix_a)
    db, cb = _rays(K, pose_b, pix_b)
    # Midpoint of the common perpendicular between the two rays.
    dd = np.sum(da * db, axis=1)
    base = cb - ca
    denom = 1.0 - dd * dd
    denom = np.where(denom < 1e-15, 1e-15, denom)
    pa = np.sum(base * da, axis=1)
    pb = np.sum(base * db, axis=1)
    ta = (pa - dd * pb) / denom
    tb = (dd * pa - pb) / denom
    X = 0.5 * (ca + ta[:, None] * da + cb + tb[:, None] * db)

    angle = np.degrees(np.arccos(np.clip(dd, -1.0, 1.0)))
    ok = (angle >= min_angle_deg) & (ta > 0) & (tb > 0)

    # Gauss-Newton on the two-view reprojection error.
    for _ in range(refine_iters):
        JtJ = np.zeros((len(X), 3, 3))
        Jtr = np.zeros((len(X), 3))
        for pose, pix in ((pose_a, np.atleast_2d(pix_a)),
                          (pose_b, np.atleast_2d(pix_b))):
            xc = X @ pose.R.T + pose.t
            z = np.where(np.abs(xc[:, 2]) < 1e-12, 1e-12, xc[:, 2])
            u = K.focal * xc[:, 0] / z + K.cx
            v = K.focal * xc[:, 1] / z + K.cy
            r = np.column_stack([u - pix[:, 0], v - pix[:, 1]])
            f_z = K.focal / z
            Jc = np.zeros((len(X), 2, 3))
            Jc[:, 0, 0] = f_z
            Jc[:, 1, 1] = f_z
            Jc[:, 0, 2] = -f_z * xc[:, 0] / z
            Jc[:, 1, 2] = -f_z * xc[:, 1] / z
            J = Jc @ pose.R
            JtJ += np.einsum('nij,nik->njk', J, J)
            Jtr += np.einsum('nij,ni->nj', J, r)
        JtJ += 1e-12 * np.eye(3)
        X = X - np.linalg.solve(JtJ, Jtr[:, :, None])[:, :, 0]

    return X, angle, ok


def triangulate(pose_a, pose_b, K, pix_a, pix_b, min_angle_deg=1.0):
    """Single-pair triangulation; raises on degenerate geometry."""
    if np.linalg.norm(pose_a.center() - pose_b.center()) < 1e-12:
        raise DegenerateTriangulationError("zero baseline")
    X, angle, ok = triangulate_points(pose_a, pose_b, K,
                                      np.atleast_2d(pix_a),
                                      np.atleast_2d(pix_b),
                                      min_angle_deg=min_angle_deg)
    if not ok[0]:
        raise DegenerateTriangulationError(
            f"triangulation angle {angle[0]:.3f} deg below {min_angle_deg}")
    return X[0]


def _ransac_iterations(inlier_ratio, sample_size, confidence, max_iterations):
    if inlier_ratio <= 0.0:
        return max_iterations
    w = min(inlier_ratio, 1.0 - 1e-12)
    denom = np.log1p(-w ** sample_size)
    if denom >= -1e-12:
        return max_iterations
    n = int(np.ceil(np.log(1.0 - confidence) / denom))
    return min(max(n, 1), max_iterations)


def _symmetric_epipolar_distance(E, K, pts_a, pts_b):
    Kinv = np.linalg.inv(K.matrix())
    F = Kinv.T @ E @ Kinv
    xa = np.column_stack([pts_a, np.ones(len(pts_a))])
    xb = np.column_stack([pts_b, np.ones(len(pts_b))])
    Fxa = xa @ F.T
    Ftxb = xb @ F
    num = np.abs(np.sum(xb * Fxa, axis=1))
    da = num / np.maximum(np.linalg.norm(Fxa[:, :2], axis=1), 1e-15)
    db = num / np.maximum(np.linalg.norm(Ftxb[:, :2], axis=1), 1e-15)
    return np.maximum(da, db)


def _fit_essential(Kmat, pts_a, pts_b):
    """Least-squares essential matrix from an all-inlier correspondence set.

    Normalized 8-point solve followed by projection onto the essential
    manifold (singular values forced to (1, 1, 0)).  Needs >= 8 points.
    """
    Kinv = np.linalg.inv(Kmat)
    xa = np.column_stack([pts_a, np.ones(len(pts_a))]) @ Kinv.T
    xb = np.column_stack([pts_b, np.ones(len(pts_b))]) @ Kinv.T
    A = (xb[:, :, None] * xa[:, None, :]).reshape(len(xa), 9)
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    E = Vt[-1].reshape(3, 3)
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def estimate_relative_pose(pts_a, pts_b, K, cfg):
    """Essential-matrix RANSAC -> (relative SE3 with ||t||=1, inlier mask).

    Inliers are scored by symmetric epipolar distance in pixels.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    n = len(pts_a)
    if n < 5:
        raise ValueError(f"need at least 5 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    Kmat = K.matrix()
    best_mask = None
    best_E = None
    best_count = 0
    needed = cfg.max_iterations
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, size=5, replace=False)
        E = cv2.findEssentialMat(pts_a[idx], pts_b[idx], Kmat,
                                 method=cv2.RANSAC)[0]
        if E is None:
            continue
        for k in range(E.shape[0] // 3):
            Ek = E[3 * k:3 * k + 3]
            d = _symmetric_epipolar_distance(Ek, K, pts_a, pts_b)
            mask = d < cfg.inlier_threshold
            count = int(mask.sum())
            if count > best_count:
                best_count, best_mask, best_E = count, mask, Ek
                needed = min(needed, _ransac_iterations(
                    count / n, 5, cfg.confidence, cfg.max_iterations))
    if best_E is None or best_count < max(cfg.min_inliers, 5):
        raise EstimationError(
            f"essential estimation failed: {best_count} inliers")
    # Re-estimate on the consensus set, then decompose with cheirality.
    E_ref = (_fit_essential(Kmat, pts_a[best_mask], pts_b[best_mask])
             if best_count >= 8 else None)
    if E_ref is not None and E_ref.shape == (3, 3):
        d = _symmetric_epipolar_distance(E_ref, K, pts_a, pts_b)
        mask = d < cfg.inlier_threshold
        if mask.sum() >= best_count:
            best_E, best_mask = E_ref, mask
    _, R, t, _ = cv2.recoverPose(best_E, pts_a[best_mask], pts_b[best_mask],
                                 Kmat)
    if int(best_mask.sum()) < cfg.min_inliers:
        raise EstimationError(
            f"essential estimation failed: {int(best_mask.sum())} inliers")
    return SE3(R, t.ravel()), best_mask


def _reprojection_errors(K, pose, world, pixels):
    uv, valid = project_points(K, pose, world)
    err = np.linalg.norm(uv - pixels, axis=1)
    err[~valid] = np.inf
    return err


def pnp_ransac(world, pixels, K, cfg, initial_pose=None):
    """Absolute pose from 2D-3D correspondences -> (SE3, inlier mask).

    Minimal P3P hypotheses disambiguated on a fourth sampled point, then
    LM refinement on the consensus set. Deterministic for a fixed seed.
    """
    world = np.asarray(world, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    n = len(world)
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    Kmat = K.matrix()
    best_mask = None
    best_pose = None
    best_count = 0
    candidates = []
    if initial_pose is not None:
        candidates.append(initial_pose)
    needed = cfg.max_iterations
    it = 0
    while it < needed or (it < cfg.max_iterations and best_count < 4):
        it += 1
        if it > cfg.max_iterations:
            break
        idx = rng.choice(n, size=4, replace=False)
        ok, rvecs, tvecs = cv2.solveP3P(world[idx[:3]], pixels[idx[:3]],
                                        Kmat, None, flags=cv2.SOLVEPNP_P3P)
        if not ok:
            continue
        fourth = None
        fourth_err = np.inf
        for rvec, tvec in zip(rvecs, tvecs):
            pose = SE3(cv2.Rodrigues(rvec)[0], tvec.ravel())
            e = _reprojection_errors(K, pose, world[idx[3:4]], pixels[idx[3:4]])
            if e[0] < fourth_err:
                fourth_err, fourth = e[0], pose
        if fourth is None or fourth_err > cfg.inlier_threshold:
            continue
        candidates.append(fourth)
        for pose in candidates:
            err = _reprojection_errors(K, pose, world, pixels)
            mask = err < cfg.inlier_threshold
            count = int(mask.sum())
            if count > best_count:
                best_count, best_mask, best_pose = count, mask, pose
                needed = min(needed, _ransac_iterations(
                    count / n, 4, cfg.confidence, cfg.max_iterations))
        candidates = []
    if best_pose is None or best_count < cfg.min_inliers:
        raise PnPFailure(f"PnP failed: {best_count} inliers of {n}")
    # LM refinement on all inliers, then final inlier recount.
    rvec = cv2.Rodrigues(best_pose.R)[0]
    tvec = best_pose.t.reshape(3, 1).copy()
    ok, rvec, tvec = cv2.solvePnP(world[best_mask], pixels[best_mask], Kmat,
                                  None, rvec, tvec, useExtrinsicGuess=True,
                                  flags=cv2.SOLVEPNP_ITERATIVE)
    if ok:
        pose = SE3(cv2.Rodrigues(rvec)[0], tvec.ravel())
        err = _reprojection_errors(K, pose, world, pixels)
        mask = err < cfg.inlier_threshold
        if mask.sum() >= best_count:
            best_pose, best_mask = pose, mask
    if int(best_mask.sum()) < cfg.min_inliers:
        raise PnPFailure(f"PnP failed: {int(best_mask.sum())} inliers of {n}")
    return best_pose, best_mask


def umeyama_sim3(pts_a, pts_b):
    """Least-squares Sim(3) mapping pts_a onto pts_b.

    Minimizes sum ||s R a_i + t - b_i||^2 (closed form via SVD of the
    cross-covariance). Raises RankDeficiencyError on collinear input.
    """
    a = np.asarray(pts_a, dtype=float)
    b = np.asarray(pts_b, dtype=float)
    if len(a) < 3:
        raise ValueError(f"need at least 3 correspondences, got {len(a)}")
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    da = a - mu_a
    db = b - mu_b
    cov = db.T @ da / len(a)
    U, d, Vt = np.linalg.svd(cov)
    var_a = (da * da).sum() / len(a)
    if var_a < 1e-24 or d[1] < 1e-12 * max(d[0], 1e-300):
        raise RankDeficiencyError("degenerate point configuration")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float((d * np.diag(S)).sum() / var_a)
    if s <= 0:
        raise RankDeficiencyError("non-positive scale estimate")
    t = mu_b - s * (R @ mu_a)
    return Sim3(R, s, t)


def sim3_ransac(pts_a, pts_b, cfg):
    """RANSAC similarity alignment of two 3D point sets.

    Returns (Sim3, inlier mask); inliers by Euclidean distance after
    transforming pts_a. Raises LinkRejected below cfg.min_inliers.
    """
    a = np.asarray(pts_a, dtype=float)
    b = np.asarray(pts_b, dtype=float)
    n = len(a)
    if n < 3:
        raise LinkRejected(f"need at least 3 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    best_mask = None
    best_count = 0
    needed = cfg.max_iterations
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        try:
            T = umeyama_sim3(a[idx], b[idx])
        except (RankDeficiencyError, ValueError):
            continue
        d = np.linalg.norm(sim3_apply(T, a) - b, axis=1)
        mask = d < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            needed = min(needed, _ransac_iterations(
                count / n, 3, cfg.confidence, cfg.max_iterations))
    if best_mask is None or best_count < max(cfg.min_inliers, 3):
        raise LinkRejected(f"similarity link rejected: {best_count} inliers")
    T = umeyama_sim3(a[best_mask], b[best_mask])
    d = np.linalg.norm(sim3_apply(T, a) - b, axis=1)
    mask = d < cfg.inlier_threshold
    if mask.sum() >= 3 and mask.sum() >= best_count:
        T = umeyama_sim3(a[mask], b[mask])
        best_mask = mask
    if int(best_mask.sum()) < cfg.min_inliers:
        raise LinkRejected(
            f"similarity link rejected: {int(best_mask.sum())} inliers")
    return T, best_mask
