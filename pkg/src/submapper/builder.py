"""Sequential local submap creation.

Drives the bootstrap -> track -> keyframe -> bundle-adjust -> complete
loop over a feature-track dataset, restarting on tracking loss, and
emits completed (or failed) submaps in frame order. Each completed
submap seeds the next so that the trailing fraction of its frames is
shared, recording shared-landmark ids for downstream alignment.

Submap coordinates are local: the first keyframe sits at the origin and
the bootstrap baseline sets the (arbitrary) scale, so submaps relate to
the world by a similarity transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import BAOptions, BAProblem, solve_ba
from .multiview import (
    EstimationError,
    PnPFailure,
    RansacConfig,
    estimate_relative_pose,
    pnp_ransac,
    project_points,
    triangulate_points,
)
from .sim3 import SE3


def derive_seed(*parts):
    """Stable 32-bit seed from integer parts (keeps RANSAC deterministic)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


_kernels_warm = False


def _warm_kernels():
    """Run each numerical kernel once on tiny inputs.

    First calls pay one-time setup (BLAS initialization, OpenCV dispatch,
    lazy scipy imports, ufunc caches); doing it here keeps that cost out
    of the first submap's build time.
    """
    global _kernels_warm
    if _kernels_warm:
        return
    _kernels_warm = True
    import cv2
    rng = np.random.default_rng(0)
    a = rng.standard_normal((16, 2, 6))
    u = np.zeros((4, 6, 6))
    np.add.at(u, np.arange(16) % 4, np.einsum('mic,mid->mcd', a, a))
    np.einsum('mij,mj->mi', rng.standard_normal((8, 3, 3)),
              rng.standard_normal((8, 3)))
    np.linalg.svd(rng.standard_normal((9, 9)))
    np.linalg.solve(np.eye(6) + u.sum(axis=0), np.ones(6))
    Kmat = np.array([[100.0, 0, 50], [0, 100, 50], [0, 0, 1]])
    pa = rng.uniform(10, 90, (5, 2))
    cv2.findEssentialMat(pa, pa + rng.uniform(2, 4, (5, 2)), Kmat,
                         method=cv2.RANSAC)
    world = np.column_stack([pa, np.full(5, 10.0)])
    cv2.solvePnP(world, pa, Kmat, None, flags=cv2.SOLVEPNP_EPNP)
    from scipy.spatial import cKDTree
    cKDTree(rng.standard_normal((8, 3))).query(
        rng.standard_normal((2, 3)), k=2)


@dataclass
class BuilderConfig:
    tau_resection: int | None = None   # None: relative rule below
    tau_resection_fraction: float = 0.6
    tau_resection_floor: int = 100
    tau_stereo: int = 1000
    alpha_stereo: float = 30.0
    keyframes_per_submap: int = 20
    overlap_fraction: float = 0.10
    view_angle_limit: float = 60.0
    reprojection_threshold: float = 2.0
    knn_k: int = 30
    knn_sigma: float = 2.0
    estimate_focal: bool = False
    initial_focal: float | None = None   # overrides dataset intrinsics
    match_ratio: float = 0.7             # fraction of median intra-frame NN dist
    min_triangulation_angle: float = 1.0
    min_bootstrap_inliers: int = 30
    min_keyframes_to_keep: int = 20      # fewer at termination -> failed
    ransac_iterations: int = 1000
    ransac_threshold_px: float = 2.0
    min_pnp_inliers: int = 12
    ba_max_iterations: int = 25
    ba_huber_delta: float = 2.0
    # Incremental refits stop early; the completion BA runs to tight
    # convergence and sets the submap's final geometry.
    ba_incremental_tolerance: float = 1e-6
    ba_final_tolerance: float = 1e-12
    seed: int = 0

    def validate(self):
        if not (0.0 < self.overlap_fraction < 0.5):
            raise ValueError("overlap_fraction must lie in (0, 0.5)")
        for name in ("tau_stereo", "alpha_stereo", "keyframes_per_submap",
                     "view_angle_limit", "reprojection_threshold", "knn_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self

    def ransac(self, seed, threshold=None, min_inliers=None):
        return RansacConfig(max_iterations=self.ransac_iterations,
                            inlier_threshold=threshold
                            or self.ransac_threshold_px,
                            min_inliers=min_inliers or self.min_pnp_inliers,
                            seed=seed)


@dataclass
class Keyframe:
    frame_id: int
    pose: SE3
    kind: str                  # bootstrap-first | bootstrap-second | middle | current
    focal_estimate: float | None = None


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    source_view_direction: np.ndarray
    observations: list = field(default_factory=list)  # (frame_id, obs_idx, pixel)
    truth_id: int = -1


@dataclass
class Submap:
    id: int
    keyframes: list = field(default_factory=list)
    landmarks: dict = field(default_factory=dict)
    all_frame_poses: dict = field(default_factory=dict)
    reloc_failed: set = field(default_factory=set)
    frame_range: tuple = (0, 0)
    status: str = "building"
    overlap_links: list = field(default_factory=list)  # (own lid, prev lid)
    median_focal: float | None = None
    final_ba_rms: float = 0.0

    def landmark_positions(self):
        lids = sorted(self.landmarks)
        return np.array(lids, dtype=np.int64), \
            np.stack([self.landmarks[l].position for l in lids]) \
            if lids else np.zeros((0, 3))

    def landmark_descriptors(self):
        lids = sorted(self.landmarks)
        if not lids:
            return np.array([], dtype=np.int64), np.zeros((0, 1))
        return np.array(lids, dtype=np.int64), \
            np.stack([self.landmarks[l].descriptor for l in lids])

    def keyframe_ids(self):
        return [kf.frame_id for kf in self.keyframes]


def match_descriptors(query, targets, threshold):
    """Nearest-neighbour matches query->targets under a distance threshold.

    Returns (query idx, target idx) arrays; each target is used at most
    once (best distance wins).
    """
    if len(query) == 0 or len(targets) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    d2 = (np.einsum('ij,ij->i', query, query)[:, None]
          + np.einsum('ij,ij->i', targets, targets)[None, :]
          - 2.0 * query @ targets.T)
    nn = d2.argmin(axis=1)
    nd = np.sqrt(np.maximum(d2[np.arange(len(query)), nn], 0.0))
    qi = np.flatnonzero(nd < threshold)
    ti = nn[qi]
    # Resolve target conflicts by keeping the closest query.
    order = np.argsort(nd[qi], kind='stable')
    seen = set()
    keep = []
    for o in order:
        if ti[o] not in seen:
            seen.add(ti[o])
            keep.append(o)
    keep = np.sort(np.array(keep, dtype=int))
    return qi[keep], ti[keep]


def intra_frame_match_threshold(descriptors, ratio):
    """ratio x median nearest-neighbour distance within one frame."""
    n = len(descriptors)
    if n < 2:
        return np.inf
    sample = descriptors if n <= 500 else descriptors[:: n // 500 + 1]
    d2 = (np.einsum('ij,ij->i', sample, sample)[:, None]
          + np.einsum('ij,ij->i', sample, sample)[None, :]
          - 2.0 * sample @ sample.T)
    np.fill_diagonal(d2, np.inf)
    return ratio * float(np.median(np.sqrt(np.maximum(d2.min(axis=1), 0.0))))


def should_add_keyframe(pnp_inlier_count, tau_resection):
    return pnp_inlier_count < tau_resection


class TrackingLost(RuntimeError):
    pass


class BootstrapFailed(RuntimeError):
    def __init__(self, msg, resume):
        super().__init__(msg)
        self.resume = resume  # frame id to restart from


class _BuildState:
    """Mutable state of one submap under construction."""

    def __init__(self, submap, K, cfg):
        self.submap = submap
        self.K = K
        self.cfg = cfg
        self.prev_pose = None
        self.frame_matches = {}   # fid -> (lids, obs_idx, pixels, inlier mask)
        self.tau_resection = cfg.tau_resection or cfg.tau_resection_floor
        self._lid_list = None
        self._desc = None
        self._pos = None
        self._vdir = None

    def invalidate(self):
        self._lid_list = None

    def arrays(self):
        if self._lid_list is None:
            lms = self.submap.landmarks
            self._lid_list = np.array(sorted(lms), dtype=np.int64)
            if len(self._lid_list):
                self._desc = np.stack([lms[l].descriptor
                                       for l in self._lid_list])
                self._pos = np.stack([lms[l].position
                                      for l in self._lid_list])
                self._vdir = np.stack([lms[l].source_view_direction
                                       for l in self._lid_list])
            else:
                self._desc = np.zeros((0, 1))
                self._pos = np.zeros((0, 3))
                self._vdir = np.zeros((0, 3))
        return self._lid_list, self._desc, self._pos, self._vdir


class SubmapBuilder:
    """Builds submaps sequentially from a feature-track dataset."""

    def __init__(self, dataset, cfg, log=None):
        cfg.validate()
        self.dataset = dataset
        self.cfg = cfg
        self.K = dataset.intrinsics
        if cfg.initial_focal is not None:
            from .multiview import CameraIntrinsics
            self.K = CameraIntrinsics(cfg.initial_focal, self.K.cx, self.K.cy,
                                      self.K.width, self.K.height)
        self.next_landmark_id = 0
        self.next_submap_id = 0
        self.log = log if log is not None else (lambda *a, **k: None)
        _warm_kernels()

    # -- low-level helpers -------------------------------------------------

    def _alloc_lid(self):
        lid = self.next_landmark_id
        self.next_landmark_id += 1
        return lid

    def _frame(self, fid):
        return self.dataset.frames[fid]

    def _seed(self, *parts):
        return derive_seed(self.cfg.seed, *parts)

    # -- bootstrap ---------------------------------------------------------

    def bootstrap(self, state, start, carry):
        """Establish initial two-keyframe geometry; returns next frame id."""
        cfg, K = self.cfg, self.K
        sm = state.submap
        f0 = self._frame(start)
        thresh0 = intra_frame_match_threshold(f0.descriptors, cfg.match_ratio)
        n_frames = len(self.dataset.frames)
        for fid in range(start + 1, n_frames):
            fr = self._frame(fid)
            qi, ti = match_descriptors(f0.descriptors, fr.descriptors,
                                       thresh0)
            if len(qi) < max(5, cfg.min_bootstrap_inliers):
                # Lost the start frame (e.g. a trajectory discontinuity):
                # give up on this start and resume after the break.
                raise BootstrapFailed(
                    f"bootstrap match starvation at {fid}",
                    resume=fid if fid > start + 1 else start + 1)
            try:
                rel, mask = estimate_relative_pose(
                    f0.pixels[qi], fr.pixels[ti], K,
                    cfg.ransac(self._seed(sm.id, fid, 1),
                               min_inliers=cfg.min_bootstrap_inliers))
            except EstimationError as e:
                raise BootstrapFailed(str(e), resume=fid)
            inl = int(mask.sum())
            pts, angles, ok = triangulate_points(
                SE3(), rel, K, f0.pixels[qi[mask]], fr.pixels[ti[mask]],
                min_angle_deg=cfg.min_triangulation_angle)
            mean_angle = float(angles[ok].mean()) if ok.any() else 0.0
            if inl < cfg.tau_stereo or mean_angle > cfg.alpha_stereo:
                if ok.sum() < cfg.min_bootstrap_inliers:
                    continue  # not enough stable geometry yet
                sm.keyframes.append(Keyframe(start, SE3(), "bootstrap-first"))
                sm.keyframes.append(Keyframe(fid, rel, "bootstrap-second"))
                sm.all_frame_poses[start] = SE3()
                sm.all_frame_poses[fid] = rel
                qm, tm = qi[mask][ok], ti[mask][ok]
                for j, (a, b) in enumerate(zip(qm, tm)):
                    lid = self._alloc_lid()
                    X = pts[ok][j]
                    vdir = X / max(np.linalg.norm(X), 1e-12)
                    lm = Landmark(lid, X, f0.descriptors[a].copy(), vdir,
                                  observations=[
                                      (start, int(a), f0.pixels[a].copy()),
                                      (fid, int(b), fr.pixels[b].copy())])
                    if f0.truth_ids is not None:
                        lm.truth_id = int(f0.truth_ids[a])
                    sm.landmarks[lid] = lm
                    prev = carry.get((start, int(a)))
                    if prev is not None:
                        sm.overlap_links.append((lid, prev))
                state.invalidate()
                state.prev_pose = rel
                self._run_ba(state)
                state.tau_resection = self._tau_from_event(len(sm.landmarks))
                return fid + 1
        raise BootstrapFailed("stream exhausted before bootstrap criteria met",
                              resume=n_frames)

    def _tau_from_event(self, visible_count):
        if self.cfg.tau_resection is not None:
            return self.cfg.tau_resection
        return max(int(self.cfg.tau_resection_fraction * visible_count),
                   self.cfg.tau_resection_floor)

    # -- tracking ----------------------------------------------------------

    def track_frame(self, state, fid):
        """PnP-localize one frame against current landmarks."""
        cfg, K = self.cfg, self.K
        fr = self._frame(fid)
        lids, desc, pos, vdir = state.arrays()
        if len(lids) == 0:
            raise TrackingLost("no landmarks")
        uv, in_front = project_points(K, state.prev_pose, pos)
        cand = in_front & K.in_bounds(uv)
        # Drop landmarks first seen from a substantially different angle.
        c = state.prev_pose.center()
        rays = pos - c
        rays /= np.maximum(np.linalg.norm(rays, axis=1, keepdims=True), 1e-12)
        cosang = np.einsum('ij,ij->i', rays, vdir)
        cand &= cosang > np.cos(np.radians(cfg.view_angle_limit))
        ci = np.flatnonzero(cand)
        if len(ci) < 4:
            raise TrackingLost(f"only {len(ci)} candidate landmarks at {fid}")
        thresh = intra_frame_match_threshold(fr.descriptors, cfg.match_ratio)
        qi, ti = match_descriptors(desc[ci], fr.descriptors, thresh)
        if len(qi) < max(4, cfg.min_pnp_inliers):
            raise TrackingLost(f"only {len(qi)} matches at {fid}")
        try:
            pose, mask = pnp_ransac(pos[ci[qi]], fr.pixels[ti], K,
                                    cfg.ransac(self._seed(state.submap.id,
                                                          fid, 2)),
                                    initial_pose=state.prev_pose)
        except PnPFailure as e:
            raise TrackingLost(str(e))
        state.frame_matches[fid] = (lids[ci[qi]], ti, fr.pixels[ti].copy(),
                                    mask)
        state.submap.all_frame_poses[fid] = pose
        state.prev_pose = pose
        return pose, int(mask.sum())

    # -- keyframe insertion ------------------------------------------------

    def insert_keyframe_pair(self, state, fid):
        """Middle + current keyframes, new landmark triangulation, BA."""
        cfg, K = self.cfg, self.K
        sm = state.submap
        prev_kf_fid = sm.keyframes[-1].frame_id
        mid_fid = (prev_kf_fid + fid) // 2
        if mid_fid not in sm.all_frame_poses or mid_fid == prev_kf_fid:
            mid_fid = fid  # degenerate spacing: fall back to a single keyframe
        cur_pose = sm.all_frame_poses[fid]
        mid_pose = sm.all_frame_poses[mid_fid]

        n_new = 0
        if mid_fid != fid:
            # Middle keyframe: its PnP inliers become observations.
            sm.keyframes.append(Keyframe(mid_fid, mid_pose, "middle"))
            lids_m, obs_m, pix_m, mask_m = state.frame_matches[mid_fid]
            for lid, oi, px in zip(lids_m[mask_m], obs_m[mask_m],
                                   pix_m[mask_m]):
                if lid in sm.landmarks:
                    sm.landmarks[lid].observations.append(
                        (mid_fid, int(oi), px.copy()))

            # New landmarks from verified middle<->current 2D matches.
            fm = self._frame(mid_fid)
            fc = self._frame(fid)
            thresh = intra_frame_match_threshold(fm.descriptors,
                                                 cfg.match_ratio)
            qi, ti = match_descriptors(fm.descriptors, fc.descriptors, thresh)
            if len(qi) >= 5:
                try:
                    _, emask = estimate_relative_pose(
                        fm.pixels[qi], fc.pixels[ti], K,
                        cfg.ransac(self._seed(sm.id, fid, 3),
                                   min_inliers=cfg.min_pnp_inliers))
                except EstimationError:
                    emask = None
                if emask is not None:
                    qv, tv = qi[emask], ti[emask]
                    pts, _, ok = triangulate_points(
                        mid_pose, cur_pose, K, fm.pixels[qv], fc.pixels[tv],
                        min_angle_deg=cfg.min_triangulation_angle)
                    qv, tv, pts = qv[ok], tv[ok], pts[ok]
                    # Duplicate removal by descriptor match to existing set.
                    _, desc, _, _ = state.arrays()
                    if len(desc) and len(qv):
                        di, _ = match_descriptors(fm.descriptors[qv], desc,
                                                  thresh)
                        dup = np.zeros(len(qv), dtype=bool)
                        dup[di] = True
                    else:
                        dup = np.zeros(len(qv), dtype=bool)
                    mc = mid_pose.center()
                    for j in np.flatnonzero(~dup):
                        lid = self._alloc_lid()
                        X = pts[j]
                        vdir = X - mc
                        vdir /= max(np.linalg.norm(vdir), 1e-12)
                        lm = Landmark(lid, X, fm.descriptors[qv[j]].copy(),
                                      vdir, observations=[
                                          (mid_fid, int(qv[j]),
                                           fm.pixels[qv[j]].copy()),
                                          (fid, int(tv[j]),
                                           fc.pixels[tv[j]].copy())])
                        if fm.truth_ids is not None:
                            lm.truth_id = int(fm.truth_ids[qv[j]])
                        sm.landmarks[lid] = lm
                        n_new += 1

        # Current frame becomes a keyframe; its inliers observe landmarks.
        sm.keyframes.append(Keyframe(fid, cur_pose, "current"))
        lids_c, obs_c, pix_c, mask_c = state.frame_matches[fid]
        for lid, oi, px in zip(lids_c[mask_c], obs_c[mask_c], pix_c[mask_c]):
            if lid in sm.landmarks:
                sm.landmarks[lid].observations.append((fid, int(oi),
                                                       px.copy()))
        state.invalidate()
        self._run_ba(state)
        self.filter_outliers(state, "post-ba")
        self.filter_outliers(state, "knn")
        lids, _, pos, _ = state.arrays()
        uv, in_front = project_points(K, cur_pose, pos)
        visible = int((in_front & K.in_bounds(uv)).sum())
        state.tau_resection = self._tau_from_event(visible)
        return n_new

    # -- bundle adjustment -------------------------------------------------

    def _run_ba(self, state, tolerance=None):
        cfg = self.cfg
        if tolerance is None:
            tolerance = cfg.ba_incremental_tolerance
        sm = state.submap
        kf_index = {kf.frame_id: i for i, kf in enumerate(sm.keyframes)}
        lids, _, _, _ = state.arrays()
        lid_index = {int(l): i for i, l in enumerate(lids)}
        obs_cam, obs_pt, obs_pix = [], [], []
        points = np.zeros((len(lids), 3))
        for lid, li in lid_index.items():
            lm = sm.landmarks[lid]
            points[li] = lm.position
            for fid, _, px in lm.observations:
                c = kf_index.get(fid)
                if c is not None:
                    obs_cam.append(c)
                    obs_pt.append(li)
                    obs_pix.append(px)
        if not obs_cam or len(lids) == 0:
            return 0.0
        fixed = np.zeros(len(sm.keyframes), dtype=bool)
        fixed[0] = True
        focals = np.array([kf.focal_estimate if kf.focal_estimate
                           else self.K.focal for kf in sm.keyframes])
        problem = BAProblem(K=self.K, poses=[kf.pose for kf in sm.keyframes],
                            points=points, obs_cam=obs_cam, obs_pt=obs_pt,
                            obs_pix=obs_pix, fixed_cameras=fixed,
                            focals=focals)
        rms, _ = solve_ba(problem, BAOptions(
            max_iterations=cfg.ba_max_iterations,
            function_tolerance=tolerance,
            huber_delta=cfg.ba_huber_delta,
            estimate_focal=cfg.estimate_focal))
        for i, kf in enumerate(sm.keyframes):
            kf.pose = problem.poses[i]
            sm.all_frame_poses[kf.frame_id] = kf.pose
            if cfg.estimate_focal:
                kf.focal_estimate = float(problem.focals[i])
        for lid, li in lid_index.items():
            sm.landmarks[lid].position = problem.points[li]
        state.invalidate()
        state.prev_pose = sm.keyframes[-1].pose
        sm.final_ba_rms = rms
        return rms

    # -- outlier filtering -------------------------------------------------

    def _keyframe_reprojection_errors(self, state, reduce_fn):
        """Per-landmark reduce over keyframe-observation reprojection errors.

        `reduce_fn` must be `max` or `min`; the reduction runs as one
        vectorized scatter instead of a per-landmark loop.
        """
        sm = state.submap
        kf_index = {kf.frame_id: i for i, kf in enumerate(sm.keyframes)}
        lid_list = list(sm.landmarks)
        pos = np.array([sm.landmarks[l].position for l in lid_list])
        ci, li, pxs = [], [], []
        for i, lid in enumerate(lid_list):
            for fid, _, px in sm.landmarks[lid].observations:
                c = kf_index.get(fid)
                if c is not None:
                    ci.append(c)
                    li.append(i)
                    pxs.append(px)
        if not ci:
            return {}
        ci, li, pxs = np.asarray(ci), np.asarray(li), np.asarray(pxs)
        Rs = np.stack([kf.pose.R for kf in sm.keyframes])
        ts = np.stack([kf.pose.t for kf in sm.keyframes])
        xc = np.einsum('mij,mj->mi', Rs[ci], pos[li]) + ts[ci]
        z = np.where(xc[:, 2] > 1e-9, xc[:, 2], 1.0)
        K = self.K
        uv = K.focal * xc[:, :2] / z[:, None] + np.array([K.cx, K.cy])
        err = np.linalg.norm(uv - pxs, axis=1)
        err[xc[:, 2] <= 1e-9] = np.inf
        if reduce_fn is max:
            out = np.full(len(lid_list), -np.inf)
            np.maximum.at(out, li, err)
        elif reduce_fn is min:
            out = np.full(len(lid_list), np.inf)
            np.minimum.at(out, li, err)
        else:
            raise ValueError("reduce_fn must be max or min")
        seen = np.zeros(len(lid_list), bool)
        seen[li] = True
        return {lid_list[i]: float(out[i]) for i in np.flatnonzero(seen)}

    def filter_outliers(self, state, stage):
        """Remove outlier landmarks; returns removed landmark ids."""
        cfg = self.cfg
        sm = state.submap
        removed = []
        if stage == "post-ba":
            errs = self._keyframe_reprojection_errors(state, max)
            removed = [lid for lid, e in errs.items()
                       if e > cfg.reprojection_threshold]
        elif stage == "completion":
            errs = self._keyframe_reprojection_errors(state, min)
            removed = [lid for lid, e in errs.items()
                       if e > cfg.reprojection_threshold]
        elif stage == "knn":
            lids, _, pos, _ = state.arrays()
            if len(lids) >= cfg.knn_k + 2:
                from scipy.spatial import cKDTree
                d, _ = cKDTree(pos).query(pos, k=cfg.knn_k + 1)
                mean_d = d[:, 1:].mean(axis=1)
                cut = mean_d.mean() + cfg.knn_sigma * mean_d.std()
                removed = [int(lids[i]) for i in np.flatnonzero(mean_d > cut)]
        else:
            raise ValueError(f"unknown filter stage {stage!r}")
        for lid in removed:
            del sm.landmarks[lid]
        if removed:
            gone = set(removed)
            sm.overlap_links = [(a, b) for a, b in sm.overlap_links
                                if a not in gone]
            state.invalidate()
        return removed

    # -- completion --------------------------------------------------------

    def complete_submap(self, state, carry_out_ok=True):
        """Filter, relocalize all frames, mark completed, seed the overlap."""
        cfg, K = self.cfg, self.K
        sm = state.submap
        self._run_ba(state, tolerance=cfg.ba_final_tolerance)
        self.filter_outliers(state, "completion")
        lids, desc, pos, _ = state.arrays()
        first, last = sm.frame_range
        for fid in range(first, last + 1):
            fr = self._frame(fid)
            thresh = intra_frame_match_threshold(fr.descriptors,
                                                 cfg.match_ratio)
            qi, ti = match_descriptors(desc, fr.descriptors, thresh)
            guess = sm.all_frame_poses.get(fid)
            try:
                pose, mask = pnp_ransac(
                    pos[qi], fr.pixels[ti], K,
                    cfg.ransac(self._seed(sm.id, fid, 4)),
                    initial_pose=guess)
            except (PnPFailure, ValueError):
                sm.reloc_failed.add(fid)
                continue
            sm.all_frame_poses[fid] = pose
            state.frame_matches[fid] = (lids[qi], ti, fr.pixels[ti].copy(),
                                        mask)
        if cfg.estimate_focal:
            focals = [kf.focal_estimate for kf in sm.keyframes
                      if kf.focal_estimate]
            sm.median_focal = float(np.median(focals)) if focals else None
        sm.status = "completed"

        carry = {}
        next_start = last + 1
        if carry_out_ok:
            span = last - first + 1
            overlap = int(np.ceil(cfg.overlap_fraction * span))
            next_start = last - overlap + 1
            for fid in range(next_start, last + 1):
                fm = state.frame_matches.get(fid)
                if fm is None:
                    continue
                f_lids, obs_idx, _, mask = fm
                for lid, oi in zip(f_lids[mask], obs_idx[mask]):
                    carry[(fid, int(oi))] = int(lid)
        return carry, next_start

    # -- top-level loop ----------------------------------------------------

    def build_one(self, start, carry):
        """Build a single submap starting at frame `start`.

        Returns (submap, carry for next submap, next start frame).
        """
        cfg = self.cfg
        sm = Submap(id=self.next_submap_id)
        self.next_submap_id += 1
        self.log("submap_started", submap=sm.id, frame=start)
        state = _BuildState(sm, self.K, cfg)
        n_frames = len(self.dataset.frames)
        try:
            next_fid = self.bootstrap(state, start, carry)
        except BootstrapFailed as e:
            sm.frame_range = (start, min(e.resume, n_frames) - 1)
            sm.status = "failed"
            self.log("bootstrap_failed", submap=sm.id, start=start,
                     resume=e.resume, reason=str(e))
            return sm, {}, e.resume
        sm.frame_range = (start, sm.keyframes[-1].frame_id)
        fid = next_fid
        while fid < n_frames:
            try:
                _, inliers = self.track_frame(state, fid)
            except TrackingLost as e:
                self.log("tracking_lost", submap=sm.id, frame=fid,
                         reason=str(e))
                sm.frame_range = (start, fid - 1)
                if len(sm.keyframes) >= cfg.min_keyframes_to_keep:
                    carry_out, _ = self.complete_submap(state,
                                                        carry_out_ok=False)
                    return sm, {}, fid
                sm.status = "failed"
                return sm, {}, fid
            sm.frame_range = (start, fid)
            if should_add_keyframe(inliers, state.tau_resection):
                self.insert_keyframe_pair(state, fid)
                self.log("keyframe_pair", submap=sm.id, frame=fid,
                         keyframes=len(sm.keyframes),
                         landmarks=len(sm.landmarks))
                if len(sm.keyframes) >= cfg.keyframes_per_submap:
                    carry_out, next_start = self.complete_submap(state)
                    self.log("submap_completed", submap=sm.id,
                             frames=sm.frame_range,
                             landmarks=len(sm.landmarks),
                             ba_rms=sm.final_ba_rms)
                    return sm, carry_out, next_start
            fid += 1
        # Stream ended mid-submap.
        sm.frame_range = (start, n_frames - 1)
        if len(sm.keyframes) >= cfg.min_keyframes_to_keep:
            self.complete_submap(state, carry_out_ok=False)
        else:
            sm.status = "failed"
        return sm, {}, n_frames

    def build_all(self):
        """Generator over submaps across the whole dataset."""
        n_frames = len(self.dataset.frames)
        start = 0
        carry = {}
        while start < n_frames - 1:
            sm, carry, start = self.build_one(start, carry)
            yield sm


def build_submaps(dataset, cfg, log=None):
    """Convenience wrapper: list of all submaps for a dataset."""
    return list(SubmapBuilder(dataset, cfg, log=log).build_all())
