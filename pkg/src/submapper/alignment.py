"""Global alignment of submaps by similarity-transform pose graph.

Each completed submap lives in its own scaled local frame. Temporal
neighbours share landmarks through the builder's overlap registry;
loop closures are proposed by appearance and verified geometrically.
Verified links merge landmarks into world points, and a robust
least-squares problem over one Sim(3) per submap plus the merged world
points aligns everything into a single consistent map.

The per-observation residual is the transformed local landmark minus
its world position. A quadratic prior on each submap's log-scale keeps
the similarity gauge from collapsing toward zero scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .builder import intra_frame_match_threshold, match_descriptors
from .multiview import LinkRejected, RansacConfig, sim3_ransac
from .sim3 import (
    SE3,
    Sim3,
    sim3_apply,
    sim3_compose,
    sim3_identity,
    sim3_inverse,
    sim3_manifold_update,
)


@dataclass
class AlignmentOptions:
    scale_prior_weight: float = 0.01     # lambda_a; must be < 1
    huber_delta: float = 1.0             # world units, on residual norm
    min_link_inliers: int = 12
    link_ransac_iterations: int = 500
    link_inlier_fraction: float = 0.02   # of point-set diameter
    max_iterations: int = 50
    function_tolerance: float = 1e-12
    match_ratio: float = 0.7
    seed: int = 0

    def validate(self):
        if not (0.0 <= self.scale_prior_weight < 1.0):
            raise ValueError("scale_prior_weight must lie in [0, 1)")
        if self.huber_delta <= 0 or self.min_link_inliers < 3:
            raise ValueError("bad alignment options")
        return self


@dataclass
class SubmapLink:
    submap_a: int
    submap_b: int
    transform: Sim3        # maps a-local coordinates into b-local
    pairs: list            # inlier (landmark id in a, landmark id in b)
    kind: str              # "temporal" | "loop"


def find_temporal_correspondences(prev_submap, cur_submap):
    """Shared-landmark pairs recorded when `cur` was seeded from `prev`.

    Returns (lid in prev, lid in cur) pairs; no descriptor search is
    involved, identity comes from the builder's overlap registry.
    """
    pairs = []
    for own, other in cur_submap.overlap_links:
        if own in cur_submap.landmarks and other in prev_submap.landmarks:
            pairs.append((other, own))
    return pairs


def find_loop_correspondences(submap_a, submap_b, match_ratio=0.7):
    """Mutual nearest-neighbour descriptor matches between two submaps."""
    lids_a, desc_a = submap_a.landmark_descriptors()
    lids_b, desc_b = submap_b.landmark_descriptors()
    if len(lids_a) == 0 or len(lids_b) == 0:
        return []
    thresh = intra_frame_match_threshold(desc_a, match_ratio)
    ai, bi = match_descriptors(desc_a, desc_b, thresh)
    bj, aj = match_descriptors(desc_b, desc_a, thresh)
    back = {int(b): int(a) for b, a in zip(bj, aj)}
    return [(int(lids_a[a]), int(lids_b[b])) for a, b in zip(ai, bi)
            if back.get(int(b)) == int(a)]


def verify_link(submap_a, submap_b, pairs, opts, kind):
    """Geometric verification of candidate pairs; raises LinkRejected."""
    if len(pairs) < opts.min_link_inliers:
        raise LinkRejected(f"only {len(pairs)} candidate pairs")
    pa = np.stack([submap_a.landmarks[a].position for a, _ in pairs])
    pb = np.stack([submap_b.landmarks[b].position for _, b in pairs])
    diam = max(np.linalg.norm(pa.max(0) - pa.min(0)), 1e-9)
    cfg = RansacConfig(max_iterations=opts.link_ransac_iterations,
                       inlier_threshold=opts.link_inlier_fraction * diam,
                       min_inliers=opts.min_link_inliers,
                       seed=opts.seed + 7919 * (submap_a.id + 1)
                       + 104729 * (submap_b.id + 1))
    transform, mask = sim3_ransac(pa, pb, cfg)
    inl = [p for p, m in zip(pairs, mask) if m]
    return SubmapLink(submap_a.id, submap_b.id, transform, inl, kind)


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        p = self.parent.setdefault(x, x)
        while p != x:
            self.parent[x] = p = self.parent.setdefault(p, p)
            x, p = p, self.parent[p]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class PoseGraph:
    submap_ids: list
    states: dict           # sid -> (tangent 7-vector, Sim3)
    landmark_positions: np.ndarray   # (L, 3) world estimates
    landmark_members: list  # group id -> list of member (sid, lid)
    obs_sid: np.ndarray    # (m,) submap id per observation
    obs_lid: np.ndarray    # (m,) row into landmark_positions
    obs_x: np.ndarray      # (m, 3) local landmark position
    anchors: set = field(default_factory=set)
    components: list = field(default_factory=list)
    # log of each submap's initialized scale; the scale prior penalizes
    # deviation from it (submap scales are arbitrary, so an absolute
    # prior toward 1 would distort a well-aligned map)
    scale_priors: dict = field(default_factory=dict)

    def transform(self, sid):
        return self.states[sid][1]

    def scale_prior(self, sid):
        return self.scale_priors.get(sid, 0.0)


def build_pose_graph(submaps, links, opts=None):
    """Initialize a pose graph from submaps and verified links.

    Submap transforms are chained from links (each connected component
    anchored at its lowest submap id), linked landmarks are merged via
    union-find, and world positions start at the mean of the transformed
    member positions.
    """
    opts = (opts or AlignmentOptions()).validate()
    by_id = {s.id: s for s in submaps if s.status == "completed"}
    sids = sorted(by_id)

    # Connected components and chained initialization.
    adj = {sid: [] for sid in sids}
    for lk in links:
        if lk.submap_a in by_id and lk.submap_b in by_id:
            adj[lk.submap_a].append((lk.submap_b, lk.transform, False))
            adj[lk.submap_b].append((lk.submap_a, lk.transform, True))
    states = {}
    components = []
    for root in sids:
        if root in states:
            continue
        comp = {root}
        states[root] = ([np.zeros(7), sim3_identity()])
        stack = [root]
        while stack:
            sid = stack.pop()
            g = states[sid][1]
            for other, T, inverted in adj[sid]:
                if other in states:
                    continue
                # Link maps a-local to b-local. Walking a->b: the new
                # world map is G_b = G_a after T^-1; walking b->a it is
                # G_a = G_b after T.
                g_other = sim3_compose(T, g) if inverted \
                    else sim3_compose(sim3_inverse(T), g)
                states[other] = [np.zeros(7), g_other]
                comp.add(other)
                stack.append(other)
        components.append(comp)

    # Merge linked landmarks.
    uf = _UnionFind()
    for lk in links:
        if lk.submap_a not in by_id or lk.submap_b not in by_id:
            continue
        for la, lb in lk.pairs:
            uf.union((lk.submap_a, la), (lk.submap_b, lb))
    groups = {}
    for key in list(uf.parent):
        groups.setdefault(uf.find(key), []).append(key)

    landmark_members = []
    positions = []
    obs_sid, obs_lid, obs_x = [], [], []
    for root in sorted(groups):
        members = sorted(groups[root])
        pts = []
        row = len(landmark_members)
        for sid, lid in members:
            x = by_id[sid].landmarks[lid].position
            pts.append(sim3_apply(states[sid][1], x))
            obs_sid.append(sid)
            obs_lid.append(row)
            obs_x.append(x)
        landmark_members.append(members)
        positions.append(np.mean(pts, axis=0))

    return PoseGraph(
        submap_ids=sids,
        states=states,
        landmark_positions=np.array(positions).reshape(-1, 3),
        landmark_members=landmark_members,
        obs_sid=np.array(obs_sid, dtype=np.int64),
        obs_lid=np.array(obs_lid, dtype=np.int64),
        obs_x=np.array(obs_x, dtype=float).reshape(-1, 3),
        anchors={min(c) for c in components},
        components=[set(c) for c in components],
        scale_priors={sid: float(np.log(states[sid][1].s))
                      for sid in sids})


def _huber(norms, delta):
    """Elementwise robust cost and IRLS weight for residual norms."""
    small = norms <= delta
    cost = np.where(small, norms ** 2, delta * (2.0 * norms - delta))
    with np.errstate(divide="ignore"):
        w = np.where(small, 1.0, delta / np.maximum(norms, 1e-300))
    return cost, w


def evaluate_cost(graph, opts=None):
    """Robust alignment cost at the graph's current state."""
    opts = (opts or AlignmentOptions()).validate()
    cost = 0.0
    if len(graph.obs_sid):
        r = np.empty((len(graph.obs_sid), 3))
        for sid in graph.submap_ids:
            sel = graph.obs_sid == sid
            if sel.any():
                g = graph.transform(sid)
                r[sel] = sim3_apply(g, graph.obs_x[sel]) \
                    - graph.landmark_positions[graph.obs_lid[sel]]
        c, _ = _huber(np.linalg.norm(r, axis=1), opts.huber_delta)
        cost += float(c.sum())
    lam = opts.scale_prior_weight
    if lam > 0.0:
        for sid in graph.submap_ids:
            cost += (lam * (np.log(graph.transform(sid).s)
                            - graph.scale_prior(sid))) ** 2
    return cost


def optimize_graph(graph, opts=None, log=None):
    """Robust LM over submap similarities and merged world points.

    World points are eliminated by their (diagonal) Schur complement,
    leaving a dense system over the 7-parameter submap updates. Anchor
    submaps stay fixed. Returns an info dict.
    """
    opts = (opts or AlignmentOptions()).validate()
    sids = graph.submap_ids
    s_index = {sid: i for i, sid in enumerate(sids)}
    S = len(sids)
    free = np.array([sid not in graph.anchors for sid in sids])
    lam_a = opts.scale_prior_weight
    m = len(graph.obs_sid)
    L = len(graph.landmark_positions)
    if m == 0 or S == 0:
        return {"iterations": 0, "converged": True,
                "final_cost": evaluate_cost(graph, opts)}

    obs_si = np.array([s_index[s] for s in graph.obs_sid])
    obs_li = graph.obs_lid
    # Pairs of observations of the same landmark, for the off-diagonal
    # reduced-system term.
    order = np.argsort(obs_li, kind="stable")
    pair_i, pair_j = [], []
    start = 0
    for li in range(L):
        end = start
        while end < m and obs_li[order[end]] == li:
            end += 1
        idx = order[start:end]
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                pair_i.append(idx[a])
                pair_j.append(idx[b])
        start = end
    pair_i = np.array(pair_i, dtype=np.int64)
    pair_j = np.array(pair_j, dtype=np.int64)

    def residuals_jacobians():
        r = np.empty((m, 3))
        J = np.empty((m, 3, 7))
        for sid in sids:
            sel = graph.obs_sid == sid
            if not sel.any():
                continue
            g = graph.transform(sid)
            y = sim3_apply(g, graph.obs_x[sel])
            r[sel] = y - graph.landmark_positions[obs_li[sel]]
            Jb = np.zeros((int(sel.sum()), 3, 7))
            # columns: rotation (-[y]x), translation (I), log-scale (y)
            Jb[:, 0, 1], Jb[:, 0, 2] = y[:, 2], -y[:, 1]
            Jb[:, 1, 0], Jb[:, 1, 2] = -y[:, 2], y[:, 0]
            Jb[:, 2, 0], Jb[:, 2, 1] = y[:, 1], -y[:, 0]
            Jb[:, :, 3:6] = np.eye(3)
            Jb[:, :, 6] = y
            J[sel] = Jb
        return r, J

    def total_cost():
        return evaluate_cost(graph, opts)

    cost = total_cost()
    lm_lambda = 1e-6
    iterations = 0
    converged = False
    for _ in range(opts.max_iterations):
        iterations += 1
        r, J = residuals_jacobians()
        norms = np.linalg.norm(r, axis=1)
        _, w = _huber(norms, opts.huber_delta)

        wJ = J * w[:, None, None]
        U = np.zeros((S, 7, 7))
        np.add.at(U, obs_si, np.einsum('nij,nik->njk', wJ, J))
        b_s = np.zeros((S, 7))
        np.add.at(b_s, obs_si, -np.einsum('nij,ni->nj', wJ, r))
        v_diag = np.zeros(L)
        np.add.at(v_diag, obs_li, w)
        b_l = np.zeros((L, 3))
        np.add.at(b_l, obs_li, w[:, None] * r)  # -J_lm^T r with J_lm = -I
        if lam_a > 0.0:
            for sid in sids:
                i = s_index[sid]
                dev = np.log(graph.transform(sid).s) \
                    - graph.scale_prior(sid)
                U[i, 6, 6] += lam_a ** 2
                b_s[i, 6] -= lam_a ** 2 * dev

        accepted = False
        for _try in range(8):
            Ud = U.copy()
            for i in range(S):
                d = np.maximum(np.diag(Ud[i]), 1.0)
                Ud[i] += lm_lambda * np.diag(d)
            v_damped = v_diag * (1.0 + lm_lambda) + lm_lambda
            vinv = 1.0 / v_damped

            # Reduced camera system.
            H = np.zeros((S, 7, S, 7))
            g_red = b_s.copy()
            for i in range(S):
                H[i, :, i, :] = Ud[i]
            # W_{s,l} = -sum w J^T over obs of the landmark; subtract
            # W V^-1 W^T from the reduced system (same-obs part first)
            Wt = -np.transpose(wJ, (0, 2, 1))            # (m, 7, 3)
            same = np.einsum('nij,nkj->nik', Wt, Wt) * vinv[obs_li][:, None,
                                                                    None]
            np.add.at(H, (obs_si, slice(None), obs_si, slice(None)), -same)
            if len(pair_i):
                cross = np.einsum('nij,nkj->nik', Wt[pair_i], Wt[pair_j]) \
                    * vinv[obs_li[pair_i]][:, None, None]
                np.add.at(H, (obs_si[pair_i], slice(None),
                              obs_si[pair_j], slice(None)), -cross)
                np.add.at(H, (obs_si[pair_j], slice(None),
                              obs_si[pair_i], slice(None)),
                          -np.transpose(cross, (0, 2, 1)))
            yv = b_l * vinv[:, None]
            np.add.at(g_red, obs_si,
                      -np.einsum('nij,nj->ni', Wt, yv[obs_li]))

            Hm = H.reshape(7 * S, 7 * S)
            gm = g_red.reshape(7 * S)
            mask = np.repeat(free, 7)
            delta = np.zeros(7 * S)
            try:
                delta[mask] = np.linalg.solve(Hm[np.ix_(mask, mask)],
                                              gm[mask])
            except np.linalg.LinAlgError:
                lm_lambda *= 10.0
                continue
            d_cam = delta.reshape(S, 7)
            # Back-substitute landmark updates.
            d_l = yv.copy()
            corr = np.einsum('nji,nj->ni', Wt, d_cam[obs_si])  # W^T delta_c
            np.add.at(d_l, obs_li, -corr * vinv[obs_li][:, None])

            saved_states = {sid: (graph.states[sid][0].copy(),
                                  graph.states[sid][1]) for sid in sids}
            saved_lms = graph.landmark_positions.copy()
            for sid in sids:
                i = s_index[sid]
                if free[i]:
                    graph.states[sid] = list(
                        sim3_manifold_update(tuple(graph.states[sid]),
                                             d_cam[i]))
            graph.landmark_positions = saved_lms + d_l
            new_cost = total_cost()
            if new_cost < cost:
                improvement = cost - new_cost
                cost = new_cost
                lm_lambda = max(lm_lambda * 0.3, 1e-12)
                accepted = True
                if improvement < opts.function_tolerance * max(cost, 1.0):
                    converged = True
                break
            graph.states.update({k: list(v) for k, v in saved_states.items()})
            graph.landmark_positions = saved_lms
            lm_lambda *= 10.0
        if log:
            log("graph_iteration", cost=cost, lm_lambda=lm_lambda,
                accepted=accepted)
        if not accepted or converged:
            converged = converged or not accepted
            break
    return {"iterations": iterations, "converged": converged,
            "final_cost": cost}


@dataclass
class FusedMap:
    points: np.ndarray         # (n, 3) world
    point_submap: np.ndarray   # (n,) submap id per point
    point_truth: np.ndarray    # (n,) dataset truth id, -1 unknown
    frame_poses: dict          # frame id -> world SE3 (camera-from-world)
    frame_submap: dict         # frame id -> submap id
    reloc_failed: set
    scales: dict               # submap id -> optimized scale


def fuse_map(graph, submaps):
    """Apply optimized transforms: one world point per merged landmark,
    transformed singletons for the rest, plus per-frame world poses."""
    by_id = {s.id: s for s in submaps if s.status == "completed"}
    points, point_submap, point_truth = [], [], []
    merged_keys = set()
    for row, members in enumerate(graph.landmark_members):
        merged_keys.update(members)
        sid, lid = members[0]
        points.append(graph.landmark_positions[row])
        point_submap.append(sid)
        truth = -1
        for msid, mlid in members:
            t = by_id[msid].landmarks[mlid].truth_id
            if t >= 0:
                truth = t
                break
        point_truth.append(truth)
    for sid in graph.submap_ids:
        sm = by_id[sid]
        g = graph.transform(sid)
        lids = [l for l in sorted(sm.landmarks) if (sid, l) not in merged_keys]
        if lids:
            local = np.stack([sm.landmarks[l].position for l in lids])
            points.extend(sim3_apply(g, local))
            point_submap.extend([sid] * len(lids))
            point_truth.extend(sm.landmarks[l].truth_id for l in lids)

    frame_poses, frame_submap, reloc_failed = {}, {}, set()
    for sid in graph.submap_ids:
        sm = by_id[sid]
        g = graph.transform(sid)
        for fid, pose in sm.all_frame_poses.items():
            if fid in frame_poses:
                continue
            # world pose keeps the camera orientation and places the
            # center via the submap similarity (scale folds into t)
            c_world = sim3_apply(g, pose.center())
            R_world = pose.R @ g.R.T
            frame_poses[fid] = SE3(R=R_world, t=-R_world @ c_world)
            frame_submap[fid] = sid
        for fid in sm.reloc_failed:
            if fid not in frame_poses:
                reloc_failed.add(fid)
                frame_submap.setdefault(fid, sid)

    return FusedMap(points=np.array(points).reshape(-1, 3),
                    point_submap=np.array(point_submap, dtype=np.uint32),
                    point_truth=np.array(point_truth, dtype=np.int64),
                    frame_poses=frame_poses, frame_submap=frame_submap,
                    reloc_failed=reloc_failed,
                    scales={sid: graph.transform(sid).s
                            for sid in graph.submap_ids})
