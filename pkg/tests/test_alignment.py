import numpy as np
import pytest

from submapper.alignment import (
    AlignmentOptions,
    build_pose_graph,
    evaluate_cost,
    find_loop_correspondences,
    find_temporal_correspondences,
    fuse_map,
    optimize_graph,
    verify_link,
)
from submapper.builder import Landmark, Submap, build_submaps
from submapper.multiview import LinkRejected
from submapper.sim3 import (
    Sim3,
    sim3_apply,
    sim3_compose,
    sim3_exp,
    sim3_identity,
    sim3_inverse,
)
from submapper.simulate import evaluate_map, generate_scenario

from test_builder import small_builder_config, small_scenario


# ---------------------------------------------------------------------------
# synthetic submap helpers


def make_submap(sid, world_points, truth_ids, transform, rng,
                descriptors=None):
    """A 'completed' submap whose landmarks are world points pulled into a
    local frame by the inverse of `transform` (so `transform` maps local
    back to world)."""
    inv = sim3_inverse(transform)
    sm = Submap(id=sid, status="completed")
    if descriptors is None:
        descriptors = rng.uniform(size=(len(world_points), 128))
    for i, X in enumerate(world_points):
        x = sim3_apply(inv, X)
        sm.landmarks[1000 * sid + i] = Landmark(
            1000 * sid + i, x, descriptors[i], np.array([0.0, 0.0, 1.0]),
            truth_id=int(truth_ids[i]))
    return sm


def random_sim3(rng, rot=0.3, trans=5.0, scale=0.2):
    v = np.concatenate([rng.normal(0, rot, 3), rng.normal(0, trans, 3),
                        [rng.normal(0, scale)]])
    return sim3_exp(v)


@pytest.fixture(scope="module")
def built():
    ds, truth = generate_scenario(small_scenario())
    subs = build_submaps(ds, small_builder_config())
    return ds, truth, subs


# ---------------------------------------------------------------------------
# correspondences and link verification


def test_temporal_correspondences_are_true_matches(built):
    _, _, subs = built
    completed = [s for s in subs if s.status == "completed"]
    for a, b in zip(completed, completed[1:]):
        pairs = find_temporal_correspondences(a, b)
        assert len(pairs) >= 5
        for la, lb in pairs:
            ta, tb = a.landmarks[la].truth_id, b.landmarks[lb].truth_id
            if ta >= 0 and tb >= 0:
                assert ta == tb


def test_loop_correspondences_on_shared_points():
    rng = np.random.default_rng(0)
    world = rng.uniform(-50, 50, (80, 3))
    desc = rng.uniform(size=(80, 128))
    a = make_submap(0, world, np.arange(80), sim3_identity(), rng,
                    descriptors=desc)
    T = random_sim3(rng)
    b = make_submap(1, world, np.arange(80), T, rng,
                    descriptors=desc + rng.normal(0, 0.01, desc.shape))
    pairs = find_loop_correspondences(a, b)
    assert len(pairs) >= 70
    for la, lb in pairs:
        assert a.landmarks[la].truth_id == b.landmarks[lb].truth_id


def test_loop_correspondences_disjoint_maps_empty():
    rng = np.random.default_rng(1)
    a = make_submap(0, rng.uniform(-50, 50, (40, 3)), np.arange(40),
                    sim3_identity(), rng)
    b = make_submap(1, rng.uniform(-50, 50, (40, 3)), 100 + np.arange(40),
                    sim3_identity(), rng)
    pairs = find_loop_correspondences(a, b)
    assert len(pairs) <= 2  # chance mutual matches only


def test_verify_link_recovers_transform():
    rng = np.random.default_rng(2)
    world = rng.uniform(-50, 50, (60, 3))
    Ga = random_sim3(rng)
    Gb = random_sim3(rng)
    a = make_submap(0, world, np.arange(60), Ga, rng)
    b = make_submap(1, world, np.arange(60), Gb, rng)
    pairs = [(1000 * 0 + i, 1000 * 1 + i) for i in range(60)]
    link = verify_link(a, b, pairs, AlignmentOptions(), "loop")
    # expected local-a -> local-b map: through the shared world frame
    expect = sim3_compose(Ga, sim3_inverse(Gb))
    for i in range(60):
        xa = a.landmarks[pairs[i][0]].position
        xb = b.landmarks[pairs[i][1]].position
        assert np.linalg.norm(sim3_apply(link.transform, xa) - xb) < 1e-6
    assert abs(link.transform.s - expect.s) < 1e-9
    assert len(link.pairs) == 60


def test_verify_link_rejects_random_pairing():
    rng = np.random.default_rng(3)
    a = make_submap(0, rng.uniform(-50, 50, (40, 3)), np.arange(40),
                    sim3_identity(), rng)
    b = make_submap(1, rng.uniform(-50, 50, (40, 3)), np.arange(40),
                    sim3_identity(), rng)
    pairs = [(1000 * 0 + i, 1000 * 1 + i) for i in range(40)]
    with pytest.raises(LinkRejected):
        verify_link(a, b, pairs, AlignmentOptions(), "loop")


def test_verify_link_tolerates_outlier_pairs():
    rng = np.random.default_rng(4)
    world = rng.uniform(-50, 50, (60, 3))
    T = random_sim3(rng)
    a = make_submap(0, world, np.arange(60), sim3_identity(), rng)
    b = make_submap(1, world, np.arange(60), T, rng)
    pairs = [(i, 1000 + i) for i in range(60)]
    # corrupt 30% of the pairings
    bad = rng.permutation(60)[:18]
    for i in bad:
        b.landmarks[1000 + int(i)].position = rng.uniform(-50, 50, 3)
    link = verify_link(a, b, pairs, AlignmentOptions(), "loop")
    kept = {p[0] for p in link.pairs}
    assert kept.isdisjoint(set(int(i) for i in bad))
    assert len(link.pairs) >= 60 - len(bad) - 2


# ---------------------------------------------------------------------------
# graph construction


def chain_graph(n_submaps=4, pts_per_overlap=20, seed=0, noise=0.0):
    """Chain of submaps with known true transforms and shared landmarks."""
    rng = np.random.default_rng(seed)
    transforms = [sim3_identity()]
    for _ in range(n_submaps - 1):
        transforms.append(random_sim3(rng))
    shared = [rng.uniform(-20, 20, (pts_per_overlap, 3))
              for _ in range(n_submaps - 1)]
    submaps, links = [], []
    for i, G in enumerate(transforms):
        pts, tids = [], []
        if i > 0:
            pts.append(shared[i - 1])
            tids.append(1000 * (i - 1) + np.arange(pts_per_overlap))
        if i < n_submaps - 1:
            pts.append(shared[i])
            tids.append(1000 * i + np.arange(pts_per_overlap))
        pts = np.concatenate(pts)
        tids = np.concatenate(tids)
        sm = make_submap(i, pts, tids, G, rng)
        if noise:
            for lm in sm.landmarks.values():
                lm.position = lm.position + rng.normal(0, noise, 3)
        submaps.append(sm)
    opts = AlignmentOptions()
    for i in range(n_submaps - 1):
        a, b = submaps[i], submaps[i + 1]
        tids_a = {lm.truth_id: lid for lid, lm in a.landmarks.items()}
        pairs = [(tids_a[lm.truth_id], lid)
                 for lid, lm in b.landmarks.items()
                 if lm.truth_id in tids_a]
        links.append(verify_link(a, b, pairs, opts, "temporal"))
    return submaps, links, transforms


def test_chained_initialization_matches_truth():
    submaps, links, transforms = chain_graph()
    g = build_pose_graph(submaps, links)
    assert g.anchors == {0}
    assert len(g.components) == 1
    # anchor is identity, so initial states should equal the true maps
    for i, G in enumerate(transforms):
        est = g.transform(i)
        assert np.linalg.norm(est.matrix() - G.matrix()) < 1e-6


def test_graph_landmark_init_is_mean_of_members():
    submaps, links, _ = chain_graph()
    g = build_pose_graph(submaps, links)
    for row, members in enumerate(g.landmark_members):
        pts = [sim3_apply(g.transform(sid), submaps[sid].landmarks[lid].position)
               for sid, lid in members]
        assert np.linalg.norm(g.landmark_positions[row]
                              - np.mean(pts, axis=0)) < 1e-9


def test_disconnected_graph_gets_two_anchors():
    submaps, links, _ = chain_graph(n_submaps=5)
    # drop the middle link: {0,1,2} and {3,4}
    links = [lk for lk in links if not (lk.submap_a == 2
                                        and lk.submap_b == 3)]
    g = build_pose_graph(submaps, links)
    assert len(g.components) == 2
    assert g.anchors == {0, 3}


# ---------------------------------------------------------------------------
# cost oracles


def test_cost_zero_for_consistent_graph():
    submaps, links, _ = chain_graph()
    g = build_pose_graph(submaps, links)
    opts = AlignmentOptions(scale_prior_weight=0.0)
    assert evaluate_cost(g, opts) < 1e-18


def test_cost_matches_brute_force_oracle():
    submaps, links, _ = chain_graph(noise=0.2, seed=7)
    g = build_pose_graph(submaps, links)
    opts = AlignmentOptions(scale_prior_weight=0.01, huber_delta=1.0)
    # independent evaluation, straight from the definition
    expect = 0.0
    for o in range(len(g.obs_sid)):
        T = g.transform(int(g.obs_sid[o]))
        y = T.s * T.R @ g.obs_x[o] + T.t
        e = np.linalg.norm(y - g.landmark_positions[g.obs_lid[o]])
        d = opts.huber_delta
        expect += e * e if e <= d else d * (2 * e - d)
    for sid in g.submap_ids:
        expect += (opts.scale_prior_weight
                   * (np.log(g.transform(sid).s)
                      - g.scale_prior(sid))) ** 2
    assert evaluate_cost(g, opts) == pytest.approx(expect, abs=1e-12)


def test_zero_scale_collapse_costs_nothing_without_prior():
    """All scales zero, every map collapsed onto one point: with no scale
    prior this degenerate configuration has exactly zero cost."""
    submaps, links, _ = chain_graph()
    g = build_pose_graph(submaps, links)
    p = np.array([1.0, 2.0, 3.0])
    for sid in g.submap_ids:
        g.states[sid] = [np.zeros(7), Sim3(R=np.eye(3), s=0.0, t=p.copy())]
    g.landmark_positions = np.tile(p, (len(g.landmark_positions), 1))
    assert evaluate_cost(g, AlignmentOptions(scale_prior_weight=0.0)) == 0.0


def test_scale_prior_penalizes_collapse():
    submaps, links, _ = chain_graph()
    g = build_pose_graph(submaps, links)
    opts = AlignmentOptions(scale_prior_weight=0.01)
    base = evaluate_cost(g, opts)
    g.states[1] = [np.zeros(7),
                   Sim3(R=g.transform(1).R, s=1e-4, t=g.transform(1).t)]
    assert evaluate_cost(g, opts) > base + (0.01 * np.log(1e-4)) ** 2 / 2


# ---------------------------------------------------------------------------
# optimization


def test_optimize_recovers_from_perturbation():
    submaps, links, transforms = chain_graph(n_submaps=5, pts_per_overlap=30)
    g = build_pose_graph(submaps, links)
    rng = np.random.default_rng(11)
    for sid in g.submap_ids[1:]:
        v = np.concatenate([rng.normal(0, 0.02, 3), rng.normal(0, 0.5, 3),
                            [rng.normal(0, 0.02)]])
        g.states[sid] = [np.zeros(7),
                         sim3_compose(g.transform(sid), sim3_exp(v))]
    opts = AlignmentOptions(scale_prior_weight=0.0)
    assert evaluate_cost(g, opts) > 1.0
    info = optimize_graph(g, opts)
    assert info["final_cost"] < 1e-12
    for i, G in enumerate(transforms):
        assert np.linalg.norm(g.transform(i).matrix() - G.matrix()) < 1e-4


def test_optimize_reduces_cost_with_noise():
    submaps, links, _ = chain_graph(noise=0.2, seed=13)
    g = build_pose_graph(submaps, links)
    opts = AlignmentOptions()
    before = evaluate_cost(g, opts)
    info = optimize_graph(g, opts)
    assert info["final_cost"] <= before
    assert info["iterations"] >= 1


def test_optimize_keeps_anchor_fixed():
    submaps, links, _ = chain_graph(noise=0.3, seed=17)
    g = build_pose_graph(submaps, links)
    before = g.transform(0).matrix().copy()
    optimize_graph(g, AlignmentOptions())
    assert np.array_equal(g.transform(0).matrix(), before)


def test_optimize_deterministic():
    costs = []
    states = []
    for _ in range(2):
        submaps, links, _ = chain_graph(noise=0.2, seed=19)
        g = build_pose_graph(submaps, links)
        info = optimize_graph(g, AlignmentOptions())
        costs.append(info["final_cost"])
        states.append({sid: g.transform(sid).matrix().copy()
                       for sid in g.submap_ids})
    assert costs[0] == costs[1]
    for sid in states[0]:
        assert np.array_equal(states[0][sid], states[1][sid])


def test_scale_prior_keeps_scales_alive():
    """With the prior active, optimization does not drift toward the
    zero-scale degenerate solution even when started near it."""
    submaps, links, _ = chain_graph(n_submaps=4)
    g = build_pose_graph(submaps, links)
    for sid in g.submap_ids[1:]:
        T = g.transform(sid)
        g.states[sid] = [np.zeros(7), Sim3(R=T.R, s=0.05 * T.s, t=T.t)]
    opts = AlignmentOptions(scale_prior_weight=0.01)
    optimize_graph(g, opts)
    for sid in g.submap_ids:
        assert g.transform(sid).s >= 1e-3


def test_loop_closure_ring_gap():
    """12 submaps around a ring with drifty odometry links plus one loop
    closure: optimized chain end-to-end gap shrinks far below the drift."""
    rng = np.random.default_rng(23)
    n = 12
    # true transforms: rotate around a ring
    transforms = []
    for i in range(n):
        ang = 2 * np.pi * i / n
        v = np.array([0, 0, ang, 40 * np.cos(ang), 40 * np.sin(ang), 0, 0.0])
        R = np.array([[np.cos(ang), -np.sin(ang), 0],
                      [np.sin(ang), np.cos(ang), 0], [0, 0, 1.0]])
        transforms.append(Sim3(R=R, s=1.0,
                               t=np.array([40 * np.cos(ang),
                                           40 * np.sin(ang), 5.0])))
    shared = [rng.uniform(-8, 8, (25, 3))
              + np.array([40 * np.cos(2 * np.pi * (i + 0.5) / n),
                          40 * np.sin(2 * np.pi * (i + 0.5) / n), 0])
              for i in range(n)]
    submaps = []
    for i, G in enumerate(transforms):
        pts = np.concatenate([shared[(i - 1) % n], shared[i]])
        tids = np.concatenate([1000 * ((i - 1) % n) + np.arange(25),
                               1000 * i + np.arange(25)])
        submaps.append(make_submap(i, pts, tids, G, rng))
    opts = AlignmentOptions()
    links = []
    for i in range(n):  # n-1 temporal + 1 closing loop link
        a, b = submaps[i], submaps[(i + 1) % n]
        tids_a = {lm.truth_id: lid for lid, lm in a.landmarks.items()}
        pairs = [(tids_a[lm.truth_id], lid)
                 for lid, lm in b.landmarks.items() if lm.truth_id in tids_a]
        lk = verify_link(a, b, pairs, opts,
                         "temporal" if i < n - 1 else "loop")
        if i < n - 1:
            # odometry drift: corrupt each temporal link slightly
            drift = sim3_exp(np.array([0, 0, 0.01, 0.1, 0.05, 0, 0.002]))
            lk.transform = sim3_compose(lk.transform, drift)
        links.append(lk)
    g = build_pose_graph(submaps, links, opts)
    drift_gap = evaluate_cost(g, AlignmentOptions(scale_prior_weight=0.0))
    assert drift_gap > 1.0  # drift is visible before optimization
    info = optimize_graph(g, opts)
    assert info["final_cost"] < 1e-2 * drift_gap
    # every submap ends near its true ring position, compared in the
    # anchor's gauge (submap 0 is pinned at the identity)
    for i in range(n):
        expect = sim3_compose(transforms[i], sim3_inverse(transforms[0]))
        assert np.linalg.norm(g.transform(i).matrix()
                              - expect.matrix()) < 1.0


# ---------------------------------------------------------------------------
# fusion


def test_fuse_map_end_to_end(built):
    ds, truth, subs = built
    completed = [s for s in subs if s.status == "completed"]
    opts = AlignmentOptions()
    links = [verify_link(a, b, find_temporal_correspondences(a, b), opts,
                         "temporal")
             for a, b in zip(completed, completed[1:])]
    g = build_pose_graph(completed, links, opts)
    optimize_graph(g, opts)
    fused = fuse_map(g, subs)
    n_merged = len(g.landmark_positions)
    n_total = sum(len(s.landmarks) for s in completed)
    n_members = sum(len(m) for m in g.landmark_members)
    assert len(fused.points) == n_merged + n_total - n_members
    assert len(fused.frame_poses) >= 0.9 * len(ds.frames)
    ev = evaluate_map(fused.points, fused.point_truth, fused.frame_poses,
                      truth)
    assert ev.landmark_rmse < 1e-6
    assert ev.pose_position_rmse < 1e-6
    for sid in np.unique(fused.point_submap):
        assert int(sid) in {s.id for s in completed}
