"""End-to-end reconstruction pipeline.

Two logical workers: the builder produces completed submaps in frame
order, the aligner consumes them one at a time — adding each to the
place-recognition database, linking it temporally to its predecessor
and by appearance to loop candidates, then re-optimizing the global
pose graph and publishing a snapshot. `two-worker` mode runs them on
separate threads joined by one bounded queue; `single` mode interleaves
the same steps deterministically. Both orders process submaps
identically, so the final graph content matches across modes.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import (
    build_pose_graph,
    find_loop_correspondences,
    find_temporal_correspondences,
    fuse_map,
    optimize_graph,
    verify_link,
)
from .builder import SubmapBuilder
from .multiview import LinkRejected
from .vocab import SubmapDatabase, VocabularyTree, build_vocabulary


class ReconstructionFailure(Exception):
    pass


@dataclass
class EventLog:
    """Structured per-worker event trace.

    Each event records ``t`` (wall-clock seconds since log creation) and
    ``cpu`` (process CPU seconds); ``cpu`` differences measure the compute
    spent between events independent of scheduler preemption.
    """
    events: list = field(default_factory=list)
    _t0: float = field(default_factory=time.monotonic)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def __call__(self, event, **data):
        with self._lock:
            self.events.append({"t": time.monotonic() - self._t0,
                                "cpu": time.process_time(),
                                "event": event, **data})

    def of(self, event):
        return [e for e in self.events if e["event"] == event]


def prepare_vocabulary(dataset, cfg, log):
    """Load a pretrained tree, or train one on the dataset's descriptors."""
    if cfg.vocabulary.path:
        tree = VocabularyTree.load(cfg.vocabulary.path)
        log("vocab_loaded", path=cfg.vocabulary.path, words=len(
            tree.word_weights))
        return tree
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 91]))
    pool = np.concatenate([f.descriptors for f in dataset.frames
                           if len(f.descriptors)])
    n = min(cfg.vocabulary.train_samples, len(pool))
    sample = pool[rng.choice(len(pool), size=n, replace=False)]
    tree = build_vocabulary(sample, k=cfg.vocabulary.branching,
                            depth=cfg.vocabulary.depth, seed=cfg.seed)
    log("vocab_trained", samples=n, words=len(tree.word_weights))
    return tree


def submap_descriptor_matrix(submap):
    _, desc = submap.landmark_descriptors()
    return desc


class Aligner:
    """Consumes completed submaps; maintains links, graph and snapshots."""

    def __init__(self, cfg, tree, log):
        self.cfg = cfg
        self.log = log
        self.db = SubmapDatabase(tree)
        self.submaps = []            # all, in arrival order
        self.completed = []
        self.links = []
        self.graph = None
        self.snapshots = []

    def process(self, submap):
        t0 = time.monotonic()
        self.submaps.append(submap)
        if submap.status != "completed":
            self.log("submap_skipped", submap=submap.id,
                     status=submap.status)
            return
        lc = self.cfg.loop_closure
        opts = self.cfg.alignment

        if self.completed:
            prev = self.completed[-1]
            pairs = find_temporal_correspondences(prev, submap)
            try:
                self.links.append(verify_link(prev, submap, pairs, opts,
                                              "temporal"))
                self.log("temporal_link", a=prev.id, b=submap.id,
                         inliers=len(self.links[-1].pairs))
            except LinkRejected as e:
                # The id-based overlap registry is empty when a failed
                # submap sits between prev and this one; fall back to
                # descriptor matching so the chain stays connected.
                self.log("temporal_link_rejected", a=prev.id, b=submap.id,
                         reason=str(e))
                pairs = find_loop_correspondences(prev, submap,
                                                  opts.match_ratio)
                try:
                    self.links.append(verify_link(prev, submap, pairs,
                                                  opts, "temporal"))
                    self.log("temporal_link_fallback", a=prev.id,
                             b=submap.id,
                             inliers=len(self.links[-1].pairs))
                except LinkRejected as e2:
                    self.log("temporal_link_rejected", a=prev.id,
                             b=submap.id, reason=str(e2))

        desc = submap_descriptor_matrix(submap)
        ranked = self.db.query(desc) if len(self.db.vectors) else []
        self.db.add_submap(submap.id, desc)
        linked = {lk.submap_a for lk in self.links if lk.submap_b == submap.id}
        by_id = {s.id: s for s in self.completed}
        taken = 0
        for sid, score in ranked:
            if taken >= lc.max_candidates or score < lc.min_score:
                break
            if sid in linked or submap.id - sid < lc.min_separation:
                continue
            cand = by_id[sid]
            pairs = find_loop_correspondences(cand, submap,
                                              opts.match_ratio)
            try:
                lk = verify_link(cand, submap, pairs, opts, "loop")
            except LinkRejected as e:
                self.log("loop_rejected", a=sid, b=submap.id, score=score,
                         reason=str(e))
                continue
            self.links.append(lk)
            self.log("loop_link", a=sid, b=submap.id, score=score,
                     inliers=len(lk.pairs))
            taken += 1

        self.completed.append(submap)
        self.graph = build_pose_graph(self.completed, self.links, opts)
        info = optimize_graph(self.graph, opts)
        n_edges = len(self.links)
        self.snapshots.append({
            "submap": submap.id,
            "nodes": len(self.graph.submap_ids),
            "edges": n_edges,
            "merged_landmarks": len(self.graph.landmark_positions),
            "cost": info["final_cost"],
            "iterations": info["iterations"],
            "latency": time.monotonic() - t0})
        self.log("alignment_pass", **self.snapshots[-1])

    def fused(self):
        if self.graph is None:
            raise ReconstructionFailure("no completed submaps")
        return fuse_map(self.graph, self.completed)


def run_pipeline(dataset, cfg, log=None):
    """Full reconstruction; returns (fused map, aligner, event log)."""
    log = log or EventLog()
    tree = prepare_vocabulary(dataset, cfg, log)
    builder = SubmapBuilder(dataset, cfg.builder, log=log)
    aligner = Aligner(cfg, tree, log)

    if cfg.mode == "two-worker":
        channel = queue.Queue(maxsize=2)
        errors = []

        def producer():
            try:
                for sm in builder.build_all():
                    channel.put(sm)
            except Exception as e:   # surfaced after join
                errors.append(e)
            finally:
                channel.put(None)

        t = threading.Thread(target=producer, name="submap-builder")
        t.start()
        while True:
            sm = channel.get()
            if sm is None:
                break
            t_build = time.monotonic()
            aligner.process(sm)
            log("submap_consumed", submap=sm.id,
                align_time=time.monotonic() - t_build)
        t.join()
        if errors:
            raise errors[0]
    else:
        for sm in builder.build_all():
            aligner.process(sm)

    fused = aligner.fused()
    log("pipeline_done", submaps=len(aligner.submaps),
        completed=len(aligner.completed), points=len(fused.points))
    return fused, aligner, log


def build_report(cfg, aligner, fused, log, evaluation=None):
    """Machine-readable run summary (counts, traces, effective config)."""
    from .config import effective_dict
    per_submap = []
    build_times = {e.get("submap"): e["t"] for e in log.of("submap_completed")}
    for s in aligner.submaps:
        per_submap.append({
            "id": s.id, "status": s.status,
            "frame_range": list(s.frame_range),
            "keyframes": len(s.keyframes),
            "landmarks": len(s.landmarks),
            "final_ba_rms": s.final_ba_rms,
            "median_focal": s.median_focal,
            "reloc_failed": sorted(s.reloc_failed)})
    report = {
        "config": effective_dict(cfg),
        "submaps": per_submap,
        "alignment": {"snapshots": aligner.snapshots,
                      "links": [{"a": lk.submap_a, "b": lk.submap_b,
                                 "kind": lk.kind,
                                 "inliers": len(lk.pairs)}
                                for lk in aligner.links]},
        "map": {"points": len(fused.points),
                "frames": len(fused.frame_poses),
                "reloc_failed": sorted(fused.reloc_failed),
                "scales": {str(k): v for k, v in fused.scales.items()}},
        "events": log.events,
    }
    if evaluation is not None:
        report["evaluation"] = {
            "landmark_rmse": evaluation.landmark_rmse,
            "pose_position_rmse": evaluation.pose_position_rmse,
            "matched_fraction": evaluation.matched_fraction,
            "n_matched": evaluation.n_matched}
    return report
