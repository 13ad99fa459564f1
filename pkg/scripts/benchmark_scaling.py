"""Per-submap build time and pose-graph size vs sequence length.

Runs the pipeline on progressively longer orbit sequences and reports
whether per-submap build time stays bounded (max/median ratio) and how
the pose graph grows with submap count.
"""

import numpy as np

from submapper.alignment import build_pose_graph
from submapper.builder import BuilderConfig
from submapper.config import PipelineConfig
from submapper.pipeline import run_pipeline
from submapper.simulate import ScenarioConfig, generate_scenario


def run_once(frame_count):
    scenario = ScenarioConfig(scene="grid-city", extent=600.0,
                              landmark_density=0.004, trajectory="orbit",
                              altitude=150.0, frames_per_rev=400,
                              frame_count=frame_count, pixel_noise=0.0,
                              seed=5)
    dataset, _ = generate_scenario(scenario)
    cfg = PipelineConfig()
    cfg.builder = BuilderConfig(tau_stereo=50, alpha_stereo=8.0,
                                keyframes_per_submap=8,
                                min_keyframes_to_keep=4,
                                min_bootstrap_inliers=30, seed=0)
    _, aligner, log = run_pipeline(dataset, cfg)
    t_start = {e["submap"]: e["t"] for e in log.of("submap_started")}
    build = np.array([e["t"] - t_start[e["submap"]]
                      for e in log.of("submap_completed")])
    graph = build_pose_graph(aligner.completed, aligner.links,
                             cfg.alignment)
    return len(aligner.completed), build, len(graph.submap_ids), \
        len(aligner.links)


def main():
    print(f"{'frames':>7} {'submaps':>8} {'nodes':>6} {'edges':>6} "
          f"{'t_med_s':>8} {'t_max/med':>9}")
    for frames in (160, 400, 900, 1800):
        n_sub, build, nodes, edges = run_once(frames)
        ratio = build.max() / np.median(build)
        print(f"{frames:7d} {n_sub:8d} {nodes:6d} {edges:6d} "
              f"{np.median(build):8.2f} {ratio:9.2f}")


if __name__ == "__main__":
    main()
