"""Command-line entry point.

Subcommands: simulate, build-vocab, run, evaluate, plot-report.
Exit codes: 0 success, 2 configuration error, 3 dataset error,
4 reconstruction failure (no completed submaps).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_RECONSTRUCTION = 4


def _out_dir(args):
    d = Path(args.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_simulate(args):
    from .config import ConfigError, load_scenario_config
    from .formats import save_dataset, save_ground_truth
    from .simulate import generate_scenario
    try:
        cfg = load_scenario_config(args.config, seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    dataset, truth = generate_scenario(cfg)
    out = _out_dir(args)
    save_dataset(out / "dataset.bin", dataset)
    save_ground_truth(out / "ground_truth.npz", truth)
    n_obs = sum(len(f.pixels) for f in dataset.frames)
    print(f"wrote {len(dataset.frames)} frames, {n_obs} observations, "
          f"{len(truth.landmark_ids)} landmarks -> {out}")
    return EXIT_OK


def cmd_build_vocab(args):
    from .formats import DatasetFormatError, load_dataset
    from .vocab import build_vocabulary
    rng = np.random.default_rng(args.seed)
    pools = []
    for path in args.datasets:
        try:
            ds = load_dataset(path)
        except DatasetFormatError as e:
            print(f"dataset error: {e}", file=sys.stderr)
            return EXIT_DATASET
        pools.extend(f.descriptors for f in ds.frames if len(f.descriptors))
    if not pools:
        print("dataset error: no descriptors to train on", file=sys.stderr)
        return EXIT_DATASET
    pool = np.concatenate(pools)
    n = min(args.samples, len(pool))
    sample = pool[rng.choice(len(pool), size=n, replace=False)]
    tree = build_vocabulary(sample, k=args.branching, depth=args.depth,
                            seed=args.seed)
    out = _out_dir(args)
    tree.save(out / "vocabulary.npz")
    print(f"trained vocabulary: {len(tree.word_weights)} words from "
          f"{n} descriptors -> {out / 'vocabulary.npz'}")
    return EXIT_OK


def cmd_run(args):
    from .config import ConfigError, load_pipeline_config
    from .formats import (DatasetFormatError, load_dataset,
                          load_ground_truth, save_ply, save_report,
                          save_submap_archive, save_trajectory)
    from .pipeline import ReconstructionFailure, build_report, run_pipeline
    try:
        cfg = load_pipeline_config(args.config, seed=args.seed,
                                   mode=args.mode)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dataset = load_dataset(args.dataset)
    except DatasetFormatError as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return EXIT_DATASET
    try:
        fused, aligner, log = run_pipeline(dataset, cfg)
    except ReconstructionFailure as e:
        print(f"reconstruction failed: {e}", file=sys.stderr)
        return EXIT_RECONSTRUCTION

    evaluation = None
    if args.truth:
        from .simulate import evaluate_map
        truth = load_ground_truth(args.truth)
        evaluation = evaluate_map(fused.points, fused.point_truth,
                                  fused.frame_poses, truth)
    out = _out_dir(args)
    save_ply(out / "map.ply", fused.points, fused.point_submap)
    np.savez(out / "map_points.npz", xyz=fused.points,
             submap=fused.point_submap, truth=fused.point_truth)
    save_trajectory(out / "trajectory.txt", fused)
    save_submap_archive(out / "submaps.npz", aligner.submaps)
    save_report(out / "report.json",
                build_report(cfg, aligner, fused, log, evaluation))
    n_completed = len(aligner.completed)
    print(f"{n_completed} submaps, {len(fused.points)} points, "
          f"{len(fused.frame_poses)} frame poses -> {out}")
    if evaluation is not None:
        print(f"landmark rmse {evaluation.landmark_rmse:.6g}, "
              f"pose rmse {evaluation.pose_position_rmse:.6g}")
    return EXIT_OK


def cmd_evaluate(args):
    from .formats import (DatasetFormatError, load_ground_truth, load_ply,
                          save_report)
    from .simulate import EvaluationError, evaluate_map
    try:
        points, submap_ids = load_ply(args.map)
    except (OSError, DatasetFormatError) as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return EXIT_DATASET
    sidecar = Path(args.map).with_name("map_points.npz")
    if not sidecar.exists():
        print(f"dataset error: no landmark identity sidecar at {sidecar}",
              file=sys.stderr)
        return EXIT_DATASET
    with np.load(sidecar) as z:
        truth_ids = z["truth"]
    truth = load_ground_truth(args.truth)
    frame_poses = {}
    if args.trajectory:
        from .formats import load_trajectory
        frame_poses = {fid: pose for fid, (pose, _, failed)
                       in load_trajectory(args.trajectory).items()
                       if not failed}
    try:
        ev = evaluate_map(points, truth_ids, frame_poses, truth)
    except EvaluationError as e:
        print(f"evaluation failed: {e}", file=sys.stderr)
        return EXIT_RECONSTRUCTION
    out = _out_dir(args)
    metrics = {"landmark_rmse": ev.landmark_rmse,
               "pose_position_rmse": ev.pose_position_rmse,
               "matched_fraction": ev.matched_fraction,
               "n_matched": ev.n_matched}
    save_report(out / "metrics.json", metrics)
    print(f"landmark rmse {ev.landmark_rmse:.6g}, pose rmse "
          f"{ev.pose_position_rmse:.6g}, matched {ev.n_matched}")
    return EXIT_OK


def cmd_plot_report(args):
    import json
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    with open(args.report) as f:
        report = json.load(f)
    out = _out_dir(args)
    submaps = [s for s in report["submaps"] if s["status"] == "completed"]
    snaps = report["alignment"]["snapshots"]

    fig, axes = plt.subplots(2, 2, figsize=(11, 8))
    ax = axes[0][0]
    ax.bar([s["id"] for s in submaps], [s["final_ba_rms"] for s in submaps])
    ax.set_xlabel("submap")
    ax.set_ylabel("final BA RMS [px]")
    ax.set_title("per-submap reprojection error")

    ax = axes[0][1]
    ax.plot([s["submap"] for s in snaps], [s["nodes"] for s in snaps],
            label="nodes")
    ax.plot([s["submap"] for s in snaps], [s["edges"] for s in snaps],
            label="edges")
    ax.set_xlabel("submap")
    ax.set_title("pose-graph growth")
    ax.legend()

    ax = axes[1][0]
    ax.plot([s["submap"] for s in snaps], [s["cost"] for s in snaps])
    ax.set_xlabel("submap")
    ax.set_ylabel("alignment cost")
    ax.set_yscale("symlog", linthresh=1e-12)

    ax = axes[1][1]
    ax.plot([s["submap"] for s in snaps], [s["latency"] for s in snaps])
    ax.set_xlabel("submap")
    ax.set_ylabel("alignment pass latency [s]")

    fig.tight_layout()
    path = out / "report.png"
    fig.savefig(path, dpi=120)
    print(f"wrote {path}")
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="submapper",
        description="submap-based mapping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("build-vocab", help="train a vocabulary tree")
    p.add_argument("datasets", nargs="+")
    p.add_argument("--branching", type=int, default=8)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("run", help="reconstruct a map from a dataset")
    p.add_argument("dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=["two-worker", "single"], default=None)
    p.add_argument("--truth", default=None,
                   help="ground-truth file; adds evaluation to the report")
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("evaluate", help="compare a map to ground truth")
    p.add_argument("map", help="PLY landmark cloud from `run`")
    p.add_argument("--truth", required=True)
    p.add_argument("--trajectory", default=None)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("plot-report", help="render plots from a run report")
    p.add_argument("report")
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_plot_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
