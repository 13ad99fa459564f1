"""Synthetic scenario generator and evaluation harness.

Generates a procedural landmark cloud, a smooth drone trajectory over
it, and per-frame noisy feature-track observations with synthetic
descriptors. Descriptor identity encodes ground-truth correspondence:
every landmark gets a unique base descriptor and each observation sees
a Gaussian-perturbed copy, so the matching pathways of a real
feature-based pipeline are exercised without any imagery.

Everything is deterministic from the scenario seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .multiview import CameraIntrinsics, umeyama_sim3
from .sim3 import SE3, sim3_apply, so3_exp

DESCRIPTOR_DIM = 128


@dataclass
class ScenarioConfig:
    scene: str = "grid-city"              # or "heightfield"
    extent: float = 1000.0                # square scene side, metres
    landmark_density: float = 2e-5        # landmarks per square metre
    trajectory: str = "orbit"             # orbit | raster | ring-loop | figure-eight
    altitude: float = 150.0
    frames_per_rev: int = 400
    frame_count: int = 400
    focal: float = 1200.0
    image_width: int = 1280
    image_height: int = 960
    pixel_noise: float = 0.25
    descriptor_noise: float = 0.05
    outlier_rate: float = 0.0
    cut_frames: list = field(default_factory=list)
    occlusion: bool = False
    attitude_amplitude: float = 0.0       # pitch/roll sway amplitude, degrees
    seed: int = 0

    def validate(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be at least 2")
        if self.extent <= 0 or self.landmark_density <= 0:
            raise ValueError("extent and landmark_density must be positive")
        if self.pixel_noise < 0 or self.descriptor_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.attitude_amplitude < 0:
            raise ValueError("attitude_amplitude must be non-negative")
        if self.scene not in ("grid-city", "heightfield"):
            raise ValueError(f"unknown scene kind {self.scene!r}")
        if self.trajectory not in ("orbit", "raster", "ring-loop",
                                   "figure-eight"):
            raise ValueError(f"unknown trajectory kind {self.trajectory!r}")
        return self

    def intrinsics(self):
        return CameraIntrinsics(self.focal, self.image_width / 2.0,
                                self.image_height / 2.0,
                                self.image_width, self.image_height)


@dataclass
class Scene:
    positions: np.ndarray      # (n, 3)
    descriptors: np.ndarray    # (n, DESCRIPTOR_DIM) base descriptors


@dataclass
class FrameObservations:
    frame_id: int
    pixels: np.ndarray         # (m, 2)
    descriptors: np.ndarray    # (m, DESCRIPTOR_DIM)
    truth_ids: np.ndarray | None = None   # landmark id, -1 for injected outliers


@dataclass
class FeatureTrackDataset:
    intrinsics: CameraIntrinsics
    frames: list

    def frame_count(self):
        return len(self.frames)


@dataclass
class GroundTruth:
    poses: list                # per-frame SE3, camera-from-world
    landmark_positions: np.ndarray
    landmark_ids: np.ndarray


def generate_scene(cfg):
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n = int(round(cfg.landmark_density * cfg.extent * cfg.extent))
    if n == 0:
        raise ValueError("landmark density too low: empty scene")
    xy = rng.uniform(0.0, cfg.extent, (n, 2))
    if cfg.scene == "grid-city":
        # City blocks: points inside a building cell sit on its roof.
        block = cfg.extent / 20.0
        cell = np.floor(xy / block).astype(int)
        frac = xy / block - cell
        inside = (frac[:, 0] > 0.2) & (frac[:, 0] < 0.8) \
            & (frac[:, 1] > 0.2) & (frac[:, 1] < 0.8)
        hash_h = ((cell[:, 0] * 73856093) ^ (cell[:, 1] * 19349663)) % 1000
        heights = 10.0 + 40.0 * hash_h / 1000.0
        z = np.where(inside, heights, 0.0)
    else:
        # Smooth heightfield from a few seeded sinusoids.
        z = np.zeros(n)
        for _ in range(6):
            kx, ky = rng.uniform(1.0, 4.0, 2) * 2 * np.pi / cfg.extent
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(3.0, 12.0)
            z += amp * np.sin(kx * xy[:, 0] + ky * xy[:, 1] + phase)
    positions = np.column_stack([xy, z])
    descriptors = rng.uniform(0.0, 1.0, (n, DESCRIPTOR_DIM))
    return Scene(positions, descriptors)


def _look_down_pose(center, travel_dir):
    """Nadir-looking camera: optical axis -z(world), image x along travel."""
    z_axis = np.array([0.0, 0.0, -1.0])
    x_axis = np.array([travel_dir[0], travel_dir[1], 0.0])
    nx = np.linalg.norm(x_axis)
    x_axis = x_axis / nx if nx > 1e-12 else np.array([1.0, 0.0, 0.0])
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis])  # rows: camera axes in world
    return SE3(R, -R @ np.asarray(center, dtype=float))


def _path_point(cfg, u):
    """Path position for parameter u (frame index, possibly offset)."""
    c = cfg.extent / 2.0
    if cfg.trajectory in ("orbit", "ring-loop"):
        if cfg.trajectory == "orbit":
            ang = 2 * np.pi * u / cfg.frames_per_rev
        else:
            ang = 2 * np.pi * u / (cfg.frame_count - 1)
        r = 0.3 * cfg.extent
        return np.array([c + r * np.cos(ang), c + r * np.sin(ang),
                         cfg.altitude])
    if cfg.trajectory == "figure-eight":
        ang = 2 * np.pi * u / cfg.frames_per_rev
        a = 0.35 * cfg.extent
        return np.array([c + a * np.sin(ang),
                         c + a * np.sin(ang) * np.cos(ang), cfg.altitude])
    # raster: smooth serpentine sweep expressed with sinusoids.  Row
    # count grows with frame count and keeps adjacent lanes close
    # enough for cross-lane image overlap at typical footprints.
    rows = max(2, int(np.sqrt(cfg.frame_count / 10.0)) + 2)
    uu = u / max(cfg.frame_count - 1, 1)
    x = c + 0.4 * cfg.extent * np.sin(np.pi * rows * uu)
    y = 0.1 * cfg.extent + 0.8 * cfg.extent * uu
    return np.array([x, y, cfg.altitude])


def _raster_arclength_map(cfg):
    """Map raw path parameter to one with uniform ground speed.

    The serpentine expression moves fast mid-lane and stalls at lane
    turns; a real survey aircraft flies at constant speed.  Returned
    callable remaps u so arc length grows linearly with u.
    """
    grid = np.linspace(0.0, cfg.frame_count - 1.0, 4096)
    pts = np.stack([_path_point(cfg, g) for g in grid])
    seg = np.linalg.norm(np.diff(pts[:, :2], axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    rate = s[-1] / max(cfg.frame_count - 1.0, 1.0)
    end_slope = seg[-1] / (grid[1] - grid[0])

    def remap(u):
        target = rate * u
        if target > s[-1]:  # past the sweep (cut offsets): extrapolate
            return grid[-1] + (target - s[-1]) / max(end_slope, 1e-9)
        return float(np.interp(target, s, grid))

    return remap


def generate_trajectory(cfg):
    cfg.validate()
    offsets = np.zeros(cfg.frame_count)
    jump = 0.37 * max(cfg.frames_per_rev, cfg.frame_count)
    for cut in cfg.cut_frames:
        offsets[cut:] += jump
    poses = []
    amp = np.deg2rad(cfg.attitude_amplitude)
    remap = _raster_arclength_map(cfg) if cfg.trajectory == "raster" else None
    for f in range(cfg.frame_count):
        u = f + offsets[f]
        if remap is not None:
            u = remap(u)
        p = _path_point(cfg, u)
        p_next = _path_point(cfg, u + 1e-3)
        pose = _look_down_pose(p, p_next - p)
        if amp > 0.0:
            # Smooth pitch/roll sway about the nadir attitude.  Without
            # it every frame shares the same optical-axis direction, a
            # critical motion sequence under which focal length is not
            # observable from the image measurements.
            pitch = amp * np.sin(2 * np.pi * u / 37.0)
            roll = amp * np.sin(2 * np.pi * u / 53.0 + 1.3)
            R = so3_exp(np.array([pitch, roll, 0.0])) @ pose.R
            pose = SE3(R, -R @ pose.center())
        poses.append(pose)
    return poses


def render_observations(scene, trajectory, cfg):
    """Project the scene into every frame; add noise and injected outliers."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    K = cfg.intrinsics()
    n = len(scene.positions)
    frames = []
    for f, pose in enumerate(trajectory):
        xc = scene.positions @ pose.R.T + pose.t
        z = xc[:, 2]
        in_front = z > 1e-9
        zsafe = np.where(in_front, z, 1.0)
        u = K.focal * xc[:, 0] / zsafe + K.cx
        v = K.focal * xc[:, 1] / zsafe + K.cy
        vis = in_front & (u >= 0) & (u <= K.width - 1) \
            & (v >= 0) & (v <= K.height - 1)
        if cfg.occlusion:
            # Height z-buffer on a coarse pixel grid: keep the nearest point.
            idx = np.flatnonzero(vis)
            order = idx[np.argsort(z[idx], kind='stable')]
            grid = {}
            keep = np.zeros(n, dtype=bool)
            for i in order:
                key = (int(u[i] // 8), int(v[i] // 8))
                if key not in grid:
                    grid[key] = i
                    keep[i] = True
            vis = keep
        ids = np.flatnonzero(vis)
        pix = np.column_stack([u[ids], v[ids]])
        if cfg.pixel_noise > 0:
            pix = pix + rng.normal(0, cfg.pixel_noise, pix.shape)
        desc = scene.descriptors[ids]
        if cfg.descriptor_noise > 0:
            desc = desc + rng.normal(0, cfg.descriptor_noise, desc.shape)
        truth = ids.astype(np.int64)
        if cfg.outlier_rate > 0 and len(ids):
            n_out = int(round(cfg.outlier_rate * len(ids)))
            if n_out:
                opix = np.column_stack([
                    rng.uniform(0, K.width - 1, n_out),
                    rng.uniform(0, K.height - 1, n_out)])
                src = rng.integers(0, n, n_out)
                odesc = scene.descriptors[src] \
                    + rng.normal(0, max(cfg.descriptor_noise, 1e-12),
                                 (n_out, DESCRIPTOR_DIM))
                pix = np.vstack([pix, opix])
                desc = np.vstack([desc, odesc])
                truth = np.concatenate([truth, np.full(n_out, -1,
                                                       dtype=np.int64)])
        frames.append(FrameObservations(f, pix, desc, truth))
    dataset = FeatureTrackDataset(K, frames)
    truth = GroundTruth(list(trajectory), scene.positions.copy(),
                        np.arange(n, dtype=np.int64))
    return dataset, truth


def generate_scenario(cfg):
    """Scene + trajectory + rendering in one call."""
    scene = generate_scene(cfg)
    trajectory = generate_trajectory(cfg)
    dataset, truth = render_observations(scene, trajectory, cfg)
    return dataset, truth


class EvaluationError(RuntimeError):
    """Too few landmark matches to gauge-align estimate and truth."""


@dataclass
class MapEvaluation:
    landmark_rmse: float
    pose_position_rmse: float
    pose_position_errors: dict
    matched_fraction: float
    gauge: object              # the Sim3 aligning estimate onto truth
    n_matched: int


def evaluate_map(landmark_positions, landmark_truth_ids, frame_poses, truth):
    """Gauge-align an estimated map to ground truth and report errors.

    frame_poses maps frame id -> estimated camera-from-world SE3 (may
    cover a subset of frames). Landmarks with truth id < 0 are ignored.
    """
    est = np.asarray(landmark_positions, dtype=float)
    ids = np.asarray(landmark_truth_ids, dtype=np.int64)
    valid = (ids >= 0) & (ids < len(truth.landmark_positions))
    ids, est = ids[valid], est[valid]
    # One estimate per truth id (first occurrence wins).
    _, first = np.unique(ids, return_index=True)
    ids, est = ids[first], est[first]
    if len(ids) < 3:
        raise EvaluationError(f"only {len(ids)} matched landmarks")
    ref = truth.landmark_positions[ids]
    gauge = umeyama_sim3(est, ref)
    aligned = sim3_apply(gauge, est)
    landmark_rmse = float(np.sqrt(((aligned - ref) ** 2).sum(axis=1).mean()))

    pose_errors = {}
    for fid, pose in frame_poses.items():
        if fid < 0 or fid >= len(truth.poses):
            continue
        c_est = sim3_apply(gauge, pose.center())
        c_true = truth.poses[fid].center()
        pose_errors[fid] = float(np.linalg.norm(c_est - c_true))
    if pose_errors:
        pose_rmse = float(np.sqrt(np.mean(np.square(list(pose_errors.values())))))
    else:
        pose_rmse = float('nan')
    return MapEvaluation(
        landmark_rmse=landmark_rmse,
        pose_position_rmse=pose_rmse,
        pose_position_errors=pose_errors,
        matched_fraction=len(ids) / len(truth.landmark_positions),
        gauge=gauge,
        n_matched=len(ids))
