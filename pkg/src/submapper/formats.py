"""On-disk artifact formats.

- feature-track dataset: versioned binary, human-readable text header
  (magic, version, intrinsics, image size, per-frame index) followed by
  packed little-endian observation records per frame: pixel float32 x2,
  descriptor float32 x128, optional truth id uint32.
- ground truth: npz archive of poses and landmark positions.
- landmark cloud: binary little-endian PLY, xyz float64 + uint32 submap id.
- trajectory: plain text, one line per frame: frame id, quaternion
  (w x y z), translation, submap id, relocalization-failure flag.
- run report: JSON.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.spatial.transform import Rotation

from .multiview import CameraIntrinsics
from .sim3 import SE3
from .simulate import DESCRIPTOR_DIM, FeatureTrackDataset, FrameObservations, \
    GroundTruth

DATASET_MAGIC = "FTDS"
DATASET_VERSION = 1
TRUTH_NONE = 0xFFFFFFFF  # uint32 sentinel for "no truth id" (outliers)


class DatasetFormatError(Exception):
    pass


def save_dataset(path, dataset, include_truth=True):
    K = dataset.intrinsics
    has_truth = include_truth and all(f.truth_ids is not None
                                      for f in dataset.frames)
    counts = [len(f.pixels) for f in dataset.frames]
    header = (
        f"{DATASET_MAGIC} {DATASET_VERSION}\n"
        f"intrinsics {float(K.focal)!r} {float(K.cx)!r} {float(K.cy)!r}\n"
        f"image {K.width} {K.height}\n"
        f"descriptor_dim {DESCRIPTOR_DIM}\n"
        f"has_truth {int(has_truth)}\n"
        f"frames {len(counts)}\n"
        f"counts {' '.join(map(str, counts))}\n"
        "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for fr in dataset.frames:
            f.write(np.ascontiguousarray(fr.pixels, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(fr.descriptors,
                                         dtype="<f4").tobytes())
            if has_truth:
                tids = np.where(fr.truth_ids < 0, TRUTH_NONE,
                                fr.truth_ids).astype("<u4")
                f.write(tids.tobytes())


def load_dataset(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DatasetFormatError(f"cannot read dataset: {e}")
    end = data.find(b"end_header\n")
    if end < 0:
        raise DatasetFormatError("missing dataset header terminator")
    try:
        lines = data[:end].decode("ascii").splitlines()
        fields = dict(line.split(None, 1) for line in lines[1:])
        magic, version = lines[0].split()
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}")
        if int(version) != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported version {version}")
        focal, cx, cy = map(float, fields["intrinsics"].split())
        width, height = map(int, fields["image"].split())
        dim = int(fields["descriptor_dim"])
        has_truth = bool(int(fields["has_truth"]))
        n_frames = int(fields["frames"])
        counts = list(map(int, fields.get("counts", "").split()))
    except DatasetFormatError:
        raise
    except Exception as e:
        raise DatasetFormatError(f"malformed dataset header: {e}")
    if len(counts) != n_frames:
        raise DatasetFormatError("frame index length mismatch")
    K = CameraIntrinsics(focal, cx, cy, width, height)
    off = end + len(b"end_header\n")
    rec = 4 * (2 + dim) + (4 if has_truth else 0)
    if len(data) - off != sum(counts) * rec:
        raise DatasetFormatError("dataset payload size mismatch")
    frames = []
    for fid, n in enumerate(counts):
        px = np.frombuffer(data, "<f4", 2 * n, off).reshape(n, 2)
        off += 8 * n
        desc = np.frombuffer(data, "<f4", dim * n, off).reshape(n, dim)
        off += 4 * dim * n
        truth = None
        if has_truth:
            raw = np.frombuffer(data, "<u4", n, off)
            off += 4 * n
            truth = np.where(raw == TRUTH_NONE, -1,
                             raw.astype(np.int64))
        frames.append(FrameObservations(frame_id=fid,
                                        pixels=px.astype(np.float64),
                                        descriptors=desc.astype(np.float64),
                                        truth_ids=truth))
    return FeatureTrackDataset(intrinsics=K, frames=frames)


def save_ground_truth(path, truth):
    R = np.stack([p.R for p in truth.poses])
    t = np.stack([p.t for p in truth.poses])
    np.savez(path, pose_R=R, pose_t=t,
             landmark_positions=truth.landmark_positions,
             landmark_ids=truth.landmark_ids)


def load_ground_truth(path):
    with np.load(path) as z:
        poses = [SE3(R=z["pose_R"][i], t=z["pose_t"][i])
                 for i in range(len(z["pose_R"]))]
        return GroundTruth(poses=poses,
                           landmark_positions=z["landmark_positions"],
                           landmark_ids=z["landmark_ids"])


def save_ply(path, points, submap_ids):
    points = np.asarray(points, dtype="<f8").reshape(-1, 3)
    submap_ids = np.asarray(submap_ids, dtype="<u4")
    if len(points) != len(submap_ids):
        raise ValueError("point/submap id length mismatch")
    header = ("ply\n"
              "format binary_little_endian 1.0\n"
              f"element vertex {len(points)}\n"
              "property double x\n"
              "property double y\n"
              "property double z\n"
              "property uint submap\n"
              "end_header\n")
    rec = np.zeros(len(points), dtype=[("xyz", "<f8", 3), ("submap", "<u4")])
    rec["xyz"] = points
    rec["submap"] = submap_ids
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def load_ply(path):
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0 or not data.startswith(b"ply\n"):
        raise DatasetFormatError("not a PLY file")
    n = 0
    for line in data[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    rec = np.frombuffer(data, dtype=[("xyz", "<f8", 3), ("submap", "<u4")],
                        count=n, offset=end + len(b"end_header\n"))
    return rec["xyz"].copy(), rec["submap"].copy()


def save_trajectory(path, fused):
    """One text line per frame: id, quaternion wxyz, translation, submap
    id, relocalization-failure flag."""
    lines = []
    fids = sorted(set(fused.frame_poses) | fused.reloc_failed)
    for fid in fids:
        sid = fused.frame_submap.get(fid, 0)
        failed = int(fid in fused.reloc_failed)
        pose = fused.frame_poses.get(fid)
        if pose is None:
            q, t = np.array([1.0, 0, 0, 0]), np.zeros(3)
        else:
            xyzw = Rotation.from_matrix(pose.R).as_quat()
            q = np.array([xyzw[3], xyzw[0], xyzw[1], xyzw[2]])
            if q[0] < 0:
                q = -q
            t = pose.t
        vals = " ".join(repr(float(v)) for v in (*q, *t))
        lines.append(f"{fid} {vals} {sid} {failed}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_trajectory(path):
    """Returns {frame id: (SE3, submap id, reloc-failed flag)}."""
    out = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            fid = int(parts[0])
            q = np.array(list(map(float, parts[1:5])))
            t = np.array(list(map(float, parts[5:8])))
            sid, failed = int(parts[8]), bool(int(parts[9]))
            R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
            out[fid] = (SE3(R=R, t=t), sid, failed)
    return out


def save_report(path, report):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON-serializable: {type(x)}")


def load_report(path):
    with open(path) as f:
        return json.load(f)


def save_submap_archive(path, submaps):
    """npz archive of per-submap geometry (for evaluation and debugging)."""
    arrays = {"submap_ids": np.array([s.id for s in submaps], dtype=np.int64),
              "statuses": np.array([s.status for s in submaps])}
    for s in submaps:
        p = f"s{s.id}_"
        arrays[p + "frame_range"] = np.array(s.frame_range, dtype=np.int64)
        lids = sorted(s.landmarks)
        arrays[p + "landmark_ids"] = np.array(lids, dtype=np.int64)
        arrays[p + "landmark_xyz"] = (
            np.stack([s.landmarks[l].position for l in lids])
            if lids else np.zeros((0, 3)))
        arrays[p + "landmark_truth"] = np.array(
            [s.landmarks[l].truth_id for l in lids], dtype=np.int64)
        arrays[p + "keyframe_ids"] = np.array(s.keyframe_ids(),
                                              dtype=np.int64)
        arrays[p + "keyframe_R"] = (np.stack([kf.pose.R
                                              for kf in s.keyframes])
                                    if s.keyframes else np.zeros((0, 3, 3)))
        arrays[p + "keyframe_t"] = (np.stack([kf.pose.t
                                              for kf in s.keyframes])
                                    if s.keyframes else np.zeros((0, 3)))
    np.savez(path, **arrays)
