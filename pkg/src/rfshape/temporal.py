"""Trajectory handling and multi-frame point cloud accumulation.

A trajectory is an ordered sequence of timestamped rig poses, each optionally
carrying the point cloud fused at that pose. Accumulation re-expresses every
frame cloud in the coordinates of the first frame and concatenates, which is
valid because the per-frame clouds are already in rig coordinates.

Trajectory text format, one frame per line::

    t x y z qw qx qy qz [cloudfile]

Fields are whitespace separated; ``cloudfile`` is optional (a lone ``-`` also
means "no cloud").  Lines starting with ``#`` and blank lines are skipped.
Relative cloud paths resolve against the trajectory file's directory.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cloudio import atomic_write_text, load_rfpc
from .geometry import PointCloud, Pose, concat_clouds, transform_cloud


class EmptyTrajectory(ValueError):
    """Raised when an operation needs at least one frame."""


class TrajectoryParseError(ValueError):
    """Raised on malformed trajectory files; carries the 1-based line number."""

    def __init__(self, path, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass
class TrajectoryFrame:
    """One trajectory sample: a timestamp, a rig pose, optionally a cloud."""

    t: float
    pose: Pose
    cloud: Optional[PointCloud] = None
    cloud_file: Optional[str] = None


@dataclass
class Trajectory:
    frames: list = field(default_factory=list)

    def __post_init__(self):
        times = [f.t for f in self.frames]
        for a, b in zip(times, times[1:]):
            if not b > a:
                raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def poses(self) -> list:
        return [f.pose for f in self.frames]

    def path_length(self) -> float:
        """Total arc length of the translation polyline."""
        total = 0.0
        for a, b in zip(self.frames, self.frames[1:]):
            total += float(np.linalg.norm(b.pose.translation - a.pose.translation))
        return total


def linear_trajectory(
    n_frames: int,
    step: float,
    start: Sequence[float] = (0.0, 0.0, 0.0),
    direction: Sequence[float] = (1.0, 0.0, 0.0),
    frame_rate: float = 10.0,
) -> Trajectory:
    """Straight constant-speed trajectory with identity orientation.

    The default direction is +x, the rig travel axis, which keeps the object
    in the side-looking field of view for the whole pass.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    d = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(d)
    if norm <= 0.0:
        raise ValueError("direction must be nonzero")
    d = d / norm
    start = np.asarray(start, dtype=float)
    frames = []
    for i in range(n_frames):
        pose = Pose(np.eye(3), start + i * step * d)
        frames.append(TrajectoryFrame(t=i / frame_rate, pose=pose))
    return Trajectory(frames)


def accumulate(
    traj: Trajectory,
    max_frames: Optional[int] = None,
    max_path_length: float = 3.0,
) -> PointCloud:
    """Merge frame clouds into the first frame's coordinates.

    Frames are taken in order.  The first frame is always included; a later
    frame is included only while the frame count stays within ``max_frames``
    and the arc length walked from the first frame stays within
    ``max_path_length`` (meters).  Both caps bound drift accumulated from the
    odometry estimate.
    """
    if len(traj) == 0:
        raise EmptyTrajectory("cannot accumulate an empty trajectory")
    if max_frames is not None and max_frames < 1:
        raise ValueError("max_frames must be >= 1")

    first = traj.frames[0]
    ref_inv = first.pose.inverse()
    parts = []
    arc = 0.0
    prev_t = first.pose.translation
    for i, frame in enumerate(traj.frames):
        if max_frames is not None and i >= max_frames:
            break
        if i > 0:
            arc += float(np.linalg.norm(frame.pose.translation - prev_t))
            prev_t = frame.pose.translation
            if arc > max_path_length:
                break
        if frame.cloud is None:
            raise ValueError(f"trajectory frame {i} has no point cloud")
        rel = ref_inv.compose(frame.pose)
        parts.append(transform_cloud(frame.cloud, rel))
    return concat_clouds(parts)


def add_pose_noise(
    traj: Trajectory,
    translation_rms: float,
    rotation_rms: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Trajectory:
    """Perturb every pose with zero-mean Gaussian noise.

    ``translation_rms`` is the RMS of the 3-D position error vector, so each
    axis draws with sigma = rms / sqrt(3).  ``rotation_rms`` (radians) is the
    RMS rotation angle, applied as a small world-frame rotation; its rotation
    vector components likewise use sigma = rms / sqrt(3).  Clouds and
    timestamps pass through untouched.
    """
    if translation_rms < 0.0 or rotation_rms < 0.0:
        raise ValueError("noise RMS values must be >= 0")
    if rng is None and (translation_rms > 0.0 or rotation_rms > 0.0):
        raise ValueError("rng is required when noise is nonzero")

    sig_t = translation_rms / math.sqrt(3.0)
    sig_r = rotation_rms / math.sqrt(3.0)
    frames = []
    for frame in traj.frames:
        trans = frame.pose.translation.copy()
        rot = frame.pose.rotation.copy()
        if sig_t > 0.0:
            trans = trans + rng.normal(0.0, sig_t, size=3)
        if sig_r > 0.0:
            rotvec = rng.normal(0.0, sig_r, size=3)
            angle = float(np.linalg.norm(rotvec))
            if angle > 0.0:
                rot = Pose.from_axis_angle(rotvec / angle, angle).rotation @ rot
        frames.append(
            TrajectoryFrame(
                t=frame.t,
                pose=Pose(rot, trans),
                cloud=frame.cloud,
                cloud_file=frame.cloud_file,
            )
        )
    return Trajectory(frames)


def transform_trajectory(traj: Trajectory, pose: Pose) -> Trajectory:
    """Left-compose every frame pose with ``pose`` (a change of world frame)."""
    frames = [
        TrajectoryFrame(
            t=f.t,
            pose=pose.compose(f.pose),
            cloud=f.cloud,
            cloud_file=f.cloud_file,
        )
        for f in traj.frames
    ]
    return Trajectory(frames)


def trajectory_text(traj: Trajectory) -> str:
    lines = ["# t x y z qw qx qy qz [cloudfile]"]
    for frame in traj.frames:
        qw, qx, qy, qz = frame.pose.quaternion()
        x, y, z = frame.pose.translation
        row = (
            f"{frame.t:.9g} {x:.9g} {y:.9g} {z:.9g} "
            f"{qw:.12g} {qx:.12g} {qy:.12g} {qz:.12g}"
        )
        if frame.cloud_file is not None:
            row += f" {frame.cloud_file}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def save_trajectory(path, traj: Trajectory) -> None:
    atomic_write_text(path, trajectory_text(traj))


def load_trajectory(path, load_clouds: bool = False) -> Trajectory:
    """Parse a trajectory file, optionally loading referenced clouds."""
    base = os.path.dirname(os.fspath(path))
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (8, 9):
                raise TrajectoryParseError(
                    path, line_no, f"expected 8 or 9 fields, got {len(fields)}"
                )
            try:
                t = float(fields[0])
                x, y, z = (float(v) for v in fields[1:4])
                qw, qx, qy, qz = (float(v) for v in fields[4:8])
            except ValueError:
                raise TrajectoryParseError(path, line_no, "non-numeric field") from None
            try:
                pose = Pose.from_quat(qw, qx, qy, qz, translation=(x, y, z))
            except ValueError as exc:
                raise TrajectoryParseError(path, line_no, str(exc)) from None
            cloud_file = None
            cloud = None
            if len(fields) == 9 and fields[8] != "-":
                cloud_file = fields[8]
                if load_clouds:
                    full = cloud_file
                    if not os.path.isabs(full):
                        full = os.path.join(base, full)
                    cloud = load_rfpc(full)
            frames.append(
                TrajectoryFrame(t=t, pose=pose, cloud=cloud, cloud_file=cloud_file)
            )
    try:
        return Trajectory(frames)
    except ValueError as exc:
        raise TrajectoryParseError(path, 0, str(exc)) from None
