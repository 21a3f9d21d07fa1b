"""Shared geometry: spherical/Cartesian conversions, rigid transforms, point clouds.

Conventions used across the toolkit:
  * Right-handed world frame: x = rig travel direction (horizontal array axis),
    y = look direction (array broadside), z = up (vertical array axis).
  * Azimuth phi: radians in (-pi, pi], measured from +x within the xy plane,
    positive toward +y.
  * Elevation theta: polar angle in [0, pi], measured from +z (theta = pi/2 is
    the horizon).
  * psi: cone angle between a direction and the +x axis. A 1-D array along x
    resolves exactly this angle; cos(psi) = sin(theta) * cos(phi).
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

X_AXIS = np.array([1.0, 0.0, 0.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])


class DomainError(ValueError):
    """Angle combination has no geometric solution."""


class DegenerateElevation(ValueError):
    """Elevation too close to a pole for the azimuth to be defined."""


class Spherical(NamedTuple):
    """Spherical coordinates (r, azimuth, elevation); elevation is polar from +z."""

    r: float
    azimuth: float
    elevation: float


def spherical_to_cartesian(s: Spherical) -> np.ndarray:
    """Convert (r, azimuth, elevation) to a Cartesian point.

    x = r sin(el) cos(az), y = r sin(el) sin(az), z = r cos(el).
    """
    r, az, el = s
    if r < 0:
        raise ValueError(f"negative range {r}")
    se = math.sin(el)
    return np.array([r * se * math.cos(az), r * se * math.sin(az), r * math.cos(el)])


def cartesian_to_spherical(p: np.ndarray) -> Spherical:
    """Inverse of spherical_to_cartesian. Azimuth of a pole point is 0 by convention."""
    x, y, z = (float(v) for v in p)
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        return Spherical(0.0, 0.0, 0.0)
    el = math.acos(max(-1.0, min(1.0, z / r)))
    az = math.atan2(y, x)
    return Spherical(r, az, el)


def cone_angle_from_direction(v: np.ndarray, axis: np.ndarray = X_AXIS) -> float:
    """Angle in [0, pi] between direction v and an axis (default +x)."""
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v)) * float(np.linalg.norm(axis))
    if n == 0.0:
        raise ValueError("zero-length direction")
    c = float(np.dot(v, axis)) / n
    return math.acos(max(-1.0, min(1.0, c)))


#: |sin(elevation)| below this is treated as a pole (azimuth undefined).
_POLE_EPS = 1e-6
#: Slack on |cos(psi)/sin(theta)| before declaring the pair unreachable.
_DOMAIN_EPS = 1e-9


def azimuth_from_cone(psi: float, theta: float) -> float:
    """Recover the azimuth magnitude from a cone angle psi (to +x) and elevation theta.

    Solves cos(psi) = sin(theta) * cos(phi) for phi in [0, pi]. The mirrored
    solution -phi corresponds to the y < 0 half-space behind the array plane;
    callers pick the branch (the fusion stage keeps y >= 0).

    Raises:
        DegenerateElevation: theta within _POLE_EPS of a pole.
        DomainError: |cos(psi)| > sin(theta) beyond tolerance (no direction
            with that cone angle exists at that elevation).
    """
    st = math.sin(theta)
    if abs(st) <= _POLE_EPS:
        raise DegenerateElevation(f"sin(theta) = {st:.2e} too small")
    ratio = math.cos(psi) / st
    if abs(ratio) > 1.0 + _DOMAIN_EPS:
        raise DomainError(f"|cos(psi)/sin(theta)| = {abs(ratio):.6f} > 1")
    return math.acos(max(-1.0, min(1.0, ratio)))


def _quat_to_matrix(w: float, x: float, y: float, z: float) -> np.ndarray:
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping local coordinates into the parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad pose shapes {r.shape}, {t.shape}")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation is not orthonormal with det +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_quat(qw: float, qx: float, qy: float, qz: float,
                  translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Build from a [w, x, y, z] quaternion; tolerates rounding up to 1e-6 in norm."""
        n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n:.8f} too far from 1")
        qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
        return Pose(_quat_to_matrix(qw, qx, qy, qz), np.asarray(translation, dtype=float))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        w = math.cos(angle / 2.0)
        s = math.sin(angle / 2.0)
        return Pose(_quat_to_matrix(w, *(s * axis)), np.asarray(translation, dtype=float))

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T.copy()
        return Pose(rt, -rt @ self.translation)

    def quaternion(self):
        """Rotation as a unit quaternion (w, x, y, z) with w >= 0."""
        m = self.rotation
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            qw = 0.25 * s
            qx = (m[2, 1] - m[1, 2]) / s
            qy = (m[0, 2] - m[2, 0]) / s
            qz = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            qw = (m[2, 1] - m[1, 2]) / s
            qx = 0.25 * s
            qy = (m[0, 1] + m[1, 0]) / s
            qz = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            qw = (m[0, 2] - m[2, 0]) / s
            qx = (m[0, 1] + m[1, 0]) / s
            qy = 0.25 * s
            qz = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            qw = (m[1, 0] - m[0, 1]) / s
            qx = (m[0, 2] + m[2, 0]) / s
            qy = (m[1, 2] + m[2, 1]) / s
            qz = 0.25 * s
        if qw < 0.0:
            qw, qx, qy, qz = -qw, -qx, -qy, -qz
        return qw, qx, qy, qz

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) point or (N, 3) array into the parent frame."""
        p = np.asarray(points, dtype=float)
        if p.shape == (3,):
            return self.rotation @ p + self.translation
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got {p.shape}")
        return p @ self.rotation.T + self.translation


@dataclass
class PointCloud:
    """Ordered 3D points with optional per-point power in dB."""

    points: np.ndarray
    powers_db: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.powers_db is not None:
            self.powers_db = np.asarray(self.powers_db, dtype=float).reshape(-1)
            if len(self.powers_db) != len(self.points):
                raise ValueError(
                    f"{len(self.powers_db)} powers for {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def empty(with_power: bool = False) -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros(0) if with_power else None)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Rigidly transform a cloud; powers carry over unchanged."""
    powers = None if cloud.powers_db is None else cloud.powers_db.copy()
    return PointCloud(pose.apply(cloud.points), powers)


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Concatenate in order. Powers survive only if every cloud has them."""
    if not clouds:
        return PointCloud.empty()
    pts = np.concatenate([c.points for c in clouds], axis=0)
    if all(c.powers_db is not None for c in clouds):
        return PointCloud(pts, np.concatenate([c.powers_db for c in clouds]))
    return PointCloud(pts)
