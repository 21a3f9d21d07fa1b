"""Training data generation: partial views, augmentation, normalization.

Each training sample pairs a partial cloud with a dense complete cloud sampled
from the same mesh, plus a shape class label.  Partials come from two recipes:

* ``depth``: ray-cast depth view from a random viewpoint, then degraded with
  jitter noise and ball dropout that mimic multipath clutter and specular
  loss of surface patches.
* ``radar``: the full simulator loop - surface scatterers, a straight pass of
  the orthogonal rig, per-frame CFAR + fusion, odometry accumulation.  Its
  artifacts are real, so no extra augmentation is applied.

Clouds are stored at true scale in the sample's own frame; normalization
happens at train/eval time from the partial cloud so it needs no ground truth.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cloudio import atomic_write_text, load_rfpc, save_rfpc
from .detection import CfarConfig
from .fusion import FusionConfig, fuse_frame
from .geometry import PointCloud, Pose
from .meshes import Mesh, box_mesh, cylinder_mesh, icosphere_mesh
from .radar import RigConfig, Scatterer, simulate_frame
from .temporal import Trajectory, TrajectoryFrame, accumulate

NORM_BBOX = "bbox"
NORM_CENTROID = "centroid"

_RAY_EPS = 1e-12
_RAY_CHUNK = 512


class NoVisibleSurface(RuntimeError):
    """Raised when a rendered or simulated view produces no points."""


class AllPointsRemoved(RuntimeError):
    """Raised when dropout augmentation removes the whole cloud."""


class DatasetError(RuntimeError):
    pass


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator):
    """Uniform area-weighted surface samples.

    Returns (points (n, 3), normals (n, 3)); normals follow face winding.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero surface area")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    tri = mesh.triangles[face_idx]
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    pts = (tri[:, 0]
           + u[:, None] * (tri[:, 1] - tri[:, 0])
           + v[:, None] * (tri[:, 2] - tri[:, 0]))
    normals = mesh.face_normals()[face_idx]
    return pts, normals


def _camera_basis(viewpoint, target, up):
    forward = np.asarray(target, dtype=float) - np.asarray(viewpoint, dtype=float)
    norm = np.linalg.norm(forward)
    if norm <= 0.0:
        raise ValueError("viewpoint coincides with target")
    forward = forward / norm
    up = np.asarray(up, dtype=float)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [1.0, 0.0, 0.0])
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right = right / np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    return forward, right, cam_up


def ray_cast_depth(mesh: Mesh, viewpoint, target=(0.0, 0.0, 0.0),
                   up=(0.0, 0.0, 1.0), width: int = 160, height: int = 120,
                   fov: float = math.radians(60.0)) -> np.ndarray:
    """First-hit surface points seen by a pinhole camera; shape (hits, 3).

    ``fov`` is the horizontal field of view; rays go through pixel centers of
    a width x height grid.  Triangles are intersected both-sided.
    """
    origin = np.asarray(viewpoint, dtype=float)
    forward, right, cam_up = _camera_basis(viewpoint, target, up)
    tan_h = math.tan(fov / 2.0)
    tan_v = tan_h * height / width
    xs = (2.0 * (np.arange(width) + 0.5) / width - 1.0) * tan_h
    ys = (1.0 - 2.0 * (np.arange(height) + 0.5) / height) * tan_v
    dirs = (forward[None, None, :]
            + xs[None, :, None] * right[None, None, :]
            + ys[:, None, None] * cam_up[None, None, :]).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    tri = mesh.triangles
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    s = origin[None, :] - tri[:, 0]
    q = np.cross(s, e1)

    hits = []
    for start in range(0, len(dirs), _RAY_CHUNK):
        d = dirs[start:start + _RAY_CHUNK]
        p = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("fk,rfk->rf", e1, p)
        ok = np.abs(det) > _RAY_EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.einsum("fk,rfk->rf", s, p) * inv
        v = np.einsum("rk,fk->rf", d, q) * inv
        t = np.einsum("fk,fk->f", e2, q)[None, :] * inv
        ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        tmin = t.min(axis=1)
        ray_hit = np.isfinite(tmin)
        if np.any(ray_hit):
            hits.append(origin[None, :] + tmin[ray_hit, None] * d[ray_hit])
    if not hits:
        return np.zeros((0, 3))
    return np.vstack(hits)


def render_partial(mesh: Mesh, viewpoint, n_points: int,
                   rng: np.random.Generator, target=(0.0, 0.0, 0.0),
                   width: int = 160, height: int = 120,
                   fov: float = math.radians(60.0)) -> np.ndarray:
    """Depth view resampled to exactly ``n_points`` points."""
    pts = ray_cast_depth(mesh, viewpoint, target=target, width=width,
                         height=height, fov=fov)
    if len(pts) == 0:
        raise NoVisibleSurface("camera sees no surface")
    return resample_points(pts, n_points, rng)


def resample_points(points: np.ndarray, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Exactly n rows: subsample without replacement, pad with replacement."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot resample an empty cloud")
    if len(points) >= n:
        idx = rng.choice(len(points), size=n, replace=False)
    else:
        idx = rng.choice(len(points), size=n, replace=True)
    return points[idx]


def jitter_points(points: np.ndarray, rng: np.random.Generator,
                  points_per_source: int = 3,
                  max_radius: float = 0.05) -> np.ndarray:
    """Append noise points scattered around each source point.

    Each source spawns ``points_per_source`` extras at distance U(0, max_radius)
    in a uniform random direction, imitating weak multipath returns.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points_per_source < 0:
        raise ValueError("points_per_source must be >= 0")
    if points_per_source == 0:
        return points.copy()
    n = len(points) * points_per_source
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(0.0, max_radius, size=n)
    extra = np.repeat(points, points_per_source, axis=0) + radii[:, None] * dirs
    return np.vstack([points, extra])


def specular_dropout(points: np.ndarray, rng: np.random.Generator,
                     n_balls: int = 4,
                     radius_range=(0.10, 0.40),
                     center_frac: float = 0.1) -> np.ndarray:
    """Delete points inside random balls, as specular surfaces drop out.

    The first ball centers near the cloud centroid (within ``center_frac`` of
    the bbox diagonal), guaranteeing a central gap; the rest center on random
    cloud points.  Raises AllPointsRemoved if nothing survives.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty cloud")
    if n_balls < 1:
        raise ValueError("n_balls must be >= 1")
    lo, hi = radius_range
    if not 0.0 < lo <= hi:
        raise ValueError("radius_range must be 0 < lo <= hi")
    centroid = points.mean(axis=0)
    diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    centers = np.empty((n_balls, 3))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    centers[0] = centroid + rng.uniform(0.0, center_frac * diag) * d
    for i in range(1, n_balls):
        centers[i] = points[rng.integers(len(points))]
    radii = rng.uniform(lo, hi, size=n_balls)
    keep = np.ones(len(points), dtype=bool)
    for c, r in zip(centers, radii):
        keep &= np.linalg.norm(points - c[None, :], axis=1) > r
    if not np.any(keep):
        raise AllPointsRemoved("dropout balls covered the whole cloud")
    return points[keep]


def normalization_params(points: np.ndarray, mode: str = NORM_CENTROID):
    """(center, scale) so that (p - center) / scale is the model frame.

    ``bbox``: bounding-box center, scaled so the cloud fits the unit sphere.
    ``centroid``: centroid centering at true scale (scale 1), for use when no
    bounding box is available at inference time.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty cloud")
    if mode == NORM_BBOX:
        center = 0.5 * (points.min(axis=0) + points.max(axis=0))
        scale = float(np.linalg.norm(points - center[None, :], axis=1).max())
        if scale <= 0.0:
            scale = 1.0
    elif mode == NORM_CENTROID:
        center = points.mean(axis=0)
        scale = 1.0
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return center, scale


def apply_normalization(points: np.ndarray, center, scale: float) -> np.ndarray:
    return (np.asarray(points, dtype=float) - np.asarray(center, dtype=float)) / scale


def undo_normalization(points: np.ndarray, center, scale: float) -> np.ndarray:
    return np.asarray(points, dtype=float) * scale + np.asarray(center, dtype=float)


@dataclass
class TrainingSample:
    partial: np.ndarray
    complete: np.ndarray
    class_id: int
    class_name: str
    object_id: str
    sample_dir: str
    recipe: str


def standard_mesh_set():
    """Three shape classes at rig-friendly (sub-meter) scale."""
    return [
        ("box", "box_000", box_mesh((0.9, 0.6, 0.5))),
        ("cylinder", "cylinder_000", cylinder_mesh(0.35, 1.0, n_segments=24)),
        ("sphere", "sphere_000", icosphere_mesh(0.45, subdivisions=2)),
    ]


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def depth_partial(mesh: Mesh, n_points: int, rng: np.random.Generator,
                  jitter_per_source: int = 3, jitter_radius: float = 0.05,
                  n_dropout_balls: int = 4,
                  dropout_radius_range=(0.10, 0.40)) -> np.ndarray:
    """Random-viewpoint depth render degraded with jitter and ball dropout."""
    radius = float(np.linalg.norm(mesh.vertices, axis=1).max())
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    viewpoint = d * 2.4 * radius
    pts = ray_cast_depth(mesh, viewpoint)
    if len(pts) == 0:
        raise NoVisibleSurface("camera sees no surface")
    pts = jitter_points(pts, rng, points_per_source=jitter_per_source,
                        max_radius=jitter_radius)
    lo, hi = dropout_radius_range
    for _ in range(8):
        try:
            pts_cropped = specular_dropout(pts, rng, n_balls=n_dropout_balls,
                                           radius_range=(lo, hi))
            break
        except AllPointsRemoved:
            lo, hi = lo / 2.0, hi / 2.0  # shrink until something survives
    else:
        pts_cropped = pts
    return resample_points(pts_cropped, n_points, rng)


def radar_partial(mesh: Mesh, n_points: int, rng: np.random.Generator,
                  n_scatterers: int = 384, standoff: float = 3.0,
                  mount_height: float = 1.0, n_frames: int = 16,
                  step: float = 0.12, noise_sigma: float = 0.01,
                  p_fa: float = 1e-4, min_points: int = 16):
    """Simulated rig pass over the mesh; returns (partial, mesh_in_first_frame).

    The mesh gets a random yaw, sits ``standoff`` meters off the rig track on
    the boresight side, and the rig drives a centered straight pass along x.
    The partial is the fused, accumulated cloud in the first frame's
    coordinates; the returned mesh is transformed into that same frame so
    complete clouds can be sampled consistently.

    Surface returns are extended targets, so cell averaging underestimates the
    noise floor inside the training ring and masks neighbors; ordered-statistic
    thresholding with a small suppression radius keeps many more cells while the
    3 dB match window keeps cross-pairing ghosts rare.
    """
    yaw = rng.uniform(0.0, 2.0 * math.pi)
    start_x = -(n_frames - 1) * step / 2.0
    world = mesh.transformed(rotation=_rot_z(yaw), translation=(0.0, standoff, 0.0))
    pts, normals = sample_surface(world, n_scatterers, rng)
    scene = [Scatterer(p, 1.0, nrm) for p, nrm in zip(pts, normals)]

    rig = RigConfig.default(noise_sigma=noise_sigma, mount_height=mount_height)
    cfar = CfarConfig(variant="os", p_fa=p_fa)
    fus = FusionConfig(mount_height=mount_height)
    frames = []
    for i in range(n_frames):
        pose = Pose(np.eye(3), np.array([start_x + i * step, 0.0, 0.0]))
        cap = simulate_frame(scene, rig, pose, t=0.1 * i, rng=rng)
        cloud, _ = fuse_frame(cap, cfar, fus, nms_radius=2)
        frames.append(TrajectoryFrame(t=0.1 * i, pose=pose, cloud=cloud))
    acc = accumulate(Trajectory(frames), max_path_length=3.0)
    if len(acc) < min_points:
        raise NoVisibleSurface("rig pass produced too few fused points")
    first_frame = world.transformed(translation=(-start_x, 0.0, 0.0))
    return resample_points(acc.points, n_points, rng), first_frame


RECIPES = ("depth", "radar")


def make_dataset(out_dir, meshes=None, per_object: int = 8,
                 recipes: Sequence[str] = RECIPES, n_partial: int = 2048,
                 n_complete: int = 16384, seed: int = 0,
                 progress=None, on_error=None) -> str:
    """Generate (or resume) a dataset tree; returns the manifest path.

    Layout: ``out_dir/class/object/sample_KK_recipe/{partial,complete}.rfpc``
    plus ``manifest.csv`` at the root.  Each sample derives its RNG from
    (seed, class index, object index, sample index, recipe index), so output
    bytes depend only on the seed and parameters, and interrupted runs resume
    by skipping sample directories that already hold both files.

    ``on_error(rel, exc)``, when given, turns per-sample generation failures
    into skips (the sample is left out of the manifest); without it the
    first failure raises.
    """
    if meshes is None:
        meshes = standard_mesh_set()
    for r in recipes:
        if r not in RECIPES:
            raise DatasetError(f"unknown recipe {r!r}")
    class_names = sorted({c for c, _, _ in meshes})
    class_ids = {c: i for i, c in enumerate(class_names)}
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for mesh_i, (class_name, object_id, mesh) in enumerate(meshes):
        for k in range(per_object):
            for recipe_i, recipe in enumerate(recipes):
                rel = os.path.join(class_name, object_id,
                                   f"sample_{k:02d}_{recipe}")
                sample_dir = os.path.join(out_dir, rel)
                partial_path = os.path.join(sample_dir, "partial.rfpc")
                complete_path = os.path.join(sample_dir, "complete.rfpc")
                row = {
                    "class_name": class_name,
                    "class_id": class_ids[class_name],
                    "object_id": object_id,
                    "sample": f"sample_{k:02d}_{recipe}",
                    "recipe": recipe,
                    "partial": os.path.join(rel, "partial.rfpc"),
                    "complete": os.path.join(rel, "complete.rfpc"),
                }
                if os.path.exists(partial_path) and os.path.exists(complete_path):
                    rows.append(row)
                    continue
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, mesh_i, k, recipe_i]))
                try:
                    if recipe == "depth":
                        partial = depth_partial(mesh, n_partial, rng)
                        complete, _ = sample_surface(mesh, n_complete, rng)
                    else:
                        partial, frame_mesh = radar_partial(mesh, n_partial, rng)
                        complete, _ = sample_surface(frame_mesh, n_complete, rng)
                except (DatasetError, NoVisibleSurface,
                        AllPointsRemoved) as exc:
                    if on_error is None:
                        raise
                    on_error(rel, exc)
                    continue
                os.makedirs(sample_dir, exist_ok=True)
                save_rfpc(partial_path, PointCloud(partial))
                save_rfpc(complete_path, PointCloud(complete))
                rows.append(row)
                if progress is not None:
                    progress(rel)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[
        "class_name", "class_id", "object_id", "sample", "recipe",
        "partial", "complete"])
    writer.writeheader()
    writer.writerows(rows)
    manifest = os.path.join(out_dir, "manifest.csv")
    atomic_write_text(manifest, buf.getvalue())
    return manifest


def load_dataset(root) -> list:
    """Read a dataset tree back as TrainingSample records."""
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest):
        raise DatasetError(f"no manifest.csv under {root}")
    samples = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            partial = load_rfpc(os.path.join(root, row["partial"]))
            complete = load_rfpc(os.path.join(root, row["complete"]))
            samples.append(TrainingSample(
                partial=partial.points,
                complete=complete.points,
                class_id=int(row["class_id"]),
                class_name=row["class_name"],
                object_id=row["object_id"],
                sample_dir=os.path.dirname(row["partial"]),
                recipe=row["recipe"],
            ))
    if not samples:
        raise DatasetError(f"manifest under {root} lists no samples")
    return samples
