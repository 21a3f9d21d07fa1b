"""Fuse detections from the orthogonal arrays into 3D points.

The horizontal radar resolves (range, psi) with psi the cone angle to the x
axis; the vertical radar resolves (range, theta) with theta the polar angle
from +z. Within each shared range bin, detections are paired in descending
power order. Pairing stops at the first pair whose compensated powers differ
by more than power_match_db, and everything from that point on is discarded
(ambiguous association is worse than a missing point for downstream surface
estimation). Each surviving pair is lifted to Cartesian coordinates through
phi = arccos(cos psi / sin theta), keeping the y >= 0 branch (the side the
arrays face); the fused power is the mean of the pair's dB powers.
"""

import math
from dataclasses import dataclass

import numpy as np

from .detection import CfarConfig, Detection, cfar_detect, nms_peaks
from .geometry import (
    DegenerateElevation,
    DomainError,
    PointCloud,
    Spherical,
    azimuth_from_cone,
    spherical_to_cartesian,
)
from .radar import ConfigMismatch, FrameCapture


class MissingGainEntry(ValueError):
    """Detection's angle bin has no gain-table entry."""


@dataclass(frozen=True)
class FusionConfig:
    power_match_db: float = 3.0
    fov_limit: float = math.radians(45.0)  # about broadside, both axes
    min_height: float = 0.0
    max_height: float = 3.0
    mount_height: float = 0.0
    h_gain_db: np.ndarray | None = None  # per horizontal angle bin, dB
    v_gain_db: np.ndarray | None = None

    def __post_init__(self):
        if self.power_match_db <= 0:
            raise ValueError("power_match_db must be positive")
        if self.max_height <= self.min_height:
            raise ValueError("max_height must exceed min_height")
        for name in ("h_gain_db", "v_gain_db"):
            g = getattr(self, name)
            if g is not None:
                object.__setattr__(self, name, np.asarray(g, dtype=float).reshape(-1))


def raised_cosine_gain_table(angle_bins: np.ndarray, half_angle: float) -> np.ndarray:
    """Per-bin antenna gain in dB for a raised-cosine power pattern.

    angle_bins are cone angles; the pattern is 0 dB at broadside (pi/2) and
    rolls off to -inf at +-half_angle. half_angle must exceed the bin span.
    """
    offset = np.asarray(angle_bins, dtype=float) - math.pi / 2
    if np.any(np.abs(offset) >= half_angle):
        raise ValueError("angle bins extend beyond the pattern's half angle")
    g = 0.5 * (1.0 + np.cos(np.pi * offset / half_angle))
    return 10.0 * np.log10(g)


def compensate_gain(dets: list[Detection], gain_db: np.ndarray) -> list[Detection]:
    """Subtract per-angle-bin antenna gain so powers compare across bins."""
    gain_db = np.asarray(gain_db, dtype=float)
    out = []
    for d in dets:
        if not 0 <= d.angle_bin < len(gain_db):
            raise MissingGainEntry(f"angle bin {d.angle_bin} outside gain table "
                                   f"of length {len(gain_db)}")
        out.append(Detection(d.range_bin, d.angle_bin, d.range_m, d.angle_rad,
                             d.power_db - float(gain_db[d.angle_bin])))
    return out


@dataclass
class FusionStats:
    """Per-stage accounting for one fused frame."""

    h_detections: int = 0
    v_detections: int = 0
    out_of_fov: int = 0
    power_mismatch: int = 0   # candidate pairs discarded at/after the stop
    unpaired: int = 0         # surplus detections on the longer side
    domain_errors: int = 0
    height_filtered: int = 0
    fused: int = 0


def _rank_order(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.power_db, d.angle_bin))


def associate_range_bin(h_dets: list[Detection], v_dets: list[Detection],
                        cfg: FusionConfig = FusionConfig()
                        ) -> tuple[list[tuple[Detection, Detection]], int, int]:
    """Pair same-range-bin detections by power rank with a mismatch stop.

    Returns (pairs, n_pairs_discarded_after_stop, n_unpaired_singles). All
    inputs must share one range bin. Never returns more pairs than
    min(len(h_dets), len(v_dets)).
    """
    bins = {d.range_bin for d in h_dets} | {d.range_bin for d in v_dets}
    if len(bins) > 1:
        raise ValueError(f"detections span range bins {sorted(bins)}")
    h = _rank_order(h_dets)
    v = _rank_order(v_dets)
    n = min(len(h), len(v))
    pairs = []
    stopped = 0
    for i in range(n):
        if abs(h[i].power_db - v[i].power_db) > cfg.power_match_db:
            stopped = n - i
            break
        pairs.append((h[i], v[i]))
    return pairs, stopped, abs(len(h) - len(v))


def lift_to_3d(h: Detection, v: Detection,
               cfg: FusionConfig = FusionConfig()) -> tuple[np.ndarray, float]:
    """Lift one (horizontal, vertical) pair to a Cartesian point + fused power.

    Raises DomainError / DegenerateElevation when the angle pair has no
    consistent direction (the caller drops the pair and counts it).
    """
    psi, theta = h.angle_rad, v.angle_rad
    # arccos returns [0, pi]: sin(phi) >= 0, i.e. the y >= 0 half-space the
    # arrays face; the fore/aft side of broadside rides on the sign of cos(psi)
    azimuth = azimuth_from_cone(psi, theta)
    r = 0.5 * (h.range_m + v.range_m)
    point = spherical_to_cartesian(Spherical(r, azimuth, theta))
    return point, 0.5 * (h.power_db + v.power_db)


def fuse_frame(frame: FrameCapture, cfar_cfg: CfarConfig = CfarConfig(),
               cfg: FusionConfig = FusionConfig(),
               nms_radius: int = 3) -> tuple[PointCloud, FusionStats]:
    """CFAR + NMS each heatmap, then associate and lift per range bin.

    Output points are in the frame's radar coordinates, ordered by ascending
    range bin and pair rank. The height filter applies to z + mount_height.
    """
    hm_h, hm_v = frame.horizontal, frame.vertical
    if hm_h.range_bin_m != hm_v.range_bin_m or hm_h.n_range_bins != hm_v.n_range_bins:
        raise ConfigMismatch("heatmaps disagree on range binning")
    stats = FusionStats()
    h_dets = nms_peaks(cfar_detect(hm_h, cfar_cfg), nms_radius)
    v_dets = nms_peaks(cfar_detect(hm_v, cfar_cfg), nms_radius)
    stats.h_detections = len(h_dets)
    stats.v_detections = len(v_dets)
    if cfg.h_gain_db is not None:
        h_dets = compensate_gain(h_dets, cfg.h_gain_db)
    if cfg.v_gain_db is not None:
        v_dets = compensate_gain(v_dets, cfg.v_gain_db)

    def in_fov(d: Detection) -> bool:
        return abs(d.angle_rad - math.pi / 2) <= cfg.fov_limit + 1e-12

    kept_h = [d for d in h_dets if in_fov(d)]
    kept_v = [d for d in v_dets if in_fov(d)]
    stats.out_of_fov = (len(h_dets) - len(kept_h)) + (len(v_dets) - len(kept_v))

    by_bin_h: dict[int, list[Detection]] = {}
    by_bin_v: dict[int, list[Detection]] = {}
    for d in kept_h:
        by_bin_h.setdefault(d.range_bin, []).append(d)
    for d in kept_v:
        by_bin_v.setdefault(d.range_bin, []).append(d)
    only = set(by_bin_h) ^ set(by_bin_v)
    stats.unpaired += sum(len(by_bin_h.get(b, [])) + len(by_bin_v.get(b, []))
                          for b in only)

    points, powers = [], []
    for b in sorted(set(by_bin_h) & set(by_bin_v)):
        pairs, stopped, singles = associate_range_bin(by_bin_h[b], by_bin_v[b], cfg)
        stats.power_mismatch += stopped
        stats.unpaired += singles
        for h, v in pairs:
            try:
                point, power = lift_to_3d(h, v, cfg)
            except (DomainError, DegenerateElevation):
                stats.domain_errors += 1
                continue
            z = point[2] + cfg.mount_height
            if not cfg.min_height <= z <= cfg.max_height:
                stats.height_filtered += 1
                continue
            points.append(point)
            powers.append(power)
    stats.fused = len(points)
    if points:
        cloud = PointCloud(np.stack(points), np.array(powers))
    else:
        cloud = PointCloud.empty(with_power=True)
    return cloud, stats
