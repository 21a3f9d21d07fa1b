"""CFAR detection on range-angle heatmaps, plus peak non-max suppression.

Thresholds are ratio-based (scale invariant): a cell fires when its power
exceeds alpha times a local noise estimate taken from a training ring around
the cell (guard cells excluded). alpha is calibrated for a target false-alarm
probability under the exponential-noise assumption, which holds for the power
(squared magnitude) of complex-Gaussian channel noise after beamforming.

Cells near the border use the in-bounds part of their ring with alpha
recomputed for the actual training-cell count, so calibration holds everywhere.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .cloudio import atomic_write_text
from .radar import Heatmap2D

CA = "ca"
OS = "os"


class HeatmapTooSmall(ValueError):
    """Heatmap cannot hold a single full CFAR window."""


@dataclass(frozen=True)
class CfarConfig:
    variant: str = CA
    guard_cells: int = 2      # per axis, each side
    training_cells: int = 8   # per axis, each side
    p_fa: float = 1e-3
    os_rank: float = 0.75     # training-ring quantile used by the OS variant

    def __post_init__(self):
        if self.variant not in (CA, OS):
            raise ValueError(f"variant {self.variant!r}")
        if self.guard_cells < 0 or self.training_cells < 1:
            raise ValueError("need guard_cells >= 0 and training_cells >= 1")
        if not 0.0 < self.p_fa < 1.0:
            raise ValueError(f"p_fa {self.p_fa}")
        if not 0.0 < self.os_rank <= 1.0:
            raise ValueError(f"os_rank {self.os_rank}")

    @property
    def window_half(self) -> int:
        return self.guard_cells + self.training_cells


@dataclass
class Detection:
    range_bin: int
    angle_bin: int
    range_m: float
    angle_rad: float
    power_db: float


def _ca_alpha(p_fa: float, t: np.ndarray) -> np.ndarray:
    """Exact CA threshold factor: alpha = T * (p_fa^(-1/T) - 1)."""
    t = np.asarray(t, dtype=float)
    return t * (p_fa ** (-1.0 / t) - 1.0)


def _os_alpha(p_fa: float, t: int, k: int) -> float:
    """OS threshold factor from P_fa = prod_{i=0..k-1} (T-i)/(T-i+alpha), by bisection."""
    i = np.arange(k, dtype=float)

    def pfa(alpha: float) -> float:
        return float(np.exp(np.sum(np.log(t - i) - np.log(t - i + alpha))))

    lo, hi = 0.0, 1.0
    while pfa(hi) > p_fa:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("OS alpha search diverged")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pfa(mid) > p_fa:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _window_sums(power: np.ndarray, half: int):
    """Clipped-window sums and counts for every cell, via an integral image."""
    h, w = power.shape
    s = np.zeros((h + 1, w + 1))
    s[1:, 1:] = np.cumsum(np.cumsum(power, axis=0), axis=1)
    r = np.arange(h)[:, None]
    c = np.arange(w)[None, :]
    r0 = np.clip(r - half, 0, h - 1)
    r1 = np.clip(r + half, 0, h - 1)
    c0 = np.clip(c - half, 0, w - 1)
    c1 = np.clip(c + half, 0, w - 1)
    total = s[r1 + 1, c1 + 1] - s[r0, c1 + 1] - s[r1 + 1, c0] + s[r0, c0]
    count = (r1 - r0 + 1) * (c1 - c0 + 1)
    return total, count


def _os_noise_and_alpha(power: np.ndarray, cfg: CfarConfig):
    """Per-cell OS noise estimate (k-th smallest training cell) and alpha."""
    h, w = power.shape
    half, g = cfg.window_half, cfg.guard_cells
    padded = np.full((h + 2 * half, w + 2 * half), np.nan)
    padded[half:half + h, half:half + w] = power
    offsets = [(dr, dc)
               for dr in range(-half, half + 1)
               for dc in range(-half, half + 1)
               if max(abs(dr), abs(dc)) > g]
    stack = np.empty((len(offsets), h, w))
    for idx, (dr, dc) in enumerate(offsets):
        stack[idx] = padded[half + dr:half + dr + h, half + dc:half + dc + w]
    counts = np.sum(~np.isnan(stack), axis=0)
    ranked = np.sort(stack, axis=0)  # NaNs sort to the end
    k = np.ceil(cfg.os_rank * counts).astype(int)
    k = np.clip(k, 1, counts)
    noise = np.take_along_axis(ranked, (k - 1)[None, :, :], axis=0)[0]
    alpha = np.empty((h, w))
    cache: dict[tuple[int, int], float] = {}
    for tk in np.unique(np.stack([counts.ravel(), k.ravel()], axis=1), axis=0):
        t_c, k_c = int(tk[0]), int(tk[1])
        cache[(t_c, k_c)] = _os_alpha(cfg.p_fa, t_c, k_c)
    for (t_c, k_c), a in cache.items():
        alpha[(counts == t_c) & (k == k_c)] = a
    return noise, alpha


def cfar_detect(hm: Heatmap2D, cfg: CfarConfig = CfarConfig()) -> list[Detection]:
    """Run CFAR over the full heatmap; detections sorted by descending power.

    Power ties are broken by (range_bin, angle_bin) lexicographic order.
    """
    size = 2 * cfg.window_half + 1
    if hm.n_range_bins < size or hm.n_angle_bins < size:
        raise HeatmapTooSmall(
            f"heatmap {hm.values.shape} smaller than CFAR window {size}x{size}")
    power = np.asarray(hm.values, dtype=float) ** 2
    if cfg.variant == CA:
        total, count = _window_sums(power, cfg.window_half)
        if cfg.guard_cells > 0:
            g_total, g_count = _window_sums(power, cfg.guard_cells)
        else:
            g_total, g_count = power, np.ones_like(count)
        ring_sum = total - g_total
        ring_cnt = count - g_count
        noise = ring_sum / ring_cnt
        alpha = _ca_alpha(cfg.p_fa, ring_cnt)
    else:
        noise, alpha = _os_noise_and_alpha(power, cfg)
    hits = power > alpha * noise
    rbins, abins = np.nonzero(hits)
    dets = [
        Detection(int(rb), int(ab), float(rb * hm.range_bin_m),
                  float(hm.angle_bins[ab]),
                  10.0 * math.log10(power[rb, ab]))
        for rb, ab in zip(rbins, abins)
    ]
    dets.sort(key=lambda d: (-d.power_db, d.range_bin, d.angle_bin))
    return dets


def nms_peaks(dets: list[Detection], radius: int = 3) -> list[Detection]:
    """Greedy non-max suppression under Chebyshev bin distance.

    Detections are visited in descending power (ties by lowest bin index);
    each kept peak suppresses later detections within `radius` bins.
    """
    ordered = sorted(dets, key=lambda d: (-d.power_db, d.range_bin, d.angle_bin))
    kept: list[Detection] = []
    for d in ordered:
        if all(max(abs(d.range_bin - k.range_bin), abs(d.angle_bin - k.angle_bin)) > radius
               for k in kept):
            kept.append(d)
    return kept


_CSV_FIELDS = ["range_bin", "angle_bin", "range_m", "angle_rad", "power_db"]


def detections_csv(dets: list[Detection]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_FIELDS)
    for d in dets:
        writer.writerow([d.range_bin, d.angle_bin, repr(d.range_m),
                         repr(d.angle_rad), repr(d.power_db)])
    return buf.getvalue()


def save_detections_csv(path: str, dets: list[Detection]) -> None:
    atomic_write_text(path, detections_csv(dets))


def load_detections_csv(path: str) -> list[Detection]:
    with open(path, "r", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [Detection(int(r["range_bin"]), int(r["angle_bin"]), float(r["range_m"]),
                      float(r["angle_rad"]), float(r["power_db"])) for r in rows]
