"""Virtual 1-D radar array simulation: channel synthesis, beamforming, SAR.

Each radar is a uniform (or explicitly placed) 1-D virtual array. The
horizontal array lies along +x, the vertical array along +z, and both look
broadside toward +y. An array resolves the cone angle between the target
direction and its own axis: the per-element phase for a scatterer with local
direction u is exp(-2j*pi * p * dot(u, axis)) with p the element offset in
wavelengths, plus a common carrier term exp(-2j*pi * r / lambda) that only
matters when frames are combined coherently across poses.

Amplitudes use a one-way abstraction: reflectivity / r^2, optionally shaped by
a raised-cosine element pattern along the scan axis.
"""

import math
from dataclasses import dataclass

import numpy as np

from .cloudio import atomic_write_bytes, atomic_write_text
from .geometry import Pose, X_AXIS, Z_AXIS

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


class ConfigMismatch(ValueError):
    """Paired radar configs disagree on shared parameters."""


class MissingChannels(ValueError):
    """Frame was captured without keep_channels=True."""


class SceneParseError(ValueError):
    """Malformed scene file line."""

    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class VirtualArrayConfig:
    """Geometry and sampling grid of one 1-D virtual array."""

    orientation: str
    element_positions: np.ndarray  # offsets along the array axis, in wavelengths
    wavelength: float = 0.0039
    range_resolution: float = 0.06
    n_range_bins: int = 128
    n_angle_bins: int = 181
    fov_limit: float = math.radians(45.0)
    pattern_half_angle: float | None = None

    def __post_init__(self):
        if self.orientation not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"orientation {self.orientation!r}")
        pos = np.asarray(self.element_positions, dtype=float)
        if pos.ndim != 1 or len(pos) < 2 or np.any(np.diff(pos) <= 0):
            raise ValueError("element_positions must be >= 2 strictly increasing offsets")
        pos.flags.writeable = False
        object.__setattr__(self, "element_positions", pos)
        if self.wavelength <= 0 or self.range_resolution <= 0:
            raise ValueError("wavelength and range_resolution must be positive")
        if self.n_range_bins < 4 or self.n_angle_bins < 3:
            raise ValueError("grid too small")
        if not 0 < self.fov_limit < math.pi / 2:
            raise ValueError(f"fov_limit {self.fov_limit}")

    @staticmethod
    def uniform(orientation: str, n_elements: int = 86,
                spacing_wavelengths: float = 0.5, **kwargs) -> "VirtualArrayConfig":
        pos = np.arange(n_elements) * spacing_wavelengths
        return VirtualArrayConfig(orientation, pos, **kwargs)

    @property
    def n_elements(self) -> int:
        return len(self.element_positions)

    @property
    def axis(self) -> np.ndarray:
        return X_AXIS if self.orientation == HORIZONTAL else Z_AXIS

    @property
    def angle_bins(self) -> np.ndarray:
        """Cone-angle bin centers in radians, spanning broadside +- fov_limit."""
        return np.linspace(math.pi / 2 - self.fov_limit,
                           math.pi / 2 + self.fov_limit, self.n_angle_bins)

    @property
    def max_range(self) -> float:
        return (self.n_range_bins - 1) * self.range_resolution


def angular_resolution(n_elements: int, cone_angle: float = math.pi / 2) -> float:
    """Approximate -3 dB beamwidth in radians for a lambda/2 array at a cone angle."""
    s = math.sin(cone_angle)
    if s <= 0:
        raise ValueError("resolution undefined at the array axis")
    return 2.0 / (n_elements * s)


@dataclass
class Scatterer:
    """Point reflector; normal (if any) gates specular visibility."""

    position: np.ndarray
    reflectivity: float = 1.0
    normal: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.reflectivity <= 0:
            raise ValueError(f"reflectivity {self.reflectivity} must be > 0")
        if self.normal is not None:
            n = np.asarray(self.normal, dtype=float).reshape(3)
            norm = np.linalg.norm(n)
            if norm == 0:
                raise ValueError("zero normal")
            self.normal = n / norm


@dataclass
class Heatmap2D:
    """Range x cone-angle magnitude grid from one radar."""

    values: np.ndarray
    range_bin_m: float
    angle_bins: np.ndarray
    orientation: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.angle_bins = np.asarray(self.angle_bins, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.angle_bins):
            raise ValueError(f"values {self.values.shape} vs {len(self.angle_bins)} angle bins")

    @property
    def n_range_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_angle_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class ChannelSamples:
    """Per-element, per-range-bin complex samples plus drop accounting."""

    values: np.ndarray  # (n_elements, n_range_bins) complex
    array: VirtualArrayConfig
    n_dropped: int = 0


def _raised_cosine_power(offset: np.ndarray, half_angle: float) -> np.ndarray:
    """Raised-cosine power rolloff: 1 at broadside, 0 at +-half_angle and beyond."""
    g = 0.5 * (1.0 + np.cos(np.pi * offset / half_angle))
    return np.where(np.abs(offset) < half_angle, g, 0.0)


def simulate_channel(scene: list[Scatterer], array: VirtualArrayConfig,
                     radar_pose: Pose, noise_sigma: float = 0.0,
                     rng: np.random.Generator | None = None,
                     visibility_gate: float = math.pi / 4) -> ChannelSamples:
    """Synthesize channel samples for one array at one pose.

    Scatterers beyond max range, at the radar origin, behind the array plane
    (local y <= 0), or failing the specular visibility gate are dropped and
    counted in n_dropped. Range energy spreads over neighboring bins with a
    sinc window truncated at +-2 bins.
    """
    n_e, n_r = array.n_elements, array.n_range_bins
    values = np.zeros((n_r, n_e), dtype=complex)
    dropped = 0
    if scene:
        pos = np.stack([s.position for s in scene])
        refl = np.array([s.reflectivity for s in scene])
        d = pos - radar_pose.translation
        r = np.linalg.norm(d, axis=1)
        keep = (r > 1e-9) & (r <= array.max_range + 2.0 * array.range_resolution)
        u_world = np.zeros_like(d)
        np.divide(d, r[:, None], out=u_world, where=r[:, None] > 0)
        u_local = u_world @ radar_pose.rotation
        keep &= u_local[:, 1] > 0.0
        gate_cos = math.cos(visibility_gate)
        for i, s in enumerate(scene):
            if s.normal is not None and keep[i]:
                if float(np.dot(s.normal, -u_world[i])) < gate_cos:
                    keep[i] = False
        dropped = int(len(scene) - keep.sum())
        if keep.any():
            r_k = r[keep]
            u_k = u_local[keep]
            amp = refl[keep] / (r_k * r_k)
            if array.pattern_half_angle is not None:
                cone = np.arccos(np.clip(u_k @ array.axis, -1.0, 1.0))
                g = _raised_cosine_power(cone - math.pi / 2, array.pattern_half_angle)
                amp = amp * np.sqrt(g)
            carrier = amp * np.exp(-2j * np.pi * r_k / array.wavelength)
            cosc = u_k @ array.axis
            elem = np.exp(-2j * np.pi * np.outer(cosc, array.element_positions))
            contrib = carrier[:, None] * elem  # (S_kept, E)
            rb = r_k / array.range_resolution
            b0 = np.floor(rb).astype(int)
            for off in range(-2, 4):
                b = b0 + off
                w = np.sinc(rb - b)
                ok = (np.abs(rb - b) <= 2.0) & (b >= 0) & (b < n_r)
                if ok.any():
                    np.add.at(values, b[ok], contrib[ok] * w[ok, None])
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        noise = rng.normal(scale=noise_sigma, size=(n_r, n_e, 2))
        values = values + noise[..., 0] + 1j * noise[..., 1]
    return ChannelSamples(values.T.copy(), array, dropped)


def beamform_complex(samples: ChannelSamples) -> np.ndarray:
    """Steered complex sum over elements: (n_range, n_angle) grid."""
    array = samples.array
    cosc = np.cos(array.angle_bins)
    steer = np.exp(2j * np.pi * np.outer(array.element_positions, cosc))
    return samples.values.T @ steer / array.n_elements


def beamform(samples: ChannelSamples) -> Heatmap2D:
    """Magnitude heatmap over the array's range/cone-angle grid."""
    array = samples.array
    return Heatmap2D(np.abs(beamform_complex(samples)), array.range_resolution,
                     array.angle_bins, array.orientation)


@dataclass(frozen=True)
class RigConfig:
    """Two orthogonal arrays sharing range parameters, mounted on one rig."""

    horizontal: VirtualArrayConfig
    vertical: VirtualArrayConfig
    mount_height: float = 0.0
    visibility_gate: float = math.pi / 4
    noise_sigma: float = 0.0

    def __post_init__(self):
        h, v = self.horizontal, self.vertical
        if h.orientation != HORIZONTAL or v.orientation != VERTICAL:
            raise ConfigMismatch("rig arrays must be (horizontal, vertical)")
        same = (h.range_resolution == v.range_resolution
                and h.n_range_bins == v.n_range_bins
                and h.wavelength == v.wavelength)
        if not same:
            raise ConfigMismatch("rig arrays disagree on range/wavelength parameters")

    @staticmethod
    def default(**kwargs) -> "RigConfig":
        return RigConfig(VirtualArrayConfig.uniform(HORIZONTAL),
                         VirtualArrayConfig.uniform(VERTICAL), **kwargs)


@dataclass
class FrameCapture:
    """One synchronized capture from both arrays at a pose."""

    horizontal: Heatmap2D
    vertical: Heatmap2D
    pose: Pose
    t: float = 0.0
    h_channels: ChannelSamples | None = None
    v_channels: ChannelSamples | None = None


def simulate_frame(scene: list[Scatterer], rig: RigConfig, pose: Pose,
                   t: float = 0.0, rng: np.random.Generator | None = None,
                   keep_channels: bool = False) -> FrameCapture:
    h = simulate_channel(scene, rig.horizontal, pose, rig.noise_sigma, rng,
                         rig.visibility_gate)
    v = simulate_channel(scene, rig.vertical, pose, rig.noise_sigma, rng,
                         rig.visibility_gate)
    return FrameCapture(beamform(h), beamform(v), pose, t,
                        h if keep_channels else None,
                        v if keep_channels else None)


def sar_combine(frames: list[FrameCapture], position_error_rms: float = 0.0,
                rng: np.random.Generator | None = None) -> Heatmap2D:
    """Coherent backprojection of horizontal channels across frames.

    Reported poses are the true poses plus isotropic Gaussian position error
    with 3D RMS position_error_rms (the steering mismatch model for odometry
    drift; the recorded samples themselves are untouched). The output grid is
    the first frame's range/cone-angle grid, hypothesis points taken on the
    first reported pose's horizon plane.
    """
    if not frames:
        raise ValueError("no frames")
    if any(f.h_channels is None for f in frames):
        raise MissingChannels("sar_combine needs frames captured with keep_channels=True")
    array = frames[0].h_channels.array
    if position_error_rms > 0.0 and rng is None:
        raise ValueError("position_error_rms > 0 requires an rng")
    sigma = position_error_rms / math.sqrt(3.0)
    reported = []
    for f in frames:
        off = rng.normal(scale=sigma, size=3) if sigma > 0.0 else np.zeros(3)
        reported.append(Pose(f.pose.rotation, f.pose.translation + off))
    # hypothesis grid in the first reported frame: z = 0 plane
    ranges = np.arange(array.n_range_bins) * array.range_resolution
    cosc = np.cos(array.angle_bins)
    sinc_ang = np.sin(array.angle_bins)
    local = np.stack([np.outer(ranges, cosc),
                      np.outer(ranges, sinc_ang),
                      np.zeros((array.n_range_bins, array.n_angle_bins))], axis=-1)
    q = reported[0].apply(local.reshape(-1, 3))  # (G, 3) world points
    out = np.zeros(q.shape[0], dtype=complex)
    for f, rep in zip(frames, reported):
        d = q - rep.translation
        r = np.linalg.norm(d, axis=1)
        r = np.maximum(r, 1e-12)
        u_local = (d / r[:, None]) @ rep.rotation
        cos_cone = u_local @ array.axis
        b = np.clip(np.round(r / array.range_resolution).astype(int),
                    0, array.n_range_bins - 1)
        # conjugate-steer each element's sample at the hypothesis range bin
        phase = np.exp(2j * np.pi * (r / array.wavelength)[None, :]
                       + 2j * np.pi * np.outer(array.element_positions, cos_cone))
        out += np.sum(f.h_channels.values[:, b] * phase, axis=0)
    out /= len(frames) * array.n_elements
    mag = np.abs(out).reshape(array.n_range_bins, array.n_angle_bins)
    return Heatmap2D(mag, array.range_resolution, array.angle_bins, HORIZONTAL)


def save_heatmap(path: str, hm: Heatmap2D) -> None:
    """Raw little-endian float32 grid (range-major) plus a text sidecar at path + '.hdr'."""
    atomic_write_bytes(path, np.asarray(hm.values, dtype="<f4").tobytes())
    ang = hm.angle_bins
    step = (ang[-1] - ang[0]) / (len(ang) - 1) if len(ang) > 1 else 0.0
    sidecar = "".join([
        f"n_range={hm.n_range_bins}\n",
        f"n_angle={hm.n_angle_bins}\n",
        f"range_bin_m={float(hm.range_bin_m)!r}\n",
        f"angle_start_rad={float(ang[0])!r}\n",
        f"angle_step_rad={float(step)!r}\n",
        f"orientation={hm.orientation}\n",
        "dtype=float32-le\n",
    ])
    atomic_write_text(path + ".hdr", sidecar)


def load_heatmap(path: str) -> Heatmap2D:
    meta = {}
    with open(path + ".hdr", "r", encoding="utf-8") as f:
        for line in f:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                meta[k] = v
    n_range, n_angle = int(meta["n_range"]), int(meta["n_angle"])
    values = np.fromfile(path, dtype="<f4").reshape(n_range, n_angle).astype(float)
    start, step = float(meta["angle_start_rad"]), float(meta["angle_step_rad"])
    angle_bins = start + step * np.arange(n_angle)
    return Heatmap2D(values, float(meta["range_bin_m"]), angle_bins, meta["orientation"])


def load_scene(path: str) -> list[Scatterer]:
    """Parse `x y z reflectivity [nx ny nz]` lines; '#' starts a comment."""
    scene = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) not in (4, 7):
                raise SceneParseError(path, line_no,
                                      f"expected 4 or 7 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise SceneParseError(path, line_no, str(e)) from None
            normal = vals[4:7] if len(vals) == 7 else None
            try:
                scene.append(Scatterer(np.array(vals[:3]), vals[3], normal))
            except ValueError as e:
                raise SceneParseError(path, line_no, str(e)) from None
    return scene


def scene_text(scene: list[Scatterer]) -> str:
    lines = []
    for s in scene:
        row = f"{s.position[0]:.6f} {s.position[1]:.6f} {s.position[2]:.6f} {s.reflectivity:.6f}"
        if s.normal is not None:
            row += f" {s.normal[0]:.6f} {s.normal[1]:.6f} {s.normal[2]:.6f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def save_scene(path: str, scene: list[Scatterer]) -> None:
    atomic_write_text(path, scene_text(scene))
