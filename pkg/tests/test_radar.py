"""Radar simulator oracles: element phases, beam widths, sinc leakage, SAR."""

import math

import numpy as np
import pytest

from rfshape.geometry import Pose, Spherical, spherical_to_cartesian
from rfshape.radar import (
    ConfigMismatch,
    HORIZONTAL,
    MissingChannels,
    RigConfig,
    Scatterer,
    SceneParseError,
    VERTICAL,
    VirtualArrayConfig,
    angular_resolution,
    beamform,
    beamform_complex,
    load_heatmap,
    load_scene,
    sar_combine,
    save_heatmap,
    save_scene,
    simulate_channel,
    simulate_frame,
)

DEG = math.pi / 180.0


def small_array(orientation=HORIZONTAL, n=2, **kw):
    return VirtualArrayConfig.uniform(orientation, n_elements=n, n_range_bins=64,
                                      n_angle_bins=91, **kw)


def one_scatterer(az_deg, el_deg, r=3.0, refl=1.0, normal=None):
    p = spherical_to_cartesian(Spherical(r, az_deg * DEG, el_deg * DEG))
    return [Scatterer(p, refl, normal)]


def test_two_element_phase_horizontal():
    # cone angle 60 deg to the x axis: inter-element ratio exp(-2pi*i*0.5*cos60)
    arr = small_array(n=2)
    ch = simulate_channel(one_scatterer(60.0, 90.0, r=3.0), arr, Pose.identity())
    b = round(3.0 / arr.range_resolution)
    ratio = ch.values[1, b] / ch.values[0, b]
    expected = np.exp(-2j * np.pi * 0.5 * math.cos(60 * DEG))
    assert abs(ratio - expected) < 1e-9


def test_broadside_scatterer_equal_phases():
    # target on the +y boresight: zero path difference across either array
    for orient in (HORIZONTAL, VERTICAL):
        arr = small_array(orient, n=4)
        ch = simulate_channel(one_scatterer(90.0, 90.0, r=2.4), arr, Pose.identity())
        b = round(2.4 / arr.range_resolution)
        col = ch.values[:, b]
        assert np.all(np.abs(col - col[0]) < 1e-9)


def test_two_element_phase_vertical():
    # vertical array resolves cos(elevation)
    arr = small_array(VERTICAL, n=2)
    ch = simulate_channel(one_scatterer(90.0, 60.0, r=3.0), arr, Pose.identity())
    b = round(3.0 / arr.range_resolution)
    ratio = ch.values[1, b] / ch.values[0, b]
    assert abs(ratio - np.exp(-2j * np.pi * 0.5 * math.cos(60 * DEG))) < 1e-9


def test_amplitude_inverse_square():
    arr = small_array(n=2)
    near = simulate_channel(one_scatterer(90.0, 90.0, r=1.2), arr, Pose.identity())
    far = simulate_channel(one_scatterer(90.0, 90.0, r=2.4), arr, Pose.identity())
    a_near = np.max(np.abs(near.values))
    a_far = np.max(np.abs(far.values))
    assert a_near / a_far == pytest.approx(4.0, rel=1e-9)


def test_beamform_peak_location():
    arr = VirtualArrayConfig.uniform(HORIZONTAL, n_elements=32, n_range_bins=64,
                                     n_angle_bins=181)
    hm = beamform(simulate_channel(one_scatterer(75.0, 90.0, r=3.0), arr, Pose.identity()))
    rb, ab = np.unravel_index(np.argmax(hm.values), hm.values.shape)
    assert rb == round(3.0 / arr.range_resolution)
    assert abs(hm.angle_bins[ab] - 75 * DEG) <= (hm.angle_bins[1] - hm.angle_bins[0]) / 2 + 1e-12


def measure_3db_width(arr, el_deg=90.0, az_deg=90.0):
    """Full -3 dB beamwidth in cone angle, in radians (linear interpolation)."""
    hm = beamform(simulate_channel(one_scatterer(az_deg, el_deg, r=3.0), arr,
                                   Pose.identity()))
    rb = round(3.0 / arr.range_resolution)
    cut = hm.values[rb]
    peak = cut.max()
    thr = peak / math.sqrt(2.0)  # -3 dB in power
    i0 = int(np.argmax(cut))
    left = i0
    while left > 0 and cut[left] > thr:
        left -= 1
    right = i0
    while right < len(cut) - 1 and cut[right] > thr:
        right += 1
    ang = hm.angle_bins

    def cross(i, j):
        return ang[i] + (thr - cut[i]) * (ang[j] - ang[i]) / (cut[j] - cut[i])

    lo = cross(left, left + 1) if cut[left] <= thr else ang[left]
    hi = cross(right, right - 1) if cut[right] <= thr else ang[right]
    return hi - lo


@pytest.mark.parametrize("n", [8, 16, 64])
def test_beam_width_tracks_aperture(n):
    arr = VirtualArrayConfig.uniform(HORIZONTAL, n_elements=n, n_range_bins=64,
                                     n_angle_bins=1201)
    width = measure_3db_width(arr)
    # sinc-pattern theory: ~0.886 * (2/N) at broadside
    assert 0.75 * 2.0 / n <= width <= 1.25 * 2.0 / n


def test_resolution_formula():
    assert angular_resolution(86) == pytest.approx(2.0 / 86)
    assert angular_resolution(10, math.pi / 6) == pytest.approx(2.0 / (10 * 0.5))
    with pytest.raises(ValueError):
        angular_resolution(8, 0.0)


def test_linearity_before_magnitude():
    arr = VirtualArrayConfig.uniform(HORIZONTAL, n_elements=16, n_range_bins=64,
                                     n_angle_bins=91)
    a = one_scatterer(70.0, 90.0, r=2.0)
    b = one_scatterer(110.0, 85.0, r=4.0, refl=2.0)
    ga = beamform_complex(simulate_channel(a, arr, Pose.identity()))
    gb = beamform_complex(simulate_channel(b, arr, Pose.identity()))
    gab = beamform_complex(simulate_channel(a + b, arr, Pose.identity()))
    assert np.max(np.abs(gab - (ga + gb))) < 1e-9


def test_power_scales_with_reflectivity_squared():
    arr = small_array(n=8)
    h1 = beamform(simulate_channel(one_scatterer(90.0, 90.0, refl=1.0), arr, Pose.identity()))
    h2 = beamform(simulate_channel(one_scatterer(90.0, 90.0, refl=3.0), arr, Pose.identity()))
    assert np.sum(h2.values ** 2) / np.sum(h1.values ** 2) == pytest.approx(9.0, rel=1e-9)


def test_grating_lobes_beyond_half_wavelength():
    # spacing 2 lambda: grating lobes at arcsin(lambda / spacing) = 30 deg off broadside
    arr = VirtualArrayConfig.uniform(HORIZONTAL, n_elements=8, spacing_wavelengths=2.0,
                                     n_range_bins=64, n_angle_bins=721)
    hm = beamform(simulate_channel(one_scatterer(90.0, 90.0), arr, Pose.identity()))
    rb = round(3.0 / arr.range_resolution)
    cut = hm.values[rb]
    peak = cut.max()
    expected = math.pi / 2 - math.asin(0.5)  # cone angle of the +x-side lobe
    win = np.abs(hm.angle_bins - expected) < 2 * DEG
    side_peak = cut[win].max()
    assert 20 * math.log10(peak / side_peak) < 1.0  # within 1 dB of the main lobe


def test_range_sinc_window():
    arr = small_array(n=2)
    res = arr.range_resolution
    # exactly on a bin center: neighbors are sinc(integer) = 0
    ch = simulate_channel(one_scatterer(90.0, 90.0, r=50 * res), arr, Pose.identity())
    mags = np.abs(ch.values[0])
    assert mags[50] > 0
    assert np.all(mags[[48, 49, 51, 52]] < 1e-12)
    # halfway between bins: equal sinc(0.5) weights on both neighbors
    ch = simulate_channel(one_scatterer(90.0, 90.0, r=50.5 * res), arr, Pose.identity())
    mags = np.abs(ch.values[0])
    assert mags[50] == pytest.approx(mags[51], rel=1e-9)
    assert mags[50] / np.abs(ch.values[0]).max() == pytest.approx(1.0)
    # truncated beyond +-2 bins
    assert np.all(np.abs(ch.values[0][[47, 53]]) < 1e-12)


def test_out_of_range_dropped_with_counter():
    arr = small_array(n=2)
    far = [Scatterer(np.array([0.0, arr.max_range + 1.0, 0.0]))]
    ch = simulate_channel(far, arr, Pose.identity())
    assert ch.n_dropped == 1
    assert np.all(ch.values == 0)


def test_behind_array_plane_dropped():
    arr = small_array(n=2)
    ch = simulate_channel([Scatterer(np.array([0.0, -2.0, 0.0]))], arr, Pose.identity())
    assert ch.n_dropped == 1 and np.all(ch.values == 0)


def test_visibility_gate():
    arr = small_array(n=2)
    pos = np.array([0.0, 3.0, 0.0])
    facing = [Scatterer(pos, 1.0, np.array([0.0, -1.0, 0.0]))]  # normal toward radar
    away = [Scatterer(pos, 1.0, np.array([0.0, 1.0, 0.0]))]
    grazing = [Scatterer(pos, 1.0, np.array([1.0, -1.0, 0.0]) / math.sqrt(2))]  # 45 deg
    assert simulate_channel(facing, arr, Pose.identity()).n_dropped == 0
    assert simulate_channel(away, arr, Pose.identity()).n_dropped == 1
    # beyond the default 45 deg gate by a hair: dropped
    tilted = [Scatterer(pos, 1.0, np.array([1.0, -0.9, 0.0]))]
    assert simulate_channel(tilted, arr, Pose.identity()).n_dropped == 1
    assert simulate_channel(grazing, arr, Pose.identity(),
                            visibility_gate=46 * DEG).n_dropped == 0


def test_noise_seeded_and_deterministic():
    arr = small_array(n=4)
    a = simulate_channel([], arr, Pose.identity(), noise_sigma=0.5,
                         rng=np.random.default_rng(42))
    b = simulate_channel([], arr, Pose.identity(), noise_sigma=0.5,
                         rng=np.random.default_rng(42))
    assert np.array_equal(a.values, b.values)
    assert np.std(a.values.real) == pytest.approx(0.5, rel=0.1)
    with pytest.raises(ValueError):
        simulate_channel([], arr, Pose.identity(), noise_sigma=0.5)


def test_rig_config_mismatch():
    h = VirtualArrayConfig.uniform(HORIZONTAL, n_elements=8, range_resolution=0.06)
    v = VirtualArrayConfig.uniform(VERTICAL, n_elements=8, range_resolution=0.05)
    with pytest.raises(ConfigMismatch):
        RigConfig(h, v)
    with pytest.raises(ConfigMismatch):
        RigConfig(v, v)


def test_simulate_frame_channels_flag():
    rig = RigConfig(small_array(HORIZONTAL, n=4), small_array(VERTICAL, n=4))
    scene = one_scatterer(90.0, 90.0)
    f = simulate_frame(scene, rig, Pose.identity())
    assert f.h_channels is None and f.v_channels is None
    f = simulate_frame(scene, rig, Pose.identity(), keep_channels=True)
    assert f.h_channels is not None and f.v_channels is not None
    assert f.horizontal.orientation == HORIZONTAL
    assert f.vertical.orientation == VERTICAL


def sar_frames(n_frames=8, step=0.02, scatterer_y=3.0, noise_rng=None):
    rig = RigConfig(
        VirtualArrayConfig.uniform(HORIZONTAL, n_elements=16, n_range_bins=64,
                                   n_angle_bins=181),
        VirtualArrayConfig.uniform(VERTICAL, n_elements=16, n_range_bins=64,
                                   n_angle_bins=181))
    scene = [Scatterer(np.array([0.0, scatterer_y, 0.0]))]
    frames = []
    for i in range(n_frames):
        pose = Pose(np.eye(3), np.array([(i - n_frames / 2) * step, 0.0, 0.0]))
        frames.append(simulate_frame(scene, rig, pose, t=i * 0.1, rng=noise_rng,
                                     keep_channels=True))
    return frames


def test_sar_narrows_main_lobe():
    frames = sar_frames(n_frames=9, step=0.04)
    combined = sar_combine(frames)
    single = frames[len(frames) // 2].horizontal
    rb = round(3.0 / 0.06)

    def width(cut, bins):
        thr = cut.max() / math.sqrt(2)
        above = np.where(cut > thr)[0]
        return bins[above[-1]] - bins[above[0]]

    w_single = width(single.values[rb], single.angle_bins)
    w_sar = width(combined.values[rb], combined.angle_bins)
    assert w_sar < w_single


def test_sar_requires_channels():
    rig = RigConfig(small_array(HORIZONTAL, n=4), small_array(VERTICAL, n=4))
    f = simulate_frame(one_scatterer(90.0, 90.0), rig, Pose.identity())
    with pytest.raises(MissingChannels):
        sar_combine([f])
    with pytest.raises(ValueError):
        sar_combine([])


def test_sar_pose_noise_needs_rng():
    frames = sar_frames(n_frames=3)
    with pytest.raises(ValueError):
        sar_combine(frames, position_error_rms=0.002)


def test_heatmap_dump_round_trip(tmp_path):
    arr = small_array(n=4)
    hm = beamform(simulate_channel(one_scatterer(80.0, 90.0), arr, Pose.identity()))
    path = str(tmp_path / "hm.bin")
    save_heatmap(path, hm)
    back = load_heatmap(path)
    assert back.orientation == hm.orientation
    assert back.range_bin_m == hm.range_bin_m
    assert np.allclose(back.angle_bins, hm.angle_bins, atol=1e-12)
    assert np.array_equal(back.values, hm.values.astype(np.float32).astype(float))


def test_scene_file_round_trip(tmp_path):
    scene = [Scatterer(np.array([1.0, 2.0, 0.5]), 2.0),
             Scatterer(np.array([0.0, 3.0, 1.0]), 1.0, np.array([0.0, -1.0, 0.0]))]
    path = str(tmp_path / "scene.txt")
    save_scene(path, scene)
    back = load_scene(path)
    assert len(back) == 2
    assert np.allclose(back[0].position, [1, 2, 0.5])
    assert back[1].normal is not None and np.allclose(back[1].normal, [0, -1, 0])


def test_scene_parse_error_names_line(tmp_path):
    path = str(tmp_path / "scene.txt")
    with open(path, "w") as f:
        f.write("# header comment\n0 1 2 1.0\n0 nope 2 1.0\n")
    with pytest.raises(SceneParseError) as err:
        load_scene(path)
    assert err.value.line_no == 3
    assert ":3:" in str(err.value)


def test_scene_wrong_field_count(tmp_path):
    path = str(tmp_path / "scene.txt")
    with open(path, "w") as f:
        f.write("1 2 3\n")
    with pytest.raises(SceneParseError) as err:
        load_scene(path)
    assert err.value.line_no == 1
