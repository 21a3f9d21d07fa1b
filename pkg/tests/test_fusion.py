"""Fusion oracles: association rule fixtures, lift geometry, end-to-end frames."""

import math

import numpy as np
import pytest

from rfshape.detection import CfarConfig, Detection
from rfshape.fusion import (
    FusionConfig,
    MissingGainEntry,
    associate_range_bin,
    compensate_gain,
    fuse_frame,
    lift_to_3d,
    raised_cosine_gain_table,
)
from rfshape.geometry import DomainError, Pose, Spherical, spherical_to_cartesian
from rfshape.radar import (
    HORIZONTAL,
    RigConfig,
    Scatterer,
    VERTICAL,
    VirtualArrayConfig,
    simulate_frame,
)

DEG = math.pi / 180.0


def det(power_db, range_bin=40, angle_bin=90, angle_rad=math.pi / 2):
    return Detection(range_bin, angle_bin, range_bin * 0.06, angle_rad, power_db)


def test_association_stop_rule_fixture():
    # H powers [10, 7, 3], V powers [9.5, 6, -1]: third pair differs by 4 dB
    h = [det(10.0, angle_bin=10), det(7.0, angle_bin=20), det(3.0, angle_bin=30)]
    v = [det(9.5, angle_bin=40), det(6.0, angle_bin=50), det(-1.0, angle_bin=60)]
    pairs, stopped, unpaired = associate_range_bin(h, v)
    assert len(pairs) == 2
    assert [(p[0].power_db, p[1].power_db) for p in pairs] == [(10.0, 9.5), (7.0, 6.0)]
    assert stopped == 1 and unpaired == 0


def test_association_discards_rest_after_stop():
    # a later pair would match again, but the stop discards it
    h = [det(10.0, angle_bin=1), det(5.0, angle_bin=2), det(1.0, angle_bin=3)]
    v = [det(9.9, angle_bin=4), det(0.9, angle_bin=5), det(0.8, angle_bin=6)]
    pairs, stopped, _ = associate_range_bin(h, v)
    assert len(pairs) == 1 and stopped == 2


def test_association_never_exceeds_min_count():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h = [det(float(p), angle_bin=i) for i, p in enumerate(rng.normal(size=rng.integers(0, 6)))]
        v = [det(float(p), angle_bin=i) for i, p in enumerate(rng.normal(size=rng.integers(0, 6)))]
        pairs, _, _ = associate_range_bin(h, v)
        assert len(pairs) <= min(len(h), len(v))


def test_association_empty_side():
    assert associate_range_bin([], [det(3.0)])[0] == []
    assert associate_range_bin([], [])[0] == []


def test_association_tie_break_by_angle_bin():
    h = [det(5.0, angle_bin=30), det(5.0, angle_bin=10)]
    v = [det(5.2, angle_bin=7), det(5.2, angle_bin=3)]
    pairs, _, _ = associate_range_bin(h, v)
    assert [(p[0].angle_bin, p[1].angle_bin) for p in pairs] == [(10, 3), (30, 7)]


def test_association_mixed_bins_rejected():
    with pytest.raises(ValueError):
        associate_range_bin([det(1.0, range_bin=3)], [det(1.0, range_bin=4)])


def test_lift_horizon_case():
    # theta = 90 deg: psi equals the azimuth directly
    h = det(0.0, range_bin=40, angle_rad=20 * DEG)
    v = det(0.0, range_bin=40, angle_rad=90 * DEG)
    point, power = lift_to_3d(h, v)
    r = 40 * 0.06
    assert np.allclose(point, [r * math.cos(20 * DEG), r * math.sin(20 * DEG), 0.0],
                       atol=1e-9)
    assert power == 0.0


def test_lift_off_horizon_case():
    # psi = acos(sin80 cos30), theta = 80 deg, r = 5: the azimuth-30 point
    psi = math.acos(math.sin(80 * DEG) * math.cos(30 * DEG))
    rb = 50  # with 0.1 m bins this puts the range at exactly 5 m
    h = Detection(rb, 0, 5.0, psi, -2.0)
    v = Detection(rb, 0, 5.0, 80 * DEG, -4.0)
    point, power = lift_to_3d(h, v)
    expected = spherical_to_cartesian(Spherical(5.0, 30 * DEG, 80 * DEG))
    assert np.allclose(point, expected, atol=1e-9)
    assert np.allclose(point, [4.2643, 2.4620, 0.8682], atol=5e-4)
    assert power == -3.0


def test_lift_domain_error():
    h = det(0.0, angle_rad=10 * DEG)
    v = det(0.0, angle_rad=30 * DEG)
    with pytest.raises(DomainError):
        lift_to_3d(h, v)


def test_gain_compensation_boosts_edges():
    bins = np.linspace(math.pi / 2 - math.radians(45), math.pi / 2 + math.radians(45), 91)
    table = raised_cosine_gain_table(bins, math.radians(70))
    assert table[45] == pytest.approx(0.0, abs=1e-12)  # broadside untouched
    assert table[0] < -5.0  # edge rolloff
    dets = [Detection(10, 0, 0.6, bins[0], -20.0),
            Detection(10, 45, 0.6, bins[45], -20.0)]
    out = compensate_gain(dets, table)
    assert out[1].power_db == pytest.approx(-20.0)
    assert out[0].power_db == pytest.approx(-20.0 - table[0])
    assert out[0].power_db > out[1].power_db  # edge boosted relative to boresight
    with pytest.raises(MissingGainEntry):
        compensate_gain([Detection(1, 91, 0.06, 1.0, 0.0)], table)


def test_gain_table_rejects_too_wide_span():
    bins = np.linspace(0.1, math.pi - 0.1, 51)
    with pytest.raises(ValueError):
        raised_cosine_gain_table(bins, math.radians(70))


def sim_rig(n_elements=64, noise_sigma=0.0, n_angle=181, pattern=None):
    kw = dict(n_range_bins=128, n_angle_bins=n_angle, pattern_half_angle=pattern)
    return RigConfig(VirtualArrayConfig.uniform(HORIZONTAL, n_elements=n_elements, **kw),
                     VirtualArrayConfig.uniform(VERTICAL, n_elements=n_elements, **kw),
                     noise_sigma=noise_sigma)


def noise_for_snr(r, n_elements, snr_db, refl=1.0):
    """Channel noise sigma giving the requested beamformed peak SNR."""
    a = refl / (r * r)
    return a * math.sqrt(n_elements / (10 ** (snr_db / 10.0)))


def scatterer_at(r, az_deg, el_deg, refl=1.0):
    p = spherical_to_cartesian(Spherical(r, az_deg * DEG, el_deg * DEG))
    return Scatterer(p, refl)


def test_fuse_frame_single_scatterer():
    # p_fa 1e-4 keeps this fixture free of cross-paired noise false alarms
    r_true, az, el = 3.6, 75.0, 95.0
    rig = sim_rig(noise_sigma=noise_for_snr(3.6, 64, 25.0))
    frame = simulate_frame([scatterer_at(r_true, az, el)], rig, Pose.identity(),
                           rng=np.random.default_rng(5))
    cloud, stats = fuse_frame(frame, CfarConfig(p_fa=1e-4),
                              FusionConfig(min_height=-3.0, max_height=3.0))
    assert stats.fused == len(cloud) == 1
    expected = spherical_to_cartesian(Spherical(r_true, az * DEG, el * DEG))
    assert np.linalg.norm(cloud.points[0] - expected) < 0.12


def test_fuse_frame_default_pfa_ghosts_are_weak():
    # at the default p_fa, independent noise false alarms can cross-pair into
    # ghost points; they stay far below the target return
    r_true, az, el = 3.6, 75.0, 95.0
    rig = sim_rig(noise_sigma=noise_for_snr(3.6, 64, 25.0))
    frame = simulate_frame([scatterer_at(r_true, az, el)], rig, Pose.identity(),
                           rng=np.random.default_rng(5))
    cloud, _ = fuse_frame(frame, CfarConfig(),
                          FusionConfig(min_height=-3.0, max_height=3.0))
    expected = spherical_to_cartesian(Spherical(r_true, az * DEG, el * DEG))
    best = int(np.argmax(cloud.powers_db))
    assert np.linalg.norm(cloud.points[best] - expected) < 0.12
    others = np.delete(cloud.powers_db, best)
    assert np.all(others < cloud.powers_db[best] - 8.0)


def test_fuse_frame_three_scatterers_distinct_bins():
    scene = [scatterer_at(2.4, 80.0, 90.0, refl=1.0),
             scatterer_at(3.6, 100.0, 85.0, refl=1.2),
             scatterer_at(4.8, 90.0, 100.0, refl=1.5)]
    rig = sim_rig(noise_sigma=noise_for_snr(4.8, 64, 25.0, refl=1.5))
    frame = simulate_frame(scene, rig, Pose.identity(), rng=np.random.default_rng(9))
    cloud, stats = fuse_frame(frame, CfarConfig(p_fa=1e-4),
                              FusionConfig(min_height=-3.0, max_height=3.0))
    assert len(cloud) >= 3
    # the three strongest fused points hit the three scatterers, one each
    order = np.argsort(-cloud.powers_db)
    top3 = cloud.points[order[:3]]
    matched = set()
    for s in scene:
        dists = np.linalg.norm(top3 - s.position, axis=1)
        i = int(np.argmin(dists))
        assert dists[i] < 0.15  # about one range bin + one beam cell
        matched.add(i)
    assert matched == {0, 1, 2}
    # anything else is far-sidelobe ghosting, well below the real returns
    if len(cloud) > 3:
        weakest_true = cloud.powers_db[order[2]]
        assert np.all(cloud.powers_db[order[3:]] < weakest_true - 6.0)


def test_fuse_frame_shared_bin_strongest_pairs():
    # two scatterers in the same range bin; power order disambiguates
    scene = [scatterer_at(3.0, 70.0, 90.0, refl=2.0),
             scatterer_at(3.0, 110.0, 80.0, refl=1.0)]
    rig = sim_rig(noise_sigma=noise_for_snr(3.0, 64, 28.0))
    frame = simulate_frame(scene, rig, Pose.identity(), rng=np.random.default_rng(11))
    cloud, stats = fuse_frame(frame, CfarConfig(),
                              FusionConfig(min_height=-3.0, max_height=3.0))
    assert len(cloud) <= 2
    assert len(cloud) >= 1
    # the strongest fused point sits near the strong scatterer
    strongest = cloud.points[np.argmax(cloud.powers_db)]
    assert np.linalg.norm(strongest - scene[0].position) < 0.15


def test_fuse_frame_fov_violation_dropped():
    # cone angle 30 deg to x: outside the +-45 deg field of view
    scene = [scatterer_at(3.0, 30.0, 90.0)]
    rig = sim_rig(noise_sigma=noise_for_snr(3.0, 64, 25.0))
    frame = simulate_frame(scene, rig, Pose.identity(), rng=np.random.default_rng(13))
    cloud, stats = fuse_frame(frame, CfarConfig(),
                              FusionConfig(min_height=-3.0, max_height=3.0))
    assert len(cloud) == 0


def test_fuse_frame_height_filter():
    # elevation 50 deg at r=3: z = 3 cos(50 deg) ~ 1.93 m, above a 1 m ceiling
    scene = [scatterer_at(3.0, 90.0, 50.0)]
    rig = sim_rig(noise_sigma=noise_for_snr(3.0, 64, 25.0))
    frame = simulate_frame(scene, rig, Pose.identity(), rng=np.random.default_rng(17))
    cfg_tall = FusionConfig(min_height=-3.0, max_height=3.0)
    cloud, _ = fuse_frame(frame, CfarConfig(p_fa=1e-4), cfg_tall)
    assert len(cloud) == 1
    cfg_low = FusionConfig(min_height=-3.0, max_height=1.0)
    cloud2, stats2 = fuse_frame(frame, CfarConfig(p_fa=1e-4), cfg_low)
    assert len(cloud2) == 0 and stats2.height_filtered >= 1


def test_fuse_frame_power_rescale_invariance():
    scene = [scatterer_at(3.0, 80.0, 92.0)]
    rig = sim_rig(noise_sigma=noise_for_snr(3.0, 64, 25.0))
    frame = simulate_frame(scene, rig, Pose.identity(), rng=np.random.default_rng(19))
    cloud, _ = fuse_frame(frame, CfarConfig(), FusionConfig(min_height=-3, max_height=3))
    frame.horizontal.values = frame.horizontal.values * 12.5
    frame.vertical.values = frame.vertical.values * 12.5
    cloud2, _ = fuse_frame(frame, CfarConfig(), FusionConfig(min_height=-3, max_height=3))
    assert np.allclose(cloud.points, cloud2.points, atol=1e-12)
    assert np.allclose(cloud2.powers_db - cloud.powers_db, 10 * math.log10(12.5 ** 2))


def test_fuse_frame_gain_pattern_needs_compensation():
    # edge-of-FoV target: the horizontal pattern cuts ~4 dB that the vertical
    # does not, so pairing fails without compensation and succeeds with it
    half = math.radians(70.0)
    scene = [scatterer_at(3.0, 50.0, 90.0)]
    rig = sim_rig(noise_sigma=noise_for_snr(3.0, 64, 30.0), pattern=half)
    frame = simulate_frame(scene, rig, Pose.identity(), rng=np.random.default_rng(23))
    plain = FusionConfig(min_height=-3.0, max_height=3.0)
    cloud_plain, stats_plain = fuse_frame(frame, CfarConfig(p_fa=1e-4), plain)
    assert stats_plain.power_mismatch >= 1 and len(cloud_plain) == 0
    bins_h = rig.horizontal.angle_bins
    bins_v = rig.vertical.angle_bins
    comp = FusionConfig(min_height=-3.0, max_height=3.0,
                        h_gain_db=raised_cosine_gain_table(bins_h, half),
                        v_gain_db=raised_cosine_gain_table(bins_v, half))
    cloud_comp, _ = fuse_frame(frame, CfarConfig(p_fa=1e-4), comp)
    assert len(cloud_comp) == 1
    truth = scene[0].position
    assert np.linalg.norm(cloud_comp.points[0] - truth) < 0.15


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(power_match_db=0.0)
    with pytest.raises(ValueError):
        FusionConfig(min_height=2.0, max_height=1.0)
