import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from genfedbeam.beam_model import INTEGRATION, ArchConfig, build_model
from genfedbeam.data import VehicleDataset, lidar_is_valid, load_dataset, save_dataset
from genfedbeam.errors import ConfigurationError, LoadError
from genfedbeam.fileio import read_npz, write_npz
from genfedbeam.scenario import (Box, ScenarioConfig, beam_gains, best_beams, build_channel,
                                 dataset_manifest, dft_codebook, generate_scenario,
                                 load_external_dataset, los_blocked, rate_ratio, scale_beams,
                                 segment_hits_box, steering_vector, sum_rate, sum_rate_ratio)


def naive_sum_rate(h, w, power, noise):
    """Per-element loops over the multi-user rate expression."""
    v_count, n_t = h.shape
    norms = [math.sqrt(sum(abs(w[v, k]) ** 2 for k in range(n_t))) for v in range(v_count)]
    scale = [math.sqrt(power / v_count) / norms[v] for v in range(v_count)]
    total = 0.0
    for v in range(v_count):
        gains = []
        for i in range(v_count):
            acc = 0j
            for k in range(n_t):
                acc += h[v, k].conjugate() * w[i, k] * scale[i]
            gains.append(abs(acc) ** 2)
        interference = sum(g for i, g in enumerate(gains) if i != v)
        total += math.log2(1 + gains[v] / (interference + noise))
    return total


def test_codebook_columns_unit_norm():
    for m in (2, 16, 34):
        cb = dft_codebook(16, m)
        assert cb.shape == (16, m)
        assert np.allclose(np.linalg.norm(cb, axis=0), 1.0, atol=1e-12)


def test_steering_vector_unit_modulus():
    assert np.allclose(np.abs(steering_vector(0.37, 16)), 1.0)


def test_boresight_vehicle_gets_boresight_beam():
    cfg = ScenarioConfig(num_reflectors=0, back_wall=False)
    h, blocked = build_channel(np.array([0.0, 20.0]), [], cfg, np.random.default_rng(0))
    assert not blocked
    # 0-based index of the beam pointing at u = 0
    assert best_beams(h[None], dft_codebook(16, 16))[0] == 8


def test_best_beam_tie_break_lowest_index():
    cb = dft_codebook(4, 4)
    h = np.zeros((1, 4), dtype=complex)
    assert best_beams(h, cb)[0] == 0


def test_labels_match_exhaustive_sweep(small_scenario):
    cb = small_scenario.codebook
    for ds in small_scenario.vehicles:
        for h, label in zip(ds.channels, ds.labels):
            gains = [abs(np.vdot(h, cb[:, m])) for m in range(cb.shape[1])]
            assert label == int(np.argmax(gains))


def test_zero_gps_noise_gives_exact_position():
    cfg = ScenarioConfig(num_vehicles=2, samples_per_vehicle=10, gps_noise_std=0.0)
    scen = generate_scenario(cfg, 1)
    for ds, geoms in zip(scen.vehicles, scen.geometry):
        assert np.array_equal(ds.gps, np.stack([g.vehicle for g in geoms]))


def test_scenario_is_deterministic():
    cfg = ScenarioConfig(num_vehicles=2, samples_per_vehicle=15)
    a, b = generate_scenario(cfg, 5), generate_scenario(cfg, 5)
    for x, y in zip(a.vehicles, b.vehicles):
        assert np.array_equal(x.channels, y.channels)
        assert np.array_equal(x.lidar, y.lidar)
        assert np.array_equal(x.rgb, y.rgb)


def test_sensor_invariants(small_scenario):
    cfg = small_scenario.config
    for ds in small_scenario.vehicles:
        assert ds.rgb.shape[1] == cfg.rgb_len and ds.lidar.shape[1] == cfg.lidar_len
        assert all(lidar_is_valid(row) for row in ds.lidar)
        assert np.all(ds.labels >= 0) and np.all(ds.labels < cfg.num_beams)


def test_blockage_changes_labels_in_default_world():
    cfg = ScenarioConfig(num_vehicles=3, samples_per_vehicle=100)
    scen = generate_scenario(cfg, 0)
    blocked = np.array([g.los_blocked for geoms in scen.geometry for g in geoms])
    labels = np.concatenate([ds.labels for ds in scen.vehicles])
    pos = np.stack([g.vehicle for geoms in scen.geometry for g in geoms])
    u = pos[:, 0] / np.linalg.norm(pos, axis=1)
    los_beam = best_beams(np.stack([steering_vector(x, 16) for x in u]), scen.codebook)
    assert 0.1 < blocked.mean() < 0.5
    # unblocked samples are almost always served on the LoS beam, blocked ones rarely
    assert np.mean(labels[~blocked] == los_beam[~blocked]) > 0.9
    assert np.mean(labels[blocked] == los_beam[blocked]) < 0.5


@settings(max_examples=60, deadline=None)
@given(st.floats(-30, 30), st.floats(1, 40), st.floats(-30, 30), st.floats(1, 40),
       st.floats(-20, 20), st.floats(1, 30), st.floats(1, 10), st.floats(1, 10))
@example(-1.175494351e-38, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0)  # grazes a corner, tiny x extent
def test_blockage_symmetric_in_segment_direction(ax, ay, bx, by, x0, y0, w, d):
    box = Box(x0, y0, x0 + w, y0 + d, 1)
    a, b = np.array([ax, ay]), np.array([bx, by])
    assert segment_hits_box(a, b, box) == segment_hits_box(b, a, box)


def test_los_blocked_simple_geometry():
    box = Box(-2, 8, 2, 12, 1)
    assert los_blocked(np.array([0.0, 20.0]), [box])
    assert not los_blocked(np.array([15.0, 20.0]), [box])


def test_single_user_rate_formula():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(1, 8)) + 1j * rng.normal(size=(1, 8))
    w = rng.normal(size=(1, 8)) + 1j * rng.normal(size=(1, 8))
    p, s2 = 2.0, 0.1
    wn = w / np.linalg.norm(w)
    expected = math.log2(1 + p * abs(np.vdot(h[0], wn[0])) ** 2 / s2)
    assert sum_rate(h, w, p, s2) == pytest.approx(expected, rel=1e-12)


def test_orthogonal_users_rate_is_sum_of_solo_rates():
    cb = dft_codebook(8, 8)
    h = np.stack([cb[:, 1] * 3, cb[:, 5] * 2])
    w = np.stack([cb[:, 1], cb[:, 5]])
    p, s2 = 1.0, 0.01
    joint = sum_rate(h, w, p, s2)
    solo = sum(math.log2(1 + (p / 2) * abs(np.vdot(h[v], w[v])) ** 2 / s2) for v in range(2))
    assert joint == pytest.approx(solo, rel=1e-12)


def test_sum_rate_matches_naive_oracle_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        v, n_t = rng.integers(1, 5), rng.integers(2, 9)
        h = rng.normal(size=(v, n_t)) + 1j * rng.normal(size=(v, n_t))
        w = rng.normal(size=(v, n_t)) + 1j * rng.normal(size=(v, n_t))
        p, s2 = rng.uniform(0.1, 5), rng.uniform(1e-3, 1)
        assert abs(sum_rate(h, w, p, s2) - naive_sum_rate(h, w, p, s2)) <= 1e-12


def test_power_constraint_holds():
    rng = np.random.default_rng(7)
    for _ in range(100):
        v, p = rng.integers(1, 6), rng.uniform(0.1, 10)
        w = rng.normal(size=(v, 16)) + 1j * rng.normal(size=(v, 16))
        assert abs(np.sum(np.abs(scale_beams(w, p)) ** 2) - p) <= 1e-9


def test_rate_monotone_in_noise():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(3, 8)) + 1j * rng.normal(size=(3, 8))
    w = rng.normal(size=(3, 8)) + 1j * rng.normal(size=(3, 8))
    rates = [sum_rate(h, w, 1.0, s2) for s2 in np.geomspace(1e-4, 10, 30)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_oracle_beams_give_ratio_one(small_scenario):
    ds = VehicleDataset.concat(small_scenario.vehicles)
    cfg = small_scenario.config
    for upd in (1, 2, 4):
        assert rate_ratio(ds.channels, ds.labels, small_scenario.codebook, cfg.power,
                          cfg.noise_power, upd) == 1.0


def test_fixed_wrong_beam_ratio_below_one():
    cfg = ScenarioConfig(num_vehicles=1, samples_per_vehicle=50, back_wall=False, obstacle_rate=0.0,
                         blockage_prob=0.0)
    scen = generate_scenario(cfg, 0)
    ds = scen.vehicles[0]
    wrong = np.zeros(len(ds), dtype=np.int64)
    assert rate_ratio(ds.channels, wrong, scen.codebook, cfg.power, cfg.noise_power) < 1.0


def test_random_model_ratio_band_for_34_beams():
    cfg = ScenarioConfig.codebook34(num_vehicles=2, samples_per_vehicle=60)
    scen = generate_scenario(cfg, 0)
    ds = VehicleDataset.concat(scen.vehicles)
    net = build_model(ArchConfig(num_beams=34, seed=1))
    ratio = sum_rate_ratio(net, ds, scen.codebook, cfg)
    assert 0.05 <= ratio <= 0.9


def test_dataset_round_trip_is_exact(tmp_path, small_scenario):
    cfg = small_scenario.config
    save_dataset(tmp_path / "d", small_scenario.vehicles, dataset_manifest(cfg, 3))
    back, man = load_external_dataset(tmp_path / "d")
    assert man["num_beams"] == cfg.num_beams
    assert [t["count"] for t in man["trials"]] == [len(v) for v in small_scenario.vehicles]
    for a, b in zip(small_scenario.vehicles, back):
        for name in ("ids", "gps", "rgb", "lidar", "labels", "mask", "synthetic", "channels"):
            x, y = getattr(a, name), getattr(b, name)
            assert x.shape == y.shape and np.array_equal(x, y)


def _corrupt(tmp_path, small_scenario, key, row, value, num_beams=None):
    cfg = small_scenario.config
    man = dataset_manifest(cfg, 3)
    if num_beams is not None:
        man["num_beams"] = num_beams
    save_dataset(tmp_path, small_scenario.vehicles, man)
    arrays = read_npz(tmp_path / "samples.npz")
    arrays[key][row] = value
    write_npz(tmp_path / "samples.npz", arrays)


def test_label_outside_codebook_rejected_with_row(tmp_path, small_scenario):
    _corrupt(tmp_path, small_scenario, "label", 5, 34, num_beams=34)
    with pytest.raises(LoadError, match="row 5"):
        load_dataset(tmp_path)


def test_invalid_lidar_value_rejected(tmp_path, small_scenario):
    arrays_row = small_scenario.vehicles[0].lidar[2].copy()
    arrays_row[0] = 2
    _corrupt(tmp_path, small_scenario, "lidar", 2, arrays_row)
    with pytest.raises(LoadError, match="row 2"):
        load_dataset(tmp_path)


def test_shape_mismatch_rejected(tmp_path, small_scenario):
    man = dataset_manifest(small_scenario.config, 3)
    man["lidar_shape"] = [2, 2, 2]
    save_dataset(tmp_path, small_scenario.vehicles, man)
    with pytest.raises(LoadError):
        load_dataset(tmp_path)


def test_bad_scenario_config_rejected():
    with pytest.raises(ConfigurationError):
        ScenarioConfig(num_beams=1)
    with pytest.raises(ConfigurationError):
        ScenarioConfig(num_vehicles=0)
