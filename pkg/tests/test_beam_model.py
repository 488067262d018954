import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genfedbeam.autodiff import forward, one_hot, softmax_cross_entropy
from genfedbeam.beam_model import (BRANCHES, INTEGRATION, ArchConfig, ModelInput, MultiModalNet,
                                   branch_parameter_counts, build_model, fuse_features,
                                   load_checkpoint, merge_branches, model_backward,
                                   model_forward, predict, save_checkpoint, split_branches)
from genfedbeam.data import VehicleDataset
from genfedbeam.errors import ConfigurationError, ProtocolError
from genfedbeam.federation import RoundConfig, evaluate, local_update
from genfedbeam.scenario import ScenarioConfig, generate_scenario


def hand_count(dims, bn=True):
    """Dense weights + biases, plus gamma/beta for each hidden BN."""
    total = 0
    for a, b in zip(dims[:-1], dims[1:]):
        total += a * b + b + (2 * b if bn else 0)
    return total


def hand_total(arch):
    integ = [arch.integration_in, *arch.integration_hidden]
    ext = sum(hand_count(arch.dims(q)) for q in ("gps", "rgb", "lidar"))
    return ext + hand_count(integ) + integ[-1] * arch.num_beams + arch.num_beams


def random_input(arch, n, rng, mask=None):
    mask = np.ones((n, 3), dtype=bool) if mask is None else mask
    return ModelInput(rng.normal(size=(n, 2)), rng.normal(size=(n, arch.input_dim("rgb"))),
                      rng.normal(size=(n, arch.input_dim("lidar"))), mask)


def test_default_parameter_count_matches_hand_sum():
    arch = ArchConfig()
    net = build_model(arch)
    assert net.num_parameters() == hand_total(arch) == 15160
    counts = branch_parameter_counts(arch)
    assert counts == {"gps": 232, "rgb": 4032, "lidar": 7104, "integration": 3792}
    assert sum(counts.values()) == net.num_parameters()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=3),
       st.lists(st.integers(1, 12), min_size=1, max_size=3),
       st.lists(st.integers(1, 12), min_size=0, max_size=2),
       st.integers(2, 40))
def test_parameter_count_closed_form_any_config(gps_hidden, rgb_hidden, integ, m):
    arch = ArchConfig(gps_dims=(2, *gps_hidden), rgb_dims=(5, *rgb_hidden),
                      lidar_dims=(7, 3), integration_hidden=tuple(integ), num_beams=m)
    net = build_model(arch)
    assert net.num_parameters() == hand_total(arch)
    assert sum(branch_parameter_counts(arch).values()) == net.num_parameters()


def test_integration_widths():
    arch = ArchConfig()
    assert (arch.feature_dim("gps"), arch.feature_dim("rgb"), arch.feature_dim("lidar")) == (8, 16, 16)
    assert arch.integration_in == 40
    net = build_model(ArchConfig(num_beams=34))
    assert net.branches[INTEGRATION].in_features == 40
    assert net.branches[INTEGRATION].out_features == 34


def test_gps_plus_integration_share_near_quarter():
    counts = branch_parameter_counts(ArchConfig())
    share = (counts["gps"] + counts["integration"]) / sum(counts.values())
    assert abs(share - 0.25) <= 0.05


def test_bad_configs_rejected():
    with pytest.raises(ConfigurationError):
        ArchConfig(gps_dims=(3, 8))
    with pytest.raises(ConfigurationError):
        ArchConfig(num_beams=1)
    with pytest.raises(ConfigurationError):
        ArchConfig(rgb_dims=(64,))
    arch = ArchConfig()
    wrong = build_model(ArchConfig(gps_dims=(2, 4))).branches[INTEGRATION]
    with pytest.raises(ConfigurationError):
        MultiModalNet(arch, {INTEGRATION: wrong})


def test_build_is_deterministic_in_seed():
    a, b, c = build_model(ArchConfig(seed=4)), build_model(ArchConfig(seed=4)), build_model(ArchConfig(seed=5))
    sa, sb, sc = a.state_arrays(), b.state_arrays(), c.state_arrays()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_fusion_layouts():
    arch = ArchConfig()
    rng = np.random.default_rng(0)
    feats = {"gps": rng.normal(size=(3, 8)), "rgb": rng.normal(size=(3, 16)),
             "lidar": rng.normal(size=(3, 16))}
    full = fuse_features(feats, np.ones((3, 3), bool), arch)
    assert np.array_equal(full, np.concatenate([feats["gps"], feats["rgb"], feats["lidar"]], axis=1))
    mask = np.array([[True, True, False]] * 3)
    no_lidar = fuse_features({"gps": feats["gps"], "rgb": feats["rgb"]}, mask, arch)
    assert np.all(no_lidar[:, -16:] == 0.0)
    assert np.array_equal(no_lidar[:, :24], full[:, :24])
    empty = fuse_features({}, np.zeros((2, 3), bool), arch)
    assert empty.shape == (2, 40) and np.all(empty == 0.0)


def test_fill_features_used_only_for_absent_slots():
    arch = ArchConfig()
    rng = np.random.default_rng(1)
    mask = np.array([[True, True, False], [True, True, True]])
    fill = rng.normal(size=(2, 40))
    fill_mask = ~mask
    feats = {"gps": np.ones((2, 8)), "rgb": np.ones((2, 16)), "lidar": np.ones((1, 16))}
    fused = fuse_features(feats, mask, arch, fill, fill_mask)
    assert np.array_equal(fused[0, 24:], fill[0, 24:])
    assert np.all(fused[1] == 1.0)


def test_argmax_tie_break_is_lowest_index():
    arch = ArchConfig()
    net = build_model(arch)
    last = net.branches[INTEGRATION].layers[-1]
    last.W[...] = 0.0
    last.b[...] = 0.0
    logits, idx = predict(net, random_input(arch, 5, np.random.default_rng(0)))
    assert np.all(logits == 0.0)
    assert np.all(idx == 0)


def test_gps_only_prediction_equals_explicit_zero_features():
    arch = ArchConfig()
    net = build_model(arch)
    rng = np.random.default_rng(2)
    mask = np.array([[True, False, False]])
    inp = random_input(arch, 1, rng, mask)
    logits, _ = predict(net, inp)
    gps_feat, _, _ = forward(net.branches["gps"], inp.gps, "eval", update_stats=False)
    fused = np.concatenate([gps_feat, np.zeros((1, 32))], axis=1)
    ref, _, _ = forward(net.branches[INTEGRATION], fused, "eval", update_stats=False)
    assert np.array_equal(logits, ref)


def test_absent_modality_branch_gets_no_gradient_and_is_not_run():
    arch = ArchConfig()
    net = build_model(arch)
    rng = np.random.default_rng(3)
    mask = np.ones((6, 3), bool)
    mask[:, 2] = False
    inp = random_input(arch, 6, rng, mask)
    inp.lidar[...] = np.nan  # would poison the output if the LiDAR path ran
    logits, trace = model_forward(net, inp, mode="train", update_stats=False)
    assert np.all(np.isfinite(logits))
    _, g = softmax_cross_entropy(logits, one_hot(rng.integers(0, 16, 6), 16))
    grads = model_backward(net, trace, g)
    assert "lidar" not in grads
    assert set(grads) == {"gps", "rgb", INTEGRATION}
    assert np.all(trace.fused[:, arch.slot("lidar")] == 0.0)


def test_held_restricts_branches():
    arch = ArchConfig()
    net = build_model(arch)
    inp = random_input(arch, 4, np.random.default_rng(4))
    a, _ = predict(net, inp, held=("gps", INTEGRATION))
    gps_only = ModelInput(inp.gps, inp.rgb, inp.lidar, np.array([[True, False, False]] * 4))
    b, _ = predict(net, gps_only)
    assert np.array_equal(a, b)


def test_split_merge_round_trip_is_exact():
    net = build_model(ArchConfig(seed=7))
    parts = split_branches(net)
    assert set(parts) == set(BRANCHES)
    assert sum(p.num_parameters() for p in parts.values()) == net.num_parameters()
    merged = merge_branches(parts, net.arch)
    a, b = net.state_arrays(), merged.state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    parts.pop("rgb")
    with pytest.raises(ProtocolError):
        merge_branches(parts, net.arch)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    arch = ArchConfig(seed=9, num_beams=34)
    net = build_model(arch)
    for layer in net.branches["gps"].layers:
        if hasattr(layer, "running_mean"):
            layer.running_mean[...] = np.random.default_rng(0).normal(size=layer.running_mean.shape)
    save_checkpoint(tmp_path / "a.npz", net, {"round": 3})
    save_checkpoint(tmp_path / "b.npz", net, {"round": 3})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = load_checkpoint(tmp_path / "a.npz")
    assert back.arch == net.arch
    a, b = net.state_arrays(), back.state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) and a[k].dtype == b[k].dtype for k in a)


def test_desk_net_fits_200_sample_scenario():
    cfg = ScenarioConfig(num_vehicles=2, samples_per_vehicle=100, gps_noise_std=0.0)
    scen = generate_scenario(cfg, 0)
    data = VehicleDataset.concat(scen.vehicles)
    net = build_model(ArchConfig())
    rounds = RoundConfig(local_epochs=500, batch_size=128, lr=1e-2)
    local_update(net, data, BRANCHES, rounds, np.random.default_rng(0), cfg.gps_scale)
    acc, _ = evaluate(net, data, cfg.gps_scale)
    assert acc >= 0.9
