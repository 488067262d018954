import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genfedbeam.errors import InputError
from genfedbeam.imbalance import (average_overlap_rate, completeness_table,
                                  label_histograms, make_label_imbalanced_partition,
                                  make_modality_masked_partition, modality_census,
                                  modality_completeness, normalized_entropy, removal_sequence,
                                  sample_shortfall)
from genfedbeam.scenario import ScenarioConfig, generate_scenario


# brute-force oracles, written independently of the package code

def zeta_oracle(hist):
    ratios = [[c / sum(row) for c in row] for row in hist]
    pairs = list(combinations(range(len(hist)), 2))
    total = 0.0
    for i, j in pairs:
        total += sum(min(a, b) for a, b in zip(ratios[i], ratios[j]))
    return total / len(pairs)


def eps_oracle(counts):
    n = sum(counts)
    h = 0.0
    for c in counts:
        if c:
            h -= (c / n) * math.log(c / n)
    return h / math.log(len(counts))


def shortfall_oracle(counts):
    best = max(counts)
    top = counts.index(best)
    return [0 if m == top else best - c for m, c in enumerate(counts)]


histograms = st.integers(2, 6).flatmap(lambda v: st.integers(2, 8).flatmap(
    lambda m: st.lists(st.lists(st.integers(0, 30), min_size=m, max_size=m)
                       .filter(lambda r: sum(r) > 0), min_size=v, max_size=v)))


def test_metric_oracles_on_1000_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v, m = rng.integers(2, 8), rng.integers(2, 12)
        hist = rng.integers(0, 20, size=(v, m))
        hist[:, rng.integers(m)] += 1
        assert abs(average_overlap_rate(hist) - zeta_oracle(hist.tolist())) <= 1e-12
        g = hist.sum(axis=0)
        assert abs(normalized_entropy(g) - eps_oracle(g.tolist())) <= 1e-12
        census = rng.integers(0, 50, size=(v, 3))
        census[:, 0] += 1
        for q, name in enumerate(("gps", "rgb", "lidar")):
            assert modality_completeness(census, 0, name) == census[0, q] / census[0].max()
        assert sample_shortfall(hist[0]).tolist() == shortfall_oracle(hist[0].tolist())


def test_zeta_boundaries_and_hand_example():
    assert average_overlap_rate([[2, 2, 4], [1, 1, 2], [3, 3, 6]]) == 1.0
    assert average_overlap_rate([[5, 0], [0, 3]]) == 0.0
    assert average_overlap_rate([[1, 0], [1, 1], [0, 1]]) == pytest.approx(1 / 3, abs=1e-15)


def test_entropy_boundaries_and_hand_example():
    assert normalized_entropy([7, 7, 7, 7]) == 1.0
    assert normalized_entropy([0, 9, 0]) == 0.0
    assert normalized_entropy([1, 1, 0, 0]) == pytest.approx(0.5, abs=1e-15)


def test_completeness_boundaries():
    census = np.array([[100, 100, 100], [100, 20, 0]])
    assert modality_completeness(census, 0, "lidar") == 1.0
    assert modality_completeness(census, 1, "rgb") == 0.2
    assert modality_completeness(census, 1, "lidar") == 0.0
    with pytest.raises(InputError):
        modality_completeness(np.zeros((1, 3)), 0, "gps")


def test_shortfall_examples():
    assert sample_shortfall([5, 3, 2]).tolist() == [0, 2, 3]
    assert sample_shortfall([4, 4, 4]).tolist() == [0, 0, 0]
    assert sample_shortfall([4, 0]).tolist() == [0, 4]


def test_metric_input_errors():
    with pytest.raises(InputError):
        average_overlap_rate([[1, 2]])
    with pytest.raises(InputError):
        average_overlap_rate([[1, 2], [0, 0]])
    with pytest.raises(InputError):
        normalized_entropy([5])


@settings(max_examples=150, deadline=None)
@given(histograms, st.randoms(use_true_random=False))
def test_metrics_in_unit_interval_and_symmetric(hist, rnd):
    h = np.array(hist)
    z = average_overlap_rate(h)
    e = normalized_entropy(h.sum(axis=0))
    assert 0.0 <= z <= 1.0 + 1e-12 and 0.0 <= e <= 1.0 + 1e-12
    rows = list(range(len(h)))
    cols = list(range(h.shape[1]))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    assert average_overlap_rate(h[rows]) == pytest.approx(z, abs=1e-12)
    assert normalized_entropy(h.sum(axis=0)[cols]) == pytest.approx(e, abs=1e-12)
    kappa = completeness_table(np.stack([h.sum(axis=1)] * 3, axis=1))
    assert np.all((0 <= kappa) & (kappa <= 1))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=2, max_size=20).filter(lambda r: sum(r) > 0))
def test_shortfall_tops_up_to_peak(counts):
    c = np.array(counts)
    short = sample_shortfall(c)
    peak = int(np.argmax(c))
    topped = c + short
    assert short[peak] == 0 and np.all(short >= 0)
    assert np.all(topped == c.max())


# ---------------------------------------------------------------- partitions

@pytest.fixture(scope="module")
def base():
    return generate_scenario(ScenarioConfig(num_vehicles=10, samples_per_vehicle=150), 0)


def test_removal_sequence_nested_and_distinct():
    counts = np.arange(16, 0, -1)
    seq = removal_sequence(counts, 12, np.random.default_rng(0))
    assert len(set(seq)) == 12
    with pytest.raises(InputError):
        removal_sequence(np.array([3, 0, 2]), 3, np.random.default_rng(0))


def test_top_group_picked_with_configured_odds():
    counts = np.arange(40, 0, -1)
    firsts = [removal_sequence(counts, 1, np.random.default_rng(s))[0] for s in range(2000)]
    top_rate = np.mean(np.array(firsts) < 20)
    assert abs(top_rate - 0.7) < 3 * math.sqrt(0.21 / 2000)


def test_label_partition_levels(base):
    m = base.config.num_beams
    zeta0 = average_overlap_rate(label_histograms(base.vehicles, m))
    results = {lvl: make_label_imbalanced_partition(base.vehicles, lvl, 11, m) for lvl in "LMH"}
    total = sum(len(v) for v in base.vehicles)
    zetas = {}
    for lvl, (parts, removed) in results.items():
        assert sum(len(p) for p in parts) == total
        assert all(len(r) == {"L": 6, "M": 9, "H": 12}[lvl] for r in removed)
        ids = np.sort(np.concatenate([p.ids for p in parts]))
        assert np.array_equal(ids, np.arange(total))
        stripped_everywhere = set.intersection(*(set(r) for r in removed))
        for p, r in zip(parts, removed):
            assert not np.isin(p.labels, sorted(set(r) - stripped_everywhere)).any()
        zetas[lvl] = average_overlap_rate(label_histograms(parts, m))
    for v in range(len(base.vehicles)):
        low, mid, high = (set(results[lvl][1][v]) for lvl in "LMH")
        assert low <= mid <= high
    assert zetas["L"] < zeta0
    assert zetas["H"] < zetas["L"]


def test_label_partition_deterministic(base):
    m = base.config.num_beams
    a, ra = make_label_imbalanced_partition(base.vehicles, "M", 3, m)
    b, rb = make_label_imbalanced_partition(base.vehicles, "M", 3, m)
    assert ra == rb
    assert all(np.array_equal(x.ids, y.ids) for x, y in zip(a, b))


def test_label_partition_errors(base):
    with pytest.raises(InputError):
        make_label_imbalanced_partition(base.vehicles, "X", 0, 16)
    few = [v.subset(np.flatnonzero(v.labels < 5)) for v in base.vehicles]
    with pytest.raises(InputError):
        make_label_imbalanced_partition(few, "L", 0, 16)


def test_partial_masking_rate(base):
    p = 0.8
    parts = make_modality_masked_partition(base.vehicles, "partial", p, 0)
    census = modality_census(parts)
    assert np.array_equal(census[:, 0], modality_census(base.vehicles)[:, 0])
    for v, ds in enumerate(parts):
        n = len(ds)
        sigma = math.sqrt(p * (1 - p) / n)
        for q in ("rgb", "lidar"):
            assert abs(modality_completeness(census, v, q) - (1 - p)) <= 3 * sigma
        assert np.all(ds.rgb[~ds.mask[:, 1]] == 0.0)
        assert np.array_equal(ds.gps, base.vehicles[v].gps)


def test_complete_masking_counts(base):
    for k in (2, 4, 6, 8):
        parts = make_modality_masked_partition(base.vehicles, "complete", k, 1)
        kappa = completeness_table(modality_census(parts))
        assert int(np.sum(kappa[:, 2] == 0)) == k
        assert int(np.sum(kappa[:, 1] == 0)) == k
        assert np.all(kappa[:, 0] == 1.0)
    with pytest.raises(InputError):
        make_modality_masked_partition(base.vehicles, "complete", 11, 0)
    with pytest.raises(InputError):
        make_modality_masked_partition(base.vehicles, "sideways", 1, 0)
