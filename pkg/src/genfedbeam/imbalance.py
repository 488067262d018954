"""Label / modality imbalance metrics and the skewed-partition builders."""
from __future__ import annotations

import numpy as np

from .beam_model import MODALITIES, Modality
from .data import VehicleDataset
from .errors import InputError

LEVEL_REMOVALS = {"L": 6, "M": 9, "H": 12}
PARTIAL_RATES = (0.2, 0.4, 0.6, 0.8)
COMPLETE_COUNTS = (2, 4, 6, 8)
MASKABLE = (Modality.RGB, Modality.LIDAR)


# ---------------------------------------------------------------- metrics

def normalize_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise InputError("histogram with zero total")
    return counts / total


def average_overlap_rate(histograms) -> float:
    """Mean pairwise overlap of vehicles' normalized label distributions.

    1 when every vehicle has the same distribution, 0 when all label
    supports are pairwise disjoint.
    """
    h = np.asarray(histograms, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise InputError("need label histograms for at least two vehicles")
    if np.any(h < 0):
        raise InputError("negative label count")
    normalize_counts(h)  # rejects empty vehicles
    n = h.sum(axis=1)
    v = h.shape[0]
    # cross-multiplied so that integer counts give an exact numerator: equal
    # distributions score exactly 1 and disjoint ones exactly 0
    overlaps = [np.minimum(h[i] * n[j], h[j] * n[i]).sum() / (n[i] * n[j])
                for i in range(v - 1) for j in range(i + 1, v)]
    return float(np.mean(overlaps))


def normalized_entropy(global_histogram) -> float:
    """Shannon entropy of the global label distribution divided by log M."""
    h = np.asarray(global_histogram, dtype=np.float64)
    if h.ndim != 1 or h.shape[0] < 2:
        raise InputError("need at least two labels")
    p = normalize_counts(h)
    if np.all(h == h[0]):
        return 1.0  # uniform is the maximum; avoids log rounding off by an ulp
    nz = p[p > 0]
    return float(np.clip(-np.sum(nz * np.log(nz)) / np.log(h.shape[0]), 0.0, 1.0))


def modality_census(vehicles: list[VehicleDataset]) -> np.ndarray:
    """``(V, 3)`` observed-sample counts per vehicle and modality."""
    return np.stack([ds.modality_counts() for ds in vehicles])


def modality_completeness(census, vehicle: int, modality) -> float:
    """Observed samples of ``modality`` relative to the vehicle's best-covered
    modality."""
    row = np.asarray(census)[vehicle]
    top = row.max()
    if top <= 0:
        raise InputError(f"vehicle {vehicle} has no samples in any modality")
    j = [q.value for q in MODALITIES].index(Modality(modality).value)
    return float(row[j] / top)


def completeness_table(census) -> np.ndarray:
    census = np.asarray(census, dtype=np.float64)
    top = census.max(axis=1, keepdims=True)
    if np.any(top <= 0):
        raise InputError("vehicle with no samples in any modality")
    return census / top


def sample_shortfall(histogram) -> np.ndarray:
    """Samples each label lacks relative to the vehicle's most frequent label."""
    h = np.asarray(histogram, dtype=np.int64)
    if h.sum() <= 0:
        raise InputError("empty histogram")
    peak = int(np.argmax(h))
    out = h[peak] - h
    out[peak] = 0
    return out


def label_histograms(vehicles: list[VehicleDataset], num_beams: int) -> np.ndarray:
    return np.stack([ds.label_counts(num_beams) for ds in vehicles])


def imbalance_report(vehicles: list[VehicleDataset], num_beams: int) -> dict:
    hist = label_histograms(vehicles, num_beams)
    census = modality_census(vehicles)
    return {
        "zeta": average_overlap_rate(hist),
        "epsilon": normalized_entropy(hist.sum(axis=0)),
        "kappa": completeness_table(census).tolist(),
        "samples": int(hist.sum()),
        "per_vehicle": hist.sum(axis=1).tolist(),
    }


# ---------------------------------------------------------------- partitions

def removal_sequence(counts: np.ndarray, n_remove: int, rng: np.random.Generator,
                     top_prob: float = 0.7) -> list[int]:
    """Labels to strip from one vehicle, in removal order.

    Present labels are ranked by volume (ties by index) and cut into a top
    and a bottom half. Each pick chooses the top half with ``top_prob``,
    otherwise the bottom half, then a uniform label from what is left there.
    Prefixes of the sequence give the nested L / M / H removal sets.
    """
    present = [int(m) for m in np.flatnonzero(counts > 0)]
    if len(present) < n_remove:
        raise InputError(f"vehicle has {len(present)} distinct labels, cannot remove {n_remove}")
    ranked = sorted(present, key=lambda m: (-counts[m], m))
    half = (len(ranked) + 1) // 2
    groups = [ranked[:half], ranked[half:]]
    out = []
    for _ in range(n_remove):
        g = 0 if rng.uniform() < top_prob else 1
        if not groups[g]:
            g = 1 - g
        pick = int(rng.integers(len(groups[g])))
        out.append(groups[g].pop(pick))
    return out


def make_label_imbalanced_partition(vehicles: list[VehicleDataset], level: str, seed: int,
                                    num_beams: int, top_prob: float = 0.7):
    """Strip 6 / 9 / 12 labels (level L / M / H) from every vehicle and hand
    the stripped samples to the next vehicle, in cyclic index order, that
    keeps that label (or simply the next vehicle when all of them strip it).
    Total sample count is conserved.

    Returns ``(new_vehicles, removed)`` where ``removed[v]`` lists vehicle
    ``v``'s stripped labels.
    """
    if level not in LEVEL_REMOVALS:
        raise InputError(f"unknown imbalance level {level!r}")
    v_count = len(vehicles)
    if v_count < 2:
        raise InputError("need at least two vehicles")
    n_max = max(LEVEL_REMOVALS.values())
    removed = []
    for v, ds in enumerate(vehicles):
        counts = ds.label_counts(num_beams)
        rng = np.random.default_rng([seed, v])
        n_avail = int(np.sum(counts > 0))
        if n_avail < LEVEL_REMOVALS[level]:
            raise InputError(f"vehicle {v} has {n_avail} distinct labels, "
                             f"cannot remove {LEVEL_REMOVALS[level]}")
        seq = removal_sequence(counts, min(n_max, n_avail), rng, top_prob)
        removed.append(seq[:LEVEL_REMOVALS[level]])
    kept = []
    incoming = [[] for _ in range(v_count)]
    for v, ds in enumerate(vehicles):
        drop = np.isin(ds.labels, removed[v])
        kept.append(ds.subset(np.flatnonzero(~drop)))
        for m in removed[v]:
            rows = np.flatnonzero(ds.labels == m)
            if rows.size == 0:
                continue
            # if every vehicle strips this label it still moves one step on
            target = (v + 1) % v_count
            for step in range(1, v_count):
                w = (v + step) % v_count
                if m not in removed[w]:
                    target = w
                    break
            incoming[target].append(ds.subset(rows))
    out = [VehicleDataset.concat([kept[v]] + incoming[v]) for v in range(v_count)]
    return out, removed


def make_modality_masked_partition(vehicles: list[VehicleDataset], mode: str, value,
                                   seed: int):
    """Hide RGB and LiDAR data.

    ``mode="partial"``: every sample independently loses each of RGB and
    LiDAR with probability ``value``. ``mode="complete"``: ``value`` vehicles
    chosen uniformly lose both modalities entirely. GPS is never touched.
    Hidden sensor arrays are zeroed.
    """
    rng = np.random.default_rng(seed)
    v_count = len(vehicles)
    out = [ds.copy() for ds in vehicles]
    if mode == "partial":
        p = float(value)
        if not 0.0 <= p <= 1.0:
            raise InputError("masking rate must lie in [0, 1]")
        for ds in out:
            for q in MASKABLE:
                j = MODALITIES.index(q)
                lose = rng.uniform(size=len(ds)) < p
                ds.mask[lose, j] = False
    elif mode == "complete":
        k = int(value)
        if not 0 <= k <= v_count:
            raise InputError(f"cannot remove modalities from {k} of {v_count} vehicles")
        for v in rng.choice(v_count, size=k, replace=False):
            for q in MASKABLE:
                out[v].mask[:, MODALITIES.index(q)] = False
    else:
        raise InputError(f"unknown masking mode {mode!r}")
    for ds in out:
        ds.rgb[~ds.mask[:, 1]] = 0.0
        ds.lidar[~ds.mask[:, 2]] = 0
    return out


def partition_manifest(vehicles: list[VehicleDataset], extra: dict | None = None) -> dict:
    return {
        "vehicles": [{"vehicle": v, "ids": ds.ids.tolist(),
                      "mask": ds.mask.astype(int).tolist(),
                      "synthetic": ds.synthetic.astype(int).tolist()}
                     for v, ds in enumerate(vehicles)],
        **(extra or {}),
    }
