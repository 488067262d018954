"""Per-vehicle sample containers and the on-disk dataset format.

Dataset directory layout (all written byte-stably, see ``fileio``)::

    manifest.json   format tag, version, codebook size, antenna count, grid
                    shapes, per-vehicle ("trial") sample counts, seed
    samples.npz     one row per sample, vehicles concatenated in order:
                      ids (int64), vehicle (int64), gps (float64, N x 2,
                      metres relative to the BS), rgb (float64, N x R),
                      lidar (int8, N x L, values in {0, 1, -1, -2}),
                      label (int64, 0-based beam index), mask (bool, N x 3,
                      GPS/RGB/LiDAR availability), synthetic (bool),
                      channel_re / channel_im (float64, N x N_t)

Labels are 0-based beam indices ``0 .. M-1`` everywhere in this package.
Rows whose LiDAR is masked out are not checked for LiDAR validity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .beam_model import MODALITIES, ModelInput
from .errors import LoadError
from .fileio import read_json, read_npz, write_json, write_npz

FORMAT_TAG = "genfedbeam-dataset"
FORMAT_VERSION = 1
LIDAR_VALUES = (0, 1, -1, -2)
TX_MARK = -1
RX_MARK = -2


def lidar_is_valid(grid: np.ndarray) -> bool:
    g = np.asarray(grid)
    return (bool(np.isin(g, LIDAR_VALUES).all())
            and int(np.sum(g == TX_MARK)) == 1 and int(np.sum(g == RX_MARK)) == 1)


@dataclass
class VehicleDataset:
    ids: np.ndarray
    gps: np.ndarray
    rgb: np.ndarray
    lidar: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    synthetic: np.ndarray
    channels: np.ndarray
    fill: np.ndarray | None = None
    fill_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def _arrays(self):
        return [f.name for f in fields(self) if f.name != "meta"]

    def subset(self, idx) -> "VehicleDataset":
        idx = np.asarray(idx)
        kw = {}
        for name in self._arrays():
            arr = getattr(self, name)
            kw[name] = None if arr is None else arr[idx]
        return VehicleDataset(**kw, meta=dict(self.meta))

    def copy(self) -> "VehicleDataset":
        return self.subset(np.arange(len(self)))

    @staticmethod
    def concat(parts: list["VehicleDataset"]) -> "VehicleDataset":
        parts = [p for p in parts if p is not None]
        kw = {}
        for name in parts[0]._arrays():
            arrs = [getattr(p, name) for p in parts]
            if name in ("fill", "fill_mask"):
                present = [a for a in arrs if a is not None]
                if not present:
                    kw[name] = None
                    continue
                arrs = [a if a is not None else np.zeros((len(p),) + present[0].shape[1:],
                                                         present[0].dtype)
                        for a, p in zip(arrs, parts)]
            kw[name] = np.concatenate(arrs, axis=0)
        return VehicleDataset(**kw, meta=dict(parts[0].meta))

    def label_counts(self, num_beams: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_beams)[:num_beams]

    def modality_counts(self) -> np.ndarray:
        """Samples observed per modality (GPS, RGB, LiDAR)."""
        return self.mask.sum(axis=0).astype(np.int64)

    def modalities(self) -> frozenset:
        """Modalities with at least one observed sample."""
        present = self.mask.any(axis=0)
        return frozenset(q.value for q, p in zip(MODALITIES, present) if p)

    def to_model_input(self, gps_scale: float) -> ModelInput:
        return ModelInput(self.gps / gps_scale, self.rgb.astype(np.float64),
                          self.lidar.astype(np.float64), self.mask.copy(),
                          self.fill, self.fill_mask)


def empty_dataset(like: VehicleDataset) -> VehicleDataset:
    return like.subset(np.arange(0))


def split_local(ds: VehicleDataset, rng: np.random.Generator,
                fractions=(0.8, 0.1, 0.1)):
    """Shuffle and cut into local train / local validation / global-test parts."""
    n = len(ds)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return (ds.subset(np.sort(perm[:n_train])),
            ds.subset(np.sort(perm[n_train:n_train + n_val])),
            ds.subset(np.sort(perm[n_train + n_val:])))


def save_dataset(path: str | Path, datasets: list[VehicleDataset], manifest: dict) -> None:
    """Write vehicles' samples plus a manifest. ``manifest`` must carry
    ``num_beams``, ``num_antennas``, ``rgb_shape`` and ``lidar_shape``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    allds = VehicleDataset.concat(datasets)
    vehicle = np.concatenate([np.full(len(d), v, dtype=np.int64) for v, d in enumerate(datasets)])
    arrays = {
        "ids": allds.ids.astype(np.int64), "vehicle": vehicle,
        "gps": allds.gps.astype(np.float64), "rgb": allds.rgb.astype(np.float64),
        "lidar": allds.lidar.astype(np.int8), "label": allds.labels.astype(np.int64),
        "mask": allds.mask.astype(bool), "synthetic": allds.synthetic.astype(bool),
        "channel_re": allds.channels.real.astype(np.float64),
        "channel_im": allds.channels.imag.astype(np.float64),
    }
    man = dict(manifest)
    man.update(format=FORMAT_TAG, version=FORMAT_VERSION,
               trials=[{"vehicle": v, "count": len(d)} for v, d in enumerate(datasets)],
               num_samples=len(allds))
    write_npz(path / "samples.npz", arrays)
    write_json(path / "manifest.json", man)


def load_dataset(path: str | Path) -> tuple[list[VehicleDataset], dict]:
    """Load and validate a dataset directory. Returns ``(vehicles, manifest)``."""
    path = Path(path)
    try:
        man = read_json(path / "manifest.json")
        arr = read_npz(path / "samples.npz")
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read dataset at {path}: {exc}") from exc
    if man.get("format") != FORMAT_TAG or man.get("version") != FORMAT_VERSION:
        raise LoadError("unknown dataset format or version")
    m = int(man["num_beams"])
    n_t = int(man["num_antennas"])
    rgb_len = int(np.prod(man["rgb_shape"]))
    lidar_len = int(np.prod(man["lidar_shape"]))
    n = arr["label"].shape[0]
    expected = {"gps": (n, 2), "rgb": (n, rgb_len), "lidar": (n, lidar_len), "mask": (n, 3),
                "channel_re": (n, n_t), "channel_im": (n, n_t), "ids": (n,), "vehicle": (n,),
                "synthetic": (n,)}
    for key, shape in expected.items():
        if key not in arr:
            raise LoadError(f"missing array {key!r}")
        if arr[key].shape != shape:
            raise LoadError(f"array {key!r} has shape {arr[key].shape}, expected {shape}")
    trials = man.get("trials", [])
    if sum(t["count"] for t in trials) != n:
        raise LoadError("manifest trial counts do not sum to the number of samples")
    for i in range(n):
        if not 0 <= arr["label"][i] < m:
            raise LoadError(f"label {arr['label'][i]} outside 0..{m - 1}", row=i)
        if arr["mask"][i, 2] and not lidar_is_valid(arr["lidar"][i]):
            raise LoadError("LiDAR cells must lie in {0,1,-1,-2} with one TX and one RX mark", row=i)
        if not np.all(np.isfinite(arr["gps"][i])) or not np.all(np.isfinite(arr["rgb"][i])):
            raise LoadError("non-finite sensor value", row=i)
    vehicles = []
    for t in trials:
        sel = np.flatnonzero(arr["vehicle"] == t["vehicle"])
        if sel.size != t["count"]:
            raise LoadError(f"vehicle {t['vehicle']} has {sel.size} rows, manifest says {t['count']}")
        channels = np.empty((sel.size, n_t), dtype=np.complex128)
        channels.real = arr["channel_re"][sel]
        channels.imag = arr["channel_im"][sel]
        vehicles.append(VehicleDataset(
            ids=arr["ids"][sel], gps=arr["gps"][sel], rgb=arr["rgb"][sel],
            lidar=arr["lidar"][sel], labels=arr["label"][sel], mask=arr["mask"][sel],
            synthetic=arr["synthetic"][sel],
            channels=channels))
    return vehicles, man
