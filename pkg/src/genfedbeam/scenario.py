"""Synthetic V2X beam-selection world.

A base station with an ``N_t``-element half-wavelength ULA sits at the
origin, boresight along +y. Each sample places one vehicle and a handful of
box obstacles on the ground plane, builds a geometric channel (line of sight
plus single-bounce specular reflections off obstacle faces), labels the
sample with the best DFT beam for that channel, and renders three sensor
views: noisy GPS, an RGB-proxy occupancy image and a LiDAR cuboid grid.

LiDAR grid axes are (height, range, lateral). The BS occupies the top height
level of the cell straight in front of the array and is marked ``-1``; the
vehicle sits on the ground level of its own cell, marked ``-2``; obstacle
cells are ``1``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import RX_MARK, TX_MARK, VehicleDataset
from .errors import ConfigurationError


@dataclass
class ScenarioConfig:
    num_vehicles: int = 10
    samples_per_vehicle: int = 150
    num_antennas: int = 16
    num_beams: int = 16
    half_width: float = 40.0          # lateral extent is [-half_width, half_width]
    depth: float = 40.0               # range extent is [0, depth]
    min_distance: float = 5.0
    max_distance: float = 38.0
    vehicle_bias: float = 0.3         # share of each vehicle's samples drawn near its preferred angle
    obstacle_rate: float = 0.3        # Poisson mean of free-standing obstacles
    max_obstacles: int = 4
    blockage_prob: float = 0.3        # chance of an extra obstacle placed on the LoS segment
    obstacle_size: tuple = (3.0, 8.0)
    max_obstacle_levels: int = 3
    num_reflectors: int = 2
    reflection_loss_db: float = 10.0
    blockage_loss_db: float = 30.0
    back_wall: bool = True            # static reflecting facade just beyond the far edge
    gps_noise_std: float = 0.2
    power: float = 1.0
    noise_power: float = 1e-3
    rgb_shape: tuple = (8, 8)         # (range, lateral)
    lidar_shape: tuple = (4, 4, 8)    # (height, range, lateral)

    def __post_init__(self):
        self.obstacle_size = tuple(self.obstacle_size)
        self.rgb_shape = tuple(int(v) for v in self.rgb_shape)
        self.lidar_shape = tuple(int(v) for v in self.lidar_shape)
        for name in ("num_vehicles", "samples_per_vehicle", "num_antennas", "num_beams"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.num_beams < 2:
            raise ConfigurationError("need at least two beams")
        if self.noise_power <= 0 or self.power <= 0:
            raise ConfigurationError("power and noise power must be positive")
        if self.lidar_shape[0] < 2:
            raise ConfigurationError("LiDAR grid needs >= 2 height levels")
        if self.max_obstacle_levels >= self.lidar_shape[0]:
            raise ConfigurationError("obstacles must stay below the BS height level")
        if not 0 < self.min_distance < self.max_distance <= min(self.depth, self.half_width):
            raise ConfigurationError("distance range must fit inside the area")

    @classmethod
    def codebook34(cls, **kw) -> "ScenarioConfig":
        """34-sector codebook preset."""
        kw.setdefault("num_beams", 34)
        return cls(**kw)

    @property
    def gps_scale(self) -> float:
        return float(max(self.half_width, self.depth))

    @property
    def rgb_len(self) -> int:
        return int(np.prod(self.rgb_shape))

    @property
    def lidar_len(self) -> int:
        return int(np.prod(self.lidar_shape))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)


# ---------------------------------------------------------------- antennas

def steering_vector(u: float, num_antennas: int) -> np.ndarray:
    """ULA response for direction sine ``u``; unit modulus per element."""
    return np.exp(1j * np.pi * np.arange(num_antennas) * u)


def beam_directions(num_beams: int) -> np.ndarray:
    """Direction sines of the DFT beams, uniform on [-1, 1). Beam ``M // 2``
    points at boresight."""
    return -1.0 + 2.0 * np.arange(num_beams) / num_beams


def dft_codebook(num_antennas: int, num_beams: int) -> np.ndarray:
    """``(N_t, M)`` matrix of unit-norm beamforming columns."""
    u = beam_directions(num_beams)
    return np.stack([steering_vector(v, num_antennas) for v in u], axis=1) / np.sqrt(num_antennas)


def beam_gains(channels: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """``|h^H w_m|`` for every channel row and every codebook column."""
    return np.abs(np.conj(np.atleast_2d(channels)) @ codebook)


def best_beams(channels: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Exhaustive sweep; ties resolve to the lowest beam index."""
    return np.argmax(beam_gains(channels, codebook), axis=1)


# ---------------------------------------------------------------- geometry

@dataclass
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    levels: int = 1

    def contains(self, p, margin: float = 0.0) -> bool:
        return (self.x0 - margin <= p[0] <= self.x1 + margin
                and self.y0 - margin <= p[1] <= self.y1 + margin)


@dataclass
class SampleGeometry:
    vehicle: np.ndarray
    obstacles: list = field(default_factory=list)
    los_blocked: bool = False


BS_POSITION = np.zeros(2)


def segment_hits_box(a, b, box: Box) -> bool:
    """Slab test for the closed segment a-b against an axis-aligned box."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    t0, t1 = 0.0, 1.0
    for axis, lo, hi in ((0, box.x0, box.x1), (1, box.y0, box.y1)):
        if abs(d[axis]) < 1e-15:
            # near-parallel: test the segment's whole extent on this axis so
            # the result does not depend on which end it starts from
            if max(a[axis], a[axis] + d[axis]) < lo or min(a[axis], a[axis] + d[axis]) > hi:
                return False
            continue
        ta = (lo - a[axis]) / d[axis]
        tb = (hi - a[axis]) / d[axis]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return False
    return True


def _faces(box: Box):
    # (axis of the face plane, plane coordinate, outward sign, span on the other axis)
    return [(0, box.x0, -1, (box.y0, box.y1)), (0, box.x1, 1, (box.y0, box.y1)),
            (1, box.y0, -1, (box.x0, box.x1)), (1, box.y1, 1, (box.x0, box.x1))]


def specular_points(box: Box, tx, rx) -> list[np.ndarray]:
    """Single-bounce specular reflection points on the faces of ``box``
    (image method). A face qualifies when both endpoints are on its outer
    side and the bounce lands within the face."""
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    pts = []
    for axis, c, sign, (lo, hi) in _faces(box):
        if (tx[axis] - c) * sign <= 0 or (rx[axis] - c) * sign <= 0:
            continue
        image = rx.copy()
        image[axis] = 2 * c - rx[axis]
        t = (c - tx[axis]) / (image[axis] - tx[axis])
        p = tx + t * (image - tx)
        other = 1 - axis
        if lo <= p[other] <= hi:
            pts.append(p)
    return pts


def los_blocked(vehicle, obstacles) -> bool:
    return any(segment_hits_box(BS_POSITION, vehicle, box) for box in obstacles)


def static_reflectors(cfg: ScenarioConfig) -> list[Box]:
    if not cfg.back_wall:
        return []
    return [Box(-cfg.half_width, cfg.depth, cfg.half_width, cfg.depth + 2.0, cfg.max_obstacle_levels)]


def build_channel(vehicle, obstacles, cfg: ScenarioConfig, rng: np.random.Generator):
    """Geometric narrowband channel: LoS path (attenuated when blocked) plus
    the ``num_reflectors`` shortest specular bounces off obstacles and the
    static facade."""
    n_t = cfg.num_antennas
    d = float(np.linalg.norm(vehicle))
    blocked = los_blocked(vehicle, obstacles)
    amp = 1.0 / d
    if blocked:
        amp *= 10 ** (-cfg.blockage_loss_db / 20)
    h = amp * np.exp(1j * rng.uniform(0, 2 * np.pi)) * steering_vector(vehicle[0] / d, n_t)
    paths = []
    for box in list(obstacles) + static_reflectors(cfg):
        for p in specular_points(box, BS_POSITION, vehicle):
            length = np.linalg.norm(p) + np.linalg.norm(vehicle - p)
            paths.append((length, p))
    paths.sort(key=lambda t: t[0])
    refl = 10 ** (-cfg.reflection_loss_db / 20)
    for length, p in paths[:cfg.num_reflectors]:
        u = p[0] / np.linalg.norm(p)
        h = h + (refl / length) * np.exp(1j * rng.uniform(0, 2 * np.pi)) * steering_vector(u, n_t)
    return h, blocked


def _random_box(rng, cfg: ScenarioConfig, center=None) -> Box:
    w, h = rng.uniform(*cfg.obstacle_size, size=2)
    if center is None:
        center = (rng.uniform(-cfg.half_width + 5, cfg.half_width - 5),
                  rng.uniform(3.0, cfg.depth - 2))
    levels = int(rng.integers(1, cfg.max_obstacle_levels + 1))
    return Box(center[0] - w / 2, center[1] - h / 2, center[0] + w / 2, center[1] + h / 2, levels)


def place_obstacles(vehicle, rng, cfg: ScenarioConfig) -> list[Box]:
    boxes = []
    n = min(int(rng.poisson(cfg.obstacle_rate)), cfg.max_obstacles)
    candidates = [None] * n
    if rng.uniform() < cfg.blockage_prob:
        t = rng.uniform(0.3, 0.8)
        candidates.append(tuple(t * np.asarray(vehicle)))
    for c in candidates:
        for _ in range(20):
            box = _random_box(rng, cfg, c)
            if not box.contains(vehicle, margin=1.0) and not box.contains(BS_POSITION, margin=2.0):
                boxes.append(box)
                break
    return boxes


# ---------------------------------------------------------------- sensors

def _cell_edges(n: int, lo: float, hi: float) -> np.ndarray:
    return np.linspace(lo, hi, n + 1)


def _overlap(a0, a1, b0, b1):
    return np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0, None)


def render_rgb(vehicle, obstacles, cfg: ScenarioConfig) -> np.ndarray:
    """Top-down occupancy image; each cell's intensity is the covered area
    fraction scaled by ``1 / (1 + distance_to_vehicle / 10)``."""
    ny, nx = cfg.rgb_shape
    ye = _cell_edges(ny, 0.0, cfg.depth)
    xe = _cell_edges(nx, -cfg.half_width, cfg.half_width)
    cell_area = (ye[1] - ye[0]) * (xe[1] - xe[0])
    yc = (ye[:-1] + ye[1:]) / 2
    xc = (xe[:-1] + xe[1:]) / 2
    img = np.zeros((ny, nx))
    for box in obstacles:
        oy = _overlap(ye[:-1], ye[1:], box.y0, box.y1)
        ox = _overlap(xe[:-1], xe[1:], box.x0, box.x1)
        img += np.outer(oy, ox) / cell_area
    img = np.clip(img, 0, 1)
    dist = np.hypot(yc[:, None] - vehicle[1], xc[None, :] - vehicle[0])
    return (img / (1.0 + dist / 10.0)).ravel()


def lidar_cell(point, cfg: ScenarioConfig) -> tuple[int, int]:
    _, nr, nl = cfg.lidar_shape
    r = int(np.clip(np.floor(point[1] / cfg.depth * nr), 0, nr - 1))
    c = int(np.clip(np.floor((point[0] + cfg.half_width) / (2 * cfg.half_width) * nl), 0, nl - 1))
    return r, c


def tx_cell(cfg: ScenarioConfig) -> int:
    """Flat LiDAR index of the BS marker."""
    r, c = lidar_cell(BS_POSITION, cfg)
    return int(np.ravel_multi_index((cfg.lidar_shape[0] - 1, r, c), cfg.lidar_shape))


def rx_cell(vehicle, cfg: ScenarioConfig) -> int:
    r, c = lidar_cell(vehicle, cfg)
    return int(np.ravel_multi_index((0, r, c), cfg.lidar_shape))


def render_lidar(vehicle, obstacles, cfg: ScenarioConfig) -> np.ndarray:
    nh, nr, nl = cfg.lidar_shape
    grid = np.zeros((nh, nr, nl), dtype=np.int8)
    re = _cell_edges(nr, 0.0, cfg.depth)
    le = _cell_edges(nl, -cfg.half_width, cfg.half_width)
    for box in obstacles:
        rows = _overlap(re[:-1], re[1:], box.y0, box.y1) > 0
        cols = _overlap(le[:-1], le[1:], box.x0, box.x1) > 0
        for level in range(min(box.levels, nh - 1)):
            grid[level][np.ix_(rows, cols)] = 1
    flat = grid.ravel()
    flat[tx_cell(cfg)] = TX_MARK
    flat[rx_cell(vehicle, cfg)] = RX_MARK
    return flat


# ---------------------------------------------------------------- scenario

@dataclass
class Scenario:
    config: ScenarioConfig
    seed: int
    codebook: np.ndarray
    vehicles: list[VehicleDataset]
    geometry: list[list[SampleGeometry]]

    @property
    def rx_cells(self) -> np.ndarray:
        """Every vehicle LiDAR cell observed in the scenario (with repeats)."""
        cells = []
        for ds in self.vehicles:
            cells.extend(int(np.flatnonzero(row == RX_MARK)[0]) for row in ds.lidar)
        return np.asarray(cells, dtype=np.int64)


def _sample_position(rng, cfg: ScenarioConfig, preferred_u: float) -> np.ndarray:
    while True:
        if rng.uniform() < cfg.vehicle_bias:
            u = float(np.clip(rng.normal(preferred_u, 0.15), -0.98, 0.98))
        else:
            u = rng.uniform(-0.98, 0.98)
        d = rng.uniform(cfg.min_distance, cfg.max_distance)
        p = np.array([d * u, d * np.sqrt(1 - u * u)])
        if np.linalg.norm(p - BS_POSITION) > 1e-6:
            return p


def generate_scenario(cfg: ScenarioConfig, seed: int) -> Scenario:
    root = np.random.SeedSequence(seed)
    codebook = dft_codebook(cfg.num_antennas, cfg.num_beams)
    vehicles, geometry = [], []
    v_count = cfg.num_vehicles
    for v, child in enumerate(root.spawn(v_count)):
        rng = np.random.default_rng(child)
        preferred = -0.8 + 1.6 * v / max(v_count - 1, 1)
        n = cfg.samples_per_vehicle
        gps = np.zeros((n, 2))
        rgb = np.zeros((n, cfg.rgb_len))
        lidar = np.zeros((n, cfg.lidar_len), dtype=np.int8)
        channels = np.zeros((n, cfg.num_antennas), dtype=np.complex128)
        geoms = []
        for i in range(n):
            pos = _sample_position(rng, cfg, preferred)
            obstacles = place_obstacles(pos, rng, cfg)
            h, blocked = build_channel(pos, obstacles, cfg, rng)
            channels[i] = h
            gps[i] = pos - BS_POSITION + rng.normal(0, cfg.gps_noise_std, 2)
            rgb[i] = render_rgb(pos, obstacles, cfg)
            lidar[i] = render_lidar(pos, obstacles, cfg)
            geoms.append(SampleGeometry(pos, obstacles, blocked))
        labels = best_beams(channels, codebook)
        vehicles.append(VehicleDataset(
            ids=np.arange(v * n, (v + 1) * n, dtype=np.int64), gps=gps, rgb=rgb, lidar=lidar,
            labels=labels.astype(np.int64), mask=np.ones((n, 3), dtype=bool),
            synthetic=np.zeros(n, dtype=bool), channels=channels))
        geometry.append(geoms)
    return Scenario(cfg, seed, codebook, vehicles, geometry)


def dataset_manifest(cfg: ScenarioConfig, seed: int) -> dict:
    return {"num_beams": cfg.num_beams, "num_antennas": cfg.num_antennas,
            "rgb_shape": list(cfg.rgb_shape), "lidar_shape": list(cfg.lidar_shape),
            "seed": seed, "scenario": cfg.to_dict()}


# ---------------------------------------------------------------- rates

def scale_beams(beams: np.ndarray, power: float) -> np.ndarray:
    """Rescale rows so that the total transmit power is exactly ``power``
    with an equal share per served vehicle."""
    beams = np.atleast_2d(beams)
    norms = np.linalg.norm(beams, axis=1, keepdims=True)
    return beams / norms * np.sqrt(power / beams.shape[0])


def sum_rate(channels: np.ndarray, beams: np.ndarray, power: float, noise_power: float) -> float:
    """Multi-user sum rate (bits/s/Hz) for one beam per vehicle.

    ``channels`` and ``beams`` are ``(V, N_t)``; row ``v`` of ``beams`` serves
    vehicle ``v`` and interferes with every other vehicle.
    """
    h = np.atleast_2d(channels)
    w = scale_beams(beams, power)
    gain = np.abs(np.conj(h) @ w.T) ** 2       # gain[v, i] = |h_v^H w_i|^2
    signal = np.diag(gain)
    interference = gain.sum(axis=1) - signal
    return float(np.sum(np.log2(1.0 + signal / (interference + noise_power))))


def rate_ratio(channels: np.ndarray, chosen: np.ndarray, codebook: np.ndarray, power: float,
               noise_power: float, users_per_drop: int = 1) -> float:
    """Sum rate under ``chosen`` beam indices divided by the sum rate under
    sweep-optimal beams, accumulated over consecutive drops of
    ``users_per_drop`` samples served together."""
    channels = np.atleast_2d(channels)
    optimal = best_beams(channels, codebook)
    num = den = 0.0
    for start in range(0, channels.shape[0] - users_per_drop + 1, users_per_drop):
        sl = slice(start, start + users_per_drop)
        num += sum_rate(channels[sl], codebook[:, chosen[sl]].T, power, noise_power)
        den += sum_rate(channels[sl], codebook[:, optimal[sl]].T, power, noise_power)
    return num / den


def sum_rate_ratio(net, dataset: VehicleDataset, codebook: np.ndarray, cfg: ScenarioConfig,
                   users_per_drop: int = 1, held=None) -> float:
    """Rate ratio of the model's predicted beams against beam sweeping."""
    from .beam_model import predict
    _, chosen = predict(net, dataset.to_model_input(cfg.gps_scale), held=held)
    return rate_ratio(dataset.channels, chosen, codebook, cfg.power, cfg.noise_power,
                      users_per_drop)


def load_external_dataset(path):
    """Load an exported dataset directory (see ``genfedbeam.data``)."""
    from .data import load_dataset
    return load_dataset(path)
