import numpy as np
import pytest

from genfedbeam.beam_model import BRANCHES, ArchConfig, build_model, predict
from genfedbeam.data import VehicleDataset
from genfedbeam.federation import RoundConfig, local_update
from genfedbeam.scenario import ScenarioConfig, generate_scenario

TOY_SCALE = 40.0
TOY_TX = 127


def toy_dataset(n, rng, rx_cells=100):
    """Two linearly separable classes in every modality.

    GPS is a class-shifted Gaussian, RGB pixels in [0, 1] are brighter for
    class 1, and LiDAR is a valid grid whose obstacle density depends on the
    class.
    """
    y = np.arange(n) % 2
    s = 2 * y - 1
    gps = np.stack([0.5 * s, np.full(n, 0.5)], axis=1) * TOY_SCALE + rng.normal(0, 4, (n, 2))
    rgb = np.clip(0.5 + 0.2 * s[:, None] + rng.normal(0, 0.15, (n, 64)), 0.0, 1.0)
    lidar = (rng.uniform(size=(n, 128)) < np.where(y[:, None] == 1, 0.3, 0.05)).astype(np.int8)
    lidar[:, TOY_TX] = -1
    lidar[np.arange(n), rng.integers(0, rx_cells, n)] = -2
    return VehicleDataset(np.arange(n), gps, rgb, lidar, y, np.ones((n, 3), dtype=bool),
                          np.zeros(n, dtype=bool), np.zeros((n, 16), dtype=complex))


def train_toy_teacher(seed=0, n=200):
    rng = np.random.default_rng(seed)
    ds = toy_dataset(n, rng)
    net = build_model(ArchConfig(num_beams=2, seed=seed))
    local_update(net, ds, BRANCHES, RoundConfig(local_epochs=30, lr=1e-2, batch_size=32), rng,
                 TOY_SCALE)
    return net, ds


@pytest.fixture(scope="session")
def toy_teacher():
    net, ds = train_toy_teacher()
    _, pred = predict(net, ds.to_model_input(TOY_SCALE))
    assert np.all(pred == ds.labels)
    return net, ds


@pytest.fixture(scope="session")
def small_scenario():
    cfg = ScenarioConfig(num_vehicles=4, samples_per_vehicle=40)
    return generate_scenario(cfg, 3)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
