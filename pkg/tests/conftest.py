import numpy as np
import pytest

from scatterpos.datagen import DatasetBundle, Partition, generate_bundle
from scatterpos.persistence import bundled_calibration
from scatterpos.physics import CalibrationSet, FrequencyGrid, Permittivity


@pytest.fixture(scope="session")
def calib_grid():
    return bundled_calibration()


@pytest.fixture(scope="session")
def small_bundle(calib_grid):
    calib, grid = calib_grid
    return generate_bundle(calib, grid, experiments=5, holdout=1, samples_per_experiment=120,
                           noise_sigma_rel=0.01, drift_scale=0.02, seed=11)


def random_calibration(rng, n=121, eps_imag=0.01, stroke=1815.0):
    """Passive random calibration: |s33| < 0.9 everywhere."""
    def cplx(scale):
        return scale * (rng.uniform(0.2, 1.0, n) * np.exp(1j * rng.uniform(-np.pi, np.pi, n)))

    grid = FrequencyGrid.uniform(n)
    calib = CalibrationSet(s21=cplx(0.1), s33=cplx(0.85), s23s13=cplx(0.5),
                           permittivity=Permittivity(rng.uniform(1.5, 3.0), eps_imag),
                           stroke_mm=stroke)
    return calib, grid


def teacher_bundle(n=2000, stroke=1815.0, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 121)) + 1j * rng.normal(size=(n, 121))
    a = rng.normal(size=242)
    z = np.concatenate([X.real, X.imag], axis=1) @ a
    y = stroke * (0.5 + 0.1 * z / z.std())
    tr, te = slice(0, int(0.8 * n)), slice(int(0.8 * n), n)
    return DatasetBundle(Partition("train", X[tr], y[tr]), Partition("test_random", X[te], y[te]),
                         Partition("test_new", X[te], y[te]), {}, stroke)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
