"""Synthetic experiments: motion profiles, calibration drift, measurement
noise, and the train / random-split / new-experiment partitioning.

Random streams come from numpy's Philox4x64-10 counter-based generator,
keyed through ``SeedSequence([seed, stream])``, so every quantity is a pure
function of the scenario seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ArgumentError, DomainError
from .physics import (CalibrationSet, FrequencyGrid, Permittivity, TransmissionSpectrum,
                      forward_many)

RNG_NAME = "numpy.random.Philox (Philox4x64-10), SeedSequence([seed, stream])"
DRIFT_ALPHA = -5e-4  # per degC
REFERENCE_TEMP_C = 25.0
DRIFT_POLY_ORDER = 3
JITTER_CENTER_SLOWDOWN = 0.1
_S33_CAP = 0.999

# stream tags
_POSITIONS, _DRIFT, _NOISE, _SPLIT, _SCENARIOS = 1, 2, 3, 4, 5


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream])))


def _as_rng(seed_or_rng, stream: int) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(seed_or_rng, stream)


class ProfileKind(str, Enum):
    CONSTANT_SWEEP = "constant_sweep"
    JITTER = "jitter"
    MIXED = "mixed"


@dataclass(frozen=True)
class MotionProfile:
    kind: ProfileKind = ProfileKind.CONSTANT_SWEEP
    speed_mm_s: float = 100.0
    duration_s: float = 250.0
    sample_rate_hz: float = 10.0
    jitter_amplitude_mm: float = 0.0
    jitter_period_s: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ProfileKind(self.kind))
        for name in ("speed_mm_s", "duration_s", "sample_rate_hz", "jitter_period_s"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ArgumentError(f"{name} must be > 0, got {v}")
        if not self.jitter_amplitude_mm >= 0:
            raise ArgumentError("jitter_amplitude_mm must be >= 0")
        if self.n_samples < 1:
            raise ArgumentError("profile yields no samples (duration * sample rate < 1)")

    @property
    def n_samples(self) -> int:
        return int(math.floor(self.duration_s * self.sample_rate_hz))


@dataclass(frozen=True)
class ScenarioConfig:
    temperature_c: float = 25.0
    noise_sigma_rel: float = 0.0
    calib_drift_scale: float = 0.0
    profile: MotionProfile = field(default_factory=MotionProfile)
    rng_seed: int = 0
    temperature_range: tuple[float, float] = (25.0, 95.0)

    def __post_init__(self):
        lo, hi = self.temperature_range
        if not lo <= self.temperature_c <= hi:
            raise ArgumentError(f"temperature {self.temperature_c} outside [{lo}, {hi}]")
        if self.noise_sigma_rel < 0 or self.calib_drift_scale < 0:
            raise ArgumentError("noise and drift scales must be >= 0")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ArgumentError("rng_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        p = self.profile
        return {
            "temperature_c": self.temperature_c,
            "noise_sigma_rel": self.noise_sigma_rel,
            "calib_drift_scale": self.calib_drift_scale,
            "rng_seed": int(self.rng_seed),
            "profile": {"kind": p.kind.value, "speed_mm_s": p.speed_mm_s,
                        "duration_s": p.duration_s, "sample_rate_hz": p.sample_rate_hz,
                        "jitter_amplitude_mm": p.jitter_amplitude_mm,
                        "jitter_period_s": p.jitter_period_s},
        }


@dataclass
class Experiment:
    id: str
    scenario: ScenarioConfig
    calibration: CalibrationSet
    positions_mm: np.ndarray
    spectra: np.ndarray  # complex, (n, n_freq)

    @property
    def samples(self) -> list[tuple[float, TransmissionSpectrum]]:
        return [(float(L), TransmissionSpectrum.from_complex(t))
                for L, t in zip(self.positions_mm, self.spectra)]

    def __len__(self) -> int:
        return self.positions_mm.size


@dataclass
class Partition:
    name: str
    X: np.ndarray  # complex spectra, (n, n_freq)
    y: np.ndarray  # positions in mm, (n,)

    def __len__(self) -> int:
        return self.y.size


@dataclass
class DatasetBundle:
    train: Partition
    test_random: Partition
    test_new: Partition
    manifest: dict
    stroke_mm: float

    def partition(self, name: str) -> Partition:
        if name not in ("train", "test_random", "test_new"):
            raise ArgumentError(f"unknown partition {name!r}")
        return getattr(self, name)


def _triangle(travel: np.ndarray, stroke: float) -> np.ndarray:
    """Fold an unbounded travel distance onto a 0 -> stroke -> 0 path."""
    phase = np.mod(travel, 2.0 * stroke)
    return np.where(phase <= stroke, phase, 2.0 * stroke - phase)


def _jitter(t: np.ndarray, profile: MotionProfile, stroke: float, start: float,
            center_speed: float, phase: float) -> np.ndarray:
    center = _triangle(start + center_speed * t, stroke)
    if profile.jitter_amplitude_mm == 0:
        return center
    return center + profile.jitter_amplitude_mm * np.sin(
        2.0 * np.pi * t / profile.jitter_period_s + phase)


def generate_positions(profile: MotionProfile, stroke_mm: float, seed) -> np.ndarray:
    """Piston positions sampled at ``profile.sample_rate_hz``, clamped to the stroke.

    constant_sweep runs a triangle wave from 0 at ``speed_mm_s``. jitter is a
    sinusoid about a centre that travels at ``speed_mm_s`` from a seeded start.
    mixed sweeps for the first half of the samples, then jitters about a
    centre that starts where the sweep ended and moves ten times slower.
    """
    rng = _as_rng(seed, _POSITIONS)
    n = profile.n_samples
    t = np.arange(n) / profile.sample_rate_hz
    start = rng.uniform(0.0, stroke_mm)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if profile.kind is ProfileKind.CONSTANT_SWEEP:
        pos = _triangle(profile.speed_mm_s * t, stroke_mm)
    elif profile.kind is ProfileKind.JITTER:
        pos = _jitter(t, profile, stroke_mm, start, profile.speed_mm_s, phase)
    else:
        n_sweep = n // 2
        sweep = _triangle(profile.speed_mm_s * t[:n_sweep], stroke_mm)
        # continue the centre from the sweep's last travel distance
        travel0 = profile.speed_mm_s * n_sweep / profile.sample_rate_hz
        t_rest = t[n_sweep:] - t[n_sweep] if n > n_sweep else t[n_sweep:]
        rest = _jitter(t_rest, profile, stroke_mm, travel0,
                       profile.speed_mm_s * JITTER_CENTER_SLOWDOWN, phase)
        pos = np.concatenate([sweep, rest])
    return np.clip(pos, 0.0, stroke_mm)


def drift_calibration(base: CalibrationSet, scenario: ScenarioConfig,
                      alpha: float = DRIFT_ALPHA) -> CalibrationSet:
    """Temperature-scaled permittivity plus a smooth per-experiment S-parameter
    perturbation (1 + scale * g), g a random cubic over normalised frequency."""
    factor = 1.0 + alpha * (scenario.temperature_c - REFERENCE_TEMP_C)
    eps_real = base.permittivity.eps_real * factor
    if not eps_real > 0:
        raise DomainError(f"drifted eps_real {eps_real} is not positive")
    perm = Permittivity(eps_real, base.permittivity.eps_imag * factor)
    rng = make_rng(scenario.rng_seed, _DRIFT)
    n = len(base)
    u = np.linspace(0.0, 1.0, n)
    powers = u[None, :] ** np.arange(DRIFT_POLY_ORDER + 1)[:, None]
    drifted = []
    for s in (base.s21, base.s33, base.s23s13):
        coef = (rng.standard_normal(DRIFT_POLY_ORDER + 1)
                + 1j * rng.standard_normal(DRIFT_POLY_ORDER + 1)) / np.sqrt(2.0)
        g = coef @ powers
        drifted.append(s * (1.0 + scenario.calib_drift_scale * g))
    s21, s33, s23s13 = drifted
    mag = np.abs(s33)
    if np.any(mag >= 1.0):
        s33 = np.where(mag >= 1.0, s33 * (_S33_CAP / np.maximum(mag, 1e-300)), s33)
    return replace(base, s21=s21, s33=s33, s23s13=s23s13, permittivity=perm)


def _noise_rows(spectra: np.ndarray, sigma_rel: float, rng: np.random.Generator) -> np.ndarray:
    if sigma_rel == 0:
        return spectra.copy()
    scale = sigma_rel * np.median(np.abs(spectra), axis=-1, keepdims=True)
    noise = rng.standard_normal(spectra.shape) + 1j * rng.standard_normal(spectra.shape)
    return spectra + scale * noise


def add_noise(spec: TransmissionSpectrum, sigma_rel: float, seed) -> TransmissionSpectrum:
    """Independent Gaussian noise on re and im, std = sigma_rel * median|t|."""
    if sigma_rel < 0:
        raise ArgumentError("sigma_rel must be >= 0")
    if sigma_rel == 0:
        return TransmissionSpectrum(spec.re.copy(), spec.im.copy())
    out = _noise_rows(spec.values[None, :], sigma_rel, _as_rng(seed, _NOISE))[0]
    return TransmissionSpectrum.from_complex(out)


def generate_experiment(base: CalibrationSet, grid: FrequencyGrid, scenario: ScenarioConfig,
                        exp_id: str) -> Experiment:
    base.check_grid(grid)
    calib = drift_calibration(base, scenario)
    positions = generate_positions(scenario.profile, base.stroke_mm, scenario.rng_seed)
    clean = forward_many(positions, calib, grid)
    spectra = _noise_rows(clean, scenario.noise_sigma_rel, make_rng(scenario.rng_seed, _NOISE))
    return Experiment(exp_id, scenario, calib, positions, spectra)


def split_dataset(experiments: list[Experiment], n_holdout: int, split_frac: float,
                  seed: int, stroke_mm: float | None = None) -> DatasetBundle:
    """Hold out whole experiments as ``test_new``; shuffle the remaining samples
    and cut them ``split_frac`` / ``1 - split_frac`` into train / test_random."""
    n_exp = len(experiments)
    if not 0 <= n_holdout < n_exp:
        raise ArgumentError(f"n_holdout={n_holdout} must be smaller than {n_exp} experiments")
    if not 0.0 < split_frac < 1.0:
        raise ArgumentError("split_frac must lie in (0, 1)")
    ids = [e.id for e in experiments]
    if len(set(ids)) != n_exp:
        raise ArgumentError("experiment ids must be unique")
    rng = make_rng(seed, _SPLIT)
    held = sorted(int(i) for i in rng.choice(n_exp, size=n_holdout, replace=False))
    kept = [i for i in range(n_exp) if i not in held]

    def stack(idx):
        if not idx:
            n_f = experiments[0].spectra.shape[1]
            return np.empty((0, n_f), dtype=np.complex128), np.empty(0)
        return (np.concatenate([experiments[i].spectra for i in idx]),
                np.concatenate([experiments[i].positions_mm for i in idx]))

    X_pool, y_pool = stack(kept)
    perm = rng.permutation(y_pool.size)
    n_train = int(round(split_frac * y_pool.size))
    tr, te = perm[:n_train], perm[n_train:]
    X_new, y_new = stack(held)
    if stroke_mm is None:
        stroke_mm = experiments[0].calibration.stroke_mm
    manifest = {
        "seeds": {"split": int(seed),
                  "experiments": {e.id: int(e.scenario.rng_seed) for e in experiments}},
        "rng": RNG_NAME,
        "partitions": {"train": [ids[i] for i in kept], "test_random": [ids[i] for i in kept],
                       "test_new": [ids[i] for i in held]},
        "split": {"n_holdout": n_holdout, "split_frac": split_frac},
        "experiments": [dict(id=e.id, n_samples=len(e), **e.scenario.to_dict())
                        for e in experiments],
    }
    return DatasetBundle(Partition("train", X_pool[tr], y_pool[tr]),
                         Partition("test_random", X_pool[te], y_pool[te]),
                         Partition("test_new", X_new, y_new),
                         manifest, float(stroke_mm))


@dataclass(frozen=True)
class Preset:
    experiments: int
    holdout: int
    samples_per_experiment: int
    noise_sigma_rel: float
    drift_scale: float
    split_frac: float = 0.8


PRESETS = {
    "paper-shape": Preset(experiments=20, holdout=3, samples_per_experiment=2500,
                          noise_sigma_rel=0.01, drift_scale=0.02),
}


def make_scenarios(n: int, seed: int, samples_per_experiment: int, noise_sigma_rel: float,
                   drift_scale: float, sample_rate_hz: float = 10.0,
                   temperature_c: float | None = None) -> list[ScenarioConfig]:
    """Seeded scenario list covering 25-95 degC (one temperature per stratum,
    strata shuffled) with motion profiles cycling sweep / jitter / mixed.

    A fixed ``temperature_c`` pins every scenario to that temperature.
    """
    rng = make_rng(seed, _SCENARIOS)
    lo, hi = 25.0, 95.0
    strata = rng.permutation(n)
    temps = lo + (hi - lo) * (strata + rng.uniform(size=n)) / n
    if temperature_c is not None:
        temps = np.full(n, float(temperature_c))
    kinds = [ProfileKind.CONSTANT_SWEEP, ProfileKind.JITTER, ProfileKind.MIXED]
    seeds = rng.integers(0, 2**63, size=n)
    duration = samples_per_experiment / sample_rate_hz
    out = []
    for i in range(n):
        kind = kinds[i % 3]
        if kind is ProfileKind.JITTER:
            speed = rng.uniform(5.0, 20.0)
        else:
            speed = rng.uniform(50.0, 300.0)
        profile = MotionProfile(kind=kind, speed_mm_s=speed, duration_s=duration,
                                sample_rate_hz=sample_rate_hz,
                                jitter_amplitude_mm=rng.uniform(5.0, 50.0),
                                jitter_period_s=rng.uniform(1.0, 5.0))
        out.append(ScenarioConfig(temperature_c=float(np.clip(temps[i], lo, hi)),
                                  noise_sigma_rel=noise_sigma_rel,
                                  calib_drift_scale=drift_scale, profile=profile,
                                  rng_seed=int(seeds[i])))
    return out


def generate_bundle(base: CalibrationSet, grid: FrequencyGrid, *, experiments: int,
                    holdout: int, samples_per_experiment: int, noise_sigma_rel: float,
                    drift_scale: float, seed: int, split_frac: float = 0.8,
                    temperature_c: float | None = None) -> DatasetBundle:
    if not 0 <= holdout < experiments:
        raise ArgumentError(f"holdout={holdout} must be smaller than experiments={experiments}")
    scenarios = make_scenarios(experiments, seed, samples_per_experiment, noise_sigma_rel,
                               drift_scale, temperature_c=temperature_c)
    exps = [generate_experiment(base, grid, sc, f"exp{i:03d}") for i, sc in enumerate(scenarios)]
    bundle = split_dataset(exps, holdout, split_frac, seed, base.stroke_mm)
    bundle.manifest["seeds"]["generator"] = int(seed)
    return bundle
