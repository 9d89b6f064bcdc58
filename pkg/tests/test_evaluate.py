import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from scatterpos.datagen import generate_bundle
from scatterpos.errors import ArgumentError, ShapeError
from scatterpos.evaluate import (CSV_FIELDS, PHYSICAL, PhysicalBaseline, ablation_run,
                                 activation_grid, evaluate_model, full_grid, metrics,
                                 ordering_checks, ordering_summary)
from scatterpos.nn import build_model, reference_spec
from scatterpos.train import TrainConfig, train

from conftest import teacher_bundle

finite = st.floats(-1e4, 1e4, allow_nan=False)


def test_metrics_zero_error():
    r = metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 1815)
    assert (r.me_mm, r.mae_mm, r.rmse_mm, r.re_percent, r.n_samples) == (0, 0, 0, 0, 3)


def test_metrics_hand_values():
    r = metrics([1.0, -1.0, 3.0, 1.0], [0.0, 0.0, 0.0, 0.0], 200)
    assert r.me_mm == 1.0 and r.mae_mm == 1.5
    assert r.rmse_mm == pytest.approx(np.sqrt(3.0))
    assert r.re_percent == pytest.approx(100 * np.sqrt(3.0) / 200)


@pytest.mark.parametrize("rmse,re", [(5.56, 0.31), (13.61, 0.75)])
def test_relative_error_reported_values(rmse, re):
    r = metrics([rmse, -rmse], [0.0, 0.0], 1815.0)
    assert r.rmse_mm == pytest.approx(rmse)
    assert round(r.re_percent, 2) == re


def test_metrics_errors():
    with pytest.raises(ArgumentError):
        metrics([], [], 1815)
    with pytest.raises(ArgumentError):
        metrics([1.0], [1.0], 0.0)
    with pytest.raises(ShapeError):
        metrics([1.0, 2.0], [1.0], 1815)


@given(arrays(float, st.integers(1, 50), elements=finite), st.integers(0, 2**32 - 1))
def test_metrics_invariants(err, seed):
    target = np.random.default_rng(seed).uniform(0, 1815, err.size)
    pred = target + err
    r = metrics(pred, target, 1815.0)
    assert r.mae_mm >= abs(r.me_mm) - 1e-9 and r.rmse_mm >= 0 and r.mae_mm >= 0
    perm = np.random.default_rng(seed).permutation(err.size)
    r2 = metrics(pred[perm], target[perm], 1815.0)
    assert r2.rmse_mm == pytest.approx(r.rmse_mm, rel=1e-12, abs=1e-12)
    assert r2.me_mm == pytest.approx(r.me_mm, rel=1e-9, abs=1e-9)
    assert metrics(pred, target, 3630.0).re_percent == pytest.approx(r.re_percent / 2)


@given(arrays(float, st.integers(1, 30), elements=finite), finite)
def test_metrics_constant_shift(err, c):
    base = metrics(err, np.zeros_like(err), 1.0).me_mm
    assert metrics(err + c, np.zeros_like(err), 1.0).me_mm == pytest.approx(base + c, abs=1e-6)


# -- model evaluation -------------------------------------------------------------------

def test_network_fits_own_training_partition():
    b = teacher_bundle()
    m, _ = train(build_model(reference_spec("mlp_baseline"), 0), b, TrainConfig(epochs=200))
    rep = evaluate_model(m, b.train)
    assert rep.rmse_mm < 0.01 * b.stroke_mm
    assert rep.partition == "train" and rep.model == "mlp_baseline"


def test_physical_baseline_noiseless_and_drifted(calib_grid):
    calib, grid = calib_grid
    kw = dict(experiments=3, holdout=1, samples_per_experiment=60, seed=5,
              noise_sigma_rel=0.0)
    clean = generate_bundle(calib, grid, drift_scale=0.0, temperature_c=25.0, **kw)
    drifted = generate_bundle(calib, grid, drift_scale=0.02, **kw)
    phys = PhysicalBaseline(calib, grid)
    r0 = evaluate_model(phys, clean.test_new)
    r1 = evaluate_model(phys, drifted.test_new)
    assert r0.model == PHYSICAL
    assert r0.rmse_mm < 1e-3
    assert r1.rmse_mm > r0.rmse_mm
    # the two bundles share positions: only the calibration differs
    assert np.array_equal(clean.test_new.y, drifted.test_new.y)


# -- ablation ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_bundle(calib_grid):
    calib, grid = calib_grid
    return generate_bundle(calib, grid, experiments=4, holdout=1, samples_per_experiment=40,
                           noise_sigma_rel=0.01, drift_scale=0.02, seed=1)


def test_full_grid_counts(tiny_bundle, calib_grid):
    calib, grid = calib_grid
    res = ablation_run(tiny_bundle, full_grid(), TrainConfig(epochs=1), seeds=(0, 1, 2),
                       baseline=PhysicalBaseline(calib, grid))
    assert len(res.per_seed) == 30 and len(res.medians) == 10
    lines = res.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_FIELDS)
    assert len(lines) == 1 + 30 + 10 + 1
    assert {r.partition for r in res.rows} == {"test_new"}
    med = res.median_rmse()
    assert set(med) == set(full_grid()) | {PHYSICAL}
    for r in res.medians:
        seeds = [x.rmse_mm for x in res.per_seed if x.model == r.model]
        assert r.rmse_mm == np.median(seeds)
    table = res.table().splitlines()
    assert len(table) == 2 + 10 + 1
    assert len({len(l) for l in table[:2]}) == 1


def test_activation_grid_and_determinism(tiny_bundle):
    grid = activation_grid()
    assert [s.activation for s in grid.values()] == ["sigmoid", "selu", "relu", "leaky_relu"]
    assert all(s.bn and s.framework == "mlp" for s in grid.values())
    a = ablation_run(tiny_bundle, grid, TrainConfig(epochs=2), seeds=(4,))
    b = ablation_run(tiny_bundle, grid, TrainConfig(epochs=2), seeds=(4,), jobs=2)
    assert len(a.medians) == 4
    assert a.table() == b.table()
    strip = lambda res: [(r.model, r.seed, r.me_mm, r.rmse_mm) for r in res.rows]
    assert strip(a) == strip(b)


def test_ablation_errors(tiny_bundle):
    with pytest.raises(ArgumentError):
        ablation_run(tiny_bundle, [], TrainConfig(epochs=1))
    spec = reference_spec("mlp_baseline")
    with pytest.raises(ArgumentError):
        ablation_run(tiny_bundle, [spec, spec], TrainConfig(epochs=1))


def test_ordering_checks():
    med = {"mlp_baseline": 5.0, "mlp_fe": 4.0, "mlp_fe_cvnn": 4.5, "cnn": 3.0,
           "cnn_fe_cvnn": 2.0, "cnn_bn": 2.0, PHYSICAL: 10.0}
    checks = ordering_checks(med)
    assert [c.label for c in checks] == list("abcde")
    assert all(c.passed for c in checks)
    med.update(cnn_bn=1.9, mlp_fe=6.0, cnn=11.0)
    got = {c.label: c.passed for c in ordering_checks(med)}
    assert got == {"a": False, "b": True, "c": False, "d": False, "e": False}
    text = ordering_summary(ordering_checks(med))
    assert text.count("PASS") == 1 and text.count("FAIL") == 4
    assert not any(c.passed for c in ordering_checks({}))
