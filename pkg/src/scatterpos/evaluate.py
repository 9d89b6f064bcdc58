"""Accuracy metrics, the fixed-calibration physical baseline, and ablation grids."""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .nn import ModelSpec, build_model, reference_spec, reference_specs
from .physics import CalibrationSet, FrequencyGrid, InversionOptions, PositionInverter
from .train import TrainConfig, train

log = logging.getLogger(__name__)

CSV_FIELDS = ("model", "framework", "bn", "fe", "cvnn", "activation", "seed", "partition",
              "me_mm", "mae_mm", "rmse_mm", "re_percent", "params", "train_seconds")
ACTIVATION_GRID = ("sigmoid", "selu", "relu", "leaky_relu")
PHYSICAL = "physical_baseline"


@dataclass(frozen=True)
class MetricsReport:
    me_mm: float
    mae_mm: float
    rmse_mm: float
    re_percent: float
    n_samples: int
    partition: str = ""
    model: str = ""


def metrics(pred_mm, target_mm, stroke_mm: float, partition: str = "",
            model: str = "") -> MetricsReport:
    pred = np.asarray(pred_mm, dtype=np.float64).ravel()
    target = np.asarray(target_mm, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ArgumentError("metrics need at least one sample")
    if pred.shape != target.shape:
        raise ShapeError(f"prediction length {pred.size} != target length {target.size}")
    if not stroke_mm > 0:
        raise ArgumentError("stroke must be positive")
    err = pred - target
    rmse = float(np.sqrt(np.mean(err * err)))
    return MetricsReport(me_mm=float(np.mean(err)), mae_mm=float(np.mean(np.abs(err))),
                         rmse_mm=rmse, re_percent=100.0 * rmse / stroke_mm,
                         n_samples=int(pred.size), partition=partition, model=model)


class PhysicalBaseline:
    """Analytic inversion with one fixed calibration, whatever the drift."""

    name = PHYSICAL

    def __init__(self, calib: CalibrationSet, grid: FrequencyGrid,
                 opts: InversionOptions | None = None):
        self.calib = calib
        self.inverter = PositionInverter(calib, grid, opts or InversionOptions())

    def predict_mm(self, spectra: np.ndarray) -> np.ndarray:
        return self.inverter.invert_many(np.atleast_2d(spectra))


def evaluate_model(model, partition, stroke_mm: float | None = None) -> MetricsReport:
    """Metrics of a trained :class:`Model` or a :class:`PhysicalBaseline` on a partition."""
    if isinstance(model, PhysicalBaseline):
        stroke = model.calib.stroke_mm if stroke_mm is None else stroke_mm
        name = model.name
    else:
        stroke = stroke_mm if stroke_mm is not None else model.stroke_mm
        name = model.spec.name
    if stroke is None:
        raise ArgumentError("stroke_mm is unknown for this model")
    pred = model.predict_mm(partition.X)
    return metrics(pred, partition.y, stroke, partition.name, name)


# -- ablation ------------------------------------------------------------------

@dataclass
class AblationRow:
    model: str
    framework: str
    bn: bool
    fe: str
    cvnn: bool
    activation: str
    seed: str
    partition: str
    me_mm: float
    mae_mm: float
    rmse_mm: float
    re_percent: float
    params: int
    train_seconds: float


def _row(spec: ModelSpec | None, seed, rep: MetricsReport, params: int,
         seconds: float) -> AblationRow:
    if spec is None:
        return AblationRow(PHYSICAL, "physical", False, "off", False, "-", str(seed),
                           rep.partition, rep.me_mm, rep.mae_mm, rep.rmse_mm, rep.re_percent,
                           0, 0.0)
    return AblationRow(spec.name, spec.framework, spec.bn, spec.fe, spec.cvnn, spec.activation,
                       str(seed), rep.partition, rep.me_mm, rep.mae_mm, rep.rmse_mm,
                       rep.re_percent, params, seconds)


def _run_cell(args):
    spec, seed, bundle, cfg, partition = args
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
    model = build_model(spec, seed)
    t0 = time.perf_counter()
    model, _ = train(model, bundle, cfg)
    seconds = time.perf_counter() - t0
    rep = evaluate_model(model, bundle.partition(partition))
    log.info("%s seed %d: %s rmse %.3f mm", spec.name, seed, partition, rep.rmse_mm)
    return _row(spec, seed, rep, model.param_count(), seconds)


def _median_row(rows: list[AblationRow]) -> AblationRow:
    first = rows[0]
    med = {k: float(np.median([getattr(r, k) for r in rows]))
           for k in ("me_mm", "mae_mm", "rmse_mm", "re_percent", "train_seconds")}
    return AblationRow(first.model, first.framework, first.bn, first.fe, first.cvnn,
                       first.activation, "median", first.partition, params=first.params, **med)


@dataclass
class AblationResult:
    per_seed: list
    medians: list
    baseline: AblationRow | None = None

    @property
    def rows(self) -> list:
        extra = [self.baseline] if self.baseline is not None else []
        return self.per_seed + self.medians + extra

    def median_rmse(self) -> dict[str, float]:
        out = {r.model: r.rmse_mm for r in self.medians}
        if self.baseline is not None:
            out[PHYSICAL] = self.baseline.rmse_mm
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            d = asdict(r)
            for k in ("me_mm", "mae_mm", "rmse_mm", "re_percent", "train_seconds"):
                d[k] = repr(float(d[k]))
            w.writerow(d)
        return buf.getvalue()

    def table(self) -> str:
        """Median rows in an aligned text table."""
        head = ("model", "framework", "BN", "FE", "CVNN", "act", "ME", "MAE", "RMSE", "RE%",
                "params")
        body = []
        for r in self.medians + ([self.baseline] if self.baseline is not None else []):
            mark = lambda b: "x" if b else "-"
            body.append((r.model, r.framework, mark(r.bn), r.fe if r.fe != "off" else "-",
                         mark(r.cvnn), r.activation, f"{r.me_mm:.2f}", f"{r.mae_mm:.2f}",
                         f"{r.rmse_mm:.2f}", f"{r.re_percent:.3f}", str(r.params)))
        widths = [max(len(str(c)) for c in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
        return "\n".join(lines) + "\n"


def ablation_run(bundle, specs: dict[str, ModelSpec] | list[ModelSpec], cfg: TrainConfig,
                 seeds=(0, 1, 2), *, partition: str = "test_new", jobs: int = 1,
                 baseline: PhysicalBaseline | None = None) -> AblationResult:
    """Train every spec for every seed and report metrics on ``partition``.

    Cells are independent, so ``jobs > 1`` runs them in worker processes; the
    result does not depend on the job count.
    """
    if isinstance(specs, dict):
        specs = list(specs.values())
    seeds = [int(s) for s in seeds]
    if not specs or not seeds:
        raise ArgumentError("ablation needs at least one spec and one seed")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ArgumentError("spec names in an ablation grid must be unique")
    cells = [(spec, seed, bundle, cfg, partition) for spec in specs for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_run_cell, cells))
    else:
        per_seed = [_run_cell(c) for c in cells]
    medians = [_median_row([r for r in per_seed if r.model == n]) for n in names]
    base_row = None
    if baseline is not None:
        rep = evaluate_model(baseline, bundle.partition(partition), bundle.stroke_mm)
        base_row = _row(None, "-", rep, 0, 0.0)
    return AblationResult(per_seed, medians, base_row)


def full_grid(activation: str = "sigmoid", fe_mode: str = "shared") -> dict[str, ModelSpec]:
    return reference_specs(activation, fe_mode)


def activation_grid(base: str = "mlp_bn") -> dict[str, ModelSpec]:
    return {f"{base}_{a}": reference_spec(base, activation=a, name_override=f"{base}_{a}")
            for a in ACTIVATION_GRID}


# -- ordering claims ----------------------------------------------------------------

@dataclass(frozen=True)
class OrderingCheck:
    label: str
    claim: str
    passed: bool
    detail: str


def ordering_checks(med: dict[str, float]) -> list[OrderingCheck]:
    """The five qualitative orderings on median test RMSE; missing models fail."""
    def lt(a, b):
        if a not in med or b not in med:
            return False, f"missing {a if a not in med else b}"
        return med[a] < med[b], f"{a} {med[a]:.3f} vs {b} {med[b]:.3f} mm"

    checks = []
    for label, a, b in (("a", "mlp_fe", "mlp_baseline"), ("b", "mlp_fe_cvnn", "mlp_baseline"),
                        ("c", "cnn", "mlp_baseline")):
        ok, detail = lt(a, b)
        checks.append(OrderingCheck(label, f"{a} < {b}", ok, detail))

    nets = {k: v for k, v in med.items() if k != PHYSICAL}
    best = "cnn_fe_cvnn"
    if best in nets:
        worse = [k for k, v in nets.items() if k != best and v < nets[best]]
        ok = not worse
        detail = (f"{best} {nets[best]:.3f} mm" if ok
                  else f"beaten by {', '.join(sorted(worse))}")
    else:
        ok, detail = False, f"missing {best}"
    checks.append(OrderingCheck("d", f"{best} <= every other spec", ok, detail))

    if PHYSICAL in med and nets:
        worst = max(nets, key=nets.get)
        ok = all(v < med[PHYSICAL] for v in nets.values())
        detail = f"worst net {worst} {nets[worst]:.3f} vs physical {med[PHYSICAL]:.3f} mm"
    else:
        ok, detail = False, "missing physical baseline or trained specs"
    checks.append(OrderingCheck("e", "every spec < physical baseline", ok, detail))
    return checks


def ordering_summary(checks: list[OrderingCheck]) -> str:
    lines = [f"({c.label}) {'PASS' if c.passed else 'FAIL'}  {c.claim}  [{c.detail}]"
             for c in checks]
    return "\n".join(lines) + "\n"

