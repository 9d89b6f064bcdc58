"""AdamW training loop with a linear learning-rate decay over the second
half of the epochs, and early stopping on the random-split test set."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, NumericalError, ShapeError
from .nn import ComplexTensor, InputNorm, Model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    epochs: int = 150
    batch_size: int | None = None  # None: 128 for MLPs, 64 for CNNs
    early_stop_patience: int = 20
    seed: int = 0
    normalize_inputs: bool = True
    normalize_targets: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ArgumentError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ArgumentError("betas must lie in [0, 1)")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ArgumentError("early_stop_patience must be >= 1")

    def resolved_batch_size(self, framework: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 64 if framework == "cnn" else 128

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ArgumentError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_rmse_mm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""
    seconds: float = 0.0

    @property
    def best_val_rmse_mm(self) -> float:
        return self.val_rmse_mm[self.best_epoch]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_rmse_mm,lr"]
        for i, (l, v, r) in enumerate(zip(self.train_loss, self.val_rmse_mm, self.lr)):
            lines.append(f"{i},{l!r},{v!r},{r!r}")
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        if not isinstance(other, TrainHistory):
            return NotImplemented
        return (self.train_loss == other.train_loss and self.val_rmse_mm == other.val_rmse_mm
                and self.lr == other.lr and self.best_epoch == other.best_epoch
                and self.stop_reason == other.stop_reason)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: AdamState, cfg: TrainConfig, lr_t: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``' data."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        p.data -= lr_t * step


def lr_schedule(epoch: int, total: int, base_lr: float) -> float:
    """Constant for the first half of ``total`` epochs, then linear to 0 at ``total``."""
    if total < 1 or epoch < 0:
        raise ArgumentError("epoch must be >= 0 and total >= 1")
    half = Fraction(total, 2)
    if epoch < half:
        return base_lr
    frac = Fraction(max(total - epoch, 0)) / (total - half)
    return base_lr * float(frac)


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_last: int):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        if idx.size < min_last:
            continue
        yield idx


def rmse_mm(model: Model, X: np.ndarray, y_mm: np.ndarray) -> float:
    pred = model.predict_mm(X)
    return float(np.sqrt(np.mean((pred - y_mm) ** 2)))


def train(model: Model, bundle, cfg: TrainConfig, progress=None):
    """Fit ``model`` on ``bundle.train``; returns (model, TrainHistory).

    Targets are scaled by 1/stroke; inputs are standardised with train
    statistics. The random-split test set is the early-stopping monitor;
    ``test_new`` is never read here. The best epoch's parameters are restored.
    """
    tr, val = bundle.train, bundle.test_random
    if len(tr) == 0 or len(val) == 0:
        raise ArgumentError("train and test_random partitions must be non-empty")
    stroke = float(bundle.stroke_mm)
    model.stroke_mm = stroke if cfg.normalize_targets else 1.0
    model.input_norm = InputNorm.fit(tr.X) if cfg.normalize_inputs else None
    X = model.input_norm.apply(tr.X) if model.input_norm is not None else tr.X
    X_re, X_im = np.ascontiguousarray(X.real), np.ascontiguousarray(X.imag)
    y = (tr.y / model.stroke_mm)[:, None]

    params = model.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(cfg.seed), 7])))
    bs = cfg.resolved_batch_size(model.spec.framework)
    # batchnorm cannot normalise a batch of one
    min_last = 2 if any(l.kind == "batchnorm" for l in model.spec.layers) else 1

    hist = TrainHistory()
    best_state, best_val, since_best = model.state(), math.inf, 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr_t = lr_schedule(epoch, cfg.epochs, cfg.lr)
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(len(tr), bs, rng, min_last)):
            x = ComplexTensor(ad.Tensor(X_re[idx]), ad.Tensor(X_im[idx]))
            try:
                loss = ad.mse_loss(model.forward(x, training=True), ad.Tensor(y[idx]))
            except NumericalError as exc:
                raise NumericalError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            for p in params:
                p.grad = None
            ad.backward(loss)
            adamw_step(params, [p.grad for p in params], state, cfg, lr_t)
            total += loss.item() * idx.size
            count += idx.size
        train_loss = total / max(count, 1)
        if not math.isfinite(train_loss):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        val_rmse = rmse_mm(model, val.X, val.y)
        hist.train_loss.append(train_loss)
        hist.val_rmse_mm.append(val_rmse)
        hist.lr.append(lr_t)
        if val_rmse < best_val:
            best_val, best_state, since_best = val_rmse, model.state(), 0
            hist.best_epoch = epoch
        else:
            since_best += 1
        if progress is not None:
            progress(epoch, train_loss, val_rmse, lr_t)
        log.debug("epoch %d loss %.3e val %.3f mm lr %.2e", epoch, train_loss, val_rmse, lr_t)
        if since_best >= cfg.early_stop_patience:
            hist.stop_reason = f"early stop: no improvement for {since_best} epochs"
            break
    else:
        hist.stop_reason = "epoch budget exhausted"
    model.load_state(best_state)
    hist.seconds = time.perf_counter() - t0
    return model, hist
