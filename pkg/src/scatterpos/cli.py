"""``scatterpos`` command line: gen, train, eval, ablate, bench, replay.

Every command writes ``<command>.config.json`` beside its outputs; ``replay``
reruns a command from that file alone.

Exit codes: 0 success, 1 other library error, 2 bad arguments,
3 missing/corrupt/incompatible files, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .datagen import PRESETS, generate_bundle
from .errors import (ArgumentError, DomainError, IntegrityError,
                     ScatterposError, ShapeError)
from .evaluate import (CSV_FIELDS, PhysicalBaseline, ablation_run, activation_grid,
                       evaluate_model, full_grid, ordering_checks, ordering_summary)
from .nn import REFERENCE, reference_spec, build_model
from .persistence import (atomic_write, bundled_calibration, dumps_json, load_calibration,
                          load_checkpoint, load_dataset, save_calibration, save_checkpoint,
                          save_dataset)
from .train import TrainConfig, train

log = logging.getLogger("scatterpos")

EXIT_OK, EXIT_ERROR, EXIT_ARGS, EXIT_FILE, EXIT_NUMERIC = 0, 1, 2, 3, 4
SEED_ENV = "SCATTERPOS_SEED"
CALIB_NAME = "calibration.json"
CONFIG_SUFFIX = ".config.json"  # e.g. train.config.json
BENCH_FIELDS = ("model", "params", "repeat", "latency_median_us", "latency_p90_us",
                "inference_samples_per_s", "train_epoch_seconds", "train_samples_per_s")


class UsageError(Exception):
    """Raised by the parser instead of printing and exiting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help=f"master seed (default 0; ${SEED_ENV} overrides)")
    common.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS,
                        help="output directory (default: current directory)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only print errors")

    p = _Parser(prog="scatterpos", parents=[common],
                description="Position estimation from microwave transmission spectra.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--calib", help="calibration JSON (default: bundled synthetic calibration)")
    g.add_argument("--preset", choices=sorted(PRESETS) + ["custom"], default="paper-shape")
    g.add_argument("--experiments", type=_positive_int)
    g.add_argument("--holdout", type=int)
    g.add_argument("--samples", type=_positive_int, help="samples per experiment")
    g.add_argument("--noise", type=float, help="relative noise sigma")
    g.add_argument("--drift", type=float, help="calibration drift scale")
    g.add_argument("--split-frac", type=float)
    g.add_argument("--temperature", type=float,
                   help="pin every experiment to one temperature in degC (default: 25-95 sweep)")
    g.add_argument("--out", dest="out_dir", default=argparse.SUPPRESS,
                   help="alias of --out-dir")

    t = sub.add_parser("train", parents=[common], help="train one reference model")
    t.add_argument("--data", required=True)
    t.add_argument("--model", required=True, help=f"one of {', '.join(REFERENCE)}")
    t.add_argument("--activation", choices=sorted(ad.ACTIVATIONS))
    t.add_argument("--fe", choices=("shared", "split", "off"))
    t.add_argument("--bn", choices=("on", "off"))
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--config", help="training config JSON; flags given explicitly win")
    t.add_argument("--out", dest="out_dir", default=argparse.SUPPRESS,
                   help="alias of --out-dir")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or the physical model")
    e.add_argument("--data", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--physical", action="store_true")
    e.add_argument("--calib", help="calibration for --physical (default: the dataset's own)")
    e.add_argument("--partition", choices=("test_new", "test_random", "train"),
                   default="test_new")
    e.add_argument("--out", "--out-file", dest="out_file", help="metrics CSV path (default: OUT_DIR/metrics.csv)")

    a = sub.add_parser("ablate", parents=[common], help="train and compare a grid of models")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", choices=("full", "activations"), default="full")
    a.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    a.add_argument("--epochs", type=int, default=150)
    a.add_argument("--jobs", type=_positive_int, default=1)
    a.add_argument("--fe-mode", choices=("shared", "split"), default="shared")
    a.add_argument("--calib", help="calibration for the physical baseline")
    a.add_argument("--partition", choices=("test_new", "test_random"), default="test_new")
    a.add_argument("--out", dest="out_dir", default=argparse.SUPPRESS,
                   help="alias of --out-dir")

    b = sub.add_parser("bench", parents=[common], help="parameter count and inference latency")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--repeat", type=_positive_int, default=1000)

    r = sub.add_parser("replay", parents=[common], help="rerun a command from its resolved config")
    r.add_argument("config")
    return p


def parse(argv) -> argparse.Namespace:
    ns = build_parser().parse_args(argv)
    for name, default in (("seed", 0), ("out_dir", "."), ("quiet", False)):
        if not hasattr(ns, name):
            setattr(ns, name, default)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            ns.seed = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return ns


# -- helpers -------------------------------------------------------------------------

def _abs(path: str | None) -> str | None:
    return None if path is None else str(Path(path).resolve())


def _write_config(out_dir: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, "version": __version__, "args": resolved}
    atomic_write(out_dir / f"{command}{CONFIG_SUFFIX}", dumps_json(doc))


def _dataset_calibration(data_dir: Path, override: str | None):
    if override is not None:
        return load_calibration(override)
    path = data_dir / CALIB_NAME
    if path.exists():
        return load_calibration(path)
    return bundled_calibration()


def _say(ns, text: str) -> None:
    if not ns.quiet:
        print(text, end="" if text.endswith("\n") else "\n")


def _metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# -- subcommands ----------------------------------------------------------------------

def cmd_gen(ns) -> dict:
    base = PRESETS.get(ns.preset, PRESETS["paper-shape"])
    exps = ns.experiments if ns.experiments is not None else base.experiments
    hold = ns.holdout if ns.holdout is not None else base.holdout
    if not 0 <= hold < exps:
        raise ArgumentError(f"--holdout {hold} must be smaller than --experiments {exps}")
    resolved = {
        "seed": ns.seed, "calib": _abs(ns.calib), "preset": ns.preset, "experiments": exps,
        "holdout": hold,
        "samples": ns.samples if ns.samples is not None else base.samples_per_experiment,
        "noise": ns.noise if ns.noise is not None else base.noise_sigma_rel,
        "drift": ns.drift if ns.drift is not None else base.drift_scale,
        "split_frac": ns.split_frac if ns.split_frac is not None else base.split_frac,
        "temperature": ns.temperature,
    }
    calib, grid = load_calibration(ns.calib) if ns.calib else bundled_calibration()
    bundle = generate_bundle(calib, grid, experiments=exps, holdout=hold,
                             samples_per_experiment=resolved["samples"],
                             noise_sigma_rel=resolved["noise"], drift_scale=resolved["drift"],
                             seed=ns.seed, split_frac=resolved["split_frac"],
                             temperature_c=ns.temperature)
    out = Path(ns.out_dir)
    manifest = save_dataset(out, bundle)
    save_calibration(out / CALIB_NAME, calib, grid)
    _write_config(out, "gen", resolved)
    _say(ns, f"wrote {out / 'dataset.bin'}: rows {manifest['rows']}, "
             f"digest {manifest['digest_fnv1a64']}")
    return resolved


def cmd_train(ns) -> dict:
    if ns.epochs < 1:
        raise ArgumentError("--epochs must be >= 1")
    bn = None if ns.bn is None else ns.bn == "on"
    spec = reference_spec(ns.model, activation=ns.activation, fe=ns.fe, bn=bn)
    cfg_doc = {}
    if ns.config:
        cfg_doc = TrainConfig.from_json(ns.config).to_dict()
    cfg_doc["epochs"] = ns.epochs
    cfg_doc["seed"] = ns.seed
    for key, val in (("batch_size", ns.batch_size), ("lr", ns.lr),
                     ("early_stop_patience", ns.patience)):
        if val is not None:
            cfg_doc[key] = val
    cfg = TrainConfig.from_dict(cfg_doc)
    bundle = load_dataset(ns.data)
    model = build_model(spec, ns.seed)

    def progress(epoch, loss, val, lr):
        log.info("epoch %3d  loss %.4e  val_rmse %.3f mm  lr %.2e", epoch, loss, val, lr)

    model, hist = train(model, bundle, cfg, progress=progress)
    out = Path(ns.out_dir)
    save_checkpoint(out / "checkpoint.bin", model, cfg.to_dict())
    atomic_write(out / "history.csv", hist.to_csv())
    resolved = {"seed": ns.seed, "data": _abs(ns.data), "model": ns.model,
                "activation": ns.activation, "fe": ns.fe, "bn": ns.bn, "epochs": ns.epochs,
                "batch_size": ns.batch_size, "lr": ns.lr, "patience": ns.patience,
                "config": _abs(ns.config), "spec_name": spec.name,
                "train_config": cfg.to_dict()}
    _write_config(out, "train", resolved)
    _say(ns, f"{spec.name}: best epoch {hist.best_epoch}, val RMSE "
             f"{hist.best_val_rmse_mm:.3f} mm ({hist.stop_reason}); "
             f"params {model.param_count()}")
    return resolved


def cmd_eval(ns) -> dict:
    bundle = load_dataset(ns.data)
    part = bundle.partition(ns.partition)
    if ns.physical:
        calib, grid = _dataset_calibration(Path(ns.data), ns.calib)
        rep = evaluate_model(PhysicalBaseline(calib, grid), part, bundle.stroke_mm)
        row = {"model": rep.model, "framework": "physical", "bn": False, "fe": "off",
               "cvnn": False, "activation": "-", "seed": "-", "params": 0}
    else:
        if not Path(ns.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {ns.checkpoint}")
        model, header = load_checkpoint(ns.checkpoint)
        rep = evaluate_model(model, part, bundle.stroke_mm)
        s = model.spec
        row = {"model": s.name, "framework": s.framework, "bn": s.bn, "fe": s.fe,
               "cvnn": s.cvnn, "activation": s.activation, "seed": header["seed"],
               "params": model.param_count()}
    row.update(partition=rep.partition, me_mm=repr(rep.me_mm), mae_mm=repr(rep.mae_mm),
               rmse_mm=repr(rep.rmse_mm), re_percent=repr(rep.re_percent), train_seconds="")
    out_file = Path(ns.out_file) if ns.out_file else Path(ns.out_dir) / "metrics.csv"
    atomic_write(out_file, _metrics_csv([row]))
    resolved = {"seed": ns.seed, "data": _abs(ns.data), "checkpoint": _abs(ns.checkpoint),
                "physical": ns.physical, "calib": _abs(ns.calib), "partition": ns.partition,
                "out_file": _abs(str(out_file))}
    _write_config(out_file.parent, "eval", resolved)
    _say(ns, f"{rep.model} on {rep.partition}: ME {rep.me_mm:.3f}  MAE {rep.mae_mm:.3f}  "
             f"RMSE {rep.rmse_mm:.3f} mm  RE {rep.re_percent:.3f}%  (n={rep.n_samples})")
    return resolved


def cmd_ablate(ns) -> dict:
    if ns.epochs < 1:
        raise ArgumentError("--epochs must be >= 1")
    bundle = load_dataset(ns.data)
    calib, grid = _dataset_calibration(Path(ns.data), ns.calib)
    specs = full_grid(fe_mode=ns.fe_mode) if ns.grid == "full" else activation_grid()
    cfg = TrainConfig(epochs=ns.epochs, seed=ns.seed)
    result = ablation_run(bundle, specs, cfg, ns.seeds, partition=ns.partition, jobs=ns.jobs,
                          baseline=PhysicalBaseline(calib, grid))
    out = Path(ns.out_dir)
    atomic_write(out / "ablation.csv", result.to_csv())
    report = result.table()
    if ns.grid == "full":
        summary = ordering_summary(ordering_checks(result.median_rmse()))
        atomic_write(out / "ordering.txt", summary)
        report += "\n" + summary
    atomic_write(out / "ablation.txt", report)
    resolved = {"seed": ns.seed, "data": _abs(ns.data), "grid": ns.grid, "seeds": ns.seeds,
                "epochs": ns.epochs, "jobs": ns.jobs, "fe_mode": ns.fe_mode,
                "calib": _abs(ns.calib), "partition": ns.partition}
    _write_config(out, "ablate", resolved)
    _say(ns, report)
    return resolved


def cmd_bench(ns) -> dict:
    if not Path(ns.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {ns.checkpoint}")
    model, _ = load_checkpoint(ns.checkpoint)
    bundle = load_dataset(ns.data)
    X = bundle.test_new.X if len(bundle.test_new) else bundle.test_random.X
    sample = X[:1]
    model.predict_mm(sample)  # warm-up
    lat = np.empty(ns.repeat)
    for i in range(ns.repeat):
        t0 = time.perf_counter()
        model.predict_mm(sample)
        lat[i] = time.perf_counter() - t0
    t0 = time.perf_counter()
    model.predict_mm(X)
    infer_rate = X.shape[0] / (time.perf_counter() - t0)
    # one training epoch on a throwaway copy
    scratch = copy.deepcopy(model)
    _, hist = train(scratch, bundle, TrainConfig(epochs=1, seed=ns.seed))
    row = {"model": model.spec.name, "params": model.param_count(), "repeat": ns.repeat,
           "latency_median_us": f"{1e6 * np.median(lat):.3f}",
           "latency_p90_us": f"{1e6 * np.quantile(lat, 0.9):.3f}",
           "inference_samples_per_s": f"{infer_rate:.1f}",
           "train_epoch_seconds": f"{hist.seconds:.3f}",
           "train_samples_per_s": f"{len(bundle.train) / hist.seconds:.1f}"}
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    out = Path(ns.out_dir)
    atomic_write(out / "bench.csv", buf.getvalue())
    resolved = {"seed": ns.seed, "checkpoint": _abs(ns.checkpoint), "data": _abs(ns.data),
                "repeat": ns.repeat}
    _write_config(out, "bench", resolved)
    _say(ns, f"{row['model']}: {row['params']} params, median latency "
             f"{row['latency_median_us']} us, {row['inference_samples_per_s']} samples/s")
    return resolved


def _replay_argv(doc: dict, out_dir: str) -> list[str]:
    """Rebuild an argument vector from a resolved config."""
    command, args = doc.get("command"), dict(doc.get("args", {}))
    if command not in COMMANDS or command == "replay":
        raise ArgumentError(f"config names an unknown command {command!r}")
    argv = [command, "--seed", str(args.pop("seed", 0)), "--out-dir", out_dir]
    skip = {"spec_name", "train_config", "out_file"}
    if command == "train" and "train_config" in args:
        # the saved TrainConfig is authoritative; flags below only repeat it
        args.pop("config", None)
    for key, val in args.items():
        if key in skip or val is None or val is False:
            continue
        flag = "--" + key.replace("_", "-")
        if val is True:
            argv.append(flag)
        elif isinstance(val, list):
            argv += [flag, ",".join(str(v) for v in val)]
        else:
            argv += [flag, str(val)]
    return argv


def cmd_replay(ns) -> dict:
    with open(ns.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    argv = _replay_argv(doc, ns.out_dir)
    if doc["command"] == "eval" and doc["args"].get("out_file"):
        argv += ["--out-file", str(Path(ns.out_dir) / Path(doc["args"]["out_file"]).name)]
    if doc["command"] == "train":
        cfg = doc["args"].get("train_config")
        if cfg:
            path = Path(ns.out_dir) / "train_config.json"
            atomic_write(path, dumps_json(cfg))
            argv += ["--config", str(path)]
    if ns.quiet:
        argv.append("--quiet")
    os.environ.pop(SEED_ENV, None)
    sub = parse(argv)
    return COMMANDS[sub.command](sub)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench": cmd_bench, "replay": cmd_replay}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ArgumentError, DomainError)):
        return EXIT_ARGS
    if isinstance(exc, (OSError, IntegrityError, ShapeError, json.JSONDecodeError)):
        return EXIT_FILE
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC
    if isinstance(exc, (ScatterposError, ValueError)):
        return EXIT_ERROR
    raise exc


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        ns = parse(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    logging.basicConfig(level=logging.WARNING if ns.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[ns.command](ns)
    except (ScatterposError, OSError, ValueError, ArithmeticError, UsageError) as exc:
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
