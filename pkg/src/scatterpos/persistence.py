"""On-disk formats: calibration JSON, dataset manifest + blob, checkpoints.

All binary blobs are little-endian. Every load verifies the FNV-1a 64-bit
digest recorded in the accompanying JSON before building any object.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatVersionError, IntegrityError, ShapeError
from .physics import N_FREQ, CalibrationSet, FrequencyGrid, Permittivity

FORMAT_VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
ROW_FLOATS = 2 * N_FREQ + 1  # re, im, position
PARTITIONS = ("train", "test_random", "test_new")
CHECKPOINT_MAGIC = b"SPCK"

try:
    from numba import njit

    @njit(cache=True)
    def _fnv1a_kernel(buf):
        h = np.uint64(FNV_OFFSET)
        prime = np.uint64(FNV_PRIME)
        for b in buf:
            h = (h ^ np.uint64(b)) * prime
        return h
except ImportError:  # pragma: no cover
    _fnv1a_kernel = None


def fnv1a64(data: bytes) -> int:
    if _fnv1a_kernel is not None and len(data) > 64:
        return int(_fnv1a_kernel(np.frombuffer(data, dtype=np.uint8)))
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def digest_hex(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


# -- calibration -------------------------------------------------------------

def _pairs(a: np.ndarray) -> list:
    return [[float(z.real), float(z.imag)] for z in a]


def _from_pairs(pairs, name: str) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError(f"{name} must be a list of [re, im] pairs")
    return arr[:, 0] + 1j * arr[:, 1]


def calibration_to_dict(calib: CalibrationSet, grid: FrequencyGrid) -> dict:
    calib.check_grid(grid)
    return {
        "freqs_hz": [float(f) for f in grid.freqs_hz],
        "s21": _pairs(calib.s21),
        "s33": _pairs(calib.s33),
        "s23s13": _pairs(calib.s23s13),
        "eps_real": float(calib.permittivity.eps_real),
        "eps_imag": float(calib.permittivity.eps_imag),
        "mu_r": float(calib.mu_r),
        "stroke_mm": float(calib.stroke_mm),
    }


def calibration_from_dict(doc: dict) -> tuple[CalibrationSet, FrequencyGrid]:
    try:
        grid = FrequencyGrid(np.asarray(doc["freqs_hz"], dtype=np.float64))
        calib = CalibrationSet(
            s21=_from_pairs(doc["s21"], "s21"),
            s33=_from_pairs(doc["s33"], "s33"),
            s23s13=_from_pairs(doc["s23s13"], "s23s13"),
            permittivity=Permittivity(float(doc["eps_real"]), float(doc["eps_imag"])),
            mu_r=float(doc.get("mu_r", 1.0)),
            stroke_mm=float(doc.get("stroke_mm", 1815.0)),
        )
    except KeyError as exc:
        raise ShapeError(f"calibration document lacks field {exc}") from None
    calib.check_grid(grid)
    return calib, grid


def save_calibration(path, calib: CalibrationSet, grid: FrequencyGrid) -> None:
    atomic_write(path, dumps_json(calibration_to_dict(calib, grid)))


def load_calibration(path) -> tuple[CalibrationSet, FrequencyGrid]:
    with open(path, encoding="utf-8") as fh:
        return calibration_from_dict(json.load(fh))


def bundled_calibration() -> tuple[CalibrationSet, FrequencyGrid]:
    """The synthetic default calibration shipped with the package."""
    text = resources.files("scatterpos.data").joinpath("default_calibration.json").read_text(
        encoding="utf-8")
    return calibration_from_dict(json.loads(text))


# -- datasets ----------------------------------------------------------------

def _partition_bytes(X: np.ndarray, y: np.ndarray) -> bytes:
    if X.ndim != 2 or X.shape[1] != N_FREQ or y.shape != (X.shape[0],):
        raise ShapeError(f"dataset rows must hold {N_FREQ} complex values and one position")
    rows = np.empty((X.shape[0], ROW_FLOATS), dtype="<f4")
    rows[:, :N_FREQ] = X.real
    rows[:, N_FREQ:2 * N_FREQ] = X.imag
    rows[:, -1] = y
    return rows.tobytes()


def _check_header(doc: dict, kind: str) -> None:
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION}")
    if doc.get("kind") != kind:
        raise FormatVersionError(f"expected artifact kind {kind!r}, got {doc.get('kind')!r}")


def save_dataset(out_dir, bundle) -> dict:
    """Write ``dataset.bin`` and ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    blobs = {name: _partition_bytes(getattr(bundle, name).X, getattr(bundle, name).y)
             for name in PARTITIONS}
    blob = b"".join(blobs[name] for name in PARTITIONS)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "seeds": bundle.manifest.get("seeds", {}),
        "rng": bundle.manifest.get("rng"),
        "rows": {name: getattr(bundle, name).y.size for name in PARTITIONS},
        "digest_fnv1a64": digest_hex(blob),
        "partition_digests": {name: digest_hex(b) for name, b in blobs.items()},
        "row_layout": "121 x re f32, 121 x im f32, position_mm f32; little-endian",
        "stroke_mm": bundle.stroke_mm,
        "partitions": bundle.manifest.get("partitions", {}),
        "experiments": bundle.manifest.get("experiments", []),
        "split": bundle.manifest.get("split", {}),
    }
    atomic_write(out_dir / "dataset.bin", blob)
    atomic_write(out_dir / "manifest.json", dumps_json(manifest))
    return manifest


def load_dataset(data_dir):
    from .datagen import DatasetBundle, Partition

    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    _check_header(manifest, "dataset")
    blob = (data_dir / "dataset.bin").read_bytes()
    rows = manifest["rows"]
    expected = sum(int(rows[p]) for p in PARTITIONS) * ROW_FLOATS * 4
    if len(blob) != expected:
        raise IntegrityError(f"dataset.bin has {len(blob)} bytes, manifest implies {expected}")
    if digest_hex(blob) != manifest["digest_fnv1a64"]:
        raise IntegrityError("dataset.bin digest mismatch")
    table = np.frombuffer(blob, dtype="<f4").reshape(-1, ROW_FLOATS).astype(np.float64)
    parts, start = {}, 0
    for name in PARTITIONS:
        n = int(rows[name])
        chunk = table[start:start + n]
        start += n
        X = chunk[:, :N_FREQ] + 1j * chunk[:, N_FREQ:2 * N_FREQ]
        parts[name] = Partition(name, X, chunk[:, -1].copy())
    meta = {k: manifest[k] for k in ("seeds", "rng", "partitions", "experiments", "split")
            if k in manifest}
    return DatasetBundle(parts["train"], parts["test_random"], parts["test_new"],
                         meta, float(manifest["stroke_mm"]))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model, train_config: dict | None = None) -> dict:
    """Single file: magic, u32 header length, UTF-8 JSON header, float64 blob."""
    params = [p.data for p in model.parameters()]
    buffers = model.buffers()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params + buffers)
    cfg_text = json.dumps(train_config or {}, sort_keys=True)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "param_count": model.param_count(),
        "param_shapes": [list(a.shape) for a in params],
        "buffer_shapes": [list(a.shape) for a in buffers],
        "input_norm": model.input_norm.to_dict() if model.input_norm is not None else None,
        "stroke_mm": model.stroke_mm,
        "train_config": train_config or {},
        "train_config_digest": digest_hex(cfg_text.encode("utf-8")),
        "digest_fnv1a64": digest_hex(blob),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write(path, CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blob)
    return header


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 8:
        raise FormatVersionError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    _check_header(header, "checkpoint")
    blob = raw[8 + n:]
    if digest_hex(blob) != header["digest_fnv1a64"]:
        raise IntegrityError("checkpoint parameter blob digest mismatch")
    return header, np.frombuffer(blob, dtype="<f8")


def load_checkpoint(path, model=None):
    """Rebuild the model recorded in ``path`` (or fill ``model``) from its blob."""
    from .nn import InputNorm, ModelSpec, build_model

    header, flat = read_checkpoint(path)
    if model is None:
        model = build_model(ModelSpec.from_dict(header["spec"]), header["seed"])
    params = model.parameters()
    buffers = model.buffers()
    shapes = [tuple(p.data.shape) for p in params] + [tuple(b.shape) for b in buffers]
    stored = [tuple(s) for s in header["param_shapes"] + header["buffer_shapes"]]
    if shapes != stored:
        raise ShapeError("checkpoint parameter shapes do not match the model")
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise IntegrityError("checkpoint blob size does not match recorded shapes")
    off = 0
    for p in params:
        n = p.data.size
        p.data[...] = flat[off:off + n].reshape(p.data.shape)
        off += n
    for b in buffers:
        n = b.size
        b[...] = flat[off:off + n].reshape(b.shape)
        off += n
    if header.get("input_norm") is not None:
        model.input_norm = InputNorm.from_dict(header["input_norm"])
    model.stroke_mm = header.get("stroke_mm")
    return model, header
