"""Layers, declarative model specs and the reference architectures.

Complex-valued layers hold two real parameter sets (real and imaginary part
of the weights) and combine the four real products the way complex
multiplication does:

    re = ReX*ReW - ImX*ImW + Re(b)
    im = ReX*ImW + ImX*ReW + Im(b)

where ``*`` is a matrix product (ComplexFC) or a convolution (ComplexConv).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ShapeError

N_FREQ = 121


# -- complex tensors -------------------------------------------------------------

@dataclass
class ComplexTensor:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"re {self.re.shape} and im {self.im.shape} differ")

    @classmethod
    def from_numpy(cls, z: np.ndarray) -> "ComplexTensor":
        z = np.asarray(z, dtype=np.complex128)
        return cls(Tensor(z.real.copy()), Tensor(z.imag.copy()))

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def complex_linear(x: ComplexTensor, w_re: Tensor, w_im: Tensor,
                   b_re: Tensor | None = None, b_im: Tensor | None = None) -> ComplexTensor:
    re = ad.sub(ad.matmul(x.re, w_re), ad.matmul(x.im, w_im))
    im = ad.add(ad.matmul(x.re, w_im), ad.matmul(x.im, w_re))
    if b_re is not None:
        re = ad.add(re, b_re)
        im = ad.add(im, b_im)
    return ComplexTensor(re, im)


def complex_conv1d(x: ComplexTensor, w_re: Tensor, w_im: Tensor, stride: int = 1,
                   b_re: Tensor | None = None, b_im: Tensor | None = None) -> ComplexTensor:
    """Complex convolution evaluated as one real convolution.

    Input channels are stacked as [re; im] and the kernel as the block
    [[Wr, -Wi], [Wi, Wr]], so a single pass yields the four real products
    already combined: re = Wr*re - Wi*im, im = Wi*re + Wr*im.
    """
    if x.re.data.ndim == 2:
        y = complex_conv1d(ComplexTensor(ad.reshape(x.re, (1, *x.shape)),
                                         ad.reshape(x.im, (1, *x.shape))),
                           w_re, w_im, stride, b_re, b_im)
        return ComplexTensor(ad.reshape(y.re, y.shape[1:]), ad.reshape(y.im, y.shape[1:]))
    if x.re.data.ndim != 3:
        raise ShapeError("complex_conv1d expects (channels, length) or (batch, channels, length)")
    if w_re.shape != w_im.shape:
        raise ShapeError("real and imaginary kernels differ in shape")
    c_out = w_re.shape[0]
    stacked = ad.concat([x.re, x.im], axis=1)
    kernel = ad.concat([ad.concat([w_re, ad.neg(w_im)], axis=1),
                        ad.concat([w_im, w_re], axis=1)], axis=0)
    bias = None
    if b_re is not None:
        bias = ad.concat([b_re, b_im], axis=0)
    out = ad.conv1d(stacked, kernel, stride, bias)
    return ComplexTensor(_take(out, slice(0, c_out), axis=1),
                         _take(out, slice(c_out, 2 * c_out), axis=1))


def split_activation(x: ComplexTensor, name: str) -> ComplexTensor:
    act = ad.activation(name)
    return ComplexTensor(act(x.re), act(x.im))


def frequency_encoding(x: ComplexTensor, w: Tensor, f_norm: np.ndarray,
                       mode: str = "shared") -> ComplexTensor:
    """Add the weighted normalised-frequency code to both channels.

    shared: one weight vector, c = w * f, added to re and im.
    split: w holds 2n weights, first half coding re and second half im.
    """
    n = f_norm.size
    if x.shape[-1] != n:
        raise ShapeError(f"input has {x.shape[-1]} frequencies, encoding expects {n}")
    f = Tensor(f_norm)
    if mode == "shared":
        if w.shape != (n,):
            raise ShapeError(f"shared encoding needs {n} weights, got {w.shape}")
        c = ad.mul(w, f)
        return ComplexTensor(ad.add(x.re, c), ad.add(x.im, c))
    if mode == "split":
        if w.shape != (2 * n,):
            raise ShapeError(f"split encoding needs {2 * n} weights, got {w.shape}")
        f2 = Tensor(np.concatenate([f_norm, f_norm]))
        c = ad.mul(w, f2)
        flat = ad.concat([x.re, x.im], axis=-1)
        coded = ad.add(flat, c)
        # split the coded vector back into channels through a fixed selection
        return ComplexTensor(_take(coded, slice(0, n)), _take(coded, slice(n, 2 * n)))
    raise ArgumentError(f"unknown frequency encoding mode {mode!r}")


def _take(t: Tensor, sl: slice, axis: int = -1) -> Tensor:
    shape = t.shape
    index = [slice(None)] * len(shape)
    index[axis] = sl
    index = tuple(index)

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return ad._result(t.data[index], (t,), backward)


# -- initialisation ----------------------------------------------------------------

def xavier_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def biases_zero(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# -- layers ---------------------------------------------------------------------------

class Layer:
    params: list

    def __init__(self):
        self.params = []

    def buffers(self) -> list:
        return []

    def __call__(self, x, training: bool):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.w = xavier_init((n_in, n_out), n_in, n_out, rng)
        self.b = biases_zero((n_out,))
        self.params = [self.w, self.b]

    def __call__(self, x, training):
        return ad.add(ad.matmul(x, self.w), self.b)


class ComplexDense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.w_re = xavier_init((n_in, n_out), n_in, n_out, rng)
        self.b_re = biases_zero((n_out,))
        self.w_im = xavier_init((n_in, n_out), n_in, n_out, rng)
        self.b_im = biases_zero((n_out,))
        self.params = [self.w_re, self.b_re, self.w_im, self.b_im]

    def __call__(self, x, training):
        return complex_linear(x, self.w_re, self.w_im, self.b_re, self.b_im)


class Conv1d(Layer):
    def __init__(self, c_in, c_out, ksize, stride, rng):
        super().__init__()
        self.stride = stride
        self.w = xavier_init((c_out, c_in, ksize), c_in * ksize, c_out * ksize, rng)
        self.b = biases_zero((c_out,))
        self.params = [self.w, self.b]

    def __call__(self, x, training):
        if x.data.ndim == 2:
            x = ad.reshape(x, (x.shape[0], 1, x.shape[1]))
        return ad.conv1d(x, self.w, self.stride, self.b)


class ComplexConv1d(Layer):
    def __init__(self, c_in, c_out, ksize, stride, rng):
        super().__init__()
        self.stride = stride
        fi, fo = c_in * ksize, c_out * ksize
        self.w_re = xavier_init((c_out, c_in, ksize), fi, fo, rng)
        self.b_re = biases_zero((c_out,))
        self.w_im = xavier_init((c_out, c_in, ksize), fi, fo, rng)
        self.b_im = biases_zero((c_out,))
        self.params = [self.w_re, self.b_re, self.w_im, self.b_im]

    def __call__(self, x, training):
        if x.re.data.ndim == 2:
            b, n = x.shape
            x = ComplexTensor(ad.reshape(x.re, (b, 1, n)), ad.reshape(x.im, (b, 1, n)))
        return complex_conv1d(x, self.w_re, self.w_im, self.stride, self.b_re, self.b_im)


class Activation(Layer):
    def __init__(self, name):
        super().__init__()
        self.fn = ad.activation(name)

    def __call__(self, x, training):
        if isinstance(x, ComplexTensor):
            return ComplexTensor(self.fn(x.re), self.fn(x.im))
        return self.fn(x)


class BatchNorm(Layer):
    """Real BN; on complex input, independent BN on the re and im channels."""

    def __init__(self, n_features, complex_input: bool):
        super().__init__()
        self.complex_input = complex_input
        n_sets = 2 if complex_input else 1
        self.gamma = [Tensor(np.ones(n_features), requires_grad=True) for _ in range(n_sets)]
        self.beta = [Tensor(np.zeros(n_features), requires_grad=True) for _ in range(n_sets)]
        self.running_mean = [np.zeros(n_features) for _ in range(n_sets)]
        self.running_var = [np.ones(n_features) for _ in range(n_sets)]
        self.params = [p for pair in zip(self.gamma, self.beta) for p in pair]

    def buffers(self):
        return [b for pair in zip(self.running_mean, self.running_var) for b in pair]

    def _bn(self, x, i, training):
        return ad.batchnorm1d(x, self.gamma[i], self.beta[i], self.running_mean[i],
                              self.running_var[i], training)

    def __call__(self, x, training):
        if isinstance(x, ComplexTensor):
            return ComplexTensor(self._bn(x.re, 0, training), self._bn(x.im, 1, training))
        return self._bn(x, 0, training)


class FrequencyEncoding(Layer):
    def __init__(self, f_norm, mode):
        super().__init__()
        self.mode = mode
        self.f_norm = np.asarray(f_norm, dtype=np.float64)
        n = self.f_norm.size * (2 if mode == "split" else 1)
        self.w = Tensor(np.zeros(n), requires_grad=True)
        self.params = [self.w]

    def __call__(self, x, training):
        return frequency_encoding(x, self.w, self.f_norm, self.mode)


class Flatten(Layer):
    def __call__(self, x, training):
        def flat(t):
            return ad.reshape(t, (t.shape[0], -1))
        if isinstance(x, ComplexTensor):
            return ComplexTensor(flat(x.re), flat(x.im))
        return flat(x)


class ConcatReIm(Layer):
    def __call__(self, x, training):
        return ad.concat([x.re, x.im], axis=-1)


# -- specs ---------------------------------------------------------------------------

LAYER_KINDS = ("fc", "conv1d", "complex_fc", "complex_conv1d", "activation",
               "split_activation", "batchnorm", "frequency_encoding", "flatten",
               "concat_re_im")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    out_channels: int | None = None
    ksize: int | None = None
    stride: int | None = None
    name: str | None = None  # activation name
    mode: str | None = None  # frequency encoding mode

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def fc(units):
    return LayerSpec("fc", units=units)


def complex_fc(units):
    return LayerSpec("complex_fc", units=units)


def conv(out_channels, ksize, stride):
    return LayerSpec("conv1d", out_channels=out_channels, ksize=ksize, stride=stride)


def complex_conv(out_channels, ksize, stride):
    return LayerSpec("complex_conv1d", out_channels=out_channels, ksize=ksize, stride=stride)


def act(name):
    return LayerSpec("activation", name=name)


def split_act(name):
    return LayerSpec("split_activation", name=name)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    framework: str = "mlp"
    bn: bool = False
    fe: str = "off"
    cvnn: bool = False
    activation: str = "sigmoid"
    n_freq: int = N_FREQ

    def to_dict(self) -> dict:
        return {"name": self.name, "framework": self.framework, "bn": self.bn, "fe": self.fe,
                "cvnn": self.cvnn, "activation": self.activation, "n_freq": self.n_freq,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(name=d["name"], layers=tuple(LayerSpec(**l) for l in d["layers"]),
                   framework=d.get("framework", "mlp"), bn=d.get("bn", False),
                   fe=d.get("fe", "off"), cvnn=d.get("cvnn", False),
                   activation=d.get("activation", "sigmoid"), n_freq=d.get("n_freq", N_FREQ))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# -- model -----------------------------------------------------------------------------

@dataclass
class InputNorm:
    """Per-frequency complex standardisation: (t - mean) / scale.

    The mean is taken separately for re and im; one scale per frequency,
    sqrt((var_re + var_im) / 2), is shared by both channels so the transform
    commutes with complex multiplication by a phase.
    """

    mean: np.ndarray  # complex (n,)
    scale: np.ndarray  # real (n,)

    @classmethod
    def fit(cls, X: np.ndarray) -> "InputNorm":
        mean = X.mean(axis=0)
        var = 0.5 * (X.real.var(axis=0) + X.imag.var(axis=0))
        return cls(mean, np.sqrt(np.maximum(var, 1e-24)))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean_re": self.mean.real.tolist(), "mean_im": self.mean.imag.tolist(),
                "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputNorm":
        return cls(np.asarray(d["mean_re"]) + 1j * np.asarray(d["mean_im"]),
                   np.asarray(d["scale"], dtype=np.float64))


@dataclass
class Model:
    spec: ModelSpec
    seed: int
    layers: list
    input_norm: InputNorm | None = None
    stroke_mm: float | None = None

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    def buffers(self) -> list:
        return [b for layer in self.layers for b in layer.buffers()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward(self, x: ComplexTensor, training: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer(x, training)
        return x

    __call__ = forward

    def prepare(self, spectra: np.ndarray) -> ComplexTensor:
        X = np.asarray(spectra, dtype=np.complex128)
        if self.input_norm is not None:
            X = self.input_norm.apply(X)
        return ComplexTensor(Tensor(X.real), Tensor(X.imag))

    def predict_unit(self, spectra: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Raw network output (positions as a fraction of the stroke)."""
        spectra = np.atleast_2d(spectra)
        out = []
        with ad.no_grad():
            for s in range(0, spectra.shape[0], chunk):
                out.append(self.forward(self.prepare(spectra[s:s + chunk]), False).data[:, 0])
        return np.concatenate(out) if out else np.empty(0)

    def predict_mm(self, spectra: np.ndarray, chunk: int = 4096) -> np.ndarray:
        scale = self.stroke_mm if self.stroke_mm is not None else 1.0
        return self.predict_unit(spectra, chunk) * scale

    def state(self) -> list:
        return [p.data.copy() for p in self.parameters()] + [b.copy() for b in self.buffers()]

    def load_state(self, state: list) -> None:
        targets = [p.data for p in self.parameters()] + self.buffers()
        for dst, src in zip(targets, state, strict=True):
            dst[...] = src


def build_model(spec: ModelSpec, seed: int, grid=None) -> Model:
    """Materialise a spec; weights Xavier-uniform from ``seed``, biases zero."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0])))
    if grid is not None:
        f_norm = grid.normalized()
    else:
        f_norm = np.linspace(0.0, 1.0, spec.n_freq)
    # shape is (complex?, dims) where dims excludes batch
    is_complex, dims = True, (spec.n_freq,)
    layers = []
    for ls in spec.layers:
        k = ls.kind
        if k == "frequency_encoding":
            if not is_complex or dims != (spec.n_freq,):
                raise ShapeError("frequency encoding must act on the raw complex input")
            layers.append(FrequencyEncoding(f_norm, ls.mode or "shared"))
        elif k == "concat_re_im":
            if not is_complex or len(dims) != 1:
                raise ShapeError("concat_re_im needs a flat complex feature vector")
            layers.append(ConcatReIm())
            is_complex, dims = False, (2 * dims[0],)
        elif k == "flatten":
            layers.append(Flatten())
            dims = (int(np.prod(dims)),)
        elif k in ("fc", "complex_fc"):
            if len(dims) != 1:
                raise ShapeError(f"{k} needs a flat input, got feature shape {dims}")
            if (k == "complex_fc") != is_complex:
                raise ShapeError(f"{k} applied to a {'complex' if is_complex else 'real'} input")
            cls = ComplexDense if is_complex else Dense
            layers.append(cls(dims[0], ls.units, rng))
            dims = (ls.units,)
        elif k in ("conv1d", "complex_conv1d"):
            if (k == "complex_conv1d") != is_complex:
                raise ShapeError(f"{k} applied to a {'complex' if is_complex else 'real'} input")
            c_in, length = (1, dims[0]) if len(dims) == 1 else dims
            if length < ls.ksize:
                raise ShapeError(f"{k}: length {length} shorter than kernel {ls.ksize}")
            cls = ComplexConv1d if is_complex else Conv1d
            layers.append(cls(c_in, ls.out_channels, ls.ksize, ls.stride, rng))
            dims = (ls.out_channels, (length - ls.ksize) // ls.stride + 1)
        elif k in ("activation", "split_activation"):
            if (k == "split_activation") != is_complex:
                raise ShapeError(f"{k} applied to a {'complex' if is_complex else 'real'} input")
            layers.append(Activation(ls.name))
        elif k == "batchnorm":
            layers.append(BatchNorm(dims[0], is_complex))
    if is_complex or dims != (1,):
        raise ShapeError(f"model must end in a single real output, got "
                         f"{'complex' if is_complex else 'real'} {dims}")
    return Model(spec, int(seed), layers)


def param_count(model: Model) -> int:
    return model.param_count()


# -- reference architectures ------------------------------------------------------

# Conv stacks: a wide strided first layer, then three kernel-3 layers.
CNN_CHANNELS = (32, 28, 28, 28)
CNN_FIRST = (22, 11)  # ksize, stride on the 242-long real input
CNN_SMALL_STRIDES = (1, 2, 2)
CCNN_CHANNELS = (22, 22, 22, 22)
CCNN_FIRST = (11, 5)  # ksize, stride on the 121-long complex input

REFERENCE = {
    "mlp_baseline": ("mlp", False, "off", False),
    "mlp_bn": ("mlp", True, "off", False),
    "mlp_fe": ("mlp", False, "shared", False),
    "mlp_cvnn": ("mlp", False, "off", True),
    "mlp_fe_cvnn": ("mlp", False, "shared", True),
    "cnn": ("cnn", False, "off", False),
    "cnn_bn": ("cnn", True, "off", False),
    "cnn_fe": ("cnn", False, "shared", False),
    "cnn_cvnn": ("cnn", False, "off", True),
    "cnn_fe_cvnn": ("cnn", False, "shared", True),
}


def make_spec(framework: str, *, bn: bool = False, fe: str = "off", cvnn: bool = False,
              activation: str = "sigmoid", name: str | None = None) -> ModelSpec:
    ad.activation(activation)
    if fe not in ("off", "shared", "split"):
        raise ArgumentError(f"fe must be off, shared or split, got {fe!r}")
    layers = []
    if fe != "off":
        layers.append(LayerSpec("frequency_encoding", mode=fe))
    bn_layer = [LayerSpec("batchnorm")] if bn else []
    if framework == "mlp":
        if cvnn:
            for units in (32, 16):
                layers += [complex_fc(units), *bn_layer, split_act(activation)]
            layers.append(LayerSpec("concat_re_im"))
        else:
            layers.append(LayerSpec("concat_re_im"))
            for units in (32, 16):
                layers += [fc(units), *bn_layer, act(activation)]
        layers.append(fc(1))
    elif framework == "cnn":
        if cvnn:
            chans, (k0, s0), a = CCNN_CHANNELS, CCNN_FIRST, split_act(activation)
            make_conv = complex_conv
        else:
            layers.append(LayerSpec("concat_re_im"))
            chans, (k0, s0), a = CNN_CHANNELS, CNN_FIRST, act(activation)
            make_conv = conv
        layers += [make_conv(chans[0], k0, s0), *bn_layer, a]
        for c, s in zip(chans[1:], CNN_SMALL_STRIDES):
            layers += [make_conv(c, 3, s), *bn_layer, a]
        layers.append(LayerSpec("flatten"))
        if cvnn:
            layers.append(LayerSpec("concat_re_im"))
        layers.append(fc(1))
    else:
        raise ArgumentError(f"framework must be mlp or cnn, got {framework!r}")
    if name is None:
        parts = [framework] + (["bn"] if bn else []) + (["fe"] if fe != "off" else [])
        parts += (["cvnn"] if cvnn else [])
        if parts == ["mlp"]:
            parts = ["mlp_baseline"]
        if fe == "split":
            parts.append("split")
        if activation != "sigmoid":
            parts.append(activation)
        name = "_".join(parts)
    return ModelSpec(name=name, layers=tuple(layers), framework=framework, bn=bn, fe=fe,
                     cvnn=cvnn, activation=activation)


def reference_spec(name: str, *, activation: str | None = None, fe: str | None = None,
                   bn: bool | None = None, name_override: str | None = None) -> ModelSpec:
    """One of the named reference models, optionally with overrides."""
    try:
        framework, d_bn, d_fe, cvnn = REFERENCE[name]
    except KeyError:
        raise ArgumentError(f"unknown model {name!r}; choose from {sorted(REFERENCE)}") from None
    fe = d_fe if fe is None else fe
    bn = d_bn if bn is None else bn
    activation = activation or "sigmoid"
    overridden = activation != "sigmoid" or fe != d_fe or bn != d_bn
    if name_override is None and not overridden:
        name_override = name
    return make_spec(framework, bn=bn, fe=fe, cvnn=cvnn, activation=activation,
                     name=name_override)


def reference_specs(activation: str = "sigmoid", fe_mode: str = "shared") -> dict[str, ModelSpec]:
    out = {}
    for name, (framework, bn, fe, cvnn) in REFERENCE.items():
        out[name] = make_spec(framework, bn=bn, fe=fe_mode if fe != "off" else "off",
                              cvnn=cvnn, activation=activation, name=name)
    return out
