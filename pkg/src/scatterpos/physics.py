"""Three-port scattering model of the cylinder and its analytic inverse.

Positions are in millimetres at every interface; the single conversion to
metres happens in :func:`transmission_line_factor`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NoSolutionError, ShapeError, SingularityError

C0 = 2.99792458e8  # m/s
N_FREQ = 121
F_START_HZ = 3.0e8
F_STOP_HZ = 1.5e9
SINGULAR_TOL = 1e-12
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class FrequencyGrid:
    freqs_hz: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.freqs_hz, dtype=np.float64)
        if f.ndim != 1 or f.size < 2:
            raise ShapeError("frequency grid needs at least 2 points")
        if not np.all(np.isfinite(f)) or np.any(f <= 0):
            raise DomainError("frequencies must be finite and positive")
        step = np.diff(f)
        if np.any(step <= 0):
            raise DomainError("frequencies must be strictly increasing")
        mean_step = (f[-1] - f[0]) / (f.size - 1)
        if np.max(np.abs(step - mean_step)) > 1e-6 * mean_step:
            raise DomainError("frequency grid is not uniform")
        f.setflags(write=False)
        object.__setattr__(self, "freqs_hz", f)

    @classmethod
    def uniform(cls, n: int = N_FREQ, f_start: float = F_START_HZ,
                f_stop: float = F_STOP_HZ) -> "FrequencyGrid":
        return cls(np.linspace(f_start, f_stop, n))

    def __len__(self) -> int:
        return self.freqs_hz.size

    def normalized(self) -> np.ndarray:
        """Frequencies mapped linearly onto [0, 1]."""
        f = self.freqs_hz
        return (f - f[0]) / (f[-1] - f[0])


@dataclass(frozen=True)
class Permittivity:
    eps_real: float
    eps_imag: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.eps_real) and self.eps_real > 0):
            raise DomainError(f"eps_real must be > 0, got {self.eps_real}")
        if not (math.isfinite(self.eps_imag) and self.eps_imag >= 0):
            raise DomainError(f"eps_imag must be >= 0, got {self.eps_imag}")


@dataclass(frozen=True)
class CalibrationSet:
    """Calibrated network quantities for one cylinder.

    ``s23s13`` is the product S23*S13 stored as a single quantity.
    """

    s21: np.ndarray
    s33: np.ndarray
    s23s13: np.ndarray
    permittivity: Permittivity
    mu_r: float = 1.0
    stroke_mm: float = 1815.0

    def __post_init__(self):
        arrays = []
        for name in ("s21", "s33", "s23s13"):
            a = np.array(getattr(self, name), dtype=np.complex128)
            if a.ndim != 1:
                raise ShapeError(f"{name} must be one-dimensional")
            if not np.all(np.isfinite(a)):
                raise DomainError(f"{name} contains non-finite values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrays.append(a)
        if len({a.size for a in arrays}) != 1:
            raise ShapeError("s21, s33 and s23s13 must have equal length")
        if np.any(np.abs(self.s33) >= 1.0):
            raise DomainError("|s33| must be < 1 at every frequency")
        if not (math.isfinite(self.mu_r) and self.mu_r > 0):
            raise DomainError("mu_r must be > 0")
        if not (math.isfinite(self.stroke_mm) and self.stroke_mm > 0):
            raise DomainError("stroke_mm must be > 0")

    def __len__(self) -> int:
        return self.s21.size

    def check_grid(self, grid: FrequencyGrid) -> None:
        if len(grid) != len(self):
            raise ShapeError(
                f"calibration has {len(self)} frequencies, grid has {len(grid)}")


@dataclass(frozen=True)
class TransmissionSpectrum:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 1:
            raise ShapeError("re and im must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise DomainError("transmission spectrum must be finite")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, t) -> "TransmissionSpectrum":
        t = np.asarray(t, dtype=np.complex128)
        return cls(t.real.copy(), t.imag.copy())

    @property
    def values(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __len__(self) -> int:
        return self.re.size


def wavenumber(f_hz, perm: Permittivity, mu_r: float = 1.0):
    """Angular wavenumber in rad/m; accepts a scalar or an array of frequencies."""
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(~np.isfinite(f)) or np.any(f <= 0):
        raise DomainError("frequency must be positive")
    if not (math.isfinite(mu_r) and mu_r > 0):
        raise DomainError("mu_r must be positive")
    k = 2.0 * math.pi * f * math.sqrt(perm.eps_real * mu_r) / C0
    return float(k) if k.ndim == 0 else k


def transmission_line_factor(L_mm, eps_imag: float, k):
    """exp(2L(-eps'' + jk)) with L given in mm and k in rad/m."""
    L = np.asarray(L_mm, dtype=np.float64)
    if np.any(L < 0):
        raise DomainError(f"position must be >= 0 mm, got {L_mm}")
    if eps_imag < 0:
        raise DomainError("eps_imag must be >= 0")
    k = np.asarray(k, dtype=np.float64)
    if np.any(k <= 0):
        raise DomainError("wavenumber must be positive")
    L_m = L * 1e-3
    out = np.exp(2.0 * L_m * (-eps_imag + 1j * k))
    return complex(out) if out.ndim == 0 else out


def _wavenumbers(calib: CalibrationSet, grid: FrequencyGrid) -> np.ndarray:
    calib.check_grid(grid)
    return wavenumber(grid.freqs_hz, calib.permittivity, calib.mu_r)


def _transmission_table(L_mm: np.ndarray, calib: CalibrationSet, k: np.ndarray) -> np.ndarray:
    """Forward model for many positions at once, shape (len(L_mm), n_freq)."""
    T = transmission_line_factor(np.asarray(L_mm, dtype=np.float64)[:, None],
                                 calib.permittivity.eps_imag, k[None, :])
    denom = calib.s33[None, :] - 1.0 / T
    bad = np.abs(denom) <= SINGULAR_TOL
    if bad.any():
        idx = int(np.argwhere(bad)[0, 1])
        raise SingularityError(f"S33 - 1/T(L) vanishes at frequency index {idx}", idx)
    return calib.s21[None, :] - calib.s23s13[None, :] / denom


def forward_transmission(L_mm: float, calib: CalibrationSet,
                         grid: FrequencyGrid) -> TransmissionSpectrum:
    """Transmission spectrum t(L) = S21 - S23S13 / (S33 - 1/T(L))."""
    if not (0.0 <= L_mm <= calib.stroke_mm):
        raise DomainError(f"position {L_mm} mm outside [0, {calib.stroke_mm}]")
    k = _wavenumbers(calib, grid)
    t = _transmission_table(np.array([L_mm]), calib, k)[0]
    return TransmissionSpectrum.from_complex(t)


def forward_many(L_mm, calib: CalibrationSet, grid: FrequencyGrid) -> np.ndarray:
    """Complex spectra for an array of positions, shape (n, n_freq)."""
    L = np.asarray(L_mm, dtype=np.float64)
    if L.ndim != 1:
        raise ShapeError("positions must be a 1-D array")
    if np.any(L < 0) or np.any(L > calib.stroke_mm):
        raise DomainError("positions outside [0, stroke]")
    return _transmission_table(L, calib, _wavenumbers(calib, grid))


@dataclass(frozen=True)
class InversionOptions:
    grid_step_mm: float = 1.0
    tol_mm: float = 1e-6
    max_iter: int = 60
    residual_reject: float = math.inf

    def __post_init__(self):
        if not self.grid_step_mm > 0 or not self.tol_mm > 0 or self.max_iter < 1:
            raise DomainError("invalid inversion options")


@dataclass(frozen=True)
class InversionResult:
    position_mm: float
    residual: float
    iterations: int
    magnitude_median_mm: float | None = None


def golden_section(f, lo: float, hi: float, tol: float, max_iter: int):
    """Minimise a unimodal f on [lo, hi]; returns (x, f(x), iterations)."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > tol and it < max_iter:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        it += 1
    x = 0.5 * (a + b)
    candidates = [(f(x), x), (fc, c), (fd, d), (f(lo), lo), (f(hi), hi)]
    fx, x = min(candidates)
    return x, fx, it


@dataclass
class PositionInverter:
    """Least-squares inverse of the forward model for a fixed calibration.

    The coarse table of forward spectra over the stroke is built once, so
    inverting many spectra against the same calibration is cheap.
    """

    calib: CalibrationSet
    grid: FrequencyGrid
    opts: InversionOptions = field(default_factory=InversionOptions)

    def __post_init__(self):
        self._k = _wavenumbers(self.calib, self.grid)
        stroke = self.calib.stroke_mm
        n = int(math.floor(stroke / self.opts.grid_step_mm + 1e-9))
        coarse = np.arange(n + 1) * self.opts.grid_step_mm
        if coarse[-1] < stroke:
            coarse = np.append(coarse, stroke)
        self._coarse = coarse
        self._table = _transmission_table(coarse, self.calib, self._k)
        self._table_norm2 = np.sum(np.abs(self._table) ** 2, axis=1)

    def objective(self, L_mm: float, t: np.ndarray) -> float:
        model = _transmission_table(np.array([L_mm]), self.calib, self._k)[0]
        return float(np.sum(np.abs(model - t) ** 2))

    def _check(self, t: np.ndarray) -> None:
        if t.shape[-1] != len(self.calib):
            raise ShapeError("spectrum length does not match calibration")
        if not np.all(np.isfinite(t)):
            raise DomainError("spectrum must be finite")
        gap = np.abs(self.calib.s21 - t)
        bad = gap <= SINGULAR_TOL
        if bad.any():
            idx = int(np.argwhere(bad)[0][-1])
            raise SingularityError(f"S21 - t vanishes at frequency index {idx}", idx)

    def _magnitude_channel(self, t: np.ndarray) -> float | None:
        eps_imag = self.calib.permittivity.eps_imag
        if eps_imag <= 0:
            return None
        D = self.calib.s33 - self.calib.s23s13 / (self.calib.s21 - t)
        T_hat = 1.0 / D
        # |T| = exp(-2 L eps''), L in metres
        L_mag_m = -np.log(np.abs(T_hat)) / (2.0 * eps_imag)
        return float(np.median(L_mag_m) * 1e3)

    def _refine(self, t: np.ndarray, j: int) -> InversionResult:
        coarse = self._coarse
        lo = coarse[max(j - 1, 0)]
        hi = coarse[min(j + 1, coarse.size - 1)]
        x, fx, it = golden_section(lambda L: self.objective(L, t), lo, hi,
                                   self.opts.tol_mm, self.opts.max_iter)
        if not fx <= self.opts.residual_reject:
            raise NoSolutionError(
                f"residual {fx:.3e} exceeds rejection threshold {self.opts.residual_reject}")
        return InversionResult(float(x), float(fx), it, self._magnitude_channel(t))

    def invert(self, t) -> InversionResult:
        if isinstance(t, TransmissionSpectrum):
            t = t.values
        t = np.asarray(t, dtype=np.complex128)
        self._check(t)
        J = np.sum(np.abs(self._table - t[None, :]) ** 2, axis=1)
        return self._refine(t, int(np.argmin(J)))

    def invert_many(self, spectra, chunk: int = 256) -> np.ndarray:
        """Positions in mm for a batch of complex spectra, shape (n, n_freq)."""
        spectra = np.asarray(spectra, dtype=np.complex128)
        self._check(spectra)
        out = np.empty(spectra.shape[0])
        for s in range(0, spectra.shape[0], chunk):
            block = spectra[s:s + chunk]
            # ||F - t||^2 expanded; only used to pick the coarse bracket
            cross = self._table @ block.conj().T
            J = (self._table_norm2[:, None] - 2.0 * cross.real
                 + np.sum(np.abs(block) ** 2, axis=1)[None, :])
            idx = np.argmin(J, axis=0)
            for r, j in enumerate(idx):
                out[s + r] = self._refine(block[r], int(j)).position_mm
        return out


def invert_position(t: TransmissionSpectrum, calib: CalibrationSet, grid: FrequencyGrid,
                    opts: InversionOptions | None = None) -> InversionResult:
    """Recover the piston position from one spectrum by full-spectrum least squares."""
    return PositionInverter(calib, grid, opts or InversionOptions()).invert(t)
