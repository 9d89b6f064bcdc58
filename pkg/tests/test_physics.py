import cmath
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_calibration
from scatterpos.errors import DomainError, ShapeError, SingularityError
from scatterpos.physics import (C0, CalibrationSet, FrequencyGrid, InversionOptions,
                                Permittivity, PositionInverter, TransmissionSpectrum,
                                forward_many, forward_transmission, golden_section,
                                invert_position, transmission_line_factor, wavenumber)


def mp_wavenumber(f, eps, mu=1):
    mpmath.mp.dps = 40
    return float(2 * mpmath.pi * mpmath.mpf(f) * mpmath.sqrt(mpmath.mpf(eps) * mu)
                 / mpmath.mpf(C0))


# -- grid and types -------------------------------------------------------------------

def test_default_grid():
    g = FrequencyGrid.uniform()
    assert len(g) == 121
    assert g.freqs_hz[0] == 3.0e8 and g.freqs_hz[-1] == 1.5e9
    assert np.all(np.diff(g.freqs_hz) > 0)
    f = g.normalized()
    assert (f[0], f[60], f[120]) == (0.0, 0.5, 1.0)


@pytest.mark.parametrize("freqs", [[1e9], [2e9, 1e9, 3e9], [1e9, 1.1e9, 1.3e9], [-1.0, 1.0]])
def test_grid_rejects_bad_input(freqs):
    with pytest.raises((DomainError, ShapeError)):
        FrequencyGrid(np.array(freqs))


def test_calibration_rejects_active_s33(calib_grid):
    calib, _ = calib_grid
    s33 = calib.s33.copy()
    s33[5] = 1.0
    with pytest.raises(DomainError):
        CalibrationSet(calib.s21, s33, calib.s23s13, calib.permittivity)


def test_permittivity_invariants():
    with pytest.raises(DomainError):
        Permittivity(0.0, 0.0)
    with pytest.raises(DomainError):
        Permittivity(2.0, -0.1)


def test_spectrum_rejects_non_finite():
    with pytest.raises(DomainError):
        TransmissionSpectrum(np.array([1.0, np.nan]), np.array([0.0, 0.0]))
    with pytest.raises(ShapeError):
        TransmissionSpectrum(np.zeros(3), np.zeros(4))


# -- wavenumber -----------------------------------------------------------------------------

def test_wavenumber_vacuum_300mhz_against_mpmath():
    k = wavenumber(3.0e8, Permittivity(1.0))
    assert k == pytest.approx(mp_wavenumber(3.0e8, 1), rel=1e-14)
    assert k == pytest.approx(6.28754, abs=1e-5)


def test_wavenumber_scales_with_sqrt_eps():
    assert wavenumber(3.0e8, Permittivity(4.0)) == pytest.approx(
        2 * wavenumber(3.0e8, Permittivity(1.0)), rel=1e-15)


def test_wavenumber_oil_top_of_band():
    k = wavenumber(1.5e9, Permittivity(2.2))
    assert k == pytest.approx(mp_wavenumber(1.5e9, 2.2), rel=1e-14)
    assert k == pytest.approx(46.629, abs=1e-3)


@pytest.mark.parametrize("f,mu", [(0.0, 1.0), (-1e9, 1.0), (1e9, 0.0), (1e9, -2.0)])
def test_wavenumber_domain(f, mu):
    with pytest.raises(DomainError):
        wavenumber(f, Permittivity(2.0), mu)


@given(st.floats(1e6, 1e10), st.floats(1e6, 1e10), st.floats(1.0, 80.0))
def test_wavenumber_monotone(f1, f2, eps):
    lo, hi = sorted((f1, f2))
    p = Permittivity(eps)
    assert wavenumber(lo, p) <= wavenumber(hi, p)
    assert wavenumber(lo, p) > 0


# -- transmission line factor ----------------------------------------------------------------

def test_tlf_zero_length_is_one():
    assert transmission_line_factor(0.0, 0.3, 17.0) == 1 + 0j


def test_tlf_pure_rotation():
    T = transmission_line_factor(500.0, 0.0, math.pi)
    assert abs(T - (-1 + 0j)) < 1e-15


def test_tlf_damped():
    T = transmission_line_factor(1000.0, 0.01, 6.28728)
    assert abs(T) == pytest.approx(math.exp(-0.02), rel=1e-14)
    assert abs(T) == pytest.approx(0.98020, abs=1e-5)
    expected = cmath.exp(-0.02) * cmath.exp(1j * (2 * 6.28728 % (2 * math.pi)))
    assert abs(T - expected) < 1e-12


def test_tlf_negative_length():
    with pytest.raises(DomainError):
        transmission_line_factor(-1.0, 0.01, 5.0)


@given(st.floats(0, 2000), st.floats(0, 2000), st.floats(0, 0.5), st.floats(0.1, 100))
def test_tlf_magnitude_non_increasing(a, b, eps, k):
    lo, hi = sorted((a, b))
    assert abs(transmission_line_factor(hi, eps, k)) <= abs(transmission_line_factor(lo, eps, k))
    assert abs(transmission_line_factor(lo, eps, k)) <= 1.0


@given(st.floats(0, 1500), st.floats(0, 300), st.floats(0.1, 50))
def test_tlf_phase_advances_linearly(L, delta, k):
    ratio = transmission_line_factor(L + delta, 0.0, k) / transmission_line_factor(L, 0.0, k)
    assert abs(ratio - cmath.exp(2j * k * delta * 1e-3)) < 1e-9


# -- forward model ------------------------------------------------------------------------

def test_forward_zero_numerator_gives_s21(calib_grid):
    calib, grid = calib_grid
    c = CalibrationSet(calib.s21, calib.s33, np.zeros(121, complex), calib.permittivity)
    for L in (0.0, 333.3, 1815.0):
        assert np.array_equal(forward_transmission(L, c, grid).values, calib.s21)


def test_forward_at_zero(calib_grid):
    calib, grid = calib_grid
    t = forward_transmission(0.0, calib, grid).values
    np.testing.assert_allclose(t, calib.s21 - calib.s23s13 / (calib.s33 - 1.0), rtol=1e-15)


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(4)
    calib, grid = random_calibration(rng)
    L = 700.0
    t = forward_transmission(L, calib, grid).values
    mpmath.mp.dps = 30
    for i, f in enumerate(grid.freqs_hz):
        k = 2 * mpmath.pi * mpmath.mpf(f) * mpmath.sqrt(calib.permittivity.eps_real) / C0
        T = mpmath.exp(2 * mpmath.mpf(L) / 1000 * (-calib.permittivity.eps_imag + 1j * k))
        ref = complex(calib.s21[i] - calib.s23s13[i] / (calib.s33[i] - 1 / T))
        assert abs(t[i] - ref) <= 1e-12 * abs(ref)


def test_forward_deterministic_and_batched(calib_grid):
    calib, grid = calib_grid
    a = forward_transmission(912.5, calib, grid).values
    b = forward_transmission(912.5, calib, grid).values
    assert np.array_equal(a, b)
    many = forward_many(np.array([912.5, 10.0]), calib, grid)
    assert np.array_equal(many[0], a)


def test_forward_out_of_stroke(calib_grid):
    calib, grid = calib_grid
    with pytest.raises(DomainError):
        forward_transmission(-0.5, calib, grid)
    with pytest.raises(DomainError):
        forward_transmission(1815.1, calib, grid)


def test_forward_singularity_names_index():
    # lossless line with S33 = 1/T(L) at one frequency makes the denominator vanish
    grid = FrequencyGrid.uniform()
    k = wavenumber(grid.freqs_hz, Permittivity(2.0, 0.0))
    L = 250.0
    s33 = np.full(121, 0.5 + 0j)
    s33[37] = 0.999999999999999 / transmission_line_factor(L, 0.0, k[37])
    calib = CalibrationSet(np.full(121, 0.1 + 0j), s33, np.full(121, 0.3 + 0j),
                           Permittivity(2.0, 0.0))
    with pytest.raises(SingularityError) as err:
        forward_transmission(L, calib, grid)
    assert err.value.index == 37
    assert "37" in str(err.value)


# -- inversion ----------------------------------------------------------------------------

def test_golden_section_parabola():
    x, fx, it = golden_section(lambda v: (v - 1.234) ** 2, 0.0, 3.0, 1e-9, 100)
    assert abs(x - 1.234) < 1e-8 and it <= 100


@pytest.mark.parametrize("L", [700.0, 0.0, 1815.0, 0.4, 1814.6])
def test_round_trip(calib_grid, L):
    calib, grid = calib_grid
    res = invert_position(forward_transmission(L, calib, grid), calib, grid)
    assert abs(res.position_mm - L) < 1e-3
    assert res.residual < 1e-12


def test_round_trip_sweep(calib_grid):
    calib, grid = calib_grid
    inv = PositionInverter(calib, grid)
    L = np.random.default_rng(7).uniform(10, 1805, 100)
    est = inv.invert_many(forward_many(L, calib, grid))
    assert np.max(np.abs(est - L)) < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1815))
def test_round_trip_random_calibrations(seed, L):
    calib, grid = random_calibration(np.random.default_rng(seed))
    res = invert_position(forward_transmission(L, calib, grid), calib, grid)
    assert abs(res.position_mm - L) < 1e-3


def test_magnitude_channel_diagnostic(calib_grid):
    calib, grid = calib_grid
    res = invert_position(forward_transmission(1200.0, calib, grid), calib, grid)
    assert res.magnitude_median_mm == pytest.approx(1200.0, abs=1e-3)
    lossless = CalibrationSet(calib.s21, calib.s33, calib.s23s13, Permittivity(2.2, 0.0))
    res = invert_position(forward_transmission(1200.0, lossless, grid), lossless, grid)
    assert res.magnitude_median_mm is None


def test_inversion_singularity(calib_grid):
    calib, grid = calib_grid
    t = forward_transmission(100.0, calib, grid).values.copy()
    t[3] = calib.s21[3]
    with pytest.raises(SingularityError):
        invert_position(TransmissionSpectrum.from_complex(t), calib, grid)


def test_inversion_residual_reject(calib_grid):
    from scatterpos.errors import NoSolutionError
    calib, grid = calib_grid
    t = forward_transmission(100.0, calib, grid).values + 0.05
    with pytest.raises(NoSolutionError):
        invert_position(TransmissionSpectrum.from_complex(t), calib, grid,
                        InversionOptions(residual_reject=1e-6))
