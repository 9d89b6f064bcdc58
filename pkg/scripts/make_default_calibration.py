"""Regenerate src/scatterpos/data/default_calibration.json.

The curves are synthetic: smooth magnitudes and phases over frequency,
chosen so that |s33| stays within 0.3-0.6 and the inversion is well
conditioned. They do not describe any real cylinder.
"""
from pathlib import Path

import numpy as np

from scatterpos.persistence import save_calibration
from scatterpos.physics import CalibrationSet, FrequencyGrid, Permittivity


def make():
    grid = FrequencyGrid.uniform()
    f = grid.freqs_hz
    u = grid.normalized()
    s21 = 0.06 * (1.0 + 0.3 * u) * np.exp(-1j * (2 * np.pi * f * 1.2e-9 + 0.4))
    s33 = (0.3 + 0.3 * u) * np.exp(1j * (0.8 + 2.5 * u))
    s23s13 = 0.45 * (1.0 - 0.25 * u) * np.exp(-1j * (2 * np.pi * f * 2.0e-9 + 0.3))
    calib = CalibrationSet(s21, s33, s23s13, Permittivity(2.2, 0.01), mu_r=1.0, stroke_mm=1815.0)
    return calib, grid


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src/scatterpos/data/default_calibration.json"
    save_calibration(out, *make())
    print(out)
