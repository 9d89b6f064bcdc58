"""Piston position from cylinder transmission spectra: physics model,
analytic inversion and small real/complex-valued networks trained on
synthetic experiments."""

__version__ = "0.1.0"
