"""Paper-style figures from spectra training metrics and benchmark CSVs."""

from .ewma import ewma
from .render import CurveSpec, render

__all__ = ["ewma", "CurveSpec", "render"]
