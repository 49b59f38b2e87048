"""Desk-scale numerical laboratory for Liouville quantum gravity metrics and metric gluing."""

from .core import ConformalMap, Grid, LqgParams, derive_params, make_rng
from .kernels import BACKEND

__all__ = ["ConformalMap", "Grid", "LqgParams", "derive_params", "make_rng", "BACKEND"]
__version__ = "0.1.0"
