"""Masked autoencoding of fMRI activity on cortical flat maps."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    DimensionError,
    EmptyMeshError,
    FlatMAEError,
    FormatError,
    GridMismatchError,
    InsufficientDataError,
    NumericFault,
    RangeError,
    ValidationError,
)
from .flatgeo import FlatMapResampler, FlatMesh, ResampleGrid, build_grid, load_grid, load_mesh  # noqa: E402
from .token import PatchLayout, build_layout, make_mask, patchify, unpatchify  # noqa: E402

__all__ = [
    "__version__",
    "ConfigurationError",
    "DimensionError",
    "EmptyMeshError",
    "FlatMAEError",
    "FormatError",
    "GridMismatchError",
    "InsufficientDataError",
    "NumericFault",
    "RangeError",
    "ValidationError",
    "FlatMapResampler",
    "FlatMesh",
    "ResampleGrid",
    "build_grid",
    "load_grid",
    "load_mesh",
    "PatchLayout",
    "build_layout",
    "make_mask",
    "patchify",
    "unpatchify",
]
