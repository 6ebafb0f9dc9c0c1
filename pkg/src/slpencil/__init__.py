"""Forward and inverse spectral solver for matrix quadratic Sturm-Liouville pencils.

The boundary value problem lives on [0, pi]:

    Y'' + (rho^2 I + 2 i rho Q1(x) + Q0(x)) Y = 0,
    Y'(0) + (i rho h1 + h0) Y(0) = 0,
    Y'(pi) + (i rho H1 + H0) Y(pi) = 0.

The forward direction computes eigenvalues and weight matrices (residues of
the Weyl matrix); the inverse direction reconstructs the coefficients from
that spectral data through a finite section of a linear equation in a
sequence space.
"""

from .core import (
    AsymptoticFrame,
    FormatError,
    GridFunction,
    PencilError,
    PencilSpec,
    RegimeError,
    SDEntry,
    SpectralData,
    ValidationReport,
    boundary_form_U,
    boundary_form_V,
    load_pencil,
    load_sd,
    save_pencil,
    save_sd,
    validate,
)

__all__ = [
    "AsymptoticFrame",
    "FormatError",
    "GridFunction",
    "PencilError",
    "PencilSpec",
    "RegimeError",
    "SDEntry",
    "SpectralData",
    "ValidationReport",
    "boundary_form_U",
    "boundary_form_V",
    "load_pencil",
    "load_sd",
    "save_pencil",
    "save_sd",
    "validate",
]

__version__ = "0.1.0"
