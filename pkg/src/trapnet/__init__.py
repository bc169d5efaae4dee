"""Design and analysis tools for zero-field intersections of RF ion-trap networks."""

from trapnet.multipole import (
    MultipoleField,
    PseudopotentialScale,
    field,
    laplacian_residual,
    potential,
    pseudopotential,
    symmetrize_detrace,
)

__version__ = "0.1.0"

__all__ = [
    "MultipoleField",
    "PseudopotentialScale",
    "field",
    "laplacian_residual",
    "potential",
    "pseudopotential",
    "symmetrize_detrace",
]
