"""Numerical laboratory for free-boundary incompressible elastodynamics
on a periodic slab.

The fluid occupies the region between a flat floor and a moving graph
interface over the horizontal torus; the bulk unknowns are an
incompressible velocity and the columns of a deformation-gradient field,
coupled to the interface through a pressure that vanishes (or is
surface-tension regularized) on the moving boundary.  The package provides
the harmonic coordinate map onto a fixed reference slab, the elliptic and
Dirichlet-to-Neumann solvers, the coupled time stepper, and the stability
and energy diagnostics, together with a small CLI harness.
"""

from .dynamics import (
    FlowState,
    evo_residual,
    invariant_report,
    prepare_initial_data,
    stable_dt,
    step,
)
from .errors import (
    CeilingViolated,
    ConfigInvalid,
    DegenerateMap,
    ElastislabError,
    StabilityLost,
)
from .stability import (
    difference_energy,
    energy_es_eps,
    stability_report,
)

__version__ = "0.1.0"

__all__ = [
    "CeilingViolated",
    "ConfigInvalid",
    "DegenerateMap",
    "ElastislabError",
    "FlowState",
    "StabilityLost",
    "difference_energy",
    "energy_es_eps",
    "evo_residual",
    "invariant_report",
    "prepare_initial_data",
    "stability_report",
    "stable_dt",
    "step",
]
