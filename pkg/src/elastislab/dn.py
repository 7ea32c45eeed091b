"""Interface flux operators and their calculus.

Two Dirichlet-to-Neumann maps act on surface fields: both extend the
datum harmonically under the slab map and return the conormal flux
N . grad on the interface, recovered variationally.  They differ in the
floor condition: the clamped variant extends with zero boundary values
at the floor (flat symbol |k| coth |k|, mean mode 1), the free variant
with zero floux there (flat symbol |k| tanh |k|, mean mode annihilated).

On flat maps both operators and the inverse of the free variant act
mode-by-mode through exact symbols; via_solver forces the generic
discrete route, which is what the self-adjointness and convergence
checks exercise.

The commutator assemblies implement exact interface identities:
differentiating the extension problem in time trades the moving domain
for bulk correction solves, and multiplying the datum trades the
product rule defect for one Poisson solve clamped on both boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import elliptic as el
from .errors import NotMeanZero, SolverDiverged
from .geometry import CoordinateMap, mapped_gradient, normal_vector, tangent_vectors
from .spectral import horizontal_derivative, wavenumbers

DEFAULT_TOL = 1e-10

__all__ = [
    "apply_dn",
    "apply_dn_neumann",
    "invert_dn_neumann",
    "dt_normal",
    "DtNormal",
    "material_dn_commutator",
    "multiplier_dn_commutator",
]


def _symbol_apply(g: np.ndarray, symbol: np.ndarray) -> np.ndarray:
    n1, n2 = g.shape
    return np.fft.irfft2(np.fft.rfft2(g) * symbol, s=(n1, n2))


def _kappa(n1: int, n2: int) -> np.ndarray:
    k1, k2 = wavenumbers(n1, n2)
    return np.sqrt(k1 * k1 + k2 * k2)


def apply_dn(g: np.ndarray, cmap: CoordinateMap, via_solver: bool = False,
             tol: float = DEFAULT_TOL) -> np.ndarray:
    """Interface flux of the floor-clamped harmonic extension of g."""
    g = np.asarray(g, dtype=float)
    if cmap.is_flat and not via_solver:
        return _symbol_apply(g, el.dn_symbol_dirichlet(_kappa(*g.shape)))
    u = el.harmonic_ext_dirichlet(g, cmap, via_solver=True, tol=tol)
    return el.boundary_flux_top(u, cmap)


def apply_dn_neumann(g: np.ndarray, cmap: CoordinateMap, via_solver: bool = False,
                     tol: float = DEFAULT_TOL) -> np.ndarray:
    """Interface flux of the free-floor harmonic extension of g."""
    g = np.asarray(g, dtype=float)
    if cmap.is_flat and not via_solver:
        return _symbol_apply(g, el.dn_symbol_neumann(_kappa(*g.shape)))
    u = el.harmonic_ext_neumann(g, cmap, via_solver=True, tol=tol)
    return el.boundary_flux_top(u, cmap)


STALL_TOL = 1e-4


def invert_dn_neumann(h: np.ndarray, cmap: CoordinateMap,
                      tol: float = 1e-9, maxiter: int = 200) -> np.ndarray:
    """Solve the free-floor flux problem: find mean-zero z with flux h.

    h must be mean-free (the operator range excludes constants); the
    guard is relative at 1e-8.  Flat maps invert the symbol directly;
    otherwise boundary CG runs with the flat inverse as preconditioner,
    each iteration costing one bulk solve.

    Each operator application is itself an inexact bulk solve, so the
    boundary recurrence bottoms out at the inner solver noise; the loop
    keeps the best iterate and stops once the residual stagnates.  The
    best iterate is accepted down to STALL_TOL relative; beyond that the
    datum is declared unreachable and SolverDiverged is raised.
    """
    h = np.asarray(h, dtype=float)
    hnorm = float(np.linalg.norm(h))
    if hnorm == 0.0:
        return np.zeros_like(h)
    if abs(float(np.mean(h))) > 1e-8 * float(np.max(np.abs(h))):
        raise NotMeanZero(f"flux datum has mean {np.mean(h):.3e}")
    kappa = _kappa(*h.shape)
    if cmap.is_flat:
        sym = el.dn_symbol_neumann(kappa)
        inv = np.where(sym > 0, 1.0 / np.where(sym > 0, sym, 1.0), 0.0)
        z = _symbol_apply(h, inv)
        return z - z.mean()

    sym = el.dn_symbol_neumann(kappa)
    inv = np.where(sym > 0, 1.0 / np.where(sym > 0, sym, 1.0), 0.0)

    def precond(r):
        z = _symbol_apply(r, inv)
        return z - z.mean()

    def apply(zz):
        out = apply_dn_neumann(zz, cmap, tol=0.01 * tol)
        return out - out.mean()

    x = np.zeros_like(h)
    r = h - h.mean()
    z = precond(r)
    p = z.copy()
    rz = float(np.sum(r * z))
    best_x = x.copy()
    best_rn = float(np.linalg.norm(r))
    since_best = 0
    for _ in range(maxiter):
        ap = apply(p)
        pap = float(np.sum(p * ap))
        if pap <= 0.0:
            break  # direction lost to inner-solve noise
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rn = float(np.linalg.norm(r))
        if rn < best_rn:
            best_rn = rn
            best_x = x.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= 5:
                break
        if rn <= tol * hnorm:
            return x - x.mean()
        z = precond(r)
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    if best_rn <= max(tol, STALL_TOL) * hnorm:
        return best_x - best_x.mean()
    raise SolverDiverged(
        f"boundary flux inversion stalled at {best_rn / hnorm:.3e} relative"
    )


# ---------------------------------------------------------------------------
# material derivative of the interface normal

@dataclass(frozen=True)
class DtNormal:
    """Surface decomposition of the normal's material derivative."""

    vector: np.ndarray        # (3, n1, n2) assembled derivative
    tangential_1: np.ndarray  # coefficient on (1, 0, d1 f)
    tangential_2: np.ndarray  # coefficient on (0, 1, d2 f)
    normal_coef: np.ndarray   # coefficient on the unnormalized normal


def dt_normal(u_trace: np.ndarray, f: np.ndarray) -> DtNormal:
    """Material derivative of the unnormalized interface normal.

    u_trace holds the three velocity components sampled on the moving
    interface.  The derivative is returned both assembled and split
    into the tangential/normal frame of the surface; the assembly is an
    exact pointwise identity, so both views agree to roundoff.
    """
    f = np.asarray(f, dtype=float)
    n = normal_vector(f)
    t1, t2 = tangent_vectors(f)
    f1 = horizontal_derivative(f, 1)
    f2 = horizontal_derivative(f, 2)
    c1 = sum(horizontal_derivative(u_trace[a], 1) * n[a] for a in range(3))
    c2 = sum(horizontal_derivative(u_trace[a], 2) * n[a] for a in range(3))
    denom = 1.0 + f1 * f1 + f2 * f2
    a = (-c1 - f2 * f2 * c1 + f1 * f2 * c2) / denom
    b = (-c2 - f1 * f1 * c2 + f1 * f2 * c1) / denom
    nc = (f1 * c1 + f2 * c2) / denom
    vec = a[None] * t1 + b[None] * t2 + nc[None] * n
    return DtNormal(vector=vec, tangential_1=a, tangential_2=b, normal_coef=nc)


# ---------------------------------------------------------------------------
# commutators

def material_dn_commutator(g: np.ndarray, u: np.ndarray, cmap: CoordinateMap,
                           tol: float = DEFAULT_TOL) -> np.ndarray:
    """Commutator of the material derivative with the free-floor flux map.

    u is the bulk velocity on the slab, (3, n1, n2, nz); the interface
    must be material for u and the floor impermeable.  Differentiating
    the extension problem in time yields bulk corrections (the domain
    motion enters through the commutator of the material derivative
    with the Laplacian and through the floor flux condition) plus the
    surface terms carrying the moving normal.
    """
    g = np.asarray(g, dtype=float)
    grid = cmap.grid
    w = el.harmonic_ext_neumann(g, cmap, tol=tol)
    gw = mapped_gradient(w, cmap)
    du = [mapped_gradient(u[a], cmap) for a in range(3)]

    # [Lap, D_t] source: 2 grad u : grad^2 w + (Lap u) . grad w
    src = np.zeros(grid.shape)
    for b in range(3):
        d2wb = mapped_gradient(gw[b], cmap)
        for a in range(3):
            src += 2.0 * du[b][a] * d2wb[a]
        lap_ub = np.zeros(grid.shape)
        for a in range(3):
            lap_ub += mapped_gradient(du[b][a], cmap)[a]
        src += lap_ub * gw[b]
    v1 = el.poisson_dirichlet(src, cmap, tol=tol)
    term1 = el.boundary_flux_top(v1, cmap, el.volume_load(src, cmap))

    # floor flux condition picks up the moving frame at the bottom
    bot = (du[0][2][..., 0] * gw[0][..., 0]
           + du[1][2][..., 0] * gw[1][..., 0])
    v2, _ = el.solve_weak(cmap, top=("dirichlet", np.zeros(g.shape)),
                          bottom=("neumann", bot), tol=tol)
    term2 = el.boundary_flux_top(v2, cmap)

    # surface terms: normal derivative of u against the extension
    # gradient, plus the moving-normal decomposition
    n = normal_vector(cmap.f)
    ngradu = [sum(n[a] * du[b][a][..., -1] for a in range(3)) for b in range(3)]
    term3 = -sum(gw[b][..., -1] * ngradu[b] for b in range(3))

    u_trace = np.stack([u[a][..., -1] for a in range(3)])
    frame = dt_normal(u_trace, cmap.f)
    g1 = horizontal_derivative(g, 1)
    g2 = horizontal_derivative(g, 2)
    nbar_g = apply_dn_neumann(g, cmap, tol=tol)
    term4 = (frame.tangential_1 * g1 + frame.tangential_2 * g2
             + frame.normal_coef * nbar_g)

    return term1 + term2 + term3 + term4


def multiplier_dn_commutator(g: np.ndarray, a: np.ndarray, cmap: CoordinateMap,
                             tol: float = DEFAULT_TOL) -> np.ndarray:
    """Commutator of the clamped flux map with multiplication by a.

    The extension of a product differs from the product of extensions
    by one Poisson solve clamped on both boundaries, whose source is
    twice the gradient pairing of the two extensions; the commutator is
    the datum times the flux of a minus the interface flux of that
    correction.
    """
    g = np.asarray(g, dtype=float)
    a = np.asarray(a, dtype=float)
    ha = el.harmonic_ext_dirichlet(a, cmap, tol=tol)
    hg = el.harmonic_ext_dirichlet(g, cmap, tol=tol)
    ga = mapped_gradient(ha, cmap)
    gg = mapped_gradient(hg, cmap)
    src = 2.0 * sum(ga[b] * gg[b] for b in range(3))
    v = el.poisson_dirichlet_both(src, cmap, tol=tol)
    flux = el.boundary_flux_top(v, cmap, el.volume_load(src, cmap))
    return g * apply_dn(a, cmap, tol=tol) - flux
