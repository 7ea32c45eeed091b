"""Elliptic solves on the mapped slab.

Discretization
--------------
All bulk boundary-value problems share one symmetric weak form.  With
w = v o Phi the Dirichlet energy of v over the moving domain pulls back
to the reference slab as

    int (K grad_y w) . grad_y w~ dy,    K = J Jinv Jinv^T,

so every problem here is a variant of  G^T W K G u = load  where G is a
staggered discrete gradient (spectral horizontal derivatives averaged to
vertical cell midpoints, compact vertical differences), K the cell
metric, and W the uniform cell measure.  The operator is symmetric
positive semidefinite by construction, which is what makes the
Dirichlet-to-Neumann operators built on top of it exactly self-adjoint:
boundary fluxes are recovered variationally as the operator residual at
constrained rows divided by the horizontal cell area.

Solves run matrix-free preconditioned CG; the preconditioner inverts
the flat-map (K = I) operator exactly, one tridiagonal system per
horizontal mode, so flat solves converge in a single iteration and
near-flat ones in a handful.

Flat fast path
--------------
For an exactly flat map the harmonic extensions are also available in
closed form per mode (stable exponential expressions of the sinh/cosh
profiles); those paths are exact and serve as oracles for the discrete
machinery.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import PreconditionViolated, SolverDiverged
from .geometry import CoordinateMap, SlabGrid, d3_node
from .spectral import wavenumbers

DEFAULT_TOL = 1e-10
MAXITER = 800

__all__ = [
    "harmonic_ext_dirichlet",
    "harmonic_ext_neumann",
    "poisson_dirichlet",
    "poisson_dirichlet_both",
    "pressure_bilinear",
    "weight_field",
    "solve_weak",
    "apply_operator",
    "boundary_flux_top",
    "boundary_flux_bottom",
    "volume_load",
    "volume_weights",
    "bulk_l2_norm",
]


# ---------------------------------------------------------------------------
# spectral factors shared by the operator and its preconditioner

@lru_cache(maxsize=32)
def _deriv_factors(n1: int, n2: int):
    """(i k1, i k2) rfft2 multipliers with Nyquist columns zeroed."""
    k1, k2 = wavenumbers(n1, n2)
    f1 = 1j * np.broadcast_to(k1, (n1, n2 // 2 + 1)).copy()
    f2 = 1j * np.broadcast_to(k2, (n1, n2 // 2 + 1)).copy()
    if n1 % 2 == 0:
        f1[n1 // 2, :] = 0.0
    if n2 % 2 == 0:
        f2[:, n2 // 2] = 0.0
    return f1, f2


@lru_cache(maxsize=32)
def _ksq_eff(n1: int, n2: int):
    """|k|^2 consistent with the zeroed-Nyquist derivative factors."""
    f1, f2 = _deriv_factors(n1, n2)
    return (f1.imag ** 2 + f2.imag ** 2)


@lru_cache(maxsize=32)
def _kernel_mask(n1: int, n2: int):
    """Modes annihilated by both horizontal derivatives.

    Vertically constant fields on these modes span the kernel of the
    all-Neumann operator (the mean mode plus zeroed Nyquist planes).
    """
    return _ksq_eff(n1, n2) == 0.0


def _node_to_cell(w):
    return 0.5 * (w[..., :-1] + w[..., 1:])


def _cell_to_node_adjoint(p):
    """Adjoint of _node_to_cell in the plain Euclidean pairing."""
    out = np.empty(p.shape[:-1] + (p.shape[-1] + 1,))
    out[..., 0] = 0.5 * p[..., 0]
    out[..., -1] = 0.5 * p[..., -1]
    out[..., 1:-1] = 0.5 * (p[..., :-1] + p[..., 1:])
    return out


def _d3_cell(w, dz):
    return np.diff(w, axis=-1) / dz


def _d3_cell_adjoint(p, dz):
    out = np.empty(p.shape[:-1] + (p.shape[-1] + 1,))
    out[..., 0] = -p[..., 0] / dz
    out[..., -1] = p[..., -1] / dz
    out[..., 1:-1] = (p[..., :-1] - p[..., 1:]) / dz
    return out


def _dh_pair(w):
    """Both horizontal spectral derivatives with one forward transform."""
    n1, n2 = w.shape[0], w.shape[1]
    f1, f2 = _deriv_factors(n1, n2)
    c = np.fft.rfft2(w, axes=(0, 1))
    d1 = np.fft.irfft2(c * f1[:, :, None], s=(n1, n2), axes=(0, 1))
    d2 = np.fft.irfft2(c * f2[:, :, None], s=(n1, n2), axes=(0, 1))
    return d1, d2


def _dh_pair_adjoint(p1, p2):
    """Adjoint of _dh_pair: -(d1 p1 + d2 p2), fused transforms."""
    n1, n2 = p1.shape[0], p1.shape[1]
    f1, f2 = _deriv_factors(n1, n2)
    c = np.fft.rfft2(p1, axes=(0, 1)) * f1[:, :, None]
    c += np.fft.rfft2(p2, axes=(0, 1)) * f2[:, :, None]
    return -np.fft.irfft2(c, s=(n1, n2), axes=(0, 1))


def grad_staggered(u: np.ndarray, grid: SlabGrid):
    """Cell-collocated discrete gradient (q1, q2, q3)."""
    d1, d2 = _dh_pair(u)
    return (
        _node_to_cell(d1),
        _node_to_cell(d2),
        _d3_cell(u, grid.dz),
    )


def grad_adjoint(q1, q2, q3, grid: SlabGrid):
    """Exact adjoint of grad_staggered."""
    out = _dh_pair_adjoint(_cell_to_node_adjoint(q1), _cell_to_node_adjoint(q2))
    out += _d3_cell_adjoint(q3, grid.dz)
    return out


def _metric_apply(cmap: CoordinateMap, q1, q2, q3):
    if cmap.is_flat:
        return q1, q2, q3
    k11, k22, k33, k13, k23 = cmap.metric_cell()
    return (
        k11 * q1 + k13 * q3,
        k22 * q2 + k23 * q3,
        k13 * q1 + k23 * q2 + k33 * q3,
    )


def apply_operator(u: np.ndarray, cmap: CoordinateMap) -> np.ndarray:
    """Full-row symmetric operator G^T W K G applied to a node field."""
    grid = cmap.grid
    q1, q2, q3 = grad_staggered(u, grid)
    m1, m2, m3 = _metric_apply(cmap, q1, q2, q3)
    w = grid.h1 * grid.h2 * grid.dz
    return grad_adjoint(w * m1, w * m2, w * m3, grid)


def energy_product(u: np.ndarray, v: np.ndarray, cmap: CoordinateMap) -> float:
    """Discrete Dirichlet energy pairing a(u, v)."""
    grid = cmap.grid
    q = grad_staggered(u, grid)
    m = _metric_apply(cmap, *grad_staggered(v, grid))
    w = grid.h1 * grid.h2 * grid.dz
    return float(w * sum(np.sum(a * b) for a, b in zip(q, m)))


# ---------------------------------------------------------------------------
# flat per-mode preconditioner

@lru_cache(maxsize=64)
def _flat_rows(n1: int, n2: int, nz: int, z0: int, z1: int):
    """Tridiagonal rows of the flat operator on free levels [z0, z1)."""
    from .geometry import vertical_fem_rows

    grid_dz = 1.0 / (nz - 1)
    ksq = _ksq_eff(n1, n2)[..., None]
    nfree = z1 - z0
    sub = np.zeros(ksq.shape[:2] + (nfree,))
    diag = np.zeros_like(sub)
    sup = np.zeros_like(sub)
    interior_off, interior_diag = vertical_fem_rows(ksq[..., 0:1], grid_dz)
    half_diag = 0.5 * interior_diag
    sub[:] = interior_off
    sup[:] = interior_off
    diag[:] = interior_diag
    if z0 == 0:  # bottom level is free: half row
        diag[..., 0] = half_diag[..., 0]
    if z1 == nz:  # top level is free: half row
        diag[..., -1] = half_diag[..., 0]
    if z0 == 0 and z1 == nz:
        # all-Neumann: zero-symbol blocks are singular on vertical
        # constants; pin their first row so the solve stays bounded
        diag[_kernel_mask(n1, n2), 0] += 1.0
    return sub, diag, sup


def _flat_solve(r: np.ndarray, grid: SlabGrid, z0: int, z1: int) -> np.ndarray:
    """Exact flat-operator solve on free levels (the CG preconditioner)."""
    from .geometry import thomas_batched

    n1, n2 = grid.n1, grid.n2
    sub, diag, sup = _flat_rows(n1, n2, grid.nz, z0, z1)
    rhat = np.fft.rfft2(r, axes=(0, 1)) / (grid.h1 * grid.h2)
    x = thomas_batched(sub, diag, sup, rhat)
    if z0 == 0 and z1 == grid.nz:
        mask = _kernel_mask(n1, n2)
        x[mask, :] -= np.mean(x[mask, :], axis=-1, keepdims=True)
    return np.fft.irfft2(x, s=(n1, n2), axes=(0, 1))


def _project_kernel(r: np.ndarray, grid: SlabGrid) -> np.ndarray:
    """Remove the all-Neumann kernel component (spectral, exact)."""
    c = np.fft.rfft2(r, axes=(0, 1))
    mask = _kernel_mask(grid.n1, grid.n2)
    c[mask, :] -= np.mean(c[mask, :], axis=-1, keepdims=True)
    return np.fft.irfft2(c, s=(grid.n1, grid.n2), axes=(0, 1))


# ---------------------------------------------------------------------------
# weak solver

def volume_weights(cmap: CoordinateMap) -> np.ndarray:
    """Quadrature weights for volume integrals over the moving domain."""
    grid = cmap.grid
    w = np.full(grid.nz, grid.dz)
    w[0] = w[-1] = 0.5 * grid.dz
    return grid.h1 * grid.h2 * w[None, None, :] * cmap.jac


def bulk_l2_norm(field: np.ndarray, cmap: CoordinateMap) -> float:
    """L^2 norm over the moving domain of a scalar or stacked components."""
    w = volume_weights(cmap)
    field = np.asarray(field)
    if field.ndim == 4:
        return float(np.sqrt(np.sum(w[None] * field ** 2)))
    return float(np.sqrt(np.sum(w * field ** 2)))


def _assemble_load(cmap, rhs, top, bottom):
    """Right-hand side vector of the weak system, full node shape."""
    grid = cmap.grid
    b = np.zeros(grid.shape)
    if rhs is not None:
        w = np.full(grid.nz, grid.dz)
        w[0] = w[-1] = 0.5 * grid.dz
        b -= grid.h1 * grid.h2 * w[None, None, :] * cmap.jac * rhs
    area = grid.h1 * grid.h2
    if top[0] == "neumann" and top[1] is not None:
        b[..., -1] += area * top[1]
    if bottom[0] == "neumann" and bottom[1] is not None:
        # datum is d3 of the solution at the floor; outward flux is its negative
        b[..., 0] -= area * bottom[1]
    return b


def solve_weak(
    cmap: CoordinateMap,
    rhs: np.ndarray | None = None,
    top=("dirichlet", None),
    bottom=("neumann", None),
    tol: float = DEFAULT_TOL,
    x0: np.ndarray | None = None,
    extra_load: np.ndarray | None = None,
):
    """Solve the weak mapped-Laplacian system.

    Parameters
    ----------
    rhs : physical-space source (Lap_x u = rhs) at nodes, or None.
    top, bottom : ("dirichlet", data) or ("neumann", data) pairs.
        Dirichlet data are boundary values; Neumann data are d3 of the
        solution at the floor, respectively N . grad u on the interface,
        both entering weakly.  None data means homogeneous.
    extra_load : optional pre-assembled weak load added to the rhs vector.

    Returns
    -------
    u : full node array including boundary levels.
    info : dict with iterations and final relative residual.
    """
    grid = cmap.grid
    nz = grid.nz
    z0 = 1 if bottom[0] == "dirichlet" else 0
    z1 = nz - 1 if top[0] == "dirichlet" else nz
    b = _assemble_load(cmap, rhs, top, bottom)
    if extra_load is not None:
        b += extra_load
    u0 = np.zeros(grid.shape)
    if top[0] == "dirichlet" and top[1] is not None:
        u0[..., -1] = top[1]
    if bottom[0] == "dirichlet" and bottom[1] is not None:
        u0[..., 0] = bottom[1]
    lifted = np.any(u0 != 0.0)
    if lifted:
        b = b - apply_operator(u0, cmap)
    bf = b[..., z0:z1]
    neumann_all = (z0 == 0 and z1 == nz)
    if neumann_all:
        bf = _project_kernel(bf, grid)
    x, iters, rel = _pcg(cmap, bf, z0, z1, tol, neumann_all,
                         None if x0 is None else x0[..., z0:z1])
    u = u0
    u[..., z0:z1] += x
    return u, {"iterations": iters, "residual": rel}


def _pcg(cmap, bf, z0, z1, tol, project_constants, x0):
    grid = cmap.grid
    nz = grid.nz

    def apply_free(xf):
        full = np.zeros(grid.shape)
        full[..., z0:z1] = xf
        return apply_operator(full, cmap)[..., z0:z1]

    bnorm = float(np.linalg.norm(bf))
    if bnorm == 0.0:
        return np.zeros_like(bf), 0, 0.0
    if x0 is not None:
        x = x0.copy()
        r = bf - apply_free(x)
    else:
        x = np.zeros_like(bf)
        r = bf.copy()
    if project_constants:
        r -= np.mean(r)
    z = _flat_solve(r, grid, z0, z1)
    if project_constants:
        z -= np.mean(z)
    p = z.copy()
    rz = float(np.sum(r * z))
    for it in range(1, MAXITER + 1):
        ap = apply_free(p)
        alpha = rz / float(np.sum(p * ap))
        x += alpha * p
        r -= alpha * ap
        if project_constants:
            r -= np.mean(r)
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= tol:
            return x, it, rel
        z = _flat_solve(r, grid, z0, z1)
        if project_constants:
            z -= np.mean(z)
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverDiverged(f"pcg stalled at rel residual {rel:.3e} after {MAXITER} its")


def volume_load(rhs: np.ndarray, cmap: CoordinateMap) -> np.ndarray:
    """Assembled weak load of a volume source (for flux recovery)."""
    return _assemble_load(cmap, rhs, ("neumann", None), ("neumann", None))


def boundary_flux_top(u: np.ndarray, cmap: CoordinateMap,
                      load: np.ndarray | None = None) -> np.ndarray:
    """Variational recovery of N . grad u on the interface.

    The residual of the full symmetric operator at the top rows equals
    the weak boundary flux integral; dividing by the horizontal cell
    area gives the flux samples.  Exactly adjoint-consistent.
    """
    grid = cmap.grid
    res = apply_operator(u, cmap)[..., -1]
    if load is not None:
        res = res - load[..., -1]
    return res / (grid.h1 * grid.h2)


def boundary_flux_bottom(u: np.ndarray, cmap: CoordinateMap,
                         load: np.ndarray | None = None) -> np.ndarray:
    """Variational recovery of the outward flux -d3 u at the floor."""
    grid = cmap.grid
    res = apply_operator(u, cmap)[..., 0]
    if load is not None:
        res = res - load[..., 0]
    return res / (grid.h1 * grid.h2)


# ---------------------------------------------------------------------------
# flat-case closed forms

def _stable_profiles(kappa: np.ndarray, y3: np.ndarray, kind: str) -> np.ndarray:
    """sinh(k(1+y))/sinh(k) or cosh(k(1+y))/cosh(k) without overflow."""
    k = kappa[..., None]
    y = y3[None, None, :]
    e = np.exp(k * y)            # k y <= 0
    em = np.exp(-2.0 * k * (1.0 + y))
    if kind == "sinh":
        with np.errstate(invalid="ignore", divide="ignore"):
            prof = e * (1.0 - em) / (1.0 - np.exp(-2.0 * k))
        prof = np.where(k > 0, prof, 1.0 + y)
    else:
        prof = e * (1.0 + em) / (1.0 + np.exp(-2.0 * k))
        prof = np.where(k > 0, prof, 1.0)
    return prof


def dn_symbol_dirichlet(kappa: np.ndarray) -> np.ndarray:
    """|k| coth|k| with the zero-mode limit 1."""
    e = np.exp(-2.0 * kappa)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = kappa * (1.0 + e) / (1.0 - e)
    return np.where(kappa > 0, s, 1.0)


def dn_symbol_neumann(kappa: np.ndarray) -> np.ndarray:
    """|k| tanh|k|; the zero mode maps to 0."""
    e = np.exp(-2.0 * kappa)
    return np.where(kappa > 0, kappa * (1.0 - e) / (1.0 + e), 0.0)


def _flat_kappa(n1, n2):
    k1, k2 = wavenumbers(n1, n2)
    return np.sqrt(k1 * k1 + k2 * k2)


def _flat_extension(g: np.ndarray, grid: SlabGrid, kind: str) -> np.ndarray:
    n1, n2 = grid.n1, grid.n2
    ghat = np.fft.rfft2(np.asarray(g, dtype=float))
    prof = _stable_profiles(_flat_kappa(n1, n2), grid.y3, kind)
    return np.fft.irfft2(ghat[..., None] * prof, s=(n1, n2), axes=(0, 1))


def harmonic_ext_dirichlet(g: np.ndarray, cmap: CoordinateMap,
                           via_solver: bool = False, tol: float = DEFAULT_TOL):
    """Harmonic extension with data g on the interface, zero on the floor.

    On a flat map the exact per-mode profile is returned unless
    via_solver forces the generic discrete path.
    """
    if cmap.is_flat and not via_solver:
        return _flat_extension(g, cmap.grid, "sinh")
    u, _ = solve_weak(cmap, top=("dirichlet", np.asarray(g, dtype=float)),
                      bottom=("dirichlet", np.zeros_like(g)), tol=tol)
    return u


def harmonic_ext_neumann(g: np.ndarray, cmap: CoordinateMap,
                         via_solver: bool = False, tol: float = DEFAULT_TOL):
    """Harmonic extension with data g on top and zero flux at the floor."""
    if cmap.is_flat and not via_solver:
        return _flat_extension(g, cmap.grid, "cosh")
    u, _ = solve_weak(cmap, top=("dirichlet", np.asarray(g, dtype=float)),
                      bottom=("neumann", None), tol=tol)
    return u


def poisson_dirichlet(rhs: np.ndarray, cmap: CoordinateMap,
                      top: np.ndarray | None = None,
                      bottom_d3: np.ndarray | None = None,
                      tol: float = DEFAULT_TOL,
                      x0: np.ndarray | None = None):
    """Solve Lap u = rhs with Dirichlet top and Neumann floor data."""
    n1, n2 = cmap.grid.n1, cmap.grid.n2
    topdata = np.zeros((n1, n2)) if top is None else np.asarray(top, dtype=float)
    u, _ = solve_weak(cmap, rhs=rhs, top=("dirichlet", topdata),
                      bottom=("neumann", bottom_d3), tol=tol, x0=x0)
    return u


def poisson_dirichlet_both(rhs: np.ndarray, cmap: CoordinateMap,
                           top: np.ndarray | None = None,
                           bottom: np.ndarray | None = None,
                           tol: float = DEFAULT_TOL):
    """Solve Lap u = rhs with Dirichlet data on both boundaries."""
    n1, n2 = cmap.grid.n1, cmap.grid.n2
    topdata = np.zeros((n1, n2)) if top is None else np.asarray(top, dtype=float)
    botdata = np.zeros((n1, n2)) if bottom is None else np.asarray(bottom, dtype=float)
    u, _ = solve_weak(cmap, rhs=rhs, top=("dirichlet", topdata),
                      bottom=("dirichlet", botdata), tol=tol)
    return u


def pressure_bilinear(v: np.ndarray, w: np.ndarray, cmap: CoordinateMap,
                      tol: float = DEFAULT_TOL) -> np.ndarray:
    """Pressure-type solve:  Lap p = -tr(grad v grad w), p = 0 on the
    interface, d3 p = 0 on the floor.

    v, w are physical vector fields stored on the slab, shape (3, ...).
    """
    from .geometry import mapped_gradient

    gv = [mapped_gradient(v[a], cmap) for a in range(3)]
    gw = [mapped_gradient(w[a], cmap) for a in range(3)]
    tr = np.zeros(cmap.grid.shape)
    for a in range(3):
        for b in range(3):
            tr += gv[a][b] * gw[b][a]
    return poisson_dirichlet(-tr, cmap, tol=tol)


def weight_field(a_bar: np.ndarray, c0: float, cmap: CoordinateMap,
                 tol: float = DEFAULT_TOL) -> np.ndarray:
    """Harmonic interior weight with data a_bar on top and c0 on the floor.

    Requires a_bar >= c0 everywhere (the blended boundary weight after
    adding the cutoff lift); the maximum principle then pins the field
    between c0 and max(a_bar), asserted a posteriori at quadrature slack.
    """
    a_bar = np.asarray(a_bar, dtype=float)
    if np.min(a_bar) < c0 - 1e-12:
        raise PreconditionViolated(
            f"boundary weight dips to {np.min(a_bar):.3e} below c0 = {c0:.3e}"
        )
    n1, n2 = cmap.grid.n1, cmap.grid.n2
    u, _ = solve_weak(cmap, top=("dirichlet", a_bar),
                      bottom=("dirichlet", np.full((n1, n2), c0)), tol=tol)
    lo = min(c0, float(np.min(a_bar)))
    hi = max(c0, float(np.max(a_bar)))
    slack = 1e-8 * max(1.0, hi - lo) + 1e-6 * (hi - lo) * cmap.grid.dz
    if np.min(u) < lo - slack or np.max(u) > hi + slack:
        raise PreconditionViolated("weight field violates the maximum principle")
    return u
