"""Coupled evolution of the interface and the incompressible elastic bulk.

The state lives on the reference slab: the interface height together with
the velocity and the three deformation columns, all stored as physical
components sampled at slab nodes.  Time stepping is arbitrary
Lagrangian-Eulerian: the harmonic coordinate map follows the interface, so
every right-hand side is the material rate corrected by the grid motion.

Incompressibility and the column constraints are enforced with discrete
Helmholtz-type projections built on the same symmetric weak operator as
the elliptic solvers.  The corrections are exact cell-average lifts of a
weak potential gradient, which keeps the projected fields weakly
divergence free up to the linear-solver tolerance and, for the
normal-trace variant, matches the prescribed interface trace exactly.

Pressure splits into a bilinear part (zero on the interface) and, when
the interface regularization is on, a harmonic part whose interface trace
realizes the regularizing boundary condition through a single Neumann
solve.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    CeilingViolated,
    GridMismatch,
    InsufficientHistory,
    PreconditionViolated,
    ProjectionIncompatible,
)
from .geometry import (
    CoordinateMap,
    SlabGrid,
    bottom_trace,
    build_map,
    map_time_derivative,
    mapped_gradient,
    normal_vector,
    thomas_batched,
    trace,
)
from .spectral import InterfaceField, horizontal_derivative, mollify, remove_mean
from .elliptic import (
    DEFAULT_TOL,
    _metric_apply,
    apply_operator,
    boundary_flux_top,
    grad_adjoint,
    grad_staggered,
    harmonic_ext_dirichlet,
    poisson_dirichlet,
    solve_weak,
    volume_load,
)
from .dn import apply_dn, invert_dn_neumann, material_dn_commutator

__all__ = [
    "FlowState",
    "PressurePieces",
    "assemble_pressure",
    "bulk_rhs",
    "divergence_field",
    "divergence_residual",
    "evo_residual",
    "interface_accel_rhs",
    "interface_theta_rhs",
    "invariant_report",
    "kinematic_rate",
    "material_pressure_derivative",
    "normal_trace_defect",
    "prepare_initial_data",
    "project_div",
    "project_div_normal",
    "stable_dt",
    "step",
    "step_theta",
    "weak_div_load",
]

REPROJECT_THRESHOLD = 1e-6

ABLATABLE_TERMS = (
    "taylor",
    "elastic",
    "epsilon",
    "stretch",
    "velocity",
    "pressure",
    "pbar",
)


# ---------------------------------------------------------------------------
# state container


class FlowState:
    """Immutable snapshot of the coupled system on the reference slab.

    Attributes
    ----------
    t : float
    f : array (n1, n2)
        Mean-zero interface height.
    u : array (3, n1, n2, nz)
        Physical velocity components at slab nodes.
    F : array (3, 3, n1, n2, nz)
        Deformation columns; F[j, a] is component a of column j.
    eps : float
        Interface regularization strength (0 disables it).
    s : int
        Sobolev index used by the energy functionals.
    c0 : float
        Stability threshold; also sets the interface height ceiling.
    regions : optional pair of rectangle tuples for the two stability
        regions, passed through to the diagnostics.
    cmap : CoordinateMap for f, built on construction.

    Construction normalizes the fields onto the constraint set: the
    interface mean is removed, and the floor rows of u3 and of every
    F[j, 3] are zeroed.  The Runge-Kutta stages rely on this overwrite.
    """

    __slots__ = ("t", "f", "u", "F", "eps", "s", "c0", "regions", "cmap")

    def __init__(self, t, f, u, F, eps, s=4, c0=0.1, regions=None,
                 grid: SlabGrid | None = None):
        f = np.asarray(f, dtype=float)
        u = np.array(u, dtype=float)
        F = np.array(F, dtype=float)
        if u.shape[0] != 3 or F.shape[:2] != (3, 3):
            raise GridMismatch(f"component axes: u {u.shape}, F {F.shape}")
        if u.shape[1:3] != f.shape or F.shape[2:4] != f.shape:
            raise GridMismatch(f"plane shapes: f {f.shape}, u {u.shape}")
        if grid is None:
            grid = SlabGrid(f.shape[0], f.shape[1], u.shape[-1])
        f = f - np.mean(f)
        ceiling = 1.0 - c0
        if np.max(np.abs(f)) >= ceiling:
            raise CeilingViolated(
                f"max |f| = {np.max(np.abs(f)):.3e} >= {ceiling:.3e}"
            )
        u[2, ..., 0] = 0.0
        F[:, 2, ..., 0] = 0.0
        self.t = float(t)
        self.f = f
        self.u = u
        self.F = F
        self.eps = float(eps)
        self.s = int(s)
        self.c0 = float(c0)
        self.regions = regions
        self.cmap = build_map(f, grid)

    @property
    def grid(self) -> SlabGrid:
        return self.cmap.grid

    def interface(self) -> InterfaceField:
        return InterfaceField(self.f.copy())

    def with_fields(self, t, f, u, F) -> "FlowState":
        return FlowState(t, f, u, F, self.eps, self.s, self.c0,
                         self.regions, self.grid)


def kinematic_rate(state: FlowState) -> np.ndarray:
    """Interface velocity u.N from the velocity trace, mean removed."""
    n = normal_vector(state.f)
    dtf = sum(n[a] * trace(state.u[a]) for a in range(3))
    return dtf - np.mean(dtf)


# ---------------------------------------------------------------------------
# weak divergence and projections


def _cell_average(w: np.ndarray) -> np.ndarray:
    return 0.5 * (w[..., :-1] + w[..., 1:])


def _piola_cell(cmap: CoordinateMap, v1, v2, v3):
    """Flux components J Jinv v at vertical cell midpoints."""
    if cmap.is_flat:
        return v1, v2, v3
    p1, p2, p3 = cmap.phi1_cell, cmap.phi2_cell, cmap.phi3_cell
    return p3 * v1, p3 * v2, v3 - p1 * v1 - p2 * v2


def _piola_cell_inv(cmap: CoordinateMap, m1, m2, m3):
    if cmap.is_flat:
        return m1, m2, m3
    p1, p2, p3 = cmap.phi1_cell, cmap.phi2_cell, cmap.phi3_cell
    v1 = m1 / p3
    v2 = m2 / p3
    return v1, v2, m3 + p1 * v1 + p2 * v2


def weak_div_load(v: np.ndarray, cmap: CoordinateMap) -> np.ndarray:
    """Weak divergence functional of a vector field, one row per level.

    Row r is the integral of div(v) against the hat function of level r,
    written through the flux form so that the interface and floor rows
    carry the true boundary fluxes v.N and -v3.  Constant fields are
    exactly annihilated on any map.
    """
    grid = cmap.grid
    m1, m2, m3 = _piola_cell(cmap, *(_cell_average(v[a]) for a in range(3)))
    w = grid.h1 * grid.h2 * grid.dz
    b = -grad_adjoint(w * m1, w * m2, w * m3, grid)
    area = grid.h1 * grid.h2
    n = normal_vector(cmap.f)
    vn = sum(n[a] * trace(v[a]) for a in range(3))
    b[..., -1] += area * vn
    b[..., 0] += -area * bottom_trace(v[2])
    return b


def divergence_field(v: np.ndarray, cmap: CoordinateMap) -> np.ndarray:
    """Nodal divergence estimate: the weak load scaled back to a density."""
    grid = cmap.grid
    w = np.full(grid.nz, grid.dz)
    w[0] = w[-1] = 0.5 * grid.dz
    return weak_div_load(v, cmap) / (grid.h1 * grid.h2 * w[None, None, :]
                                     * cmap.jac)


def divergence_residual(v: np.ndarray, cmap: CoordinateMap) -> float:
    """Max-norm of the divergence density over interior levels.

    The two boundary rows are excluded: each projection variant leaves
    exactly one of them outside the solved system (see project_div and
    project_div_normal), so the interior rows are the common monitored
    quantity.
    """
    return float(np.max(np.abs(divergence_field(v, cmap)[..., 1:-1])))


def normal_trace_defect(v: np.ndarray, cmap: CoordinateMap,
                        target: np.ndarray | None = None) -> float:
    """Max-norm of v.N - target on the interface."""
    n = normal_vector(cmap.f)
    vn = sum(n[a] * trace(v[a]) for a in range(3))
    if target is not None:
        vn = vn - target
    return float(np.max(np.abs(vn)))


def _minnorm_lift(q: np.ndarray) -> np.ndarray:
    """Node field whose vertical pair averages equal q, minimal L2 norm.

    Solves (A A^T) y = q with A the node-to-cell averaging and returns
    A^T y; the normal-equation matrix is tridiagonal (1/4, 1/2, 1/4).
    """
    nc = q.shape[-1]
    sub = np.full(nc, 0.25)
    diag = np.full(nc, 0.5)
    sup = np.full(nc, 0.25)
    y = thomas_batched(sub, diag, sup, q)
    out = np.empty(q.shape[:-1] + (nc + 1,))
    out[..., 0] = 0.5 * y[..., 0]
    out[..., -1] = 0.5 * y[..., -1]
    out[..., 1:-1] = 0.5 * (y[..., :-1] + y[..., 1:])
    return out


def _anchored_lift(q: np.ndarray, anchor: np.ndarray, where: str) -> np.ndarray:
    """Node field with prescribed boundary value and pair averages q.

    The recursion c_{j+1} = 2 q_j - c_j is evaluated through signed
    cumulative sums; "bottom" anchors the floor value, "top" the
    interface value.
    """
    nc = q.shape[-1]
    if where == "top":
        q = q[..., ::-1]
    sign = (-1.0) ** np.arange(1, nc + 1)
    t = np.cumsum(2.0 * sign * q, axis=-1)
    out = np.empty(q.shape[:-1] + (nc + 1,))
    out[..., 0] = anchor
    out[..., 1:] = (t + anchor[..., None]) * sign
    if where == "top":
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def _correction_cells(cmap: CoordinateMap, psi: np.ndarray):
    """Cell components of the gradient-type correction for a potential."""
    m = _metric_apply(cmap, *grad_staggered(psi, cmap.grid))
    return _piola_cell_inv(cmap, *m)


def _gradient_correction(cmap: CoordinateMap, psi: np.ndarray):
    """Node-valued correction field with exact cell averages.

    The bulk of the correction is the smooth physical gradient of the
    potential; the O(dz^2) gap between its vertical pair averages and the
    exact cell data is repaired by the lifts.  Feeding the full cell data
    to the lifts instead would put the whole correction into them and
    leave a vertical two-node oscillation of amplitude O(dz), which the
    one-sided interface stencils turn into an O(1) gradient error.
    Components 1 and 2 use the minimum-norm lift; component 3 is anchored
    so the floor value of the total is exactly zero.
    """
    q1, q2, q3 = _correction_cells(cmap, psi)
    g = mapped_gradient(psi, cmap)
    corr = np.empty((3,) + psi.shape)
    corr[0] = g[0] + _minnorm_lift(q1 - _cell_average(g[0]))
    corr[1] = g[1] + _minnorm_lift(q2 - _cell_average(g[1]))
    corr[2] = g[2] + _anchored_lift(q3 - _cell_average(g[2]),
                                    -bottom_trace(g[2]), "bottom")
    return corr


def project_div(v: np.ndarray, cmap: CoordinateMap,
                tol: float = DEFAULT_TOL):
    """Remove the weak divergence of a velocity-type field.

    The potential solves the weak system with the top level excluded
    (Dirichlet zero) and the floor natural, so the interface trace of v
    is left free while the floor row is corrected.  The correction is the
    potential gradient with exact cell averages and an exactly zero floor
    value (see _gradient_correction).

    Returns (projected field, info dict).
    """
    b = weak_div_load(v, cmap)
    psi, info = solve_weak(cmap, top=("dirichlet", None),
                           bottom=("neumann", None), extra_load=-b, tol=tol)
    return v - _gradient_correction(cmap, psi), info


def project_div_normal(v: np.ndarray, cmap: CoordinateMap,
                       target: np.ndarray | None = None,
                       tol: float = DEFAULT_TOL, rounds: int = 3,
                       trace_tol: float = 1e-12):
    """Remove the weak divergence, set v.N on the interface, seal the floor.

    Each round solves the all-Neumann system whose interface row carries
    the remaining trace defect and applies the floor-anchored lift of the
    potential gradient.  The floor value stays exactly zero, every
    divergence row below the interface is met to the solver tolerance,
    and the interface trace is met in the variational sense exactly: its
    pointwise defect drops to the consistency order of the input defect
    (exactly on a flat map) and is reported in info["trace_defect"].
    Divergence-free inputs that already satisfy the trace pass through
    unchanged.

    The target must have (numerically) zero mean: a net interface flux
    with a sealed floor admits no divergence-free correction, and
    ProjectionIncompatible is raised.

    Returns (projected field, info dict with rounds and solver iterations).
    """
    grid = cmap.grid
    if target is None:
        target = np.zeros(cmap.f.shape)
    area = grid.h1 * grid.h2
    scale = max(1.0, float(np.max(np.abs(v))), float(np.max(np.abs(target))))
    if abs(float(np.sum(target))) > 1e-8 * grid.n1 * grid.n2 * scale:
        raise ProjectionIncompatible(
            f"mean target flux {float(np.mean(target)):.3e} cannot be "
            "reached with a sealed floor"
        )
    n = normal_vector(cmap.f)
    work = np.array(v, dtype=float)
    floor0 = bottom_trace(work[2]).copy()
    if np.any(floor0 != 0.0):
        # carry a nonzero floor value into the divergence defect smoothly
        work[2] -= floor0[..., None] * (-grid.y3)
    info = {"rounds": 0, "iterations": 0, "trace_defect": np.inf}
    last = np.inf
    for _ in range(rounds):
        d = sum(n[a] * trace(work[a]) for a in range(3)) - target
        b = -weak_div_load(work, cmap)
        b[..., -1] += area * d
        psi, inf = solve_weak(cmap, top=("neumann", None),
                              bottom=("neumann", None), extra_load=b, tol=tol)
        work = work - _gradient_correction(cmap, psi)
        info["rounds"] += 1
        info["iterations"] += inf["iterations"]
        cur = normal_trace_defect(work, cmap, target)
        info["trace_defect"] = cur
        if cur <= trace_tol * scale or cur >= 0.5 * last:
            break  # converged, or hit the consistency-order plateau
        last = cur
    return work, info


# ---------------------------------------------------------------------------
# pressure assembly


class PressurePieces:
    """Pressure split: total = ring (bilinear part) + bar (regularization)."""

    __slots__ = ("total", "ring", "bar", "ring_load", "info")

    def __init__(self, ring, bar, ring_load, info):
        self.ring = ring
        self.bar = bar
        self.total = ring if bar is None else ring + bar
        self.ring_load = ring_load
        self.info = info


def _gradient_stack(state: FlowState):
    """Mapped gradients of u and of all deformation components."""
    cmap = state.cmap
    du = np.stack([mapped_gradient(state.u[a], cmap) for a in range(3)])
    dF = np.stack([
        np.stack([mapped_gradient(state.F[j, a], cmap) for a in range(3)])
        for j in range(3)
    ])
    return du, dF


def assemble_pressure(state: FlowState, tol: float = DEFAULT_TOL,
                      check: bool = False,
                      gradients=None) -> PressurePieces:
    """Solve for the pressure of the current state.

    The ring part carries the quadratic sources (velocity stretching
    minus elastic stretching) with zero interface value and natural
    floor; the bar part is harmonic with interface flux given by the
    regularizing surface operator, fixed by a mean-zero interface trace.

    With check=True the bar trace is compared against the inverse-DN
    route and the relative mismatch stored in info["bar_trace_check"].
    """
    cmap = state.cmap
    du, dF = _gradient_stack(state) if gradients is None else gradients
    src = np.zeros(state.grid.shape)
    for a in range(3):
        for b in range(3):
            src -= du[a][b] * du[b][a]
            for j in range(3):
                src += dF[j, a][b] * dF[j, b][a]
    ring = poisson_dirichlet(src, cmap, tol=tol)
    info = {}
    bar = None
    if state.eps != 0.0:
        lap_f = (horizontal_derivative(horizontal_derivative(state.f, 1), 1)
                 + horizontal_derivative(horizontal_derivative(state.f, 2), 2))
        flux = -state.eps * lap_f
        bar, info_bar = solve_weak(cmap, top=("neumann", flux),
                                   bottom=("neumann", None), tol=tol)
        bar = bar - np.mean(trace(bar))
        info["bar"] = info_bar
        if check:
            want = -state.eps * invert_dn_neumann(lap_f, cmap, tol=0.1 * tol)
            got = trace(bar)
            denom = max(float(np.max(np.abs(want))), 1e-30)
            info["bar_trace_check"] = float(
                np.max(np.abs(got - want)) / denom)
    return PressurePieces(ring, bar, volume_load(src, cmap), info)


# ---------------------------------------------------------------------------
# bulk rates


def bulk_rhs(state: FlowState, pressure: PressurePieces | None = None,
             tol: float = DEFAULT_TOL, dtf_override: np.ndarray | None = None):
    """Reference-frame time derivatives of (f, u, F).

    Material momentum and transport rates plus the grid-motion correction
    dt(phi) d3(.) from the moving harmonic map.  The interface rate is
    the kinematic one unless dtf_override is given (the theta stepper
    moves the grid with its own interface velocity).
    """
    cmap = state.cmap
    if pressure is None:
        pressure = assemble_pressure(state, tol=tol)
    du, dF = _gradient_stack(state)
    dp = mapped_gradient(pressure.total, cmap)
    dtf = kinematic_rate(state) if dtf_override is None else dtf_override
    dtphi = map_time_derivative(cmap, dtf)
    u, F = state.u, state.F
    rate_u = np.empty_like(u)
    for a in range(3):
        adv = sum(u[b] * du[a][b] for b in range(3))
        ela = sum(F[j, b] * dF[j, a][b] for j in range(3) for b in range(3))
        rate_u[a] = -adv - dp[a] + ela + dtphi * du[a][2]
    rate_F = np.empty_like(F)
    for j in range(3):
        for a in range(3):
            adv = sum(u[b] * dF[j, a][b] for b in range(3))
            stretch = sum(F[j, b] * du[a][b] for b in range(3))
            rate_F[j, a] = -adv + stretch + dtphi * dF[j, a][2]
    return dtf, rate_u, rate_F


# ---------------------------------------------------------------------------
# interface evolution identities


def _surface_d(g: np.ndarray, axis: int) -> np.ndarray:
    return horizontal_derivative(g, axis)


def interface_theta_rhs(state: FlowState, theta: np.ndarray,
                        pressure: PressurePieces | None = None,
                        tol: float = DEFAULT_TOL) -> np.ndarray:
    """Acceleration of the interface in the second-order formulation.

    Advection of theta, the quadratic surface Hessian terms from the
    velocity and the deformation columns, the ring-pressure flux through
    the interface, and the regularizing surface Laplacian.
    """
    cmap = state.cmap
    if pressure is None:
        pressure = assemble_pressure(state, tol=tol)
    f = state.f
    ubar = [trace(state.u[a]) for a in range(2)]
    Fbar = [[trace(state.F[j, sidx]) for j in range(3)] for sidx in range(2)]
    out = -2.0 * (ubar[0] * _surface_d(theta, 1)
                  + ubar[1] * _surface_d(theta, 2))
    hess = {}
    for sidx in range(2):
        for r in range(sidx, 2):
            hess[(sidx, r)] = _surface_d(_surface_d(f, sidx + 1), r + 1)
            hess[(r, sidx)] = hess[(sidx, r)]
    for sidx in range(2):
        for r in range(2):
            out -= ubar[sidx] * ubar[r] * hess[(sidx, r)]
            for j in range(3):
                out += Fbar[sidx][j] * Fbar[r][j] * hess[(sidx, r)]
    out -= boundary_flux_top(pressure.ring, cmap, pressure.ring_load)
    if state.eps != 0.0:
        out += state.eps * (hess[(0, 0)] + hess[(1, 1)])
    return out


def interface_accel_rhs(state: FlowState,
                        pressure: PressurePieces | None = None,
                        ablate: str | None = None,
                        tol: float = DEFAULT_TOL):
    """Right-hand sides of the material second-derivative law for d_i f.

    Returns the pair (i = 1, 2) of surface fields that the second
    material derivative of the interface slope must match.  The term
    groups can be dropped one at a time through `ablate` for sensitivity
    checks: "taylor" (pressure-coefficient DN term), "elastic" (squared
    column transport), "epsilon" (regularizing Laplacian), "stretch"
    (column-gradient cross terms), "velocity" (moving-frame drag),
    "pressure" (interface flux of the shifted ring gradient), "pbar"
    (regularization pressure drag).
    """
    if ablate is not None and ablate not in ABLATABLE_TERMS:
        raise ValueError(f"unknown term {ablate!r}")
    cmap = state.cmap
    if pressure is None:
        pressure = assemble_pressure(state, tol=tol)
    f = state.f
    dring = mapped_gradient(pressure.ring, cmap)
    d3ring_top = trace(dring[2])
    n = normal_vector(f)
    ubar = [trace(state.u[a]) for a in range(3)]
    Fbar = [[trace(state.F[j, sidx]) for j in range(3)] for sidx in range(2)]
    theta = kinematic_rate(state)
    df = [_surface_d(f, 1), _surface_d(f, 2)]
    # material rate of the slopes: d_j(theta) + ubar . grad' d_j f
    dt_slope = [
        _surface_d(theta, j + 1)
        + ubar[0] * _surface_d(df[j], 1) + ubar[1] * _surface_d(df[j], 2)
        for j in range(2)
    ]
    if state.eps != 0.0:
        dbar = mapped_gradient(pressure.bar, cmap)
        dbar_top = [trace(dbar[0]), trace(dbar[1])]

    def column_d(g, j):
        return Fbar[0][j] * _surface_d(g, 1) + Fbar[1][j] * _surface_d(g, 2)

    out = []
    for i in range(2):
        di_f = df[i]
        acc = np.zeros_like(di_f)
        if ablate != "taylor":
            acc += d3ring_top * apply_dn(di_f, cmap, tol=tol)
        if ablate != "elastic":
            for j in range(3):
                acc += column_d(column_d(di_f, j), j)
        if state.eps != 0.0 and ablate != "epsilon":
            acc += state.eps * (_surface_d(_surface_d(di_f, 1), 1)
                                + _surface_d(_surface_d(di_f, 2), 2))
        if ablate != "stretch":
            for j in range(3):
                for sidx in range(2):
                    acc += 2.0 * _surface_d(Fbar[sidx][j], i + 1) \
                        * column_d(df[sidx], j)
        if ablate != "velocity":
            for j in range(2):
                acc -= 2.0 * _surface_d(ubar[j], i + 1) * dt_slope[j]
        if ablate != "pressure":
            ext = harmonic_ext_dirichlet(di_f, cmap, tol=tol)
            q = dring[i] + dring[2] * ext
            dq = mapped_gradient(q, cmap)
            acc -= sum(n[a] * trace(dq[a]) for a in range(3))
        if state.eps != 0.0 and ablate != "pbar":
            for sidx in range(2):
                acc -= _surface_d(di_f, sidx + 1) * dbar_top[sidx]
        out.append(acc)
    return out[0], out[1]


def evo_residual(states, ablate: str | None = None,
                 tol: float = DEFAULT_TOL) -> float:
    """Relative defect of the interface acceleration law on a trajectory.

    Needs at least five uniformly spaced states; the material second
    derivative of the interface slopes is formed by centered differences
    of material first derivatives at the middle state and compared with
    the assembled right-hand side.
    """
    states = list(states)
    if len(states) < 5:
        raise InsufficientHistory(f"need 5 states, got {len(states)}")
    times = np.array([st.t for st in states])
    dts = np.diff(times)
    if np.max(np.abs(dts - dts[0])) > 1e-12 * max(abs(dts[0]), 1e-30):
        raise InsufficientHistory("states are not uniformly spaced")
    m = len(states) // 2
    dt = float(dts[0])
    window = states[m - 2:m + 3]

    def slopes(st, i):
        return _surface_d(st.f, i + 1)

    def material_rate(seq, k, gs):
        st = seq[k]
        ub = [trace(st.u[a]) for a in range(2)]
        ddt = (gs[k + 1] - gs[k - 1]) / (2.0 * dt)
        return ddt + ub[0] * _surface_d(gs[k], 1) + ub[1] * _surface_d(gs[k], 2)

    rhs = interface_accel_rhs(window[2], ablate=ablate, tol=tol)
    num = 0.0
    den = 0.0
    for i in range(2):
        gs = [slopes(st, i) for st in window]
        d1 = [material_rate(window, k, gs) for k in (1, 2, 3)]
        ub = [trace(window[2].u[a]) for a in range(2)]
        d2 = (d1[2] - d1[0]) / (2.0 * dt) \
            + ub[0] * _surface_d(d1[1], 1) + ub[1] * _surface_d(d1[1], 2)
        num += float(np.mean((d2 - rhs[i]) ** 2))
        den += float(np.mean(rhs[i] ** 2))
    return float(np.sqrt(num / max(den, 1e-30)))


# ---------------------------------------------------------------------------
# material pressure derivative


def material_pressure_derivative(state: FlowState,
                                 pressure: PressurePieces | None = None,
                                 tol: float = DEFAULT_TOL) -> np.ndarray:
    """Material derivative of the pressure through its own boundary problem.

    The source contracts first and second derivatives of velocity,
    deformation and pressure; the interface condition is zero without
    regularization and otherwise the inverse-DN transported datum with
    its commutator correction; the floor condition feeds the shear of
    the horizontal velocity into the vertical pressure slope.
    """
    cmap = state.cmap
    grid = state.grid
    if pressure is None:
        pressure = assemble_pressure(state, tol=tol)
    p = pressure.total
    u, F = state.u, state.F
    du, dF = _gradient_stack(state)
    dp = mapped_gradient(p, cmap)
    ddp = np.stack([mapped_gradient(dp[a], cmap) for a in range(3)])
    ddu = np.stack([
        np.stack([mapped_gradient(du[a][b], cmap) for b in range(3)])
        for a in range(3)
    ])
    ddF = np.stack([
        np.stack([
            np.stack([mapped_gradient(dF[j, a][b], cmap) for b in range(3)])
            for a in range(3)
        ])
        for j in range(3)
    ])
    # acceleration field D_t u = -grad p + sum_j (F_j . grad) F_j
    acc = np.empty_like(u)
    for a in range(3):
        acc[a] = -dp[a] + sum(F[j, b] * dF[j, a][b]
                              for j in range(3) for b in range(3))
    dacc = np.stack([mapped_gradient(acc[a], cmap) for a in range(3)])

    src = np.zeros(grid.shape)
    for sidx in range(3):
        lap_us = sum(ddu[sidx][i][i] for i in range(3))
        src += lap_us * dp[sidx]
        for i in range(3):
            src += du[sidx][i] * ddp[sidx][i]
    for i in range(3):
        for k in range(3):
            src -= dacc[k][i] * du[i][k] + 2.0 * du[k][i] * dacc[i][k]
    for i in range(3):
        for sidx in range(3):
            for k in range(3):
                src += 2.0 * du[sidx][i] * du[k][sidx] * du[i][k]
    for j in range(3):
        for sidx in range(3):
            for k in range(3):
                for i in range(3):
                    src += dF[j, k][i] * dF[j, sidx][k] * du[i][sidx]
                    src += F[j, k] * ddF[j, sidx][k][i] * du[i][sidx]
                    src += 2.0 * dF[j, k][i] * F[j, sidx] * ddu[i][sidx][k]

    top = None
    if state.eps != 0.0:
        f = state.f
        theta = kinematic_rate(state)
        lap = lambda g: (_surface_d(_surface_d(g, 1), 1)
                         + _surface_d(_surface_d(g, 2), 2))
        ubar = [trace(u[a]) for a in range(2)]
        lap_f = lap(f)
        dt_lap = lap(theta) + ubar[0] * _surface_d(lap_f, 1) \
            + ubar[1] * _surface_d(lap_f, 2)
        # the flux inversions sit behind an O(dz^2) consistency error, so
        # pushing them below 1e-9 only stalls the boundary iteration
        dn_tol = max(0.1 * tol, 1e-9)
        base = invert_dn_neumann(remove_mean(dt_lap, tol=None), cmap,
                                 tol=dn_tol)
        inner = invert_dn_neumann(lap_f, cmap, tol=dn_tol)
        comm = material_dn_commutator(inner, u, cmap, tol=tol)
        corr = invert_dn_neumann(remove_mean(comm, tol=None), cmap,
                                 tol=dn_tol)
        top = -state.eps * base + state.eps * corr
    d3u1 = bottom_trace(du[0][2])
    d3u2 = bottom_trace(du[1][2])
    bot = d3u1 * bottom_trace(dp[0]) + d3u2 * bottom_trace(dp[1])
    return poisson_dirichlet(src, cmap, top=top, bottom_d3=bot, tol=tol)


# ---------------------------------------------------------------------------
# time stepping


def stable_dt(state: FlowState,
              pressure: PressurePieces | None = None,
              tol: float = DEFAULT_TOL) -> float:
    """Conservative step bound from advection and wave stiffness.

    Half the minimum of the advective crossing time and the reciprocal
    of the fastest boundary-mode frequency, with the pressure-coefficient
    estimated from the current interface trace.
    """
    grid = state.grid
    if pressure is None:
        pressure = assemble_pressure(state, tol=tol)
    cmap = state.cmap
    umax = float(np.max(np.abs(state.u)))
    hmin = min(grid.h1, grid.h2, grid.dz * float(np.min(cmap.jac)))
    kmax = float(max(grid.n1 // 2, grid.n2 // 2))
    fmax = 0.0
    for j in range(3):
        for sidx in range(2):
            fmax = max(fmax, float(np.max(np.abs(trace(state.F[j, sidx])))))
    taylor = -trace(mapped_gradient(pressure.total, cmap)[2])
    amax = max(float(np.max(taylor)), 0.0)
    wave = kmax * (fmax + np.sqrt(state.eps) * np.sqrt(kmax)) \
        + np.sqrt(amax * kmax)
    terms = []
    if umax > 0.0:
        terms.append(hmin / umax)
    if wave > 0.0:
        terms.append(1.0 / wave)
    if not terms:
        return np.inf
    return 0.5 * min(terms)


def _advance(state: FlowState, h: float, rate) -> FlowState:
    dtf, du, dF = rate
    return state.with_fields(state.t + h, state.f + h * dtf,
                             state.u + h * du, state.F + h * dF)


def _rk4(state: FlowState, dt: float, rhs):
    k1 = rhs(state)
    k2 = rhs(_advance(state, 0.5 * dt, k1))
    k3 = rhs(_advance(state, 0.5 * dt, k2))
    k4 = rhs(_advance(state, dt, k3))
    comb = tuple(
        (a + 2.0 * b + 2.0 * c + d) / 6.0
        for a, b, c, d in zip(k1, k2, k3, k4)
    )
    return _advance(state, dt, comb)


def _reproject(state: FlowState, threshold: float, tol: float):
    """Re-enforce the constraints when the monitored residuals drift."""
    cmap = state.cmap
    flags = {"u": False, "F": False}
    u, F = state.u, state.F
    if divergence_residual(u, cmap) > threshold:
        u, _ = project_div(u, cmap, tol=tol)
        flags["u"] = True
    redo = any(
        divergence_residual(F[j], cmap) > threshold
        or normal_trace_defect(F[j], cmap) > threshold
        for j in range(3)
    )
    if redo:
        F = F.copy()
        for j in range(3):
            F[j], _ = project_div_normal(F[j], cmap, tol=tol)
        flags["F"] = True
    if flags["u"] or flags["F"]:
        state = state.with_fields(state.t, state.f, u, F)
    return state, flags


def step(state: FlowState, dt: float,
         tol: float = DEFAULT_TOL,
         reproject_threshold: float = REPROJECT_THRESHOLD):
    """Advance one RK4 step; returns (new state, info).

    The step size must satisfy the stable_dt bound.  After the update
    the divergence and interface-trace invariants are measured and the
    fields re-projected when any exceeds the threshold; info records the
    residuals and whether a re-projection fired.
    """
    p0 = assemble_pressure(state, tol=tol)
    bound = stable_dt(state, pressure=p0)
    if dt > bound * (1.0 + 1e-12):
        raise PreconditionViolated(
            f"dt = {dt:.3e} exceeds the stable bound {bound:.3e}"
        )

    def rhs(st):
        pre = p0 if st is state else assemble_pressure(st, tol=tol)
        return bulk_rhs(st, pressure=pre, tol=tol)

    new = _rk4(state, dt, rhs)
    new, flags = _reproject(new, reproject_threshold, tol)
    info = {
        "dt_bound": bound,
        "reprojected": flags,
        "div_u": divergence_residual(new.u, new.cmap),
        "div_F": max(divergence_residual(new.F[j], new.cmap)
                     for j in range(3)),
        "trace_F": max(normal_trace_defect(new.F[j], new.cmap)
                       for j in range(3)),
    }
    return new, info


def step_theta(state: FlowState, theta: np.ndarray, dt: float,
               tol: float = DEFAULT_TOL,
               reproject_threshold: float = REPROJECT_THRESHOLD):
    """RK4 step of the second-order interface formulation.

    The interface moves with its own velocity variable while the bulk
    fields follow the same material rates as `step`, with the grid
    motion driven by theta.  Returns (new state, new theta, info).
    """

    def rhs(pair):
        st, th = pair
        pre = assemble_pressure(st, tol=tol)
        dtheta = interface_theta_rhs(st, th, pressure=pre, tol=tol)
        dtf, du, dF = bulk_rhs(st, pressure=pre, tol=tol,
                               dtf_override=th - np.mean(th))
        return (th - np.mean(th), dtheta, du, dF)

    def advance(pair, h, k):
        st, th = pair
        return (st.with_fields(st.t + h, st.f + h * k[0], st.u + h * k[2],
                               st.F + h * k[3]),
                th + h * k[1])

    y = (state, theta)
    k1 = rhs(y)
    k2 = rhs(advance(y, 0.5 * dt, k1))
    k3 = rhs(advance(y, 0.5 * dt, k2))
    k4 = rhs(advance(y, dt, k3))
    comb = tuple(
        (a + 2.0 * b + 2.0 * c + d) / 6.0
        for a, b, c, d in zip(k1, k2, k3, k4)
    )
    new, th_new = advance(y, dt, comb)
    new, flags = _reproject(new, reproject_threshold, tol)
    info = {"reprojected": flags}
    return new, th_new, info


# ---------------------------------------------------------------------------
# initial data


def _resample_columns(field: np.ndarray, phi_old: np.ndarray,
                      phi_new: np.ndarray, y3: np.ndarray) -> np.ndarray:
    """Reinterpret a slab field on a new map at equal physical heights.

    Column by column the old profile is read as a function of physical
    height and sampled at the new map's node heights (linear in the
    vertical; values beyond the old range are clamped to the end values).
    """
    out = np.empty_like(field)
    n1, n2 = field.shape[:2]
    for i in range(n1):
        for j in range(n2):
            out[i, j] = np.interp(phi_new[i, j], phi_old[i, j], field[i, j])
    return out


def invariant_report(state: FlowState) -> dict:
    """Constraint residuals of a state (monitored quantities only)."""
    cmap = state.cmap
    return {
        "div_u": divergence_residual(state.u, cmap),
        "div_F": max(divergence_residual(state.F[j], cmap) for j in range(3)),
        "trace_F": max(normal_trace_defect(state.F[j], cmap)
                       for j in range(3)),
        "f_mean": abs(float(np.mean(state.f))),
    }


def prepare_initial_data(f0: np.ndarray, u0: np.ndarray, F0: np.ndarray,
                         eps: float, s: int = 4, c0: float = 0.1,
                         regions=None, tol: float = DEFAULT_TOL):
    """Admissible initial state from raw data on the original domain.

    The interface is mollified at scale eps, the bulk fields are carried
    to the new domain by matching physical heights column-wise, and the
    constraints are restored: velocity by the divergence projection,
    each deformation column by the normal-trace projection with zero
    interface flux.  With eps = 0 the state passes through unchanged up
    to the solver tolerance.

    Returns (state, info) where info records the constraint defects
    before and after the projections.
    """
    f0 = np.asarray(f0, dtype=float)
    f0 = f0 - np.mean(f0)
    u0 = np.array(u0, dtype=float)
    F0 = np.array(F0, dtype=float)
    nz = u0.shape[-1]
    grid = SlabGrid(f0.shape[0], f0.shape[1], nz)
    f_eps = remove_mean(mollify(f0, eps), tol=None)
    cmap0 = build_map(f0, grid)
    cmap = build_map(f_eps, grid)
    y3 = grid.y3
    if eps == 0.0:
        u = u0
        F = F0
    else:
        u = np.stack([
            _resample_columns(u0[a], cmap0.phi, cmap.phi, y3)
            for a in range(3)
        ])
        F = np.stack([
            np.stack([
                _resample_columns(F0[j, a], cmap0.phi, cmap.phi, y3)
                for a in range(3)
            ])
            for j in range(3)
        ])
    u[2, ..., 0] = 0.0
    F[:, 2, ..., 0] = 0.0
    before = {
        "div_u": divergence_residual(u, cmap),
        "div_F": max(divergence_residual(F[j], cmap) for j in range(3)),
        "trace_F": max(normal_trace_defect(F[j], cmap) for j in range(3)),
    }
    u, _ = project_div(u, cmap, tol=tol)
    for j in range(3):
        F[j], _ = project_div_normal(F[j], cmap, tol=tol)
    state = FlowState(0.0, f_eps, u, F, eps, s=s, c0=c0, regions=regions,
                      grid=grid)
    info = {"before": before, "after": invariant_report(state)}
    return state, info
