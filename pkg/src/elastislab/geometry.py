"""Reference slab, harmonic coordinate map, and bulk fields.

The moving fluid domain (everything between the floor x3 = -1 and the
graph interface x3 = f(x')) is pulled back to the fixed reference slab
T^2 x [-1, 0].  Because the reference interface is flat, the horizontal
components of the harmonic coordinate change are the identity and only
the vertical map phi(y', y3) has to be solved for:

    Lap phi = 0,   phi(y', 0) = f(y'),   phi(y', -1) = -1.

The vertical discretization is linear finite elements on a uniform node
ladder (second order), the horizontal one is Fourier collocation, so
phi splits into independent tridiagonal solves per horizontal mode.

Physical derivatives of a field w stored on the slab follow the chain
rule through the graph map:

    d_i w_phys = d_i w - (d_i phi / d_3 phi) d_3 w   (i = 1, 2)
    d_3 w_phys = d_3 w / d_3 phi.
"""

from __future__ import annotations

from dataclasses import dataclass
import hashlib

import numpy as np

from .errors import DegenerateMap, GridMismatch
from .spectral import wavenumbers

__all__ = [
    "SlabGrid",
    "CoordinateMap",
    "BulkField",
    "build_map",
    "trace",
    "bottom_trace",
    "mapped_gradient",
    "normal_vector",
    "tangent_vectors",
]


@dataclass(frozen=True)
class SlabGrid:
    """Uniform tensor grid on the reference slab T^2 x [-1, 0].

    nz counts vertical node levels including both boundaries, so there
    are nz - 1 cells of height dz = 1/(nz - 1); level 0 is the floor and
    level nz - 1 is the reference interface.
    """

    n1: int
    n2: int
    nz: int

    def __post_init__(self):
        if self.n1 < 4 or self.n2 < 4 or self.nz < 3:
            raise ValueError("grid too small")
        if self.n1 % 2 or self.n2 % 2:
            raise ValueError("horizontal sizes must be even")

    @property
    def ncells(self) -> int:
        return self.nz - 1

    @property
    def dz(self) -> float:
        return 1.0 / (self.nz - 1)

    @property
    def h1(self) -> float:
        return 2.0 * np.pi / self.n1

    @property
    def h2(self) -> float:
        return 2.0 * np.pi / self.n2

    @property
    def y3(self) -> np.ndarray:
        return -1.0 + np.arange(self.nz) * self.dz

    def horizontal_meshes(self):
        x1 = np.arange(self.n1) * self.h1
        x2 = np.arange(self.n2) * self.h2
        return np.meshgrid(x1, x2, indexing="ij")

    @property
    def shape(self):
        return (self.n1, self.n2, self.nz)

    def check_same(self, other: "SlabGrid"):
        if self != other:
            raise GridMismatch(f"{self.shape} vs {other.shape}")


def thomas_batched(sub, diag, sup, rhs):
    """Solve batched tridiagonal systems along the last axis.

    sub[..., i] multiplies x[..., i-1] in equation i (sub[..., 0] unused),
    sup[..., i] multiplies x[..., i+1] (sup[..., -1] unused).  All inputs
    broadcast against rhs; rhs may be complex.
    """
    n = rhs.shape[-1]
    sub = np.broadcast_to(sub, rhs.shape)
    diag = np.broadcast_to(diag, rhs.shape)
    sup = np.broadcast_to(sup, rhs.shape)
    cp = np.empty_like(np.broadcast_to(diag, rhs.shape), dtype=rhs.dtype)
    dp = np.empty_like(rhs)
    cp[..., 0] = sup[..., 0] / diag[..., 0]
    dp[..., 0] = rhs[..., 0] / diag[..., 0]
    for i in range(1, n):
        denom = diag[..., i] - sub[..., i] * cp[..., i - 1]
        cp[..., i] = sup[..., i] / denom
        dp[..., i] = (rhs[..., i] - sub[..., i] * dp[..., i - 1]) / denom
    x = np.empty_like(rhs)
    x[..., -1] = dp[..., -1]
    for i in range(n - 2, -1, -1):
        x[..., i] = dp[..., i] - cp[..., i] * x[..., i + 1]
    return x


def vertical_fem_rows(ksq: np.ndarray, dz: float):
    """Interior-row coefficients of the per-mode vertical operator.

    Linear finite elements for -w'' + ksq w on a uniform ladder: row j
    couples (j-1, j, j+1) with coefficients (sub, diag, sub) per unit
    horizontal area.  ksq broadcasts over modes.
    """
    sub = -1.0 / dz + ksq * dz / 4.0
    diag = 2.0 / dz + ksq * dz / 2.0
    return sub, diag


def d3_node(w: np.ndarray, dz: float) -> np.ndarray:
    """Second-order vertical derivative at nodes (one-sided at the ends)."""
    out = np.empty_like(w)
    out[..., 1:-1] = (w[..., 2:] - w[..., :-2]) / (2.0 * dz)
    out[..., 0] = (-3.0 * w[..., 0] + 4.0 * w[..., 1] - w[..., 2]) / (2.0 * dz)
    out[..., -1] = (3.0 * w[..., -1] - 4.0 * w[..., -2] + w[..., -3]) / (2.0 * dz)
    return out


def dh_bulk(w: np.ndarray, axis: int) -> np.ndarray:
    """Spectral horizontal derivative of a bulk (n1, n2, nz) array."""
    n1, n2 = w.shape[0], w.shape[1]
    k1, k2 = wavenumbers(n1, n2)
    c = np.fft.rfft2(w, axes=(0, 1))
    if axis == 1:
        fac = (1j * k1)
        if n1 % 2 == 0:
            fac = fac.copy()
            fac[n1 // 2] = 0.0
        c *= fac[:, :, None]
    elif axis == 2:
        fac = (1j * k2)
        if n2 % 2 == 0:
            fac = fac.copy()
            fac[:, n2 // 2] = 0.0
        c *= fac[:, :, None]
    else:
        raise ValueError("axis must be 1 or 2")
    return np.fft.irfft2(c, s=(n1, n2), axes=(0, 1))


class CoordinateMap:
    """Harmonic vertical map and its cached metric quantities.

    Attributes
    ----------
    grid : SlabGrid
    f : array (n1, n2)
        Interface height samples.
    phi : array (n1, n2, nz)
        Vertical map values at slab nodes; phi[..., -1] == f exactly and
        phi[..., 0] == -1 exactly.
    phi1, phi2, phi3 : arrays (n1, n2, nz)
        Node-collocated derivatives of phi (spectral horizontal, second
        order vertical).
    jac : array (n1, n2, nz)
        Jacobian determinant of the map at nodes (equals phi3).
    is_flat : bool
        True when f is identically zero, enabling the analytic per-mode
        fast paths downstream.
    """

    def __init__(self, grid: SlabGrid, f: np.ndarray, phi: np.ndarray):
        self.grid = grid
        self.f = f
        self.phi = phi
        self.is_flat = bool(np.all(f == 0.0))
        dz = grid.dz
        if self.is_flat:
            shape = phi.shape
            self.phi1 = np.zeros(shape)
            self.phi2 = np.zeros(shape)
            self.phi3 = np.ones(shape)
            self.phi1_cell = np.zeros(shape[:2] + (grid.ncells,))
            self.phi2_cell = np.zeros(shape[:2] + (grid.ncells,))
            self.phi3_cell = np.ones(shape[:2] + (grid.ncells,))
        else:
            self.phi1 = dh_bulk(phi, 1)
            self.phi2 = dh_bulk(phi, 2)
            self.phi3 = d3_node(phi, dz)
            self.phi1_cell = 0.5 * (self.phi1[..., :-1] + self.phi1[..., 1:])
            self.phi2_cell = 0.5 * (self.phi2[..., :-1] + self.phi2[..., 1:])
            self.phi3_cell = np.diff(phi, axis=-1) / dz
        if np.min(self.phi3_cell) <= 0.0 or np.min(self.phi3) <= 0.0:
            raise DegenerateMap(
                f"d3 phi reaches {min(np.min(self.phi3_cell), np.min(self.phi3)):.3e}"
            )
        self.jac = self.phi3

    def metric_cell(self):
        """Flux-form metric K = J Jinv Jinv^T at vertical cell midpoints.

        Returns the six independent entries (k11, k22, k33, k13, k23);
        k12 vanishes for a graph map.
        """
        p1, p2, p3 = self.phi1_cell, self.phi2_cell, self.phi3_cell
        k11 = p3
        k22 = p3
        k33 = (1.0 + p1 * p1 + p2 * p2) / p3
        k13 = -p1
        k23 = -p2
        return k11, k22, k33, k13, k23

    def content_hash(self) -> bytes:
        """Digest identifying grid and interface (used by snapshots)."""
        h = hashlib.sha256()
        h.update(np.array(self.grid.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.f).tobytes())
        return h.digest()

    def interior_residual(self) -> float:
        """Relative residual of the discrete map equations (diagnostic)."""
        rhs = _map_apply_interior(self.grid, self.phi)
        scale = np.max(np.abs(self.phi)) / self.grid.dz
        return float(np.max(np.abs(rhs)) / scale)


def _mode_ksq(n1: int, n2: int) -> np.ndarray:
    k1, k2 = wavenumbers(n1, n2)
    return (k1 * k1 + k2 * k2)


def _map_solve(grid: SlabGrid, top: np.ndarray, bottom_value: float) -> np.ndarray:
    """Solve the discrete vertical harmonic problem per horizontal mode."""
    n1, n2, nz = grid.shape
    dz = grid.dz
    that = np.fft.rfft2(top) / (n1 * n2)
    ksq = _mode_ksq(n1, n2)[..., None]
    sub, diag = vertical_fem_rows(ksq, dz)
    nin = nz - 2
    rhs = np.zeros(that.shape + (nin,), dtype=complex)
    bhat = np.zeros_like(that)
    bhat[0, 0] = bottom_value
    rhs[..., 0] -= sub[..., 0] * bhat[..., None][..., 0]
    rhs[..., -1] -= sub[..., 0] * that[..., None][..., 0]
    x = thomas_batched(sub, diag, sub, rhs)
    phat = np.concatenate([bhat[..., None], x, that[..., None]], axis=-1)
    phi = np.fft.irfft2(phat * (n1 * n2), s=(n1, n2), axes=(0, 1))
    return phi


def _map_apply_interior(grid: SlabGrid, phi: np.ndarray) -> np.ndarray:
    """Apply the interior rows of the discrete map operator (for residuals)."""
    n1, n2, nz = grid.shape
    dz = grid.dz
    phat = np.fft.rfft2(phi, axes=(0, 1))
    ksq = _mode_ksq(n1, n2)[..., None]
    sub, diag = vertical_fem_rows(ksq, dz)
    out = (
        sub * phat[..., :-2] + diag * phat[..., 1:-1] + sub * phat[..., 2:]
    )
    return np.fft.irfft2(out, s=(n1, n2), axes=(0, 1))


def build_map(f: np.ndarray, grid: SlabGrid) -> CoordinateMap:
    """Harmonic coordinate map for interface f over the reference slab.

    Solves the discrete Laplace problem for the vertical map with
    Dirichlet data f on top and -1 on the floor, one tridiagonal system
    per horizontal mode.  Raises DegenerateMap when the resulting map
    is not one-to-one (d3 phi <= 0 somewhere), which happens when f
    dips near the floor.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.n1, grid.n2):
        raise GridMismatch(f"f shape {f.shape} vs grid {(grid.n1, grid.n2)}")
    if np.max(np.abs(f)) >= 1.0:
        raise DegenerateMap("interface touches or crosses the floor depth")
    if np.all(f == 0.0):
        y3 = grid.y3
        phi = np.broadcast_to(y3, (grid.n1, grid.n2, grid.nz)).copy()
        return CoordinateMap(grid, f.copy(), phi)
    phi = _map_solve(grid, f, -1.0)
    phi[..., -1] = f
    phi[..., 0] = -1.0
    return CoordinateMap(grid, f.copy(), phi)


def map_time_derivative(cmap: CoordinateMap, dtf: np.ndarray) -> np.ndarray:
    """d(phi)/dt for a given interface velocity (zero floor data)."""
    return _map_solve(cmap.grid, np.asarray(dtf, dtype=float), 0.0)


def trace(w: np.ndarray, grid: SlabGrid | None = None) -> np.ndarray:
    """Values on the moving interface (top reference level)."""
    return np.asarray(w)[..., -1]


def bottom_trace(w: np.ndarray, grid: SlabGrid | None = None) -> np.ndarray:
    """Values on the floor (bottom reference level)."""
    return np.asarray(w)[..., 0]


def mapped_gradient(w: np.ndarray, cmap: CoordinateMap) -> np.ndarray:
    """Physical gradient of a slab-stored scalar, shape (3, n1, n2, nz)."""
    dz = cmap.grid.dz
    d3 = d3_node(w, dz)
    d1 = dh_bulk(w, 1)
    d2 = dh_bulk(w, 2)
    if cmap.is_flat:
        return np.stack([d1, d2, d3])
    inv3 = 1.0 / cmap.phi3
    return np.stack([
        d1 - cmap.phi1 * inv3 * d3,
        d2 - cmap.phi2 * inv3 * d3,
        inv3 * d3,
    ])


def normal_vector(f: np.ndarray) -> np.ndarray:
    """Outward non-unit normal (-d1 f, -d2 f, 1) of the graph interface."""
    from .spectral import horizontal_derivative

    f = np.asarray(f, dtype=float)
    d1 = horizontal_derivative(f, 1)
    d2 = horizontal_derivative(f, 2)
    return np.stack([-d1, -d2, np.ones_like(f)])


def tangent_vectors(f: np.ndarray):
    """Coordinate tangents tau_1 = (1, 0, d1 f), tau_2 = (0, 1, d2 f)."""
    from .spectral import horizontal_derivative

    f = np.asarray(f, dtype=float)
    d1 = horizontal_derivative(f, 1)
    d2 = horizontal_derivative(f, 2)
    one = np.ones_like(f)
    zero = np.zeros_like(f)
    tau1 = np.stack([one, zero, d1])
    tau2 = np.stack([zero, one, d2])
    return tau1, tau2


class BulkField:
    """Scalar field on the reference slab with an attached grid.

    Arithmetic stays in plain numpy inside the solvers; this wrapper is
    the exchange type for snapshots and user-facing returns.
    """

    __slots__ = ("values", "grid")

    def __init__(self, values: np.ndarray, grid: SlabGrid):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise GridMismatch(f"{values.shape} vs {grid.shape}")
        self.values = values
        self.grid = grid

    def trace(self) -> np.ndarray:
        return trace(self.values)

    def bottom_trace(self) -> np.ndarray:
        return bottom_trace(self.values)

    def copy(self) -> "BulkField":
        return BulkField(self.values.copy(), self.grid)
