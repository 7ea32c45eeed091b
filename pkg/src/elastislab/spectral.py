"""Spectral toolkit on the horizontal torus.

All interface quantities live on the doubly periodic square [0, 2pi)^2
sampled on a uniform n1 x n2 grid.  Fields are real; transforms use the
half-complex rfft2 layout.  Coefficients follow the normalization
ghat_k = (1/(n1*n2)) * sum_x g(x) exp(-i k.x), so Parseval reads
int |g|^2 dx = (2pi)^2 * sum_k |ghat_k|^2.

Conventions
-----------
* Wavenumbers are integers; the Nyquist column is zeroed by derivative
  multipliers to keep real fields real and the derivative matrix exactly
  antisymmetric.
* The dealiased product keeps modes with |k1| <= n1//3 and |k2| <= n2//3
  (the 2/3 rule) and computes the surviving coefficients exactly via
  padded transforms.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import GridMismatch, NotMeanZero

__all__ = [
    "InterfaceField",
    "horizontal_derivative",
    "bessel_multiplier",
    "mollify",
    "sobolev_norm",
    "dealiased_product",
    "field_mean",
    "remove_mean",
]


@lru_cache(maxsize=32)
def wavenumbers(n1: int, n2: int):
    """Integer wavenumber arrays (k1, k2) broadcast to the rfft2 shape."""
    k1 = np.fft.fftfreq(n1, d=1.0 / n1)[:, None]
    k2 = np.fft.rfftfreq(n2, d=1.0 / n2)[None, :]
    return k1, k2


@lru_cache(maxsize=32)
def _ksq(n1: int, n2: int):
    k1, k2 = wavenumbers(n1, n2)
    return k1 * k1 + k2 * k2


@lru_cache(maxsize=32)
def _deriv_factor(n1: int, n2: int, axis: int):
    """1j*k multiplier with the Nyquist column removed."""
    k1, k2 = wavenumbers(n1, n2)
    if axis == 1:
        fac = 1j * np.broadcast_to(k1, (n1, n2 // 2 + 1)).copy()
        if n1 % 2 == 0:
            fac[n1 // 2, :] = 0.0
    else:
        fac = 1j * np.broadcast_to(k2, (n1, n2 // 2 + 1)).copy()
        if n2 % 2 == 0:
            fac[:, n2 // 2] = 0.0
    return fac


@lru_cache(maxsize=32)
def _parseval_weight(n1: int, n2: int):
    """Multiplicity of each rfft2 column under conjugate symmetry."""
    w = np.full(n2 // 2 + 1, 2.0)
    w[0] = 1.0
    if n2 % 2 == 0:
        w[-1] = 1.0
    return w[None, :]


@lru_cache(maxsize=32)
def dealias_mask(n1: int, n2: int):
    """Boolean keep-mask for the 2/3 rule in the rfft2 layout."""
    k1, k2 = wavenumbers(n1, n2)
    return (np.abs(k1) <= n1 // 3) & (np.abs(k2) <= n2 // 3)


def _as_plane(g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim != 2:
        raise ValueError("expected a 2d horizontal field")
    return g


def to_coeffs(g: np.ndarray) -> np.ndarray:
    """Forward transform with the 1/(n1*n2) normalization."""
    g = _as_plane(g)
    return np.fft.rfft2(g) / (g.shape[0] * g.shape[1])


def from_coeffs(c: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """Inverse of :func:`to_coeffs`."""
    return np.fft.irfft2(c * (n1 * n2), s=(n1, n2))


def horizontal_derivative(g: np.ndarray, axis: int) -> np.ndarray:
    """Spectral d/dx_axis of a periodic field, axis in {1, 2}."""
    if axis not in (1, 2):
        raise ValueError("axis must be 1 or 2")
    g = _as_plane(g)
    n1, n2 = g.shape
    c = np.fft.rfft2(g) * _deriv_factor(n1, n2, axis)
    return np.fft.irfft2(c, s=(n1, n2))


def bessel_multiplier(g: np.ndarray, s: float) -> np.ndarray:
    """Apply (1 + |k|^2)^(s/2) mode by mode (the <grad'>^s smoother)."""
    g = _as_plane(g)
    n1, n2 = g.shape
    fac = (1.0 + _ksq(n1, n2)) ** (0.5 * s)
    return np.fft.irfft2(np.fft.rfft2(g) * fac, s=(n1, n2))


def mollify(g: np.ndarray, eps: float) -> np.ndarray:
    """Gaussian mollification with symbol exp(-eps |k|^2 / 4).

    eps = 0 is the identity; the horizontal mean is preserved exactly for
    every eps because the symbol is 1 at k = 0.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    g = _as_plane(g)
    if eps == 0.0:
        return g.copy()
    n1, n2 = g.shape
    fac = np.exp(-0.25 * eps * _ksq(n1, n2))
    return np.fft.irfft2(np.fft.rfft2(g) * fac, s=(n1, n2))


def sobolev_norm(g: np.ndarray, s: float) -> float:
    """H^s(T^2) norm via Parseval.

    Parameters
    ----------
    g : array (n1, n2)
        Real samples on the uniform torus grid.
    s : float
        Smoothness index; s = 0 gives the L^2 norm.
    """
    g = _as_plane(g)
    n1, n2 = g.shape
    c = to_coeffs(g)
    fac = (1.0 + _ksq(n1, n2)) ** s
    total = np.sum(_parseval_weight(n1, n2) * fac * np.abs(c) ** 2)
    return float(2.0 * np.pi * np.sqrt(total))


def dealiased_product(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Pointwise product with 2/3-rule dealiasing.

    The product is evaluated on a 3/2-padded grid so the coefficients that
    survive the truncation are exact convolution values, then modes beyond
    the 2/3 cutoff are dropped.
    """
    g = _as_plane(g)
    h = _as_plane(h)
    if g.shape != h.shape:
        raise GridMismatch(f"shapes {g.shape} vs {h.shape}")
    n1, n2 = g.shape
    m1, m2 = (3 * n1) // 2, (3 * n2) // 2
    gp = _pad(np.fft.rfft2(g), n1, n2, m1, m2)
    hp = _pad(np.fft.rfft2(h), n1, n2, m1, m2)
    big = np.fft.rfft2(np.fft.irfft2(gp, s=(m1, m2)) * np.fft.irfft2(hp, s=(m1, m2)))
    c = _unpad(big, m1, m2, n1, n2)
    c *= dealias_mask(n1, n2)
    return np.fft.irfft2(c, s=(n1, n2))


def _pad(c: np.ndarray, n1: int, n2: int, m1: int, m2: int) -> np.ndarray:
    out = np.zeros((m1, m2 // 2 + 1), dtype=complex)
    half = n1 // 2
    out[:half, : n2 // 2 + 1] = c[:half]
    out[m1 - (n1 - half):, : n2 // 2 + 1] = c[half:]
    out *= (m1 * m2) / (n1 * n2)
    return out


def _unpad(c: np.ndarray, m1: int, m2: int, n1: int, n2: int) -> np.ndarray:
    out = np.zeros((n1, n2 // 2 + 1), dtype=complex)
    half = n1 // 2
    out[:half] = c[:half, : n2 // 2 + 1]
    out[half:] = c[m1 - (n1 - half):, : n2 // 2 + 1]
    out *= (n1 * n2) / (m1 * m2)
    return out


def field_mean(g: np.ndarray) -> float:
    """Horizontal mean (the k = 0 coefficient)."""
    return float(np.mean(g))


def remove_mean(g: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Subtract the horizontal mean.

    With tol set, raise NotMeanZero if the removed mean exceeds tol.
    """
    m = field_mean(g)
    if tol is not None and abs(m) > tol:
        raise NotMeanZero(f"mean {m:.3e} exceeds {tol:.3e}")
    return g - m


class InterfaceField:
    """Real scalar field on the horizontal torus.

    Thin wrapper that keeps the sample array and exposes the spectral
    operations as methods.  Raw arrays remain the working currency inside
    the package; this type marks interface-valued quantities at API
    boundaries.
    """

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ValueError("InterfaceField needs a 2d sample array")
        self.values = values

    @property
    def shape(self):
        return self.values.shape

    @property
    def coeffs(self) -> np.ndarray:
        return to_coeffs(self.values)

    @classmethod
    def from_coeffs(cls, c: np.ndarray, n1: int, n2: int) -> "InterfaceField":
        return cls(from_coeffs(c, n1, n2))

    def derivative(self, axis: int) -> "InterfaceField":
        return InterfaceField(horizontal_derivative(self.values, axis))

    def bessel(self, s: float) -> "InterfaceField":
        return InterfaceField(bessel_multiplier(self.values, s))

    def mollified(self, eps: float) -> "InterfaceField":
        return InterfaceField(mollify(self.values, eps))

    def norm(self, s: float = 0.0) -> float:
        return sobolev_norm(self.values, s)

    def mean(self) -> float:
        return field_mean(self.values)

    def __add__(self, other):
        return InterfaceField(self.values + _vals(other))

    def __sub__(self, other):
        return InterfaceField(self.values - _vals(other))

    def __mul__(self, scalar):
        return InterfaceField(self.values * float(scalar))

    __rmul__ = __mul__

    def copy(self) -> "InterfaceField":
        return InterfaceField(self.values.copy())


def _vals(x):
    return x.values if isinstance(x, InterfaceField) else np.asarray(x, dtype=float)
