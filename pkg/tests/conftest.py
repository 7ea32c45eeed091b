import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20250823)


def torus_grid(n1, n2):
    """Sample coordinates of the uniform grid on [0, 2pi)^2."""
    x1 = np.arange(n1) * (2 * np.pi / n1)
    x2 = np.arange(n2) * (2 * np.pi / n2)
    return np.meshgrid(x1, x2, indexing="ij")


def random_band_limited(rng, n1, n2, kmax, amplitude=1.0):
    """Real random field with modes only inside |k1|,|k2| <= kmax."""
    c = np.zeros((n1, n2 // 2 + 1), dtype=complex)
    k1 = np.fft.fftfreq(n1, d=1.0 / n1)[:, None]
    k2 = np.fft.rfftfreq(n2, d=1.0 / n2)[None, :]
    mask = (np.abs(k1) <= kmax) & (np.abs(k2) <= kmax)
    c[mask] = rng.normal(size=mask.sum()) + 1j * rng.normal(size=mask.sum())
    c[0, 0] = 0.0
    g = np.fft.irfft2(c, s=(n1, n2))
    peak = np.max(np.abs(g))
    if peak > 0:
        g *= amplitude / peak
    return g


def sample_flow(n, nz, amp, eps, uscale=0.1):
    """Prepared state: wavy interface over a sheared elastic background.

    The background columns are horizontal constants (a vertical constant
    cannot be divergence free with a sealed floor); perturbations scale
    with amp and vanish at the floor where required.
    """
    from elastislab.geometry import SlabGrid
    from elastislab.dynamics import prepare_initial_data

    grid = SlabGrid(n, n, nz)
    x1, x2 = grid.horizontal_meshes()
    y = grid.y3
    f0 = amp * (np.cos(x1) + 0.6 * np.sin(x2) + 0.3 * np.cos(x1 + 2 * x2))
    u0 = np.zeros((3, n, n, nz))
    u0[0] = uscale * amp * np.sin(x1)[..., None] * np.cos(np.pi * (y + 1) / 2)
    u0[1] = uscale * amp * np.cos(x2)[..., None] * np.ones_like(y)
    u0[2] = uscale * amp * (np.sin(x2) * np.cos(x1))[..., None] * (1 + y)
    F0 = np.zeros((3, 3, n, n, nz))
    F0[0, 0] = 1.0
    F0[1, 1] = 1.0
    F0[2, 0] = 0.5
    F0[2, 1] = 0.2
    F0[0, 1] = 0.2 * amp * np.sin(x2)[..., None]
    F0[0, 2] = 0.1 * amp * np.sin(x1)[..., None] * (1 + y)
    state, _ = prepare_initial_data(f0, u0, F0, eps=eps)
    return state


def mixed_flow(n, nz, c0):
    """Prepared state whose two stability mechanisms live on different bands.

    A wave-like velocity makes the Taylor coefficient peak near x1 = 0 and
    pi (those bands form the first region); a second deformation column
    whose strength follows sin^2(x1) makes the non-collinearity modulus
    large only near x1 = pi/2 and 3pi/2 (the second region).  With
    c0 = 0.22 each condition fails outside its own region; with c0 = 0.1
    the regioned report has wide margins for short monitored runs.
    Region geometry needs the 4-spacing indicator smoothing to be narrow
    relative to the bands, so use n >= 32.
    """
    from elastislab.cli import build_scenario, preset

    return build_scenario(preset("mixed-regions", n1=n, n2=n, nz=nz, c0=c0))


def ablation_flow(n, nz, amp=0.1, uamp=0.06, famp=0.05, eps=0.08):
    """Prepared state with every interface-equation term well above the
    discretization floor: strong velocity, column perturbations and
    regularization on top of the sheared background."""
    from elastislab.geometry import SlabGrid
    from elastislab.dynamics import prepare_initial_data

    grid = SlabGrid(n, n, nz)
    x1, x2 = grid.horizontal_meshes()
    y = grid.y3
    f0 = amp * (np.cos(x1) + 0.6 * np.sin(x2) + 0.3 * np.cos(x1 + 2 * x2))
    u0 = np.zeros((3, n, n, nz))
    u0[0] = uamp * np.sin(x1)[..., None] * np.cos(np.pi * (y + 1) / 2)
    u0[1] = uamp * np.cos(x2)[..., None] * (0.5 + 0.5 * (1 + y))
    u0[2] = uamp * (np.sin(x2) * np.cos(x1))[..., None] * (1 + y)
    F0 = np.zeros((3, 3, n, n, nz))
    F0[0, 0] = 1.0
    F0[1, 1] = 1.0
    F0[2, 0] = 0.5
    F0[2, 1] = 0.2
    F0[0, 1] = famp * np.sin(x2)[..., None]
    F0[1, 0] = famp * np.cos(x1 + x2)[..., None] * (1 + 0.3 * y)
    F0[0, 2] = famp * np.sin(x1)[..., None] * (1 + y)
    state, _ = prepare_initial_data(f0, u0, F0, eps=eps)
    return state
