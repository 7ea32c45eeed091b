"""Tests for the slab grid, harmonic map, and snapshot IO."""

import numpy as np
import pytest
import scipy.linalg

from elastislab import geometry as geo
from elastislab.errors import DegenerateMap, GridMismatch
from elastislab.snapshots import read_snapshot, write_snapshot

from conftest import torus_grid


def single_mode_map_oracle(delta, grid):
    """Analytic vertical map for f = delta*cos(x1): separation of variables."""
    X1, _ = torus_grid(grid.n1, grid.n2)
    y3 = grid.y3
    prof = np.sinh(y3 + 1.0) / np.sinh(1.0)
    return y3[None, None, :] + delta * np.cos(X1)[:, :, None] * prof[None, None, :]


class TestThomas:
    def test_against_dense_solve(self, rng):
        n = 17
        for _ in range(5):
            sub = rng.normal(size=n)
            sup = rng.normal(size=n)
            diag = rng.normal(size=n) + 8.0
            rhs = rng.normal(size=(3, n))
            x = geo.thomas_batched(sub, diag, sup, rhs)
            mat = np.diag(diag) + np.diag(sub[1:], -1) + np.diag(sup[:-1], 1)
            for b in range(3):
                expect = scipy.linalg.solve(mat, rhs[b])
                assert np.allclose(x[b], expect, atol=1e-9)


class TestBuildMap:
    def test_flat_map_is_identity(self):
        grid = geo.SlabGrid(8, 8, 9)
        cmap = geo.build_map(np.zeros((8, 8)), grid)
        assert cmap.is_flat
        assert np.allclose(cmap.phi, np.broadcast_to(grid.y3, grid.shape))
        assert np.allclose(cmap.phi3, 1.0)

    def test_boundary_values_exact(self, rng):
        grid = geo.SlabGrid(16, 16, 17)
        X1, X2 = torus_grid(16, 16)
        f = 0.1 * np.cos(X1) + 0.05 * np.sin(2 * X2)
        cmap = geo.build_map(f, grid)
        assert np.array_equal(cmap.phi[..., -1], f)
        assert np.array_equal(cmap.phi[..., 0], np.full((16, 16), -1.0))

    def test_discrete_residual_small(self):
        grid = geo.SlabGrid(16, 16, 17)
        X1, X2 = torus_grid(16, 16)
        f = 0.2 * np.cos(X1) * np.cos(X2)
        cmap = geo.build_map(f, grid)
        assert cmap.interior_residual() < 1e-10

    def test_single_mode_matches_analytic_at_second_order(self):
        delta = 0.1
        errs = []
        for nz in (17, 33):
            grid = geo.SlabGrid(16, 16, nz)
            X1, _ = torus_grid(16, 16)
            cmap = geo.build_map(delta * np.cos(X1), grid)
            oracle = single_mode_map_oracle(delta, grid)
            errs.append(np.max(np.abs(cmap.phi - oracle)))
        order = np.log2(errs[0] / errs[1])
        assert order > 1.9

    def test_degenerate_map_raises(self):
        grid = geo.SlabGrid(16, 16, 17)
        X1, _ = torus_grid(16, 16)
        with pytest.raises(DegenerateMap):
            geo.build_map(0.9 * np.cos(X1), grid)
        with pytest.raises(DegenerateMap):
            geo.build_map(np.full((16, 16), -1.01), grid)

    def test_time_derivative_is_linearization(self):
        grid = geo.SlabGrid(16, 16, 17)
        X1, X2 = torus_grid(16, 16)
        f = 0.1 * np.cos(X1)
        g = 0.07 * np.sin(X2)
        cmap = geo.build_map(f, grid)
        t = 1e-4
        lin = (geo.build_map(f + t * g, grid).phi - cmap.phi) / t
        dphi = geo.map_time_derivative(cmap, g)
        # the discrete solve is linear in the data, so this is exact
        assert np.max(np.abs(lin - dphi)) < 1e-8
        assert np.allclose(dphi[..., -1], g, atol=1e-12)
        assert np.allclose(dphi[..., 0], 0.0, atol=1e-12)


class TestMappedGradient:
    def test_flat_gradient_exact_modes(self):
        grid = geo.SlabGrid(16, 16, 17)
        cmap = geo.build_map(np.zeros((16, 16)), grid)
        X1, _ = torus_grid(16, 16)
        w = np.sin(X1)[:, :, None] * np.ones(grid.nz)[None, None, :]
        g = geo.mapped_gradient(w, cmap)
        assert np.allclose(g[0], np.cos(X1)[:, :, None], atol=1e-12)
        assert np.allclose(g[1], 0.0, atol=1e-12)
        assert np.allclose(g[2], 0.0, atol=1e-10)

    def test_manufactured_gradient_second_order(self):
        # F(x) = sin(x1) (x3+1)^2 + cos(x2) x3 evaluated through the map
        errs = []
        for nz in (17, 33):
            grid = geo.SlabGrid(32, 32, nz)
            X1, X2 = torus_grid(32, 32)
            f = 0.15 * np.cos(X1) + 0.1 * np.sin(X2)
            cmap = geo.build_map(f, grid)
            x3 = cmap.phi
            s1 = np.sin(X1)[:, :, None]
            c1 = np.cos(X1)[:, :, None]
            s2 = np.sin(X2)[:, :, None]
            c2 = np.cos(X2)[:, :, None]
            w = s1 * (x3 + 1.0) ** 2 + c2 * x3
            g = geo.mapped_gradient(w, cmap)
            exact = np.stack([
                c1 * (x3 + 1.0) ** 2,
                -s2 * x3,
                2.0 * s1 * (x3 + 1.0) + c2,
            ])
            errs.append(np.max(np.abs(g - exact)))
        order = np.log2(errs[0] / errs[1])
        assert order > 1.9

    def test_trace_and_bottom(self):
        grid = geo.SlabGrid(8, 8, 9)
        w = np.arange(np.prod(grid.shape), dtype=float).reshape(grid.shape)
        assert np.array_equal(geo.trace(w), w[:, :, -1])
        assert np.array_equal(geo.bottom_trace(w), w[:, :, 0])


class TestNormalsAndTangents:
    def test_orthogonality_exact(self, rng):
        n = 32
        from conftest import random_band_limited
        f = random_band_limited(rng, n, n, 8, amplitude=0.2)
        N = geo.normal_vector(f)
        tau1, tau2 = geo.tangent_vectors(f)
        assert np.max(np.abs(np.sum(N * tau1, axis=0))) == 0.0
        assert np.max(np.abs(np.sum(N * tau2, axis=0))) == 0.0

    def test_norm_squared(self):
        X1, X2 = torus_grid(32, 32)
        f = 0.1 * np.cos(X1) + 0.2 * np.sin(X2)
        N = geo.normal_vector(f)
        from elastislab.spectral import horizontal_derivative
        d1 = horizontal_derivative(f, 1)
        d2 = horizontal_derivative(f, 2)
        assert np.allclose(np.sum(N * N, axis=0), 1 + d1 ** 2 + d2 ** 2, atol=1e-13)


class TestSnapshots:
    def test_roundtrip(self, tmp_path, rng):
        grid = geo.SlabGrid(8, 8, 9)
        X1, _ = torus_grid(8, 8)
        cmap = geo.build_map(0.05 * np.cos(X1), grid)
        w = rng.normal(size=(3,) + grid.shape)
        p = tmp_path / "state.snap"
        write_snapshot(p, w, cmap, time=0.25)
        snap = read_snapshot(p)
        assert snap.time == 0.25
        assert snap.grid_shape == grid.shape
        assert np.array_equal(snap.values, w)
        assert snap.matches_map(cmap)

    def test_map_hash_detects_changes(self, tmp_path):
        grid = geo.SlabGrid(8, 8, 9)
        X1, _ = torus_grid(8, 8)
        cmap = geo.build_map(0.05 * np.cos(X1), grid)
        other = geo.build_map(0.06 * np.cos(X1), grid)
        p = tmp_path / "state.snap"
        write_snapshot(p, np.zeros(grid.shape), cmap, time=0.0)
        snap = read_snapshot(p)
        assert snap.matches_map(cmap)
        assert not snap.matches_map(other)

    def test_shape_guard(self, tmp_path):
        grid = geo.SlabGrid(8, 8, 9)
        cmap = geo.build_map(np.zeros((8, 8)), grid)
        with pytest.raises(GridMismatch):
            write_snapshot(tmp_path / "x", np.zeros((4, 4, 4)), cmap, 0.0)
