import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conserve_lab.battery import TestFunctionBattery
from conserve_lab.convexint import (KAPPA, RHO1, RHO2, ConstitutiveSet, IterationSchedule, a_vec,
                                    ci_iterate, cube_cutoff, geom1_constant, geom1_decompose,
                                    geom2_decompose, in_wave_cone, k_point, kc_project, kc_project_batch,
                                    lattice_vector, localize, plane_wave_oscillation, rank2_direction,
                                    state_triple)
from conserve_lab.errors import FieldError, GeometryError
from conserve_lab.grid import MatrixField, PeriodicGrid, ScalarField, VectorField, divergence

E1, E2, E3 = np.eye(3)


def brute_distance(U, C, n_rho=400, n_dir=4000, seed=0):
    """Sampled distance to K_C: rho on a log grid, v over random directions and exact radius."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_dir, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    best = np.inf
    for rho in np.exp(np.linspace(-math.log(C), math.log(C), n_rho)):
        a = a_vec(rho)
        # for fixed rho and direction the best radius is the clamped projection
        t = np.clip(dirs @ (a @ U) / (a @ a), 1 / C, C)
        pts = a[None, :, None] * (t[:, None] * dirs)[:, None, :]
        best = min(best, float(np.min(np.linalg.norm(pts - U, axis=(1, 2)))))
    return best


def solenoidal_wave(n):
    g = PeriodicGrid.uniform(n, 3)
    W = plane_wave_oscillation(g, np.zeros((3, 3)), np.zeros((3, 3)), np.diag([1.0, 1.0, 0.0]), 0.5, E3, 2)
    mean = W.data.reshape(3, 3, -1).mean(axis=-1)
    return MatrixField(g, W.data - mean[:, :, None, None, None])


def max_row_divergence(M):
    return max(float(np.max(np.abs(divergence(r).data))) for r in M.rows())


class TestWaveCone:
    def test_identity_is_outside(self):
        assert not in_wave_cone(np.eye(3))

    def test_rank_one_is_inside(self):
        assert in_wave_cone(np.outer([1.0, 2.0, 3.0], [0.5, -1.0, 2.0]))

    def test_k_differences_are_inside(self):
        assert in_wave_cone(k_point(0.5, [1, 2, 0]) - k_point(2.0, [0, 1, 3]))

    def test_geom1_top_split_is_inside(self):
        w = 2 * E3
        assert in_wave_cone(state_triple(w, w, w) - state_triple(-w, -w, w))

    def test_diag_direction(self):
        np.testing.assert_allclose(rank2_direction(np.diag([1.0, 1.0, 0.0])), E3)

    def test_row_kernel_of_geom1_split(self):
        # rows (m, u, w): the difference 2 (e3 (x) [1, 1, 0]) annihilates every xi orthogonal to w
        w = 2 * E3
        diff = state_triple(w, w, w) - state_triple(-w, -w, w)
        xi = rank2_direction(diff)
        assert abs(xi @ w) < 1e-12
        np.testing.assert_allclose(diff @ xi, 0, atol=1e-12)
        np.testing.assert_allclose(xi, E1)

    def test_rank_one_direction_orthogonal(self):
        b = np.array([1.0, -2.0, 0.5])
        xi = rank2_direction(np.outer([3.0, 1.0, 1.0], b))
        assert abs(xi @ b) < 1e-12
        assert np.linalg.norm(xi) == pytest.approx(1.0)

    def test_full_rank_rejected(self):
        with pytest.raises(GeometryError):
            rank2_direction(np.eye(3))


class TestConstitutiveSet:
    def test_member(self):
        assert ConstitutiveSet(4).contains(k_point(2.0, [0.5, 0.0, 0.0]))

    def test_density_out_of_range(self):
        assert not ConstitutiveSet(4).contains(k_point(5.0, [1.0, 0.0, 0.0]))

    def test_C_must_exceed_one(self):
        with pytest.raises(ValueError):
            ConstitutiveSet(1.0)


class TestProjection:
    def test_member_has_zero_distance(self):
        d, rho, v = kc_project(k_point(2.0, E1), 4.0)
        assert d <= 1e-9
        assert rho == pytest.approx(2.0, abs=1e-6)
        np.testing.assert_allclose(v, E1, atol=1e-6)

    def test_origin_is_at_least_one_over_C(self):
        d, _, _ = kc_project(np.zeros((3, 3)), 4.0)
        assert d >= 1 / 4.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_against_brute_force(self, seed):
        U = np.random.default_rng(seed).normal(size=(3, 3))
        d, rho, v = kc_project(U, 3.0)
        ref = brute_distance(U, 3.0, n_rho=200, n_dir=2000, seed=seed)
        # the sampled search can only overshoot the true minimum
        assert d <= ref + 1e-9
        assert d == pytest.approx(ref, rel=2e-2)
        assert np.linalg.norm(U - k_point(rho, v)) == pytest.approx(d, rel=1e-12)

    def test_batch_matches_single(self, rng):
        Us = rng.normal(size=(5, 3, 3))
        d, _, _ = kc_project_batch(Us, 2.5)
        np.testing.assert_allclose(d, [kc_project(U, 2.5)[0] for U in Us], rtol=1e-12)

    @given(st.floats(0.3, 3.0), st.floats(0.5, 2.0))
    def test_distance_is_zero_on_k(self, rho, speed):
        assert kc_project(k_point(rho, speed * E2), 4.0)[0] < 1e-8


class TestGeom1:
    W = 2 * E3

    def test_leaves_and_weights(self):
        lam = geom1_decompose(self.W)
        weights = [w for w, _ in lam.leaves]
        np.testing.assert_allclose(weights, [0.5, 0.25, 0.25])
        assert lam.total_weight() == pytest.approx(1.0)

    def test_barycenter(self):
        lam = geom1_decompose(self.W)
        np.testing.assert_allclose(lam.barycenter, state_triple(0 * self.W, 0 * self.W, self.W), atol=1e-12)

    def test_density_system(self):
        assert -RHO1 + 3 * RHO2 == pytest.approx(2.0, abs=1e-12)
        assert -RHO1**2 + 3 * RHO2**2 == pytest.approx(-2.0, abs=1e-12)

    def test_certified(self):
        assert geom1_decompose(self.W).certify() == []

    def test_leaves_in_constitutive_set(self):
        K = ConstitutiveSet(geom1_constant(self.W))
        assert all(K.contains(v) for _, v in geom1_decompose(self.W).leaves)

    def test_small_w_rejected(self):
        with pytest.raises(GeometryError):
            geom1_decompose(0.5 * E3)


class TestGeom2:
    def test_member_is_single_leaf(self):
        U = k_point(1.5, [0.0, 1.0, 0.0])
        assert len(geom2_decompose(U, 4.0, 0.5).leaves) == 1

    def test_zero_zero_w_reduces_to_geom1(self):
        w = 2 * E3
        lam = geom2_decompose(state_triple(0 * w, 0 * w, w), geom1_constant(w), 0.5)
        ref = geom1_decompose(w)
        for (a, u), (b, v) in zip(lam.leaves, ref.leaves):
            assert a == b
            np.testing.assert_allclose(u, v)

    def test_two_leaf_pair(self):
        A, B = k_point(1.5, E1), k_point(0.7, E2)
        lam = geom2_decompose(0.5 * (A + B), 4.0, 0.5)
        assert len(lam.leaves) == 2
        assert lam.certify() == []
        got = sorted((round(w, 12), tuple(np.round(v, 9).ravel())) for w, v in lam.leaves)
        ref = sorted((0.5, tuple(np.round(v, 9).ravel())) for v in (A, B))
        assert got == ref

    def test_four_leaf_spread_bound(self):
        U = 0.5 * (k_point(1.5, E1) + k_point(0.7, E2)) + 0.1 * np.eye(3)
        lam = geom2_decompose(U, 4.0, 0.5)
        assert lam.certify() == []
        assert lam.spread() <= KAPPA * math.sqrt(kc_project(U, 4.0)[0])
        K = ConstitutiveSet(4.5)
        assert all(K.contains(v, 1e-8) for _, v in lam.leaves)

    @given(st.floats(0.6, 2.0), st.floats(0.6, 2.0), st.floats(-0.15, 0.15), st.integers(0, 2**16))
    def test_certified_with_barycenter(self, r1, r2, shift, seed):
        rng = np.random.default_rng(seed)
        U = 0.5 * (k_point(r1, E1) + k_point(r2, E2)) + shift * rng.normal(size=(3, 3))
        try:
            lam = geom2_decompose(U, 4.0, 0.5)
        except GeometryError as exc:
            assert exc.distance is not None
            return
        assert lam.certify() == []
        np.testing.assert_allclose(lam.barycenter, U, atol=1e-9)


@pytest.fixture(scope="module")
def wave():
    g = PeriodicGrid.uniform(32, 3)
    U1, U2 = np.zeros((3, 3)), np.diag([1.0, 1.0, 0.0])
    return plane_wave_oscillation(g, np.zeros((3, 3)), U1, U2, 0.5, E3, 2, transition=0.1)


class TestPlaneWave:
    def test_depends_on_x3_only(self, wave):
        d = wave.data
        np.testing.assert_array_equal(d, np.broadcast_to(d[:, :, :1, :1, :], d.shape))

    def test_divergence_free(self, wave):
        assert max_row_divergence(wave) <= 1e-12

    def test_zero_mean_oscillation(self, wave):
        np.testing.assert_allclose(wave.data.reshape(3, 3, -1).mean(axis=-1), 0, atol=1e-10)

    def test_two_plateaus(self, wave):
        h = wave.data[0, 0].ravel()
        hi = np.mean(np.abs(h - 0.5) < 0.05)
        lo = np.mean(np.abs(h + 0.5) < 0.05)
        # each plateau holds lambda of the mass, less the transition layers
        assert 0.3 <= hi <= 0.5
        assert 0.3 <= lo <= 0.5

    def test_direction_must_be_in_kernel(self):
        g = PeriodicGrid.uniform(16, 3)
        with pytest.raises(GeometryError):
            plane_wave_oscillation(g, np.zeros((3, 3)), np.zeros((3, 3)), np.eye(3), 0.5, E3, 1)

    def test_lattice_vector(self):
        np.testing.assert_array_equal(lattice_vector([0.5, 0.0, -1.0]), [1, 0, -2])
        with pytest.raises(FieldError):
            lattice_vector([1.0, math.sqrt(2.0), 0.0])


CUBE = (np.full(3, 0.125), np.full(3, 0.875), 0.25)


@pytest.fixture(scope="module")
def results():
    out = {}
    for n in (32, 64):
        W = solenoidal_wave(n)
        out[n] = (W, localize(W, *CUBE), cube_cutoff(W.grid, *CUBE).data)
    return out


class TestLocalize:
    LO, HI, MARGIN = CUBE

    def test_zero_in_zero_out(self):
        g = PeriodicGrid.uniform(16, 3)
        L = localize(MatrixField(g, np.zeros((3, 3) + g.shape)), self.LO, self.HI, self.MARGIN)
        assert np.all(L.data == 0)

    @pytest.mark.parametrize("n", [32, 64])
    def test_divergence_free(self, results, n):
        assert max_row_divergence(results[n][1]) <= 1e-8

    def test_interior_and_exterior_converge(self, results):
        errs = {}
        for n, (W, L, phi) in results.items():
            inside = np.max(np.abs(L.data - W.data)[:, :, phi == 1])
            outside = np.max(np.abs(L.data[:, :, phi == 0]))
            errs[n] = (inside, outside)
        assert errs[32][0] < 1e-2 and errs[32][1] < 1e-2
        assert errs[64][0] < errs[32][0] / 4
        assert errs[64][1] < errs[32][1] / 4

    def test_disjoint_cubes_sum_divergence_free(self):
        W = solenoidal_wave(32)
        a = localize(W, np.zeros(3), np.full(3, 0.5), 0.125)
        b = localize(W, np.full(3, 0.5), np.ones(3), 0.125)
        assert max_row_divergence(MatrixField(W.grid, a.data + b.data)) <= 1e-8

    def test_nonzero_mean_rejected(self):
        g = PeriodicGrid.uniform(16, 3)
        with pytest.raises(FieldError):
            localize(MatrixField(g, np.ones((3, 3) + g.shape)), self.LO, self.HI, self.MARGIN)


class TestSchedule:
    def test_constants(self):
        s = IterationSchedule(2.0, (1.0, 1.0), (8, 2), (1.0, 1.0))
        assert s.C == 3.0
        assert s.C_n(0) == 2.0
        assert all(s.C_n(k) < s.C_n(k + 1) < s.C for k in range(10))
        assert s.eps_n(1) == pytest.approx(0.25)

    def test_wavelengths_must_halve(self):
        with pytest.raises(ValueError):
            IterationSchedule(2.0, (1.0, 1.0), (8, 8), (1.0, 1.5))

    def test_C0_above_one(self):
        with pytest.raises(ValueError):
            IterationSchedule(1.0, (1.0,), (8,), (1.0,))


class TestBattery:
    def test_members_nonnegative(self):
        fields = TestFunctionBattery.default(PeriodicGrid.uniform(16, 3)).fields()
        assert len(fields) == 15
        assert all(f.data.min() >= 0 and f.data.max() > 0 for f in fields)


def constant_w(n, value=2.0):
    g = PeriodicGrid.uniform(n, 3)
    return VectorField(g, np.zeros((3,) + g.shape) + value * E3[:, None, None, None])


@pytest.fixture(scope="module")
def run():
    g = PeriodicGrid.uniform(32, 3)
    x3 = g.coords()[2]
    w = np.zeros((3,) + g.shape)
    w[2] = 2.0 + np.sin(2 * np.pi * x3)
    f = ScalarField(g, 2 * np.pi * np.cos(2 * np.pi * x3) * np.ones(g.shape))
    return ci_iterate(VectorField(g, w), stages=2, f=f)


class TestIteration:
    def test_zero_stages_returns_initial_state(self):
        w0 = constant_w(16)
        iterates, diags = ci_iterate(w0, stages=0)
        assert len(iterates) == 1 and diags == []
        np.testing.assert_array_equal(iterates[0].data[2], w0.data)
        assert np.all(iterates[0].data[:2] == 0)

    def test_constant_state_first_stage(self):
        iterates, diags = ci_iterate(constant_w(32), stages=1)
        d0 = kc_project_batch(iterates[0].pointwise(), diags[0].C_n)[0].mean()
        assert diags[0].accepted
        assert diags[0].mean_dist < 0.5 * d0

    def test_accepted_stage_residuals(self, run):
        _, diags = run
        accepted = [d for d in diags if d.accepted]
        assert accepted
        for d in accepted:
            assert max(d.weak_residual_divU, d.weak_residual_divRhoU, d.weak_residual_divW) <= 1e-6
            assert d.renorm_defect_gap <= d.renorm_gap_bound

    def test_residuals_do_not_grow(self, run):
        _, diags = run
        res = [max(d.weak_residual_divU, d.weak_residual_divRhoU, d.weak_residual_divW) for d in diags]
        assert all(r <= 1e-6 for r in res)

    def test_one_iterate_per_accepted_stage(self, run):
        iterates, diags = run
        assert len(iterates) == 1 + sum(d.accepted for d in diags)
