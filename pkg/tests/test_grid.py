import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conserve_lab.errors import FieldError, ResolutionError
from conserve_lab.grid import (AnalyticFieldSpec, MatrixField, PeriodicGrid, ScalarField, VectorField,
                               curl, divergence, gradient, integrate, irfftn, leray_project, lp_norm,
                               random_trig_field, rfftn, sample, spectral_derivative, vector_potential)


def spec(kind, **params):
    return AnalyticFieldSpec(kind, params)


class TestPeriodicGrid:
    @pytest.mark.parametrize("shape", [(6,), (12, 16), (4,)])
    def test_rejects_non_power_of_two(self, shape):
        with pytest.raises(FieldError):
            PeriodicGrid(shape)

    def test_rejects_dimension_four(self):
        with pytest.raises(FieldError):
            PeriodicGrid((8, 8, 8, 8))

    def test_spacing_and_volume(self):
        g = PeriodicGrid((16, 32), (2.0, 1.0))
        assert g.spacing == (0.125, 1 / 32)
        assert g.cell_volume == pytest.approx(2.0 / 512)
        assert g.volume == pytest.approx(2.0)

    def test_nyquist_zeroed_for_odd_derivatives(self):
        g = PeriodicGrid.uniform(16, 1)
        assert g.wavenumbers(0)[8] == 0
        assert g.wavenumbers(0, derivative=False)[8] != 0


class TestSample:
    def test_constant(self):
        g = PeriodicGrid.uniform(16, 2)
        f = sample(spec("constant", value=3.0), g)
        assert np.all(f.data == 3.0)

    def test_fourier_mode(self):
        g = PeriodicGrid.uniform(64, 1)
        f = sample(spec("fourier-mode", wavevector=[1]), g)
        np.testing.assert_allclose(f.data, np.sin(2 * np.pi * np.arange(64) / 64), atol=1e-15)

    def test_weierstrass_deterministic(self):
        g = PeriodicGrid.uniform(256, 1)
        s = spec("weierstrass", alpha=0.5, octaves=5, seed=7)
        assert np.array_equal(sample(s, g).data, sample(s, g).data)

    def test_weierstrass_unresolved(self):
        with pytest.raises(ResolutionError):
            sample(spec("weierstrass", alpha=0.5, octaves=6), PeriodicGrid.uniform(64, 1))

    def test_unknown_kind(self):
        with pytest.raises(FieldError):
            spec("gaussian")

    def test_fields_are_immutable(self):
        f = sample(spec("constant", value=1.0), PeriodicGrid.uniform(8, 1))
        with pytest.raises(ValueError):
            f.data[0] = 2.0

    def test_non_finite_rejected(self):
        g = PeriodicGrid.uniform(8, 1)
        with pytest.raises(FieldError):
            ScalarField(g, np.full(8, np.nan))


class TestSpectralCalculus:
    def test_derivative_of_sine(self):
        g = PeriodicGrid.uniform(64, 1)
        x = g.coords()[0]
        d = spectral_derivative(ScalarField(g, np.sin(2 * np.pi * x)), 0)
        np.testing.assert_allclose(d.data, 2 * np.pi * np.cos(2 * np.pi * x), atol=1e-12)

    def test_derivative_of_constant(self):
        g = PeriodicGrid.uniform(32, 2)
        d = spectral_derivative(ScalarField(g, np.full(g.shape, 5.0)), 1)
        assert np.max(np.abs(d.data)) < 1e-12

    def test_derivative_matches_extrapolated_differences(self):
        # Richardson-extrapolated centred differences of the analytic series
        alpha, K = 0.5, 3
        g = PeriodicGrid.uniform(128, 1)
        x = g.coords()[0]
        phases = np.random.default_rng(0).uniform(0, 2 * np.pi, K)

        def w(z):
            return sum(2.0 ** (-alpha * k) * np.cos(2.0**k * 2 * np.pi * z + phases[k - 1]) for k in range(1, K + 1))

        f = sample(spec("weierstrass", alpha=alpha, octaves=K, seed=0), g)
        h = 1e-3
        d1 = (w(x + h) - w(x - h)) / (2 * h)
        d2 = (w(x + h / 2) - w(x - h / 2)) / h
        fd = (4 * d2 - d1) / 3
        assert np.max(np.abs(spectral_derivative(f, 0).data - fd)) < 1e-6

    def test_shear_is_solenoidal(self):
        g = PeriodicGrid.uniform(32, 2)
        u = sample(spec("shear", wavenumber=3), g)
        assert np.max(np.abs(divergence(u).data)) < 1e-12

    def test_divergence_of_compressible(self):
        g = PeriodicGrid.uniform(32, 2)
        u = sample(spec("fourier-mode", wavevector=[1, 0], vector_axis=0), g)
        x = g.coords()[0]
        np.testing.assert_allclose(divergence(u).data, np.broadcast_to(2 * np.pi * np.cos(2 * np.pi * x), g.shape),
                                   atol=1e-12)

    def test_curl_requires_three_dimensions(self):
        g = PeriodicGrid.uniform(8, 2)
        with pytest.raises(FieldError):
            curl(VectorField(g, np.zeros((2, 8, 8))))

    @given(st.integers(0, 10_000))
    def test_div_curl_vanishes(self, seed):
        rng = np.random.default_rng(seed)
        g = PeriodicGrid.uniform(16, 3)
        psi = VectorField.from_components([random_trig_field(g, rng, 3) for _ in range(3)])
        assert np.max(np.abs(divergence(curl(psi)).data)) < 1e-10

    @given(st.integers(0, 10_000))
    def test_fft_round_trip(self, seed):
        a = np.random.default_rng(seed).normal(size=(16, 8))
        back = irfftn(rfftn(a, (0, 1)), a.shape, (0, 1))
        assert np.max(np.abs(back - a)) <= 1e-12 * np.max(np.abs(a))


class TestVectorPotential:
    def test_round_trip(self, rng):
        g = PeriodicGrid.uniform(16, 3)
        psi0 = VectorField.from_components([random_trig_field(g, rng, 3) for _ in range(3)])
        u = curl(psi0)
        psi, mean = vector_potential(u)
        assert np.max(np.abs(curl(psi).data - u.data)) < 1e-9
        np.testing.assert_allclose(mean, 0, atol=1e-12)

    def test_zero(self):
        g = PeriodicGrid.uniform(8, 3)
        psi, mean = vector_potential(VectorField(g, np.zeros((3, 8, 8, 8))))
        assert np.all(psi.data == 0) and np.all(mean == 0)

    def test_mean_returned(self):
        g = PeriodicGrid.uniform(8, 3)
        u = VectorField(g, np.ones((3, 8, 8, 8)) * np.array([1.0, 2.0, 3.0])[:, None, None, None])
        psi, mean = vector_potential(u)
        np.testing.assert_allclose(mean, [1, 2, 3])
        assert np.max(np.abs(psi.data)) < 1e-14

    def test_compressible_rejected_with_norm(self):
        g = PeriodicGrid.uniform(16, 3)
        u = sample(spec("fourier-mode", wavevector=[1, 0, 0], vector_axis=0), g)
        with pytest.raises(FieldError) as info:
            vector_potential(u)
        assert info.value.div_norm == pytest.approx(2 * np.pi / math.sqrt(2), rel=1e-10)

    def test_leray_makes_solenoidal(self, rng):
        g = PeriodicGrid.uniform(16, 3)
        v = VectorField.from_components([random_trig_field(g, rng, 3) for _ in range(3)])
        assert np.max(np.abs(divergence(leray_project(v)).data)) < 1e-10


class TestNorms:
    def test_constant_norm(self):
        g = PeriodicGrid.uniform(16, 2)
        assert lp_norm(ScalarField(g, np.full(g.shape, 2.0)), 3) == pytest.approx(2.0, abs=1e-14)

    def test_sine_l2(self):
        g = PeriodicGrid.uniform(64, 1)
        f = sample(spec("fourier-mode", wavevector=[1]), g)
        assert abs(lp_norm(f, 2) - math.sqrt(0.5)) < 1e-12

    def test_sup_norm(self, rng):
        g = PeriodicGrid.uniform(32, 1)
        f = ScalarField(g, rng.normal(size=32))
        assert lp_norm(f, math.inf) == np.max(np.abs(f.data))

    def test_p_below_one(self):
        with pytest.raises(FieldError):
            lp_norm(ScalarField(PeriodicGrid.uniform(8, 1), np.ones(8)), 0.5)

    @given(st.lists(st.integers(-5, 5), min_size=2, max_size=2).filter(lambda k: any(k)),
           st.floats(0, 2 * np.pi))
    def test_mode_integrates_to_zero(self, k, phase):
        g = PeriodicGrid.uniform(32, 2)
        f = sample(spec("fourier-mode", wavevector=k, phase=phase), g)
        assert abs(integrate(f)) < 1e-12

    def test_gradient_of_mode(self):
        g = PeriodicGrid.uniform(16, 2)
        f = sample(spec("fourier-mode", wavevector=[0, 1]), g)
        y = g.coords()[1]
        np.testing.assert_allclose(gradient(f).data[1], np.broadcast_to(2 * np.pi * np.cos(2 * np.pi * y), g.shape),
                                   atol=1e-12)


class TestMatrixField:
    def test_pointwise_round_trip(self, rng):
        g = PeriodicGrid.uniform(8, 3)
        U = MatrixField(g, rng.normal(size=(3, 3, 8, 8, 8)))
        back = MatrixField.from_pointwise(g, U.pointwise())
        assert np.array_equal(back.data, U.data)

    def test_requires_dim3(self):
        with pytest.raises(FieldError):
            MatrixField(PeriodicGrid.uniform(8, 2), np.zeros((3, 3, 8, 8)))
