"""Norm surrogates and order fitting."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from heatconf import (TruncationPolicy, analytic_spectrum, build_embedding,
                      fit_order, holder_norm, scaling_diagnostics)
from heatconf import analysis, geometry
from heatconf.errors import ConfigError

TWO_PI = 2.0 * np.pi


def test_holder_constant_field(circle):
    grid = geometry.sample_grid(circle, 64)
    vals = np.full(len(grid), -2.5)
    est = holder_norm(vals, 0, 0.5, grid.points, circle)
    assert_allclose(est.sup, 2.5)
    assert est.derivative_sups == []
    assert est.holder == 0.0


def test_holder_single_mode(circle):
    grid = geometry.sample_grid(circle, 256)
    x = grid.points[:, 0]
    vals = np.cos(x)
    k = TWO_PI * np.fft.fftfreq(256, d=TWO_PI / 256)

    def differentiate(arr):
        spec = np.fft.fft(arr, axis=0)
        shape = (256,) + (1,) * (arr.ndim - 1)
        out = np.fft.ifft(spec * (1j * k).reshape(shape), axis=0).real
        return out[..., None] * np.ones(1)

    est = holder_norm(vals, 1, 0.5, grid.points, circle, differentiate)
    assert_allclose(est.sup, 1.0, atol=1e-12)
    assert_allclose(est.derivative_sups[0], 1.0, atol=1e-10)
    assert est.s == 1 and est.alpha == 0.5
    with pytest.raises(ConfigError):
        holder_norm(vals, 1, 0.5, grid.points, circle)   # derivative unavailable


def test_holder_seminorm_dense_pair_oracle(circle):
    grid = geometry.sample_grid(circle, 256)
    x = grid.points[:, 0]
    vals = np.sin(3 * x) + 0.2 * np.cos(7 * x)
    alpha = 0.5
    capped = analysis.holder_seminorm_field(vals, grid.points, circle, alpha)
    # dense brute force over every admissible pair
    radius = circle.injectivity_surrogate / 2.0
    best = 0.0
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            d = geometry.geodesic_distance(circle, grid.points[i], grid.points[j])
            if 0 < d <= radius:
                best = max(best, abs(vals[i] - vals[j]) / d**alpha)
    assert_allclose(capped, best, rtol=1e-12)


def test_holder_monotone_under_refinement(circle):
    coarse = geometry.sample_grid(circle, 64)
    fine = geometry.sample_grid(circle, 128)   # contains the coarse points
    f = lambda p: np.sin(2 * p[:, 0]) + 0.1 * np.sin(9 * p[:, 0])
    h_coarse = analysis.holder_seminorm_field(f(coarse.points), coarse.points,
                                              circle, 0.5)
    h_fine = analysis.holder_seminorm_field(f(fine.points), fine.points,
                                            circle, 0.5)
    assert h_fine >= h_coarse - 1e-12


def test_holder_pair_cap(circle):
    grid = geometry.sample_grid(circle, 256)
    vals = np.sin(grid.points[:, 0])
    full = analysis.holder_seminorm_field(vals, grid.points, circle, 0.5)
    capped = analysis.holder_seminorm_field(vals, grid.points, circle, 0.5,
                                            cap=2000)
    assert 0 < capped <= full * (1 + 1e-12)


def test_fit_order_powers():
    t = np.array([0.1, 0.05, 0.02, 0.01, 0.005])
    fit = fit_order(t, t**2)
    assert abs(fit.slope - 2.0) <= 1e-6
    assert fit.r_squared >= 1 - 1e-9
    fit = fit_order(t, 3.0 * t)
    assert_allclose(fit.slope, 1.0, atol=1e-10)
    assert_allclose(fit.intercept, np.log(3.0), atol=1e-10)
    t2 = np.linspace(0.01, 0.1, 8)
    fit = fit_order(t2, t2 + 0.05 * t2**2)
    assert 1.0 < fit.slope < 1.05


def test_fit_order_validation():
    with pytest.raises(ConfigError):
        fit_order([0.1, 0.2], [1.0, 2.0])
    with pytest.raises(ConfigError):
        fit_order([0.1, 0.2, 0.3], [1.0, -2.0, 3.0])


def test_fit_order_residual_orthogonality():
    rng = np.random.default_rng(3)
    t = np.array([0.1, 0.07, 0.03, 0.01, 0.004])
    y = 2.7 * t**1.3 * np.exp(0.05 * rng.standard_normal(5))
    fit = fit_order(t, y)
    lt = np.log(t)
    resid = np.log(y) - (fit.slope * lt + fit.intercept)
    assert abs(np.dot(resid, lt)) <= 1e-10
    assert abs(np.sum(resid)) <= 1e-10
    assert 0 <= fit.r_squared <= 1


def test_fit_order_scale_equivariance():
    t = np.array([0.1, 0.05, 0.02, 0.01])
    y = t**1.7
    f1 = fit_order(t, y)
    f2 = fit_order(t, 5.0 * y)
    assert_allclose(f2.slope, f1.slope, atol=1e-12)
    assert_allclose(f2.intercept - f1.intercept, np.log(5.0), atol=1e-12)


def test_scaling_diagnostics(circle):
    prov = analytic_spectrum(circle, count=1200)
    policy = TruncationPolicy(rho=1.0)
    maps = [build_embedding(prov, t, policy) for t in (0.1, 0.05, 0.02, 0.01)]
    table = scaling_diagnostics(maps, resolution=64, seed=5)
    assert len(table["rows"]) == 4
    for fit in table["fits"].values():
        assert fit["pass"], table["fits"]
    # constant sequences fit to slope zero
    flat = fit_order([0.1, 0.05, 0.02], [2.0, 2.0, 2.0])
    assert_allclose(flat.slope, 0.0, atol=1e-12)
