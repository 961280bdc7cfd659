import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from riemstein.errors import ConfigError
from riemstein.fields import (
    PolynomialField,
    ScalarField,
    coordinate_field,
    gaussian_potential,
    height_potential,
    linear_combination,
    log_heat_kernel_potential,
    make_potential,
    ou_semigroup_matrices,
    sigma_preset,
    zero_potential,
)
from riemstein.manifolds import Euclidean, Hyperbolic3, Sphere

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)


@pytest.mark.parametrize(
    "M, spec",
    [
        (Euclidean(2), {"name": "gaussian", "A": [[1.0, 0.3], [0.3, 2.0]], "y": [0.5, -1.0]}),
        (Euclidean(3), {"name": "gaussian", "A": 0.7}),
        (Sphere(2, 1.0), {"name": "height", "beta": 0.4}),
        (Sphere(2, 1.0), {"name": "zero"}),
        (Hyperbolic3(-1.0), {"name": "log_heat_kernel", "t": 0.8}),
        (Hyperbolic3(-0.5), {"name": "log_heat_kernel", "t": 2.0}),
    ],
)
def test_potential_presets_pass_self_test(M, spec, rng):
    pot = make_potential(spec, M)
    assert pot.self_test(M, rng)["ok"]


def test_unknown_potential_rejected():
    with pytest.raises(ConfigError):
        make_potential({"name": "banana"}, Euclidean(2))


def test_height_potential_needs_sphere():
    with pytest.raises(ConfigError):
        make_potential({"name": "height"}, Euclidean(2))


def test_gaussian_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        gaussian_potential(np.eye(3), [0.0, 0.0])


def test_unknown_sigma_preset_rejected():
    with pytest.raises(ConfigError):
        sigma_preset("nope", 2)


def test_gaussian_sampler_has_half_inverse_covariance():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    pot = gaussian_potential(A, [1.0, -2.0])
    x = pot.sampler(np.random.default_rng(0), 200000)
    assert np.allclose(x.mean(0), [1.0, -2.0], atol=0.01)
    assert np.allclose(np.cov(x.T), np.linalg.inv(2 * A), atol=0.01)
    assert pot.K == pytest.approx(np.linalg.eigvalsh(A).min())


def test_zero_potential_bounds():
    assert zero_potential(Sphere(3, 2.0)).K == pytest.approx(2.0)
    assert zero_potential(Euclidean(2)).K == 0.0
    assert zero_potential(Hyperbolic3(-1.0)).K == pytest.approx(-1.0)


def test_height_potential_bound():
    pot = height_potential(Sphere(2, 1.0), beta=0.25)
    assert pot.K == pytest.approx(0.25)


@pytest.mark.parametrize("t", [0.5, 1.0, 3.0])
def test_log_heat_kernel_matches_closed_form(t):
    # p_t(r) = (2 pi t)^(-3/2) (r / sinh r) exp(-t/2 - r^2 / (2t)) on curvature -1
    H = Hyperbolic3(-1.0)
    y = H.base_point()
    pot = log_heat_kernel_potential(-1.0, t, y)
    rng = np.random.default_rng(4)
    x = H.random_point(rng, size=20)
    r = H.dist(x, np.broadcast_to(y, x.shape))
    closed = -1.5 * np.log(2 * math.pi * t) + np.log(r / np.sinh(r)) - t / 2 - r ** 2 / (2 * t)
    assert np.allclose(pot.psi(x), closed, atol=1e-10)


def test_log_heat_kernel_is_smooth_near_the_pole():
    # series branch and exact branch agree across the switch
    H = Hyperbolic3(-1.0)
    y = H.base_point()
    pot = log_heat_kernel_potential(-1.0, 1.0, y)
    E = H.frame(y)
    for r in (1e-4, 4e-3, 5e-3, 1e-2):
        x = H.exp(y, r * E[:, 0])
        closed = -1.5 * np.log(2 * math.pi) + np.log(r / np.sinh(r)) - 0.5 - r ** 2 / 2
        assert float(pot.psi(x)) == pytest.approx(closed, abs=1e-10)


# -- polynomial fields ------------------------------------------------------------------

@given(seed=seeds, dim=st.integers(1, 4))
def test_polynomial_derivatives_match_finite_differences(seed, dim):
    rng = np.random.default_rng(seed)
    f = PolynomialField.random(rng, dim, 3, 1.0)
    fd = ScalarField(f.value, fd_step=1e-4)
    x = rng.standard_normal((3, dim))
    assert np.allclose(f.grad(x), fd.grad(x), atol=1e-6)
    fd2 = ScalarField(f.value, f.grad, fd_step=1e-4)
    assert np.allclose(f.hess(x), fd2.hess(x), atol=1e-6)
    fd3 = ScalarField(f.value, f.grad, f.hess, fd_step=1e-4)
    assert np.allclose(f.third(x), fd3.third(x), atol=1e-6)


@given(seed=seeds)
def test_polynomial_tensors_are_symmetric(seed):
    f = PolynomialField.random(np.random.default_rng(seed), 3, 3)
    x = np.array([0.1, -0.4, 0.7])
    H = f.hess(x)
    T = f.third(x)
    assert np.allclose(H, H.T)
    assert np.allclose(T, np.transpose(T, (1, 0, 2)))
    assert np.allclose(T, np.transpose(T, (0, 2, 1)))


def test_polynomial_value_example():
    f = PolynomialField(1.0, [2.0], [[4.0]], [[[6.0]]])
    # 1 + 2x + 2x^2 + x^3
    assert float(f.value(np.array([2.0]))) == pytest.approx(1 + 4 + 8 + 8)


@given(seed=seeds, a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linear_combination_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    f, g = PolynomialField.random(rng, 2, 3), PolynomialField.random(rng, 2, 3)
    h = linear_combination([(a, f), (b, g)])
    x = rng.standard_normal((4, 2))
    for attr in ("value", "grad", "hess", "third"):
        want = a * getattr(f, attr)(x) + b * getattr(g, attr)(x)
        assert np.allclose(getattr(h, attr)(x), want, atol=1e-12)


def test_scaled_field():
    f = coordinate_field(3, 1, scale=2.0)
    assert float(f.scaled(-1.5).value(np.array([0.0, 1.0, 0.0]))) == pytest.approx(-3.0)


def test_ou_matrices():
    A = np.diag([1.0, 0.0])
    Phi, Sigma = ou_semigroup_matrices(A, 2.0)
    assert np.allclose(Phi, np.diag([math.exp(-2.0), 1.0]))
    assert np.allclose(Sigma, np.diag([(1 - math.exp(-4.0)) / 2, 2.0]))
