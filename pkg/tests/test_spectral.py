import math

import numpy as np
import pytest

from riemstein.errors import NonCompact, Unsupported
from riemstein.fields import PolynomialField, ScalarField, frame_derivs, log_heat_kernel_potential
from riemstein.manifolds import Circle, Euclidean, Hyperbolic3, Sphere
from riemstein.semigroup import circle_fourier_family, sphere_height_family
from riemstein.spectral import (
    circle_kernel_derivative,
    decay_constant,
    harmonic_projection,
    heat_kernel,
    hyperbolic_hessian_bound_check,
    kernel_derivative_norm,
    l2_decay_check,
    poincare_check,
    poincare_test_suite,
    spectral_gap,
)

TWO_PI = 2 * math.pi


# -- spectral gap -------------------------------------------------------------------

@pytest.mark.parametrize("M, gap", [(Circle(TWO_PI), 0.5), (Circle(1.0), 2 * math.pi ** 2), (Sphere(2, 1.0), 1.0),
                                    (Sphere(3, 2.0), 3.0)])
def test_closed_form_gaps(M, gap):
    assert spectral_gap(M).gap == pytest.approx(gap)


@pytest.mark.parametrize("M", [Circle(TWO_PI), Circle(3.0), Sphere(2, 1.0), Sphere(2, 0.25)])
def test_rayleigh_estimate_matches_closed_form(M):
    closed = spectral_gap(M).gap
    est = spectral_gap(M, method="rayleigh")
    assert est.source == "rayleigh_estimate"
    assert abs(est.gap - closed) <= 1e-6 * max(1.0, closed)
    assert est.gap >= closed - 1e-6


@pytest.mark.parametrize("M", [Hyperbolic3(-1.0), Euclidean(2)])
def test_gap_needs_compact_manifold(M):
    with pytest.raises(NonCompact):
        spectral_gap(M)


def test_gap_rejects_unknown_method():
    with pytest.raises(ValueError):
        spectral_gap(Circle(), method="power")


# -- harmonic projection --------------------------------------------------------------

def test_projection_examples():
    S = Sphere(2, 1.0)
    assert harmonic_projection(PolynomialField(1.0, dim=3), S) == pytest.approx(1.0, abs=1e-12)
    assert harmonic_projection(PolynomialField(0.0, [0.0, 0.0, 1.0]), S) == pytest.approx(0.0, abs=1e-12)
    assert harmonic_projection(PolynomialField(0.0, Q=np.diag([0.0, 0.0, 2.0])), S) == pytest.approx(1 / 3, abs=1e-12)
    C = Circle(TWO_PI)
    assert harmonic_projection(lambda x: np.cos(x[..., 0]) ** 2, C) == pytest.approx(0.5, abs=1e-12)


def test_projection_by_sampling():
    S = Sphere(2, 1.0)
    v = harmonic_projection(PolynomialField(0.0, Q=np.diag([0.0, 0.0, 2.0])), S, n_samples=200000, seed=1)
    assert v == pytest.approx(1 / 3, abs=0.005)


# -- Poincare inequality ------------------------------------------------------------------

@pytest.mark.parametrize("M", [Circle(TWO_PI), Sphere(2, 1.0)])
def test_poincare_inequality_on_test_suites(M):
    rows = poincare_check(M, poincare_test_suite(M, n=20, seed=3))
    assert len(rows) == 20
    assert min(r["margin"] for r in rows) >= -1e-9


def test_poincare_is_tight_for_first_eigenfunctions():
    C = Circle(TWO_PI)
    S = Sphere(2, 1.0)
    rc = poincare_check(C, [circle_fourier_family(C).f])[0]
    rs = poincare_check(S, [sphere_height_family(S).f])[0]
    assert abs(rc["margin"]) < 1e-10 and abs(rs["margin"]) < 1e-10


# -- L2 decay ------------------------------------------------------------------------------

def test_constant_function_has_no_l2_decay_to_measure():
    C = Circle(TWO_PI)
    res = l2_decay_check(PolynomialField(2.0, dim=1), C, [0.5, 1.0], n_samples=200, node_stride=16)
    assert res.variance == pytest.approx(0.0, abs=1e-20)
    assert np.all(res.values <= 1e-12) and np.all(res.holds)


def test_circle_sine_decays_at_the_gap():
    C = Circle(TWO_PI)
    t = np.array([0.5, 1.0, 2.0, 4.0])
    res = l2_decay_check(circle_fourier_family(C).f, C, t, n_samples=2000, seed=1, node_stride=16)
    want = np.exp(-t / 2) / math.sqrt(2)
    assert np.all(np.abs(res.values - want) <= 3 * res.std_error + 1e-3)
    assert np.all(res.holds)
    assert res.rate == pytest.approx(0.5, abs=3 * res.rate_se + 0.02)


def test_sphere_height_decays_at_unit_rate():
    S = Sphere(2, 1.0)
    res = l2_decay_check(sphere_height_family(S).f, S, [0.25, 0.5, 1.0], n_samples=400, seed=2, node_stride=64,
                         steps_per_unit=100)
    assert res.rate == pytest.approx(1.0, rel=0.1)
    assert np.all(res.holds)


def test_l2_decay_needs_compact_manifold():
    with pytest.raises(NonCompact):
        l2_decay_check(PolynomialField(0.0, [1.0, 0, 0, 0]), Hyperbolic3(-1.0), [1.0])


# -- heat kernels ---------------------------------------------------------------------------

def test_euclidean_kernel_at_the_diagonal():
    assert float(heat_kernel(Euclidean(1), 1.0, [0.3], [0.3])) == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert float(heat_kernel(Euclidean(3), 2.0, np.zeros(3), np.zeros(3))) == pytest.approx((4 * math.pi) ** -1.5)


@pytest.mark.parametrize("t", [0.01, 0.5, 3.0, 40.0])
def test_circle_kernel_is_normalized(t):
    C = Circle(TWO_PI)
    z = np.arange(4096) * TWO_PI / 4096
    assert np.mean(heat_kernel(C, t, z[:, None], np.zeros((4096, 1)))) * TWO_PI == pytest.approx(1.0, abs=1e-10)


def test_circle_kernel_converges_to_uniform():
    C = Circle(TWO_PI)
    assert float(heat_kernel(C, 200.0, [1.0], [4.0])) == pytest.approx(1 / TWO_PI, abs=1e-12)


def test_hyperbolic_kernel_on_the_diagonal():
    H = Hyperbolic3(-1.0)
    y = H.base_point()
    x = H.exp(y, 1e-7 * H.frame(y)[:, 0])
    for p in (x, y):
        assert float(heat_kernel(H, 1.5, p, y)) == pytest.approx((3 * math.pi) ** -1.5 * math.exp(-0.75), rel=1e-10)


@pytest.mark.parametrize("M", [Euclidean(2), Circle(TWO_PI), Hyperbolic3(-0.5)])
def test_kernels_are_symmetric(M):
    rng = np.random.default_rng(0)
    x, y = M.random_point(rng, size=8), M.random_point(rng, size=8)
    assert np.max(np.abs(heat_kernel(M, 0.7, x, y) - heat_kernel(M, 0.7, y, x))) <= 1e-12


def test_circle_chapman_kolmogorov():
    C = Circle(TWO_PI)
    z = (np.arange(2048) * TWO_PI / 2048)[:, None]
    x, y = np.array([0.4]), np.array([2.9])
    s, t = 0.3, 0.8
    lhs = np.mean(heat_kernel(C, s, x, z) * heat_kernel(C, t, z, y)) * TWO_PI
    assert lhs == pytest.approx(float(heat_kernel(C, s + t, x, y)), abs=1e-8)


def test_kernel_needs_supported_manifold_and_positive_time():
    with pytest.raises(Unsupported):
        heat_kernel(Sphere(2, 1.0), 1.0, [0, 0, 1.0], [0, 0, 1.0])
    with pytest.raises(ValueError):
        heat_kernel(Euclidean(1), 0.0, [0.0], [0.0])


def test_kernel_derivatives_match_finite_differences():
    C = Circle(TWO_PI)
    z = np.linspace(-3, 3, 13)
    h = 1e-5
    for m in (1, 2, 3):
        fd = (circle_kernel_derivative(C, 0.4, z + h, m - 1) - circle_kernel_derivative(C, 0.4, z - h, m - 1)) / (2 * h)
        assert np.allclose(circle_kernel_derivative(C, 0.4, z, m), fd, atol=1e-6)


@pytest.mark.parametrize("m", [0, 1, 2, 3])
@pytest.mark.parametrize("eps", [0.05, 0.1, 0.5])
def test_decay_constant_matches_parseval(m, eps):
    # || d^m p_eps ||^2 under the normalized measure is (1/L^2) sum_k (k w)^{2m} exp(-k^2 w^2 eps)
    C = Circle(TWO_PI)
    L, w = TWO_PI, 1.0
    k = np.arange(-400, 401)
    norm = math.sqrt(np.sum((k * w) ** (2 * m) * np.exp(-(k * w) ** 2 * eps)) / L ** 2)
    assert kernel_derivative_norm(C, eps, m) == pytest.approx(norm, rel=1e-9)
    gap = 0.5
    assert decay_constant(C, m, eps) == pytest.approx(L * norm * math.exp(gap * eps) / math.sqrt(2 * gap), rel=1e-9)


def test_kernel_norms_only_on_the_circle():
    with pytest.raises(Unsupported):
        kernel_derivative_norm(Sphere(2, 1.0), 0.1, 1)


# -- hyperbolic log heat kernel ------------------------------------------------------------

@pytest.mark.parametrize("t", [0.2, 0.5, 0.9])
def test_hyperbolic_hessian_bound_holds_for_short_times(t):
    res = hyperbolic_hessian_bound_check(-1.0, t, n_pairs=200, seed=1)
    assert res["min_margin"] >= -1e-9 and not res["violations"]
    assert len(res["margins"]) == 200


def test_log_heat_kernel_hessian_at_the_pole():
    # log p_t = const - r^2/(2t) - a^2 r^2 / 6 + O(r^4) with a^2 = -kappa
    kappa, t = -1.0, 0.7
    H = Hyperbolic3(kappa)
    y = H.base_point()
    pot = log_heat_kernel_potential(kappa, t, y)
    E = H.frame(y)
    Hs = frame_derivs(H, y[None], E[None], pot.field, 2)[2][0]
    assert np.allclose(Hs, -(1 / t - kappa / 3) * np.eye(3), atol=1e-8)


def test_flat_limit_of_the_bound():
    t = 0.8
    res = hyperbolic_hessian_bound_check(-1e-6, t, n_pairs=20, seed=2, radius=1.0)
    assert res["bound"] == pytest.approx(2 / t, rel=1e-5)
    assert np.allclose(res["margins"], 0.0, atol=1e-4)
