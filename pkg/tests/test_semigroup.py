import math

import numpy as np
import pytest

from riemstein.errors import NotContractive
from riemstein.fields import (
    PolynomialField,
    ScalarField,
    constant_field,
    gaussian_potential,
    linear_combination,
    zero_potential,
)
from riemstein.manifolds import Circle, Euclidean, Hyperbolic3, ManifoldPoint, Sphere
from riemstein.semigroup import (
    DecayFit,
    McEstimate,
    OUPolynomialFamily,
    agree,
    bismut_gradient,
    bismut_hessian,
    bismut_third,
    circle_fourier_family,
    contraction_rate,
    decay_profile,
    estimate_Ptf,
    gradient_contraction_check,
    martingale_check,
    solve_stein,
    sphere_height_family,
    time_grid,
)

FAST = dict(steps_per_unit=100, min_steps=20)


def _ou(A=(1.0, 2.0)):
    A = np.diag(A)
    return Euclidean(len(A)), gaussian_potential(A, np.zeros(len(A)))


# -- McEstimate ---------------------------------------------------------------------

def test_estimate_needs_two_samples():
    with pytest.raises(ValueError):
        McEstimate.from_samples([1.0], 1.0)


def test_estimate_from_samples():
    e = McEstimate.from_samples([1.0, 2.0, 3.0, 4.0], 0.5, seed=3)
    assert float(e) == 2.5
    assert float(e.std_error) == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert e.within(2.5 + 2 * float(e.std_error)) and not e.within(2.5 + 4 * float(e.std_error))
    assert e.to_dict()["n_samples"] == 4


def test_exact_estimates_agree_only_when_equal():
    assert agree(McEstimate.exact(1.0), McEstimate.exact(1.0))
    assert not agree(McEstimate.exact(1.0), McEstimate.exact(1.1))


def test_time_grid_contains_breaks():
    g = time_grid(2.0, (0.5, 1.0), steps_per_unit=10, min_steps=4)
    assert g[0] == 0.0 and g[-1] == 2.0
    assert 0.5 in g and 1.0 in g
    assert np.all(np.diff(g) > 0)


# -- P_t f ------------------------------------------------------------------------------

def test_Ptf_at_time_zero_is_f():
    M = Sphere(2, 1.0)
    f = PolynomialField(0.5, [1.0, 2.0, 3.0])
    e = estimate_Ptf(ManifoldPoint(M, M.base_point()), f, zero_potential(M), 0.0, 10, 0)
    assert float(e) == pytest.approx(3.5) and float(e.std_error) == 0.0


def test_Ptf_of_squared_norm_grows_linearly():
    M = Euclidean(2)
    f = PolynomialField(0.0, Q=2 * np.eye(2))
    x0 = np.array([1.0, -0.5])
    e = estimate_Ptf(x0, f, zero_potential(M), 1.5, 4000, 1, manifold=M, **FAST)
    assert e.within(x0 @ x0 + 2 * 1.5)


def test_Ptf_mixes_on_the_circle():
    M = Circle(2 * math.pi)
    fam = circle_fourier_family(M)
    e = estimate_Ptf(np.array([1.0]), fam.f, zero_potential(M), 50.0, 2000, 2, manifold=M, steps_per_unit=10)
    assert e.within(math.exp(-25) * math.sin(1.0))


def test_Ptf_is_linear_under_common_random_numbers():
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    rng = np.random.default_rng(0)
    f, g = PolynomialField.random(rng, 3), PolynomialField.random(rng, 3)
    x = ManifoldPoint(M, M.base_point())
    ef = estimate_Ptf(x, f, pot, 0.5, 200, 7, **FAST)
    eg = estimate_Ptf(x, g, pot, 0.5, 200, 7, **FAST)
    efg = estimate_Ptf(x, linear_combination([(2.0, f), (-3.0, g)]), pot, 0.5, 200, 7, **FAST)
    assert float(efg) == pytest.approx(2 * float(ef) - 3 * float(eg), abs=1e-12)


# -- derivative estimators -------------------------------------------------------------------

def test_derivatives_of_constants_are_exactly_zero():
    M = Sphere(2, 1.0)
    x = ManifoldPoint(M, M.base_point())
    c = constant_field(3, 4.0)
    pot = zero_potential(M)
    for est in (bismut_gradient(x, c, pot, 1.0), bismut_hessian(x, c, pot, 1.0), bismut_third(x, c, pot, 1.0)):
        assert np.all(est.value == 0) and np.all(est.std_error == 0)


def test_gradient_of_linear_function_under_ou():
    M, pot = _ou()
    f = PolynomialField(0.0, [1.0, 1.0])
    e = bismut_gradient(np.array([0.3, 0.2]), f, pot, 0.7, n_samples=50, seed=1, manifold=M, **FAST)
    assert np.allclose(e.value, [math.exp(-0.7), math.exp(-1.4)], atol=1e-12)


def test_gradient_on_sphere_matches_closed_form():
    M = Sphere(2, 1.0)
    fam = sphere_height_family(M)
    x = M.project_point(np.array([0.3, -0.2, 0.8]))
    E = M.frame(x)
    e = bismut_gradient(x, fam.f, zero_potential(M), 0.5, n_samples=2000, seed=2, manifold=M, **FAST)
    want = fam.derivs(x[None], E[None], 0.5, 1)[1][0]
    assert e.within(want, extra_se=1e-3)


def test_hessian_of_linear_function_is_zero_in_mean():
    M = Euclidean(2)
    f = PolynomialField(0.0, [1.0, -2.0])
    e = bismut_hessian(np.zeros(2), f, zero_potential(M), 1.0, n_samples=4000, seed=3, manifold=M, **FAST)
    assert e.within(np.zeros((2, 2)))


def test_hessian_of_square_under_ou():
    M, pot = _ou((1.0, 1.0))
    f = PolynomialField(0.0, Q=np.diag([2.0, 0.0]))
    t = 0.6
    e = bismut_hessian(np.array([0.2, -0.1]), f, pot, t, [1.0, 0.0], [1.0, 0.0], n_samples=4000, seed=4,
                       manifold=M, **FAST)
    assert e.within(2 * math.exp(-2 * t))


def test_hessian_matrix_is_symmetric_within_error():
    M = Sphere(2, 1.0)
    fam = sphere_height_family(M)
    x = M.project_point(np.array([0.3, -0.2, 0.8]))
    e = bismut_hessian(x, fam.f, zero_potential(M), 0.5, n_samples=4000, seed=5, manifold=M, **FAST)
    H, se = e.value, e.std_error
    assert abs(H[0, 1] - H[1, 0]) <= 3 * math.hypot(se[0, 1], se[1, 0])


@pytest.mark.parametrize("variant", ["c1", "c2"])
def test_third_derivative_of_cube_under_ou(variant):
    M, pot = _ou((1.0, 1.0))
    T = np.zeros((2, 2, 2))
    T[0, 0, 0] = 6.0
    f = PolynomialField(0.0, T=T)
    t = 0.5
    u = [1.0, 0.0]
    e = bismut_third(np.array([0.1, 0.0]), f, pot, t, u, u, u, n_samples=6000, seed=6, variant=variant,
                     manifold=M, **FAST)
    assert e.within(6 * math.exp(-3 * t))


def test_third_derivative_variants_agree_on_sphere():
    M = Sphere(2, 1.0)
    fam = sphere_height_family(M)
    x = M.project_point(np.array([0.3, -0.2, 0.8]))
    u, v, w = [1.0, 0.0], [0.6, 0.8], [0.0, 1.0]
    kw = dict(n_samples=3000, seed=7, manifold=M, **FAST)
    c1 = bismut_third(x, fam.f, zero_potential(M), 0.5, u, v, w, variant="c1", **kw)
    c2 = bismut_third(x, fam.f, zero_potential(M), 0.5, u, v, w, variant="c2", **kw)
    assert agree(c1, c2)


def test_third_rejects_unknown_variant():
    M = Euclidean(1)
    with pytest.raises(ValueError):
        bismut_third(np.zeros(1), PolynomialField(0.0, [1.0]), zero_potential(M), 1.0, variant="c3", manifold=M)


def test_estimates_are_reproducible():
    M = Sphere(2, 1.0)
    fam = sphere_height_family(M)
    kw = dict(n_samples=200, seed=11, manifold=M, **FAST)
    a = bismut_hessian(M.base_point(), fam.f, zero_potential(M), 0.3, **kw)
    b = bismut_hessian(M.base_point(), fam.f, zero_potential(M), 0.3, workers=3, **kw)
    assert np.array_equal(a.value, b.value)


# -- martingales, contraction, decay --------------------------------------------------------

def test_martingales_are_constant_under_ou():
    M, pot = _ou((1.0, 0.5))
    rng = np.random.default_rng(1)
    fam = OUPolynomialFamily(pot.params["A"], pot.params["y"], PolynomialField.random(rng, 2, 3, 0.5))
    res = martingale_check(fam, pot, np.array([0.2, 0.1]), 1.0, 2000, 3, manifold=M, h=0.01)
    for name, d in res.items():
        for est in d["estimates"].values():
            assert est.within(d["initial"]), name


def test_linear_martingale_on_flat_space_is_exact():
    M = Euclidean(2)
    pot = zero_potential(M)
    fam = OUPolynomialFamily(np.zeros((2, 2)), np.zeros(2), PolynomialField(0.0, [1.0, -1.0]))
    res = martingale_check(fam, pot, np.zeros(2), 1.0, 50, 4, order=1, manifold=M, h=0.05)
    for est in res["N"]["estimates"].values():
        assert np.all(np.abs(est.value - res["N"]["initial"]) < 1e-12)


def test_gradient_contraction_under_gaussian_potential():
    M, pot = _ou((1.0, 2.0))
    f = PolynomialField(0.0, [1.0, 0.5], np.array([[0.5, 0.1], [0.1, 0.2]]))
    rows = gradient_contraction_check(M, pot, f, [(np.zeros(2), 0.5), (np.array([1.0, -1.0]), 1.0)], 1000, 5, **FAST)
    assert all(r["holds"] for r in rows)


def test_decay_fit_rejects_bad_grid():
    with pytest.raises(ValueError):
        DecayFit([1.0, 0.5], [1.0, 1.0], 0.0, 0.0)
    with pytest.raises(ValueError):
        DecayFit([0.0, 1.0], [1.0, 1.0], 0.0, 0.0)


def test_first_order_decay_rate_on_sphere():
    M = Sphere(2, 1.0)
    fam = sphere_height_family(M)
    fit = decay_profile(fam.f, zero_potential(M), M.base_point(), 1, [0.5, 1.0, 2.0, 3.0], 100, 8, manifold=M,
                        n_configs=8, **FAST)
    # |dP_t f| decays like exp(-t/2) on the unit 2-sphere
    assert fit.fitted_rate == pytest.approx(0.5, abs=0.1)


# -- Stein equation --------------------------------------------------------------------------

def test_contraction_rate_choices():
    assert contraction_rate(Circle(2 * math.pi), zero_potential(Circle(2 * math.pi))) == pytest.approx(0.5)
    # K = (n - 1) kappa / 2 is positive on the sphere, so it is used directly
    assert contraction_rate(Sphere(3, 1.0), zero_potential(Sphere(3, 1.0))) == pytest.approx(1.0)
    with pytest.raises(NotContractive):
        contraction_rate(Hyperbolic3(-1.0), zero_potential(Hyperbolic3(-1.0)))
    with pytest.raises(NotContractive):
        contraction_rate(Euclidean(2), zero_potential(Euclidean(2)))


def test_stein_solution_of_constant_is_zero():
    M = Euclidean(1)
    out = solve_stein(np.zeros(1), constant_field(1, 2.0), zero_potential(M), manifold=M)
    assert out["f"] == 0.0 and np.all(out["df"] == 0)


def test_stein_solution_under_ou():
    # h = x1 gives P_t h = exp(-t) x1 and f = -x1
    M, pot = _ou((1.0, 1.0))
    x = np.array([0.7, -0.3])
    out = solve_stein(x, PolynomialField(0.0, [1.0, 0.0]), pot, manifold=M, n_samples=2000, seed=1, T_max=15.0,
                      h_max=0.02)
    tol = 3 * out["f_se"] + out["f_quad_error"] + out["tail_bound"] + 2e-3
    assert abs(out["f"] + 0.7) <= tol
    tol = 3 * out["df_se"] + out["df_quad_error"] + out["tail_bound"] + 1e-3
    assert np.all(np.abs(out["df"] - [-1.0, 0.0]) <= tol)


def test_stein_solution_on_circle():
    M = Circle(2 * math.pi)
    fam = circle_fourier_family(M)
    x = np.array([1.2])
    out = solve_stein(x, fam.f, zero_potential(M), manifold=M, n_samples=2000, seed=2, T_max=20.0, h_max=0.02)
    tol = 3 * out["f_se"] + out["f_quad_error"] + out["tail_bound"] + 2e-3
    assert abs(out["f"] + 2 * math.sin(1.2)) <= tol


def test_stein_refuses_non_contractive_setting():
    H = Hyperbolic3(-1.0)
    with pytest.raises(NotContractive):
        solve_stein(H.base_point(), PolynomialField(0.0, [1.0, 0, 0, 0]), zero_potential(H), manifold=H)
