import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from riemstein.errors import CutLocus, SingularCoefficient
from riemstein.manifolds import (
    ChartDiffusion,
    Circle,
    Euclidean,
    Hyperbolic3,
    ManifoldPoint,
    Sphere,
    TangentVector,
    cut_locus_indicator,
    distance,
    exp_map,
    log_map,
    make_manifold,
    metric_at,
    parallel_transport,
)
from riemstein.fields import sigma_preset

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)
MODELS = {
    "sphere": (lambda: Sphere(2, 1.0), 0.9 * math.pi),
    "sphere3": (lambda: Sphere(3, 0.5), 0.9 * math.pi / math.sqrt(0.5)),
    "hyperbolic": (lambda: Hyperbolic3(-1.0), 2.0),
    "circle": (lambda: Circle(2 * math.pi), 0.9 * math.pi),
    "euclidean": (lambda: Euclidean(3), 5.0),
}


def _pairs(M, rmax, seed, n=64):
    rng = np.random.default_rng(seed)
    x = M.random_point(rng, size=n)
    d = M.random_tangent(rng, x)
    d = d / M.norm(x, d)[:, None]
    return rng, x, d * rng.uniform(0, rmax, size=(n, 1))


# -- metric ---------------------------------------------------------------------------

def test_euclidean_metric_is_identity():
    M = Euclidean(2)
    assert np.array_equal(metric_at(ManifoldPoint(M, [0.4, -2.0])), np.eye(2))


def test_chart_metric_is_inverse_sigma_squared():
    M = ChartDiffusion(2, sigma_preset("scaled", 2, scale=2.0))
    assert np.allclose(metric_at(ManifoldPoint(M, [0.3, 0.1])), 0.25 * np.eye(2), atol=1e-15)


def test_sphere_metric_matches_embedding_pullback():
    # chart (a, b) -> (a, b, sqrt(1 - a^2 - b^2)) around the north pole
    M = Sphere(2, 1.0)
    h = 1e-6

    def chart(a):
        return np.array([a[0], a[1], math.sqrt(1 - a[0] ** 2 - a[1] ** 2)])

    J = np.column_stack([(chart(h * e) - chart(-h * e)) / (2 * h) for e in np.eye(2)])
    oracle = np.linalg.eigvalsh(J.T @ J)
    got = np.linalg.eigvalsh(metric_at(ManifoldPoint(M, M.base_point())))
    assert np.allclose(got, oracle, atol=1e-8)


def test_singular_sigma_raises():
    M = ChartDiffusion(2, lambda x: np.zeros(np.shape(x)[:-1] + (2, 2)))
    with pytest.raises(SingularCoefficient):
        M.metric_at(np.zeros(2))


# -- exp / log --------------------------------------------------------------------------

@pytest.mark.parametrize("name", list(MODELS))
def test_exp_of_zero_is_identity(name):
    M = MODELS[name][0]()
    x = M.random_point(np.random.default_rng(0), size=4)
    assert np.allclose(M.exp(x, np.zeros_like(x)), x, atol=1e-15)


def test_euclidean_exp_and_log_are_vector_addition():
    M = Euclidean(3)
    p, v = np.array([1.0, 2.0, 3.0]), np.array([-0.5, 0.25, 2.0])
    assert np.array_equal(M.exp(p, v), p + v)
    assert np.array_equal(M.log(p, p + v), v)


def test_sphere_quarter_turn_reaches_equator():
    M = Sphere(2, 1.0)
    p = ManifoldPoint(M, M.base_point())
    v = TangentVector(p, [math.pi / 2, 0.0, 0.0])
    q = exp_map(p, v)
    assert abs(q.coords[2]) < 1e-15
    assert distance(p, q) == pytest.approx(math.pi / 2, abs=1e-12)

    # oracle: integrate the embedded geodesic equation x'' = -|x'|^2 x
    sol = solve_ivp(lambda s, y: np.concatenate([y[3:], -np.dot(y[3:], y[3:]) * y[:3]]), (0, 1),
                    np.concatenate([p.coords, v.components]), rtol=1e-12, atol=1e-12)
    assert np.allclose(sol.y[:3, -1], q.coords, atol=1e-9)


@pytest.mark.parametrize("name", list(MODELS))
def test_log_of_same_point_is_zero(name):
    M = MODELS[name][0]()
    x = M.random_point(np.random.default_rng(1), size=3)
    assert np.allclose(M.log(x, x), 0.0, atol=1e-12)


def test_log_at_antipodes_raises():
    M = Sphere(2, 1.0)
    p = ManifoldPoint(M, M.base_point())
    with pytest.raises(CutLocus):
        log_map(p, ManifoldPoint(M, -p.coords))


@pytest.mark.parametrize("name", ["sphere", "sphere3", "hyperbolic", "circle"])
@given(seed=seeds)
def test_roundtrip_below_injectivity_radius(name, seed):
    make, rmax = MODELS[name]
    M = make()
    _, x, v = _pairs(M, rmax, seed)
    back = M.log(x, M.exp(x, v))
    assert np.max(M.norm(x, back - v)) <= 1e-9
    assert np.max(np.abs(M.constraint_residual(M.exp(x, v)))) <= 1e-12


@pytest.mark.parametrize("name", list(MODELS))
@given(seed=seeds)
def test_distance_is_log_norm_and_symmetric(name, seed):
    make, rmax = MODELS[name]
    M = make()
    _, x, v = _pairs(M, rmax, seed, n=16)
    y = M.exp(x, v)
    d = M.dist(x, y)
    assert np.allclose(d, M.norm(x, M.log(x, y)), atol=1e-9)
    assert np.allclose(d, M.dist(y, x), atol=1e-9)


def test_chart_exp_log_roundtrip():
    M = ChartDiffusion(2, sigma_preset("poincare", 2))
    x = np.array([[0.1, 0.2], [-0.3, 0.1], [0.0, -0.4]])
    v = 0.3 * M.random_tangent(np.random.default_rng(3), x)
    assert np.max(np.abs(M.log(x, M.exp(x, v)) - v)) < 1e-8


def test_chart_identity_geodesics_are_straight():
    M = ChartDiffusion(2, sigma_preset("identity", 2))
    x, v = np.array([0.1, 0.2]), np.array([0.5, -0.3])
    assert np.allclose(M.exp(x, v), x + v, atol=1e-12)


# -- parallel transport ---------------------------------------------------------------------

def test_transport_to_same_point_is_identity(sphere):
    p = ManifoldPoint(sphere, sphere.base_point())
    v = TangentVector(p, [0.3, -1.0, 0.0])
    assert np.allclose(parallel_transport(p, p, v).components, v.components)


def test_euclidean_transport_keeps_components():
    M = Euclidean(3)
    p, q = ManifoldPoint(M, [0, 0, 0]), ManifoldPoint(M, [1, 2, 3])
    v = TangentVector(p, [0.5, 0.1, -2.0])
    assert np.array_equal(parallel_transport(p, q, v).components, v.components)


def test_geodesic_triangle_holonomy_is_quarter_turn():
    # octant triangle: area pi/2, so the holonomy angle is kappa * area
    M = Sphere(2, 1.0)
    corners = [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
    w = np.array([1.0, 0.0, 0.0])
    v = w.copy()
    for a, b in zip(corners, corners[1:] + corners[:1]):
        v = M.transport(a, b, v)
    angle = math.atan2(np.cross(w, v) @ corners[0], w @ v)
    assert abs(abs(angle) - math.pi / 2) < 1e-12
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("name", ["sphere", "sphere3", "hyperbolic", "circle", "euclidean"])
@given(seed=seeds)
def test_transport_preserves_inner_products(name, seed):
    make, rmax = MODELS[name]
    M = make()
    rng, x, v = _pairs(M, rmax, seed, n=32)
    y = M.exp(x, v)
    a, b = M.random_tangent(rng, x), M.random_tangent(rng, x)
    Ta, Tb = M.transport_along(x, v, a), M.transport_along(x, v, b)
    assert np.max(np.abs(M.inner(y, Ta, Tb) - M.inner(x, a, b))) <= 1e-9
    # transported vectors are tangent at the end point
    assert np.allclose(M.to_tangent(y, Ta), Ta, atol=1e-9)


# -- cut locus ---------------------------------------------------------------------------------

def test_cut_locus_indicator_examples():
    S = Sphere(2, 1.0)
    p = ManifoldPoint(S, S.base_point())
    assert cut_locus_indicator(p, ManifoldPoint(S, -p.coords))
    assert not cut_locus_indicator(p, ManifoldPoint(S, [1.0, 0.0, 0.0]))
    E = Euclidean(2)
    assert not cut_locus_indicator(ManifoldPoint(E, [0, 0]), ManifoldPoint(E, [1e6, -3]))
    C = Circle(2 * math.pi)
    assert cut_locus_indicator(ManifoldPoint(C, [0.5]), ManifoldPoint(C, [0.5 + math.pi]))
    assert not cut_locus_indicator(ManifoldPoint(C, [0.5]), ManifoldPoint(C, [0.5 + 3.0]))
    H = Hyperbolic3(-1.0)
    rng = np.random.default_rng(0)
    a, b = H.random_point(rng, size=2)
    assert not cut_locus_indicator(ManifoldPoint(H, a), ManifoldPoint(H, b))


def test_chart_cut_locus_warns_and_returns_false():
    M = ChartDiffusion(2, sigma_preset("identity", 2))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert not cut_locus_indicator(ManifoldPoint(M, [0, 0]), ManifoldPoint(M, [1, 0]))
    assert caught


def test_circle_distance_defined_at_antipode():
    C = Circle(2 * math.pi)
    assert C.dist(np.array([0.0]), np.array([math.pi])) == pytest.approx(math.pi)


# -- construction --------------------------------------------------------------------------------

@pytest.mark.parametrize(
    "spec, kind, dim",
    [
        ({"kind": "euclidean", "n": 3}, "euclidean", 3),
        ({"kind": "sphere", "n": 2, "kappa": 2.0}, "sphere", 2),
        ({"kind": "hyperbolic3", "kappa": -0.5}, "hyperbolic3", 3),
        ({"kind": "circle", "circumference": 3.0}, "circle", 1),
        ({"kind": "chart_diffusion", "n": 2, "sigma": "shear"}, "chart_diffusion", 2),
    ],
)
def test_make_manifold(spec, kind, dim):
    M = make_manifold(spec)
    assert M.kind == kind and M.dim == dim


def test_invalid_curvature_signs_rejected():
    with pytest.raises(ValueError):
        Sphere(2, -1.0)
    with pytest.raises(ValueError):
        Hyperbolic3(1.0)
