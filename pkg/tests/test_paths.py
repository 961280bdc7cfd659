import math

import numpy as np
import pytest
from scipy.integrate import quad

from riemstein.errors import StepTooLarge
from riemstein.fields import gaussian_potential, height_potential, zero_potential
from riemstein.manifolds import Euclidean, Sphere
from riemstein.paths import (
    PathEngine,
    brownian_increments,
    cameron_martin,
    default_steps,
    endpoint_consumer,
    read_path_dump,
    run_paths,
    simulate_path,
    transport_W,
    transport_W_doubleprime,
    transport_W_prime,
    write_path_dump,
)


def _within(sample, target, k=3.0):
    sample = np.asarray(sample, float)
    se = sample.std(ddof=1) / math.sqrt(len(sample))
    return abs(sample.mean() - target) <= k * se + 1e-12


# -- simulation ---------------------------------------------------------------------

def test_brownian_motion_moments():
    M = Euclidean(2)
    p = simulate_path(np.array([1.0, -1.0]), zero_potential(M), 2.0, 20, seed=1, manifold=M, n_paths=4000)
    end = p.points[:, -1]
    assert _within(end[:, 0], 1.0) and _within(end[:, 1], -1.0)
    assert np.var(end[:, 0]) == pytest.approx(2.0, rel=0.08)


def test_ou_mean_decays():
    M = Euclidean(1)
    pot = gaussian_potential([[1.0]], [0.0])
    p = simulate_path(np.array([2.0]), pot, 1.0, 200, seed=2, manifold=M, n_paths=4000)
    assert _within(p.points[:, -1, 0], 2.0 * math.exp(-1.0))


def test_sphere_first_harmonic_decays():
    M = Sphere(2, 1.0)
    x0 = M.base_point()
    p = simulate_path(x0, zero_potential(M), 1.0, 200, seed=3, manifold=M, n_paths=4000)
    assert _within(p.points[:, -1] @ x0, math.exp(-1.0))


def test_paths_stay_on_sphere_with_orthonormal_frames():
    M = Sphere(3, 0.5)
    p = simulate_path(M.base_point(), zero_potential(M), 1.0, 100, seed=4, manifold=M, n_paths=50)
    assert np.max(np.abs(M.constraint_residual(p.points.reshape(-1, 4)))) <= 1e-10
    E = p.frames.reshape(-1, 4, 3)
    G = np.einsum("pai,paj->pij", E, E)
    assert np.max(np.abs(G - np.eye(3))) <= 1e-9
    assert np.max(np.abs(np.einsum("pa,pai->pi", p.points.reshape(-1, 4), E))) <= 1e-9


def test_simulation_is_reproducible():
    M = Sphere(2, 1.0)
    a = simulate_path(M.base_point(), zero_potential(M), 0.5, 50, seed=9, manifold=M, n_paths=8)
    b = simulate_path(M.base_point(), zero_potential(M), 0.5, 50, seed=9, manifold=M, n_paths=8)
    c = simulate_path(M.base_point(), zero_potential(M), 0.5, 50, seed=10, manifold=M, n_paths=8)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)


def test_path_results_do_not_depend_on_chunks_or_workers():
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    cons = endpoint_consumer(lambda st: np.einsum("pau->pu", st.W) + st.x[:, :1])
    kw = dict(M=M, pot=pot, x0=M.base_point(), t=0.5, steps=40, n_paths=100, seed=5, order=1, make_consumer=cons)
    ref = run_paths(chunk=1024, workers=1, **kw)
    assert np.array_equal(ref, run_paths(chunk=7, workers=1, **kw))
    assert np.array_equal(ref, run_paths(chunk=7, workers=4, **kw))


def test_path_streams_are_per_path():
    a = brownian_increments(1, np.arange(6), 10, 2, 0.1)
    b = brownian_increments(1, np.arange(3, 6), 10, 2, 0.1)
    assert np.array_equal(a[3:], b)


def test_antithetic_pairs_are_negated():
    a = brownian_increments(1, np.arange(4), 5, 2, 0.1, antithetic=True)
    assert np.array_equal(a[0], -a[1]) and np.array_equal(a[2], -a[3])


def test_oversized_steps_rejected():
    M = Sphere(2, 1.0)
    with pytest.raises(StepTooLarge):
        simulate_path(M.base_point(), zero_potential(M), 20.0, 1, seed=0, manifold=M, n_paths=100)


def test_engine_rejects_bad_arguments():
    M = Euclidean(1)
    with pytest.raises(ValueError):
        PathEngine(M, zero_potential(M), 1.0, 0)
    with pytest.raises(ValueError):
        PathEngine(M, zero_potential(M), 1.0, 2, grid=[0.0, 0.7, 0.5])


def test_default_steps_is_even_and_bounded_below():
    assert default_steps(0.001) == 20
    assert default_steps(1.0) == 1000
    assert default_steps(0.0333, steps_per_unit=100) % 2 == 0


def test_dump_roundtrip(tmp_path):
    M = Sphere(2, 1.0)
    p = simulate_path(M.base_point(), zero_potential(M), 0.2, 10, seed=1, manifold=M, n_paths=3)
    f = tmp_path / "paths.bin"
    write_path_dump(p, f)
    assert f.stat().st_size == 32 + 3 * 11 * 3 * 8
    assert np.array_equal(read_path_dump(f), p.points)


def test_dump_rejects_foreign_files(tmp_path):
    f = tmp_path / "junk.bin"
    f.write_bytes(b"\0" * 64)
    with pytest.raises(ValueError):
        read_path_dump(f)


# -- damped transports --------------------------------------------------------------------

def test_W_is_matrix_exponential_for_gaussian_potential():
    A = np.diag([0.5, 2.0])
    M = Euclidean(2)
    pot = gaussian_potential(A, [0.0, 0.0])
    p = simulate_path(np.zeros(2), pot, 1.0, 50, seed=1, manifold=M, n_paths=4)
    W = transport_W(p, pot).W
    s = p.grid
    want = np.einsum("s,ab->sab", np.ones_like(s), np.eye(2)) * np.exp(-np.outer(s, np.diag(A)))[:, None, :]
    assert np.allclose(W, want[None], atol=1e-12)


@pytest.mark.parametrize("n, kappa", [(2, 1.0), (3, 0.5)])
def test_W_on_sphere_decays_at_half_ricci(n, kappa):
    M = Sphere(n, kappa)
    pot = zero_potential(M)
    p = simulate_path(M.base_point(), pot, 1.0, 40, seed=2, manifold=M, n_paths=3)
    W = transport_W(p, pot).W
    rate = 0.5 * (n - 1) * kappa
    assert np.allclose(W[:, -1], math.exp(-rate) * np.eye(n), atol=1e-12)


def test_W_obeys_curvature_bound():
    # Ric - 2 Hess psi >= 2K gives |W_s| <= exp(-K s)
    M = Sphere(2, 1.0)
    pot = height_potential(M, beta=0.25)
    p = simulate_path(M.base_point(), pot, 2.0, 200, seed=3, manifold=M, n_paths=64)
    W = transport_W(p, pot).W
    norms = np.linalg.norm(W, ord=2, axis=(-2, -1))
    bound = np.exp(-pot.K * p.grid) + 10 * p.h
    assert np.all(norms <= bound[None])


def test_higher_transports_vanish_for_gaussian_potential():
    M = Euclidean(2)
    pot = gaussian_potential(np.diag([1.0, 0.3]), [0.2, 0.0])
    p = simulate_path(np.zeros(2), pot, 0.5, 20, seed=4, manifold=M, n_paths=5)
    ts = transport_W_doubleprime(p, pot)
    assert np.all(ts.Wp == 0) and np.all(ts.Wpp == 0)


def test_W_prime_starts_at_zero_and_has_mean_zero_on_sphere():
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    p = simulate_path(M.base_point(), pot, 1.0, 100, seed=5, manifold=M, n_paths=2000)
    Wp = transport_W_prime(p, pot).Wp
    assert np.all(Wp[:, 0] == 0)
    for idx in [(0, 0, 0), (1, 0, 0), (0, 0, 1), (1, 1, 0)]:
        assert _within(Wp[(slice(None), -1) + idx], 0.0)


def test_W_prime_second_moment_matches_ito_isometry():
    # |R(., W_s e1) W_s e1|_HS^2 = exp(-2 s) on the unit 2-sphere; W' is damped by exp(-(t-s)/2)
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    t = 1.0
    p = simulate_path(M.base_point(), pot, t, 200, seed=6, manifold=M, n_paths=3000)
    Wp = transport_W_prime(p, pot).Wp[:, -1]
    target = quad(lambda s: math.exp(-(t - s)) * math.exp(-2 * s), 0, t)[0]
    assert target == pytest.approx(math.exp(-t) * (1 - math.exp(-t)))
    for u, v in [(0, 0), (0, 1)]:
        assert _within(np.sum(Wp[:, :, u, v] ** 2, axis=1), target)


def test_transports_are_linear_in_their_arguments():
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    p = simulate_path(M.base_point(), pot, 0.3, 20, seed=7, manifold=M, n_paths=4)
    ts = transport_W_doubleprime(p, pot)
    # feeding u = 0 into any slot gives zero
    z = np.zeros(2)
    assert np.all(np.einsum("psauvw,u->psavw", ts.Wpp, z) == 0)
    assert np.all(np.einsum("psauv,v->psau", ts.Wp, z) == 0)


def test_replayed_transport_matches_simulated_transport():
    M = Sphere(2, 1.0)
    pot = height_potential(M, 0.3)
    p = simulate_path(M.base_point(), pot, 0.5, 30, seed=8, manifold=M, n_paths=6)
    W_replay = transport_W(p, pot).W[:, -1]
    cons = endpoint_consumer(lambda st: st.W)
    W_live = run_paths(M, pot, M.base_point(), 0.5, 30, 6, 8, 1, cons)
    assert np.allclose(W_replay, W_live, atol=1e-12)


# -- Cameron-Martin weights --------------------------------------------------------------

def test_second_derivative_weight_is_linear_ramp():
    cm = cameron_martin(2.0)
    assert np.allclose(cm.k([0.0, 0.25, 1.0, 1.5]), [1.0, 0.75, 0.0, 0.0])
    assert np.allclose(cm.k_dot([0.5, 1.5]), [-1.0, 0.0])
    assert np.allclose(cm.l([0.0, 1.9]), 1.0)


def test_weight_support_is_at_most_unit_time():
    cm = cameron_martin(4.0)
    s = np.linspace(0, 4, 81)
    assert np.all(cm.k(s)[s >= 1.0] == 0)


def test_short_time_weight_ends_at_t():
    cm = cameron_martin(0.4)
    assert cm.k(0.0) == 1.0 and cm.k(0.4) == 0.0
    assert cm.energy()[0] == pytest.approx(2.5)


def test_third_derivative_profile():
    cm = cameron_martin(1.0, "third_deriv")
    assert np.allclose(cm.k([0.0, 0.25, 0.5]), [1.0, 0.5, 0.0])
    assert np.allclose(cm.l([0.25, 0.75, 1.0]), [1.0, 0.5, 0.0])
    assert np.allclose(cm.l_dot([0.25, 0.75]), [0.0, -2.0])
    assert cm.energy() == pytest.approx((2.0, 2.0))


def test_cameron_martin_rejects_bad_input():
    with pytest.raises(ValueError):
        cameron_martin(0.0)
    with pytest.raises(ValueError):
        cameron_martin(1.0, "fourth")
