"""Compact-manifold tools: spectral gap, harmonic projection, L2 decay of the
semigroup, heat kernels and the kernel-derivative decay constants C_m(eps).

Quadrature resolutions are fixed: 2048 trapezoid nodes on the circle and a
64 x 128 (Gauss-Legendre in cos(theta) x uniform in phi) grid on the 2-sphere.
Higher-dimensional spheres fall back to seeded Monte Carlo.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NonCompact, Unsupported
from .curvature import bakry_emery_at
from .fields import ScalarField, log_heat_kernel_potential
from .manifolds import Circle, Hyperbolic3, Manifold, ManifoldPoint, Sphere
from .paths import path_rng, run_paths

CIRCLE_NODES = 2048
SPHERE_GRID = (64, 128)
MC_NODES = 200000


@dataclass
class SpectralInfo:
    gap: float
    source: str
    volume: float
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gap > 0:
            raise ValueError("spectral gap must be positive")

    def to_dict(self):
        return {"gap": self.gap, "source": self.source, "volume": self.volume, **self.details}


def _require_compact(M: Manifold):
    if not getattr(M, "compact", False):
        raise NonCompact(f"{M.kind} is not compact")


def _values(f, x):
    if isinstance(f, ScalarField):
        return np.asarray(f.value(x), float)
    return np.asarray(f(x), float)


def _grads(f, x):
    if isinstance(f, ScalarField):
        return np.asarray(f.grad(x), float)
    raise TypeError("gradients need a ScalarField")


# -- quadrature ---------------------------------------------------------------

def quadrature(M: Manifold, seed: int = 0):
    """Nodes and weights of the normalized volume measure, plus a description."""
    _require_compact(M)
    if isinstance(M, Circle):
        nodes = (np.arange(CIRCLE_NODES) * (M.length / CIRCLE_NODES))[:, None]
        return nodes, np.full(CIRCLE_NODES, 1.0 / CIRCLE_NODES), {"rule": "trapezoid", "nodes": CIRCLE_NODES}
    if isinstance(M, Sphere) and M.dim == 2:
        nt, nphi = SPHERE_GRID
        z, wz = np.polynomial.legendre.leggauss(nt)
        phi = np.arange(nphi) * (2 * np.pi / nphi)
        s = np.sqrt(1 - z ** 2)
        pts = np.stack([np.outer(s, np.cos(phi)), np.outer(s, np.sin(phi)), np.repeat(z[:, None], nphi, 1)], -1)
        w = np.repeat((wz / 2)[:, None], nphi, 1) / nphi
        return pts.reshape(-1, 3) * M.radius, w.reshape(-1), {"rule": "gauss-legendre x trapezoid", "grid": list(SPHERE_GRID)}
    if isinstance(M, Sphere):
        rng = path_rng(seed, 2 ** 41)
        pts = M.random_point(rng, size=MC_NODES)
        return pts, np.full(MC_NODES, 1.0 / MC_NODES), {"rule": "monte carlo", "nodes": MC_NODES, "seed": seed}
    raise Unsupported(f"no quadrature for {M.kind}")


def _tangential_grad_sq(M: Manifold, x, DF):
    if isinstance(M, Circle):
        return np.sum(DF ** 2, -1)
    # strip the normal component of the ambient gradient
    return np.sum(DF ** 2, -1) - M.kappa * np.sum(x * DF, -1) ** 2


def harmonic_projection(f, manifold: Manifold, n_samples=None, seed=0) -> float:
    """Hf = average of f under the normalized volume measure.

    Uses the fixed quadrature unless n_samples is given (then seeded Monte Carlo).
    """
    _require_compact(manifold)
    if n_samples is not None:
        rng = path_rng(seed, 2 ** 41)
        pts = manifold.random_point(rng, size=int(n_samples))
        return float(np.mean(_values(f, pts)))
    nodes, w, _ = quadrature(manifold, seed)
    return float(w @ _values(f, nodes))


# -- spectral gap ---------------------------------------------------------------

def spectral_gap(manifold: Manifold, method: str = "closed_form", n_modes: int = 16, seed: int = 0) -> SpectralInfo:
    """First positive eigenvalue of -Laplacian/2 on the circle or sphere."""
    M = manifold
    _require_compact(M)
    vol = float(M.volume)
    if method == "closed_form":
        if isinstance(M, Circle):
            return SpectralInfo(0.5 * (2 * np.pi / M.length) ** 2, "closed_form", vol)
        if isinstance(M, Sphere):
            return SpectralInfo(0.5 * M.dim * M.kappa, "closed_form", vol)
        raise Unsupported(f"no closed-form gap for {M.kind}")
    if method != "rayleigh":
        raise ValueError(f"unknown method {method!r}")
    nodes, w, rule = quadrature(M, seed)
    if isinstance(M, Circle):
        k = np.arange(1, n_modes + 1)
        th = nodes[:, 0] * (2 * np.pi / M.length)
        om = k * (2 * np.pi / M.length)
        B = np.concatenate([np.cos(np.outer(th, k)), np.sin(np.outer(th, k))], 1)
        dB = np.concatenate([-np.sin(np.outer(th, k)) * om, np.cos(np.outer(th, k)) * om], 1)
        stiff = 0.5 * (dB * w[:, None]).T @ dB
    else:
        # polynomials of degree <= 2 in the embedding coordinates
        d = M.ambient_dim
        cols, gcols = [], []
        for i in range(d):
            cols.append(nodes[:, i])
            g = np.zeros_like(nodes)
            g[:, i] = 1.0
            gcols.append(g)
        for i in range(d):
            for j in range(i, d):
                cols.append(nodes[:, i] * nodes[:, j])
                g = np.zeros_like(nodes)
                g[:, i] += nodes[:, j]
                g[:, j] += nodes[:, i]
                gcols.append(g)
        B = np.stack(cols, 1)
        G = np.stack(gcols, 1)
        # tangential projection of the ambient gradients
        nrm = nodes * math.sqrt(M.kappa)
        G = G - np.einsum("pk,pbk->pb", nrm, G)[..., None] * nrm[:, None, :]
        stiff = 0.5 * np.einsum("p,pak,pbk->ab", w, G, G)
    B = B - w @ B
    mass = (B * w[:, None]).T @ B
    # drop directions that vanish on the manifold (e.g. |x|^2 - 1/kappa)
    ev, V = np.linalg.eigh(mass)
    keep = ev > 1e-10 * ev.max()
    P = V[:, keep] / np.sqrt(ev[keep])
    vals = scipy.linalg.eigh(P.T @ stiff @ P, eigvals_only=True)
    return SpectralInfo(float(vals[0]), "rayleigh_estimate", vol, {"basis_size": int(keep.sum()), "quadrature": rule})


# -- Poincare -------------------------------------------------------------------

def poincare_check(manifold: Manifold, functions, gap=None, seed=0):
    """Margins (1/2 gap) ||grad f||^2 - ||f - Hf||^2 for each test function."""
    M = manifold
    lam = spectral_gap(M).gap if gap is None else gap
    nodes, w, _ = quadrature(M, seed)
    out = []
    for f in functions:
        v = _values(f, nodes)
        var = float(w @ (v - w @ v) ** 2)
        g2 = float(w @ _tangential_grad_sq(M, nodes, _grads(f, nodes)))
        out.append({"name": getattr(f, "name", "f"), "variance": var, "dirichlet": g2, "margin": g2 / (2 * lam) - var})
    return out


def poincare_test_suite(manifold: Manifold, n: int = 20, seed: int = 0):
    """Deterministic test functions: random trigonometric polynomials on the
    circle, random cubic polynomials in the embedding coordinates on spheres."""
    from .fields import PolynomialField

    rng = np.random.default_rng(seed)
    out = []
    if isinstance(manifold, Circle):
        om = 2 * np.pi / manifold.length
        for i in range(n):
            K = 1 + i % 5
            a = rng.standard_normal(K)
            b = rng.standard_normal(K)
            k = np.arange(1, K + 1) * om

            def val(x, a=a, b=b, k=k):
                th = np.asarray(x)[..., :1] * k
                return np.sum(a * np.cos(th) + b * np.sin(th), -1)

            def grad(x, a=a, b=b, k=k):
                th = np.asarray(x)[..., :1] * k
                return np.sum(k * (b * np.cos(th) - a * np.sin(th)), -1, keepdims=True)

            out.append(ScalarField(val, grad, name=f"trig{i}"))
        return out
    for i in range(n):
        f = PolynomialField.random(rng, manifold.ambient_dim, degree=1 + i % 3)
        f.name = f"poly{i}"
        out.append(f)
    return out


# -- L2 decay -------------------------------------------------------------------

@dataclass
class L2DecayResult:
    t: np.ndarray
    values: np.ndarray
    std_error: np.ndarray
    rhs: np.ndarray
    holds: np.ndarray
    rate: float
    rate_se: float
    gap: float
    variance: float
    quadrature: dict

    def to_dict(self):
        return {
            "t": self.t.tolist(),
            "values": self.values.tolist(),
            "std_error": self.std_error.tolist(),
            "rhs": self.rhs.tolist(),
            "holds": [bool(h) for h in self.holds],
            "rate": self.rate,
            "rate_se": self.rate_se,
            "gap": self.gap,
            "variance": self.variance,
            "quadrature": self.quadrature,
        }


def _reflection_to(M: Sphere, base, x):
    """Householder reflections (an isometry) taking base to each x."""
    u = base[None, :] - x
    nn = np.sum(u * u, -1, keepdims=True)
    safe = np.where(nn > 1e-24, nn, 1.0)
    return u, safe, nn > 1e-24


def _displacements(M: Manifold, t, n_paths, seed, steps_per_unit, workers=1):
    """Brownian motion (psi = 0) at time t started from a base point."""
    from .fields import zero_potential

    if isinstance(M, Circle):
        rng = path_rng(seed, 2 ** 42)
        return math.sqrt(t) * rng.standard_normal((n_paths, 1))
    base = M.base_point()
    steps = max(20, int(math.ceil(t * steps_per_unit)))

    class _C:
        def __init__(self, P, ids):
            self.out = None

        def step(self, st):
            if st.dB is None:
                self.out = st.x.copy()

        def result(self):
            return self.out

    return run_paths(M, zero_potential(M), base, t, steps, n_paths, seed, 0, _C, workers=workers)


def l2_decay_check(f, manifold: Manifold, t_grid, n_samples=2000, seed=0, n_batches=20, steps_per_unit=200,
                   node_stride=1, k_se=3.0, workers=1) -> L2DecayResult:
    """||(P_t - H) f||_2 over the normalized volume, by quadrature over start
    points and Monte Carlo over Brownian paths (psi = 0).

    Brownian motion commutes with isometries, so one set of paths from a base
    point is mapped to every quadrature node (translation on the circle,
    reflection on the sphere).  The squared Monte Carlo noise is removed with
    the per-node sample variance, and the standard error comes from
    n_batches independent path batches.  Compares with e^{-gap t} sqrt(Var f).
    """
    M = manifold
    _require_compact(M)
    gap = spectral_gap(M).gap
    nodes, w, rule = quadrature(M, seed)
    if node_stride > 1:
        nodes, w = nodes[::node_stride], w[::node_stride]
        w = w / w.sum()
        rule = {**rule, "stride": node_stride}
    fv = _values(f, nodes)
    Hf = float(w @ fv)
    var = float(w @ (fv - Hf) ** 2)
    t_grid = np.asarray(t_grid, float)
    vals, ses = [], []
    for j, t in enumerate(t_grid):
        X = _displacements(M, float(t), n_samples, seed + 7919 * (j + 1), steps_per_unit, workers)
        batch_est = np.zeros(n_batches)
        sums = np.zeros((n_batches, len(nodes)))
        sq = np.zeros((n_batches, len(nodes)))
        groups = np.array_split(np.arange(n_samples), n_batches)
        for g, idx in enumerate(groups):
            for i in idx:
                if isinstance(M, Circle):
                    y = M.project_point(nodes + X[i])
                else:
                    base = M.base_point()
                    u, nn, ok = _reflection_to(M, base, nodes)
                    xi = X[i][None, :]
                    y = np.where(ok, xi - 2 * (u @ X[i])[:, None] * u / nn, xi)
                v = _values(f, y)
                sums[g] += v
                sq[g] += v * v
        counts = np.array([len(idx) for idx in groups], float)[:, None]

        def corrected(s, q, c):
            m = s / c
            s2 = (q - c * m * m) / (c - 1)
            return float(w @ ((m - Hf) ** 2 - s2 / c))

        for g in range(n_batches):
            batch_est[g] = corrected(sums[g], sq[g], counts[g])
        tot = corrected(sums.sum(0), sq.sum(0), counts.sum())
        # the batch estimates have n_batches times the noise of the pooled one
        val = math.sqrt(max(tot, 0.0))
        se2 = batch_est.std(ddof=1) / math.sqrt(n_batches)
        se = se2 / (2 * max(val, 1e-12)) if val > 0 else math.sqrt(se2)
        vals.append(val)
        ses.append(se)
    vals = np.array(vals)
    ses = np.array(ses)
    rhs = np.exp(-gap * t_grid) * math.sqrt(var)
    holds = vals <= rhs + k_se * ses + 1e-12
    rate, rate_se = float("nan"), float("nan")
    pos = vals > 0
    if pos.sum() >= 2:
        y = np.log(vals[pos])
        sw = (vals[pos] / np.maximum(ses[pos], 1e-15)) ** 2
        A = np.stack([np.ones(pos.sum()), t_grid[pos]], 1)
        cov = np.linalg.inv(A.T @ (A * sw[:, None]))
        coef = cov @ (A.T @ (sw * y))
        rate, rate_se = float(-coef[1]), float(math.sqrt(cov[1, 1]))
    return L2DecayResult(t_grid, vals, ses, rhs, holds, rate, rate_se, gap, var, rule)


# -- heat kernels ------------------------------------------------------------------

def _wrapped_terms(L, t, z, m=0):
    """Sum over windings of the m-th z-derivative of the Gaussian kernel,
    stopping once the added terms fall below 1e-16."""
    z = np.asarray(z, float)
    z = np.mod(z + L / 2, L) - L / 2
    s = math.sqrt(t)
    total = np.zeros_like(z)
    k = 0
    while True:
        shifts = [0] if k == 0 else [k, -k]
        add = np.zeros_like(z)
        for j in shifts:
            u = (z + j * L) / s
            he = np.polynomial.hermite_e.hermeval(u, [0] * m + [1])
            add += (-1) ** m * he * np.exp(-0.5 * u * u) / (math.sqrt(2 * math.pi) * s ** (m + 1))
        total += add
        if k > 0 and np.max(np.abs(add)) < 1e-16:
            break
        k += 1
        if k > 10000:
            break
    return total


def circle_kernel_derivative(M: Circle, t, z, m=0):
    """d^m/dx^m p_t(x, y) at x - y = z on the circle."""
    return _wrapped_terms(M.length, float(t), z, m)


def heat_kernel(manifold: Manifold, t, x, y):
    """Transition density of Brownian motion (generator Laplacian/2)."""
    M = manifold
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x.coords if isinstance(x, ManifoldPoint) else x, float)
    y = np.asarray(y.coords if isinstance(y, ManifoldPoint) else y, float)
    if M.kind == "euclidean":
        n = M.dim
        d2 = np.sum((x - y) ** 2, -1)
        return (2 * math.pi * t) ** (-n / 2) * np.exp(-d2 / (2 * t))
    if isinstance(M, Circle):
        return circle_kernel_derivative(M, t, (x - y)[..., 0], 0)
    if isinstance(M, Hyperbolic3):
        a = math.sqrt(-M.kappa)
        r = np.asarray(M.dist(x, y), float)
        ar = a * r
        ratio = np.where(ar > 1e-8, ar / np.sinh(np.where(ar > 1e-8, ar, 1.0)), 1.0 - ar * ar / 6)
        return (2 * math.pi * t) ** (-1.5) * ratio * np.exp(M.kappa * t / 2 - r * r / (2 * t))
    raise Unsupported(f"no heat kernel for {M.kind}")


def kernel_derivative_norm(M: Circle, eps, m):
    """sup_x ||d^m p_eps(x, .)||_2 under the normalized measure (the circle is
    homogeneous, so the sup is attained at every x)."""
    if not isinstance(M, Circle):
        raise Unsupported("kernel-derivative norms are implemented on the circle only")
    z = np.arange(CIRCLE_NODES) * (M.length / CIRCLE_NODES)
    vals = circle_kernel_derivative(M, eps, z, m)
    return float(math.sqrt(np.mean(vals ** 2)))


def decay_constant(M: Circle, m, eps=0.1, gap=None):
    """C_m(eps) = vol(M) ||d^m p_eps||_2 e^{gap eps} / sqrt(2 gap), so that
    |d^m P_t f| <= C_m(eps) e^{-gap t} ||grad f||_inf for t > eps (m = 0 bounds
    |(P_t - H) f| instead)."""
    lam = spectral_gap(M).gap if gap is None else gap
    return float(M.volume * kernel_derivative_norm(M, eps, m) * math.exp(lam * eps) / math.sqrt(2 * lam))


# -- hyperbolic Bakry-Emery check -------------------------------------------------

def hyperbolic_hessian_bound_check(kappa, t, n_pairs=1000, seed=0, radius=2.0, n_targets=10, tol=1e-6):
    """Minimum eigenvalue of Ric - 2 Hess log p_t(., y) at sampled x against
    the lower bound 2(kappa + 1/t).

    Returns margins (min eigenvalue minus bound) and the list of pairs whose
    margin is below -tol.
    """
    M = Hyperbolic3(kappa)
    rng = np.random.default_rng(seed)
    ys = M.random_point(rng, size=n_targets, max_radius=radius)
    per = int(math.ceil(n_pairs / n_targets))
    bound = 2 * (kappa + 1.0 / t)
    margins, violations, dists = [], [], []
    for y in ys:
        pot = log_heat_kernel_potential(kappa, t, y)
        xs = M.random_point(rng, size=per, max_radius=radius)
        for x in xs:
            B = bakry_emery_at(ManifoldPoint(M, x), pot)
            mn = float(np.linalg.eigvalsh(B)[0])
            margins.append(mn - bound)
            dists.append(float(M.dist(x, y)))
            if mn - bound < -tol:
                violations.append({"x": x.tolist(), "y": y.tolist(), "margin": mn - bound})
    margins = np.array(margins[:n_pairs])
    return {
        "kappa": kappa,
        "t": t,
        "bound": bound,
        "min_margin": float(margins.min()),
        "margins": margins,
        "distances": np.array(dists[:n_pairs]),
        "violations": violations,
    }
