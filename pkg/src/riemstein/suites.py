"""Acceptance batteries.

Each criterion function returns a JSON-ready dict
    {"criterion": k, "title": ..., "passed": bool, "checks": [...], "details": {...}}
where every check records the measured value, its limit and the margin.
`scale` multiplies the Monte Carlo sample sizes (1.0 = the stated sizes);
outputs contain no timing information, so equal seeds give equal JSON.
"""
from __future__ import annotations

import json
import math

import numpy as np

from .bound import assemble_bound, circle_metropolis_sampler, collect_pairs, derive_constants, exact_wasserstein_1d
from .curvature import BundleEvaluator, curvature_at, symmetry_residuals
from .fields import (
    PolynomialField,
    PotentialSpec,
    coordinate_field,
    gaussian_potential,
    sigma_preset,
    zero_potential,
)
from .identities import verify_tensor_identities
from .manifolds import ChartDiffusion, Circle, Euclidean, Hyperbolic3, ManifoldPoint, Sphere
from .semigroup import (
    OUPolynomialFamily,
    agree,
    bismut_gradient,
    bismut_hessian,
    bismut_third,
    decay_profile,
    fd_of_estimator,
    fd_of_Ptf,
    gradient_contraction_check,
    joint_se,
    martingale_check,
    sphere_height_family,
)
from .spectral import hyperbolic_hessian_bound_check, l2_decay_check, poincare_check, poincare_test_suite

SUITES = {
    "geometry": (1, 2),
    "martingales": (3,),
    "derivatives": (4, 5),
    "decay": (6, 7),
    "compact": (8, 10),
    "bounds": (9,),
}


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=1)


def _check(name, value, limit, kind="le"):
    value = float(value)
    limit = float(limit)
    if kind == "le":
        ok, margin = value <= limit, limit - value
    elif kind == "ge":
        ok, margin = value >= limit, value - limit
    else:
        raise ValueError(kind)
    return {"name": name, "value": value, "limit": limit, "kind": kind, "passed": bool(ok), "margin": margin}


def _window(name, value, lo, hi):
    value = float(value)
    ok = lo <= value <= hi
    return {"name": name, "value": value, "limit": [lo, hi], "kind": "in", "passed": bool(ok),
            "margin": min(value - lo, hi - value) if np.isfinite(value) else float("nan")}


def _agree_check(name, a, b, k=3.0):
    se = float(np.max(joint_se(a, b)))
    diff = float(np.max(np.abs(a.value - b.value)))
    c = _check(name, diff, k * se + 1e-12)
    c.update({"a": float(np.max(a.value)), "b": float(np.max(b.value)), "joint_se": se})
    return c


def _result(k, title, checks, details=None):
    return {"criterion": k, "title": title, "passed": all(c["passed"] for c in checks), "checks": checks,
            "details": details or {}}


def _n(base, scale, floor=200):
    return max(int(round(base * scale)), floor)


# -- 1 geometry roundtrip --------------------------------------------------------

def geometry_residuals(M, n, rng, rmax=None, max_radius=2.0):
    """Worst log(exp) roundtrip error, transport inner-product drift and
    embedding-constraint residual over n random (x, v) with |v| < rmax."""
    if rmax is None:
        rmax = 0.3 if M.kind == "chart_diffusion" else min(0.9 * M.inj_radius, 2.0)
    x = M.random_point(rng, size=n, max_radius=max_radius) if M.kind == "hyperbolic3" else M.random_point(rng, size=n)
    d = M.random_tangent(rng, x)
    d = d / M.norm(x, d)[:, None]
    v = d * rng.uniform(0, rmax, size=(n, 1))
    y = M.exp(x, v)
    back = M.log(x, y)
    w1 = M.random_tangent(rng, x)
    w2 = M.random_tangent(rng, x)
    t1 = M.transport_along(x, v, w1)
    t2 = M.transport_along(x, v, w2)
    return {
        "roundtrip": float(np.max(M.norm(x, back - v))),
        "transport_drift": float(np.max(np.abs(M.inner(y, t1, t2) - M.inner(x, w1, w2)))),
        "constraint": float(np.max(np.abs(M.constraint_residual(y)))),
        "max_step": float(rmax),
        "n_pairs": int(n),
    }


def criterion_1(seed=1, scale=1.0, workers=1):
    rng = np.random.default_rng(seed)
    n = _n(1000, scale, 50)
    checks = []
    for M, rmax in [(Sphere(2, 1.0), 0.9 * math.pi), (Hyperbolic3(-1.0), 2.0), (Circle(2 * math.pi), 0.9 * math.pi)]:
        r = geometry_residuals(M, n, rng, rmax)
        checks.append(_check(f"{M.kind} log(exp) roundtrip", r["roundtrip"], 1e-9))
        checks.append(_check(f"{M.kind} transport inner-product drift", r["transport_drift"], 1e-9))
        checks.append(_check(f"{M.kind} constraint residual", r["constraint"], 1e-12))
    return _result(1, "geometry roundtrip", checks, {"n_pairs": n})


# -- 2 curvature oracles ------------------------------------------------------------

def criterion_2(seed=2, scale=1.0, workers=1):
    rng = np.random.default_rng(seed)
    checks = []
    for M in (Sphere(2, 1.0), Sphere(3, 0.5)):
        worst = 0.0
        for x in M.random_point(rng, size=5):
            b = curvature_at(ManifoldPoint(M, x), zero_potential(M))
            worst = max(worst, float(np.max(np.abs(b.ric - (M.dim - 1) * M.kappa * np.eye(M.dim)))))
        checks.append(_check(f"sphere({M.dim},{M.kappa}) Ric - (n-1) kappa I", worst, 1e-6))
    chart = ChartDiffusion(3, sigma_preset("identity", 3), name="identity")
    R = chart.riemann_coords(chart.random_point(rng, size=5))
    checks.append(_check("chart sigma=I curvature", float(np.max(np.abs(R))), 1e-6))
    pc = ChartDiffusion(2, sigma_preset("poincare", 2), name="poincare")
    ev = BundleEvaluator(pc, zero_potential(pc))
    xs = pc.random_point(rng, size=4)
    sym = symmetry_residuals(ev.riemann(xs, pc.frame(xs)))
    poincare_symmetry = max(sym.values())

    n_fun = max(2, int(round(10 * min(scale, 1.0))))
    cases = [
        (Euclidean(3), lambda: gaussian_potential(np.diag([1.0, 2.0, 0.5]), [0.1, 0.0, 0.2])),
        (Sphere(2, 1.0), None),
        (Hyperbolic3(-1.0), None),
        (Circle(), None),
        (chart, None),
    ]
    details = {}
    for M, mk in cases:
        worst = 0.0
        for _ in range(n_fun):
            if mk is not None:
                pot = mk()
            elif M.kind in ("circle", "chart_diffusion"):
                pot = zero_potential(M)
            else:
                pot = PotentialSpec(PolynomialField.random(rng, M.ambient_dim, 3, 0.3), None, "poly")
            x = M.random_point(rng)
            f = PolynomialField.random(rng, M.ambient_dim, 3, 1.0)
            r = verify_tensor_identities(ManifoldPoint(M, x), pot, f)
            worst = max(worst, max(v for k, v in r.items() if k != "scale"))
        checks.append(_check(f"{M.kind} commutator/Weitzenbock residual", worst, 1e-4))
    # reported only: nested finite differences of FD Christoffel symbols
    worst = 0.0
    for _ in range(2):
        f = PolynomialField.random(rng, 2, 3, 0.5)
        r = verify_tensor_identities(ManifoldPoint(pc, np.array([0.1, 0.2])), zero_potential(pc), f)
        worst = max(worst, max(v for k, v in r.items() if k != "scale"))
    details["chart_poincare_identity_residual"] = worst
    details["chart_poincare_riemann_symmetry"] = poincare_symmetry
    details["n_functions"] = n_fun
    return _result(2, "curvature oracles and identities", checks, details)


# -- 3 martingales -----------------------------------------------------------------

def criterion_3(seed=3, scale=1.0, workers=1):
    n = _n(10000, scale)
    checks = []
    details = {}
    S = Sphere(2, 1.0)
    E = Euclidean(2)
    A = np.array([[1.0, 0.3], [0.3, 2.0]])
    y = np.array([0.2, 0.1])
    poly = PolynomialField.random(np.random.default_rng(seed), 2, 3)
    configs = [
        ("sphere", sphere_height_family(S), zero_potential(S), S.project_point(np.array([0.3, -0.2, 0.8])), S),
        ("euclidean-gaussian", OUPolynomialFamily(A, y, poly), gaussian_potential(A, y), np.array([0.5, -0.3]), E),
    ]
    for name, fam, pot, x, M in configs:
        r = martingale_check(fam, pot, x, 0.5, n, seed, order=3, manifold=M, h=5e-4, workers=workers)
        details[name] = {}
        for proc, v in r.items():
            details[name][proc] = {"initial": v["initial"], "estimates": {}}
            for s, est in v["estimates"].items():
                diff = abs(float(est.value) - v["initial"])
                c = _check(f"{name} {proc} s={s:g}", diff, 3 * float(est.std_error) + 1e-12)
                c["std_error"] = float(est.std_error)
                checks.append(c)
                details[name][proc]["estimates"][f"{s:g}"] = est.to_dict()
    return _result(3, "martingale constancy", checks, {"n_paths": n, "t": 0.5, "h": 5e-4, **details})


# -- 4 Bismut gradient exactness -----------------------------------------------------

def criterion_4(seed=4, scale=1.0, workers=1):
    n = _n(100000, scale)
    M = Euclidean(2)
    pot = gaussian_potential(np.eye(2), np.zeros(2))
    b = np.array([1.0, -0.5])
    f = PolynomialField(0.0, b, dim=2, name="linear")
    u = np.array([0.6, 0.8])
    t = 1.0
    exact = math.exp(-t) * float(b @ u)
    est = bismut_gradient(np.array([0.3, -0.4]), f, pot, t, u, n, seed, manifold=M, workers=workers)
    rel = float(est.std_error) / abs(exact)
    checks = [
        _check("|estimate - exact| vs 3 SE", abs(float(est.value) - exact), 3 * float(est.std_error) + 1e-12),
        _check("relative SE", rel, 0.01),
    ]
    return _result(4, "Bismut gradient on OU", checks, {"exact": exact, "estimate": est.to_dict(), "n_paths": n})


# -- 5 cross-derivative consistency ----------------------------------------------------

def criterion_5(seed=5, scale=1.0, workers=1, steps_per_unit=250, min_steps=50):
    n = _n(20000, scale)
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    fam = sphere_height_family(M)
    f = fam.f
    rng = np.random.default_rng(seed)
    x = M.project_point(np.array([0.3, -0.2, 0.8]))
    E = M.frame(x)
    u, v, w = [d / np.linalg.norm(d) for d in rng.standard_normal((3, 2))]
    kw = dict(manifold=M, steps_per_unit=steps_per_unit, min_steps=min_steps, workers=workers)
    checks, details = [], {}
    for t in (0.1, 0.5, 1.0):
        s = seed * 1000 + int(round(t * 100))
        g = bismut_gradient(x, f, pot, t, u, n, s, **kw)
        fd_g = fd_of_Ptf(x, f, pot, t, u, n, s, **kw)
        h = bismut_hessian(x, f, pot, t, u, v, n, s, **kw)
        fd_h = fd_of_estimator("grad", x, f, pot, t, [v], u, n, s, **kw)
        c1 = bismut_third(x, f, pot, t, u, v, w, n, s, variant="c1", **kw)
        c2 = bismut_third(x, f, pot, t, u, v, w, n, s, variant="c2", **kw)
        fd_3 = fd_of_estimator("hess", x, f, pot, t, [v, w], u, n, s, **kw)
        checks += [
            _agree_check(f"t={t} gradient vs FD of P_t f", g, fd_g),
            _agree_check(f"t={t} Hessian vs FD of gradient", h, fd_h),
            _agree_check(f"t={t} third (c1) vs FD of Hessian", c1, fd_3),
            _agree_check(f"t={t} third (c2) vs FD of Hessian", c2, fd_3),
            _agree_check(f"t={t} third c1 vs c2", c1, c2),
        ]
        ex = fam.derivs(x[None], E[None], t, 3)
        details[f"{t:g}"] = {
            "closed_form": {"grad": float(ex[1][0] @ u), "hess": float(u @ ex[2][0] @ v),
                            "third": float(np.einsum("abc,a,b,c", ex[3][0], u, v, w))},
            "grad": g.value, "fd_grad": fd_g.value, "hess": h.value, "fd_hess": fd_h.value,
            "third_c1": c1.value, "third_c2": c2.value, "fd_third": fd_3.value,
        }
    return _result(5, "cross-derivative consistency", checks,
                   {"n_paths": n, "steps_per_unit": steps_per_unit, **details})


# -- 6 contraction rate -----------------------------------------------------------------

def criterion_6(seed=6, scale=1.0, workers=1):
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    f = sphere_height_family(M).f
    x = M.base_point()
    per = _n(200, scale, 20)
    d = decay_profile(f, pot, x, 1, [0.5, 1, 2, 3, 4, 6], per, seed, manifold=M, steps_per_unit=200,
                      workers=workers)
    K = 0.5
    checks = [_check("fitted rate relative error", abs(d.fitted_rate - K) / K, 0.15)]
    rng = np.random.default_rng(seed)
    configs = [(M.exp(x, M.random_tangent(rng, x, 0.8)), float(t)) for t in rng.choice([0.1, 0.3, 0.5, 1, 2, 3], 20)]
    rows = gradient_contraction_check(M, pot, f, configs, _n(2000, scale), seed, K=K, steps_per_unit=200)
    worst = min(r["rhs"] + 3 * math.hypot(r["lhs_se"], r["rhs_se"]) - r["lhs"] for r in rows)
    checks.append(_check("contraction inequality worst slack", worst, 0.0, "ge"))
    return _result(6, "contraction rate", checks, {"decay": d.to_dict(), "contraction": rows})


# -- 7 small-t exponents ---------------------------------------------------------------------

def criterion_7(seed=7, scale=1.0, workers=1):
    M = Sphere(2, 1.0)
    pot = zero_potential(M)
    f = sphere_height_family(M).f
    x = M.base_point()
    per = _n(200, scale, 20)
    tg = np.geomspace(1e-3, 1e-1, 5)
    d2 = decay_profile(f, pot, x, 2, tg, per, seed, manifold=M, workers=workers)
    d3 = decay_profile(f, pot, x, 3, tg, per, seed, manifold=M, variant="c1", workers=workers)
    checks = [
        _window("Hessian exponent", d2.fitted_smallt_exponent, 0.35, 0.65),
        _window("third-derivative (c1) exponent", d3.fitted_smallt_exponent, 0.8, 1.2),
    ]
    return _result(7, "small-t singularity exponents", checks, {"hessian": d2.to_dict(), "third": d3.to_dict()})


# -- 8 hyperbolic Bakry-Emery bound ---------------------------------------------------------

def criterion_8(seed=8, scale=1.0, workers=1):
    n = _n(1000, scale, 50)
    checks, details = [], {}
    for t in (0.2, 0.5, 0.9):
        r = hyperbolic_hessian_bound_check(-1.0, t, n, seed)
        checks.append(_check(f"t={t} min margin", r["min_margin"], -1e-6, "ge"))
        checks.append(_check(f"t={t} violations", len(r["violations"]), 0))
        details[f"{t:g}"] = {"bound": r["bound"], "min_margin": r["min_margin"], "violations": r["violations"]}
    return _result(8, "hyperbolic Bakry-Emery bound", checks, {"n_pairs": n, **details})


# -- 9 end-to-end Stein bound ------------------------------------------------------------------

def criterion_9(seed=9, scale=1.0, workers=1):
    M = Circle(2 * math.pi)
    pot = zero_potential(M)
    n_base = _n(10000, scale, 100)
    consts = derive_constants(pot, M)
    checks, details = [], {}
    third = {}
    for lam in (1e-2, 1e-3):
        batch = collect_pairs(circle_metropolis_sampler(M, lam), n_base, 32, seed)
        rep = assemble_bound(batch, pot, consts)
        third[lam] = rep.third_moment_term["value"]
        details[f"{lam:g}"] = {k: v for k, v in rep.to_dict().items() if k != "constants"}
        if lam == 1e-2:
            sizes = [s for s in (100, 1000, 10000) if s <= n_base]
            for N in sizes:
                wW = exact_wasserstein_1d(batch.W[:N, 0], "uniform", M)
                wP = exact_wasserstein_1d(batch.W_prime[:N, 0, 0], "uniform", M)
                checks.append(_check(f"bound - W1(W, uniform), N={N}", rep.bound - wW, 0.0, "ge"))
                checks.append(_check(f"bound - W1(W', uniform), N={N}", rep.bound - wP, 0.0, "ge"))
                checks.append(_check(f"four-term bound - W1(W, uniform), N={N}", rep.four_term_bound - wW, 0.0, "ge"))
                details[f"w1_N{N}"] = {"W": wW, "W_prime": wP}
    checks.append(_check("third-moment term decreases with lambda", third[1e-3], third[1e-2]))
    details["constants"] = {k: v for k, v in consts.to_dict().items() if k != "trace"}
    return _result(9, "end-to-end Stein bound on the circle", checks, details)


# -- 10 spectral decay ----------------------------------------------------------------------------

def criterion_10(seed=10, scale=1.0, workers=1):
    M = Circle(2 * math.pi)
    from .semigroup import circle_fourier_family

    f = circle_fourier_family(M).f
    r = l2_decay_check(f, M, [0.5, 1, 2, 4], _n(4000, scale, 100), seed)
    checks = [_check("rate relative error", abs(r.rate - 0.5) / 0.5, 0.10)]
    for t, val, se, rhs in zip(r.t, r.values, r.std_error, r.rhs):
        checks.append(_check(f"t={t:g} ||(P_t-H)f||_2 - rhs", val - rhs, 3 * se + 1e-12))
    for Mp in (M, Sphere(2, 1.0)):
        pm = poincare_check(Mp, poincare_test_suite(Mp))
        checks.append(_check(f"{Mp.kind} Poincare worst margin", min(p["margin"] for p in pm), -1e-8, "ge"))
    return _result(10, "spectral decay and Poincare", checks, {"l2_decay": r.to_dict()})


CRITERIA = {k: globals()[f"criterion_{k}"] for k in range(1, 11)}


def run_criterion(k, seed=None, scale=1.0, workers=1):
    fn = CRITERIA[int(k)]
    return fn(scale=scale, workers=workers) if seed is None else fn(seed=seed, scale=scale, workers=workers)


def run_suite(name, seed=None, scale=1.0, workers=1):
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}")
    return [run_criterion(k, None if seed is None else seed + k, scale, workers) for k in SUITES[name]]


def summary_csv(results) -> str:
    lines = ["criterion,check,passed,value,limit,margin"]
    for r in results:
        for c in r["checks"]:
            lim = c["limit"] if not isinstance(c["limit"], list) else "[{} {}]".format(*c["limit"])
            lines.append(f"{r['criterion']},\"{c['name']}\",{c['passed']},{c['value']!r},{lim},{c['margin']!r}")
    return "\n".join(lines) + "\n"
