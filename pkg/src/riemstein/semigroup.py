"""Monte Carlo estimators for P_t f and its first three covariant derivatives.

Derivative estimators use damped transports W, W', W'' and Cameron-Martin
weights; directions u, v, w are frame coordinates at the start point (frame
M.frame(x) unless one is passed).  Every estimator returns the per-path sample
mean with its standard error, so two estimators built on the same seed share
their Brownian increments (common random numbers).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NotContractive
from .fields import PotentialSpec, ScalarField, frame_derivs, ou_semigroup_matrices
from .manifolds import Manifold, ManifoldPoint
from .paths import PathEngine, StepState, cameron_martin, path_rng, run_paths

STEPS_PER_UNIT = 1000
MIN_STEPS = 100


@dataclass
class McEstimate:
    value: np.ndarray
    std_error: np.ndarray
    n_samples: int
    t: float
    seed: Optional[int] = None
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples < 2 and not np.all(np.asarray(self.std_error) == 0):
            raise ValueError("an estimate needs at least two samples")
        self.value = np.asarray(self.value, float)
        self.std_error = np.asarray(self.std_error, float)

    @classmethod
    def from_samples(cls, samples, t, seed=None, components=None):
        samples = np.asarray(samples, float)
        n = samples.shape[0]
        if n < 2:
            raise ValueError("an estimate needs at least two samples")
        se = samples.std(axis=0, ddof=1) / math.sqrt(n)
        return cls(samples.mean(axis=0), se, n, float(t), seed, components or {})

    @classmethod
    def exact(cls, value, t=0.0, seed=None):
        value = np.asarray(value, float)
        return cls(value, np.zeros_like(value), 0, float(t), seed)

    def __float__(self):
        return float(self.value)

    def within(self, target, k=3.0, extra_se=0.0):
        se = np.sqrt(self.std_error ** 2 + np.asarray(extra_se, float) ** 2)
        return bool(np.all(np.abs(self.value - target) <= k * se + 1e-12))

    def to_dict(self):
        out = {
            "value": self.value.tolist(),
            "std_error": self.std_error.tolist(),
            "n_samples": int(self.n_samples),
            "t": self.t,
            "seed": self.seed,
        }
        if self.components:
            out["components"] = {k: c.to_dict() for k, c in self.components.items()}
        return out


def joint_se(a: McEstimate, b: McEstimate):
    return np.sqrt(a.std_error ** 2 + b.std_error ** 2)


def agree(a: McEstimate, b: McEstimate, k=3.0):
    """|a - b| <= k sqrt(se_a^2 + se_b^2) componentwise."""
    return bool(np.all(np.abs(a.value - b.value) <= k * joint_se(a, b) + 1e-12))


# -- helpers ------------------------------------------------------------------

def _resolve(x, manifold):
    if isinstance(x, ManifoldPoint):
        return x.manifold, np.asarray(x.coords, float)
    if manifold is None:
        raise ValueError("pass a ManifoldPoint or the manifold keyword")
    x = np.asarray(x, float)
    if manifold.kind in ("sphere", "hyperbolic3", "circle"):
        x = manifold.project_point(x)
    return manifold, x


def time_grid(t, breaks=(), steps_per_unit=STEPS_PER_UNIT, min_steps=MIN_STEPS):
    """Piecewise-uniform grid on [0, t] containing every break point in (0, t).

    Each piece gets ceil(length * steps_per_unit) steps, and at least its
    share of min_steps, so short horizons keep a fixed resolution.
    """
    t = float(t)
    pts = sorted({0.0, t, *[float(b) for b in breaks if 0.0 < b < t - 1e-12]})
    pieces = []
    for a, b in zip(pts[:-1], pts[1:]):
        m = max(int(math.ceil((b - a) * steps_per_unit - 1e-9)), int(math.ceil(min_steps * (b - a) / t)), 1)
        seg = np.linspace(a, b, m + 1)
        pieces.append(seg[:-1])
    return np.concatenate(pieces + [np.array([t])])


def _weight_breaks(weights):
    return (weights.t1, weights.t_end)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# -- consumers ----------------------------------------------------------------

class _DerivativeConsumer:
    """Accumulates the weight integrals needed by the Bismut-type formulas
    and evaluates per-path derivative tensors at the final time.

    mode 'grad':     [df(W u)]
    mode 'hess':     terms [-df(W v) I_k(u), -df(W J(u, v))]
    mode 'third_c2': terms A, B, C, D of the single-weight formula
    mode 'third_c1': terms A, B, C, D, E of the two-weight formula
    Result shape (P, n_terms, n, ..., n).
    """

    def __init__(self, M, f, P, mode, weights, closed_form_R):
        self.M, self.f, self.P, self.mode, self.w = M, f, P, mode, weights
        self.cf = closed_form_R
        n = M.dim
        self.n = n
        self.out = None
        if mode != "grad":
            self.Ik = np.zeros((P, n))
        if mode == "hess":
            self.J = np.zeros((P, n, n, n))
        if mode.startswith("third"):
            self.M1 = np.zeros((P, n, n))
            self.L = np.zeros((P, n, n, n, n))
        if mode == "third_c1":
            self.Il = np.zeros((P, n))
            self.Jl = np.zeros((P, n, n, n))

    def step(self, st):
        if st.dB is None:
            self._finish(st)
            return
        if self.mode == "grad":
            return
        s = st.s
        kd = float(self.w.k_dot(s))
        W, dB, h = st.W, st.dB, st.h
        if kd != 0.0:
            self.Ik += kd * np.einsum("pau,pa->pu", W, dB)
            if self.mode == "hess":
                Winv = np.linalg.inv(W)
                self.J += (kd * h) * np.einsum("pab,pbuv->pauv", Winv, st.Wp)
            else:
                self.M1 += kd * np.einsum("pauv,pa->puv", st.Wp, dB)
                Winv = np.linalg.inv(W)
                RW = self._RW(st)
                self.L += (kd * h) * np.einsum("pab,pbuvw->pauvw", Winv, RW - st.Wpp)
        if self.mode == "third_c1":
            ld = float(self.w.l_dot(s))
            if ld != 0.0:
                self.Il += ld * np.einsum("pau,pa->pu", W, dB)
                Winv = np.linalg.inv(W)
                self.Jl += (ld * h) * np.einsum("pab,pbvw->pavw", Winv, st.Wp)

    def _RW(self, st):
        """R(W u, W v) W w as (P, a, u, v, w)."""
        W = st.W
        if self.cf:
            M = self.M
            k = 0.0 if M.kind in ("euclidean", "circle") else M.kappa
            if k == 0.0:
                n = self.n
                return np.zeros((W.shape[0], n, n, n, n))
            G = np.einsum("pau,pav->puv", W, W)
            # kappa (<Wv, Ww> Wu - <Wu, Ww> Wv)
            return k * (np.einsum("pvw,pau->pauvw", G, W) - np.einsum("puw,pav->pauvw", G, W))
        R = np.asarray(st.R)
        t = np.einsum("pabcd,pau->pubcd", R, W)
        t = np.einsum("pubcd,pbv->puvcd", t, W)
        t = np.einsum("puvcd,pcw->puvwd", t, W)
        return np.einsum("puvwd->pduvw", t)

    def _finish(self, st):
        M, f, W = self.M, self.f, st.W
        order = 2 if self.mode.startswith("third") else 1
        d = frame_derivs(M, st.x, st.E, f, order)
        dfW = np.einsum("pa,pav->pv", d[1], W)
        if self.mode == "grad":
            self.out = dfW[:, None]
            return
        Ik = self.Ik
        if self.mode == "hess":
            t1 = -np.einsum("pv,pu->puv", dfW, Ik)
            t2 = -np.einsum("pa,pauv->puv", dfW, self.J)
            self.out = np.stack([t1, t2], axis=1)
            return
        HW = np.einsum("pab,pav,pbw->pvw", d[2], W, W)
        dfWp = np.einsum("pa,pavw->pvw", d[1], st.Wp)
        A = -np.einsum("pw,puv->puvw", dfW, self.M1)
        B = -np.einsum("pv,puw->puvw", dfW, self.M1)
        D = np.einsum("pa,pauvw->puvw", dfW, self.L)
        if self.mode == "third_c2":
            C = -np.einsum("pvw,pu->puvw", HW + dfWp, Ik)
            self.out = np.stack([A, B, C, D], axis=1)
            return
        C = np.einsum("pw,pv,pu->puvw", dfW, self.Il, Ik)
        Et = np.einsum("pa,pavw,pu->puvw", dfW, self.Jl, Ik)
        self.out = np.stack([A, B, C, D, Et], axis=1)

    def result(self):
        return self.out


_TERM_NAMES = {
    "grad": ["df_W"],
    "hess": ["weight", "transport"],
    "third_c2": ["A", "B", "C", "D"],
    "third_c1": ["A", "B", "C", "D", "E"],
}

_ORDER = {"grad": 1, "hess": 2, "third_c2": 3, "third_c1": 3}


def derivative_samples(
    M: Manifold,
    x0,
    f: ScalarField,
    pot: PotentialSpec,
    t,
    n_samples,
    seed,
    mode,
    E0=None,
    steps_per_unit=STEPS_PER_UNIT,
    min_steps=MIN_STEPS,
    workers=1,
    antithetic=False,
    chunk=1024,
):
    """Per-path term tensors (n_samples, n_terms, n, ..., n) for one estimator.

    x0 may be a single point or per-path start points (n_samples, d).
    """
    if mode == "grad":
        weights = None
        grid = time_grid(t, (), steps_per_unit, min_steps)
    else:
        weights = cameron_martin(t, "third_deriv" if mode == "third_c1" else "second_deriv")
        grid = time_grid(t, _weight_breaks(weights), steps_per_unit, min_steps)
    cf = PathEngine(M, pot, t, 1).closed_form_R
    make = lambda P, ids: _DerivativeConsumer(M, f, P, mode, weights, cf)
    return run_paths(
        M, pot, x0, t, len(grid) - 1, n_samples, seed, _ORDER[mode], make,
        chunk=chunk, workers=workers, antithetic=antithetic, E0=E0, grid=grid,
    )


def _contract(samples, dirs):
    """Contract the trailing direction axes of (P, terms, n, ..., n) with dirs."""
    out = samples
    for d in dirs:
        d = np.asarray(d, float)
        if d.ndim == 1:
            out = np.tensordot(out, d, axes=([2], [0]))
        else:  # per-path directions (P, n)
            out = np.einsum("pt...a,pa->pt...", np.moveaxis(out, 2, -1), d)
    return out


def _estimate_from_terms(samples, mode, dirs, t, seed):
    if dirs is not None and all(d is not None for d in dirs):
        samples = _contract(samples, dirs)
    total = samples.sum(axis=1)
    comps = {name: McEstimate.from_samples(samples[:, k], t, seed) for k, name in enumerate(_TERM_NAMES[mode])}
    return McEstimate.from_samples(total, t, seed, comps)


def _is_constant(f: ScalarField):
    return getattr(f, "name", "") == "constant"


# -- public estimators ---------------------------------------------------------

def estimate_Ptf(x, f: ScalarField, pot: PotentialSpec, t, n_samples, seed, manifold=None, E0=None,
                 steps_per_unit=STEPS_PER_UNIT, min_steps=20, workers=1, antithetic=False) -> McEstimate:
    """E f(X_t(x)) with its standard error; t = 0 returns f(x) exactly."""
    M, x0 = _resolve(x, manifold)
    if t == 0:
        return McEstimate.exact(f.value(x0), 0.0, seed)
    grid = time_grid(t, (), steps_per_unit, min_steps)

    class _C:
        def __init__(self, P, ids):
            self.out = None

        def step(self, st):
            if st.dB is None:
                self.out = np.asarray(f.value(st.x), float)

        def result(self):
            return self.out

    vals = run_paths(M, pot, x0, t, len(grid) - 1, n_samples, seed, 0, _C, workers=workers,
                     antithetic=antithetic, E0=E0, grid=grid)
    return McEstimate.from_samples(vals, t, seed)


def bismut_gradient(x, f, pot, t, u=None, n_samples=10000, seed=0, manifold=None, frame=None, **kw) -> McEstimate:
    """(dP_t f)(u) = E[df(W_t u)]; with u=None the full frame gradient."""
    M, x0 = _resolve(x, manifold)
    n = M.dim
    if t == 0:
        E = M.frame(x0) if frame is None else frame
        g = frame_derivs(M, x0[None], E[None], f, 1)[1][0]
        return McEstimate.exact(g if u is None else g @ np.asarray(u, float), 0.0, seed)
    if _is_constant(f):
        return McEstimate.exact(np.zeros(n) if u is None else 0.0, t, seed)
    S = derivative_samples(M, x0, f, pot, t, n_samples, seed, "grad", E0=frame, **kw)
    return _estimate_from_terms(S, "grad", [u], t, seed)


def bismut_hessian(x, f, pot, t, u=None, v=None, n_samples=10000, seed=0, manifold=None, frame=None, **kw) -> McEstimate:
    """Hess P_t f(u, v) from the single-weight formula

        -E[df(W_t v) int <W_s(k' u), dB_s>] - E[df(W_t int W_s^{-1} W'_s(k' u, v) ds)]

    with k' = -1/(1 ^ t) on [0, 1 ^ t)."""
    M, x0 = _resolve(x, manifold)
    n = M.dim
    if _is_constant(f):
        return McEstimate.exact(np.zeros((n, n)) if u is None else 0.0, t, seed)
    if not t > 0:
        raise ValueError("t must be positive")
    S = derivative_samples(M, x0, f, pot, t, n_samples, seed, "hess", E0=frame, **kw)
    return _estimate_from_terms(S, "hess", [u, v], t, seed)


def bismut_third(x, f, pot, t, u=None, v=None, w=None, n_samples=10000, seed=0, variant="c1", manifold=None,
                 frame=None, **kw) -> McEstimate:
    """nabla Hess P_t f(u, v, w), u being the derivative direction.

    variant 'c2' integrates by parts once and uses Hess f at the end point;
    variant 'c1' splits [0, 1 ^ t] at its midpoint into two weights k and l
    and needs df only."""
    if variant not in ("c1", "c2"):
        raise ValueError("variant must be 'c1' or 'c2'")
    M, x0 = _resolve(x, manifold)
    n = M.dim
    if _is_constant(f):
        return McEstimate.exact(np.zeros((n, n, n)) if u is None else 0.0, t, seed)
    if not t > 0:
        raise ValueError("t must be positive")
    mode = "third_" + variant
    S = derivative_samples(M, x0, f, pot, t, n_samples, seed, mode, E0=frame, **kw)
    return _estimate_from_terms(S, mode, [u, v, w], t, seed)


# -- finite-difference oracles ------------------------------------------------------

def _shifted_starts(M, x0, E, u, eps):
    """Points exp(x, +-eps u) and the frame E transported along each step."""
    vu = M.from_frame(E, np.asarray(u, float))
    out = []
    for sgn in (1.0, -1.0):
        v = sgn * eps * vu
        xs = M.exp(x0, v)
        Es = M.orthonormalize(xs, M.transport_along(x0, v, E, frame=True))
        out.append((xs, Es))
    return out


def _fd(M, x0, E, u, eps, sampler, t, seed):
    (xp, Ep), (xm, Em) = _shifted_starts(M, x0, E, u, eps)
    q = (sampler(xp, Ep) - sampler(xm, Em)) / (2 * eps)
    return McEstimate.from_samples(q, t, seed)


def fd_of_Ptf(x, f, pot, t, u, n_samples, seed, eps=1e-3, manifold=None, frame=None, **kw) -> McEstimate:
    """Finite difference of estimate_Ptf along u (common random numbers)."""
    M, x0 = _resolve(x, manifold)
    E = M.frame(x0) if frame is None else np.asarray(frame, float)
    grid = time_grid(t, (), kw.pop("steps_per_unit", STEPS_PER_UNIT), kw.pop("min_steps", 20))

    def sampler(xs, Es):
        class _C:
            def __init__(self, P, ids):
                self.out = None

            def step(self, st):
                if st.dB is None:
                    self.out = np.asarray(f.value(st.x), float)

            def result(self):
                return self.out

        return run_paths(M, pot, xs, t, len(grid) - 1, n_samples, seed, 0, _C, E0=Es, grid=grid, **kw)

    return _fd(M, x0, E, u, eps, sampler, t, seed)


def fd_of_estimator(mode, x, f, pot, t, dirs, u, n_samples, seed, eps=1e-3, manifold=None, frame=None, **kw):
    """Finite difference along u of the `mode` estimator ('grad', 'hess',
    'third_c1', 'third_c2') contracted with the remaining directions `dirs`
    transported with the frame."""
    M, x0 = _resolve(x, manifold)
    E = M.frame(x0) if frame is None else np.asarray(frame, float)

    def sampler(xs, Es):
        S = derivative_samples(M, xs, f, pot, t, n_samples, seed, mode, E0=Es, **kw)
        return _contract(S, dirs).sum(axis=1)

    return _fd(M, x0, E, u, eps, sampler, t, seed)


# -- closed-form semigroups for validation ---------------------------------------------

class EigenFamily:
    """P_r f = exp(-rate r) f for an eigenfunction f of the generator."""

    def __init__(self, M: Manifold, f: ScalarField, rate: float):
        self.M, self.f, self.rate = M, f, float(rate)

    def derivs(self, x, E, r, order):
        d = frame_derivs(self.M, x, E, self.f, order)
        return [np.exp(-self.rate * r) * a for a in d]


def sphere_height_family(M, axis=-1):
    """Height function on the sphere: -Laplacian/2 eigenvalue n kappa / 2."""
    b = np.zeros(M.ambient_dim)
    b[axis] = 1.0
    from .fields import PolynomialField

    return EigenFamily(M, PolynomialField(0.0, b, dim=M.ambient_dim, name="height"), 0.5 * M.dim * M.kappa)


def circle_fourier_family(M, mode=1, phase=0.0):
    w = 2 * np.pi * mode / M.length
    f = ScalarField(
        lambda x: np.sin(w * x[..., 0] + phase),
        lambda x: w * np.cos(w * x + phase),
        lambda x: (-w * w * np.sin(w * x + phase))[..., None],
        lambda x: (-w ** 3 * np.cos(w * x + phase))[..., None, None],
        name="fourier",
    )
    return EigenFamily(M, f, 0.5 * w * w)


class OUPolynomialFamily:
    """P_r f for a cubic polynomial f under dX = dB - A (X - y) dt.

    X_r = m + G with m = y + exp(-Ar)(x - y), G ~ N(0, Sigma_r), so
    P_r f(x) = F(m) with F = f + tr(Sigma D^2 f)/2 (exact for cubics)."""

    def __init__(self, A, y, poly):
        self.A = np.atleast_2d(np.asarray(A, float))
        self.y = np.asarray(y, float)
        self.p = poly

    def derivs(self, x, E, r, order):
        p = self.p
        Phi, Sig = ou_semigroup_matrices(self.A, r)
        m = self.y + (x - self.y) @ Phi.T
        c = np.einsum("ijk,ij->k", p.T, Sig)
        val = p.value(m) + 0.5 * np.sum(p.Q * Sig) + 0.5 * m @ c
        g = (p.grad(m) + 0.5 * c) @ Phi
        out = [val, np.einsum("...d,...da->...a", g, E)]
        if order >= 2:
            H = Phi.T @ p.hess(m) @ Phi if np.ndim(m) == 1 else np.einsum("di,...de,ej->...ij", Phi, p.hess(m), Phi)
            out.append(np.einsum("...da,...de,...eb->...ab", E, H, E))
        if order >= 3:
            T = np.einsum("ijk,ia,jb,kc->abc", p.T, Phi, Phi, Phi)
            out.append(np.einsum("...da,...eb,...fc,def->...abc", E, E, E, T))
        return out


# -- martingale checks ---------------------------------------------------------------

class _MartingaleConsumer:
    def __init__(self, M, family, t, order, dirs, record_idx, P):
        self.M, self.fam, self.t, self.order = M, family, t, order
        self.u, self.v, self.w = dirs
        self.rec = {int(i): None for i in record_idx}
        self.P = P

    def step(self, st):
        if st.i not in self.rec:
            return
        r = self.t - st.s
        d = self.fam.derivs(st.x, st.E, r, self.order)
        W = st.W
        Wu = W @ self.u
        Wv = W @ self.v
        Ww = W @ self.w
        vals = [np.einsum("pa,pa->p", d[1], Wu)]
        if self.order >= 2:
            Wp_uv = np.einsum("pauv,u,v->pa", st.Wp, self.u, self.v)
            vals.append(np.einsum("pab,pa,pb->p", d[2], Wu, Wv) + np.einsum("pa,pa->p", d[1], Wp_uv))
        if self.order >= 3:
            Wp_uw = np.einsum("pauv,u,v->pa", st.Wp, self.u, self.w)
            Wp_vw = np.einsum("pauv,u,v->pa", st.Wp, self.v, self.w)
            Wpp = np.einsum("pauvw,u,v,w->pa", st.Wpp, self.u, self.v, self.w)
            H = d[2]
            vals.append(
                np.einsum("pabc,pa,pb,pc->p", d[3], Wu, Wv, Ww)
                + np.einsum("pab,pa,pb->p", H, Wv, Wp_uw)
                + np.einsum("pab,pa,pb->p", H, Wp_uv, Ww)
                + np.einsum("pab,pa,pb->p", H, Wu, Wp_vw)
                + np.einsum("pa,pa->p", d[1], Wpp)
            )
        self.rec[st.i] = np.stack(vals, axis=1)

    def result(self):
        return np.stack([self.rec[i] for i in sorted(self.rec)], axis=1)


def martingale_check(family, pot, x, t, n_paths, seed, order=3, dirs=None, manifold=None, record=(0.5, 1.0),
                     h=None, workers=1, chunk=1024):
    """Estimate E[N_s], E[N'_s], E[N''_s] at fractions `record` of [0, t].

    N_s = dP_{t-s} f(W_s u), N' and N'' the corresponding second and third
    order processes built from W'.  Their time-0 values are deterministic
    (the closed-form derivatives of P_t f at x), so constancy means every
    recorded mean matches the time-0 value.
    Returns {"N": {"initial": value, "estimates": {s: McEstimate}}, ...}.
    """
    M, x0 = _resolve(x, manifold)
    n = M.dim
    if dirs is None:
        rng = np.random.default_rng(int(seed) + 17)
        dirs = [_unit(rng.standard_normal(n)) for _ in range(3)]
    dirs = [np.asarray(d, float) for d in dirs]
    steps = max(2, int(round(t / h))) if h is not None else max(2, int(math.ceil(t * STEPS_PER_UNIT)))
    rec_idx = sorted({int(round(fr * steps)) for fr in record})
    make = lambda P, ids: _MartingaleConsumer(M, family, t, order, dirs, rec_idx, P)
    S = run_paths(M, pot, x0, t, steps, n_paths, seed, order, make, workers=workers, chunk=chunk)
    E = M.frame(x0)
    init = _MartingaleConsumer(M, family, t, order, dirs, [0], 1)
    nI = np.eye(n)[None]
    init.step(StepState(0, 0.0, 0.0, x0[None], E[None], None, nI, np.zeros((1, n, n, n)), np.zeros((1, n, n, n, n))))
    N0 = init.rec[0][0]
    names = ["N", "N_prime", "N_doubleprime"][:order]
    out = {}
    for k, name in enumerate(names):
        est = {}
        for j, i in enumerate(rec_idx):
            est[float(i * t / steps)] = McEstimate.from_samples(S[:, j, k], i * t / steps, seed)
        out[name] = {"initial": float(N0[k]), "estimates": est}
    return out


# -- gradient contraction ------------------------------------------------------------------

def gradient_contraction_check(M, pot, f, configs, n_samples, seed, K=None, k_se=3.0, **kw):
    """|grad P_t f|(x) <= exp(-K t) P_t|grad f|(x) + k_se joint SE for each
    (x, t) in configs; both sides use the same paths.
    """
    K = pot.K if K is None else K
    rows = []
    for j, (x, t) in enumerate(configs):
        x = np.asarray(x, float)
        grid = time_grid(t, (), kw.get("steps_per_unit", STEPS_PER_UNIT), kw.get("min_steps", 20))

        class _C:
            def __init__(self, P, ids):
                self.out = None

            def step(self, st):
                if st.dB is None:
                    g = frame_derivs(M, st.x, st.E, f, 1)[1]
                    dfW = np.einsum("pa,pav->pv", g, st.W)
                    self.out = np.concatenate([dfW, np.linalg.norm(g, axis=1)[:, None]], axis=1)

            def result(self):
                return self.out

        S = run_paths(M, pot, x, t, len(grid) - 1, n_samples, seed + j, 1, _C, grid=grid)
        g = S[:, :-1]
        gm = g.mean(0)
        lhs = float(np.linalg.norm(gm))
        cov = np.atleast_2d(np.cov(g, rowvar=False)) / len(g)
        lhs_se = float(np.sqrt(max(gm @ cov @ gm, 0.0)) / lhs) if lhs > 0 else float(np.sqrt(np.trace(cov)))
        damp = math.exp(-K * t)
        rhs = damp * float(S[:, -1].mean())
        rhs_se = damp * float(S[:, -1].std(ddof=1) / math.sqrt(len(S)))
        slack = k_se * math.hypot(lhs_se, rhs_se)
        rows.append({"x": x.tolist(), "t": float(t), "lhs": lhs, "lhs_se": lhs_se, "rhs": rhs, "rhs_se": rhs_se,
                     "holds": bool(lhs <= rhs + slack)})
    return rows


# -- decay profile -------------------------------------------------------------------

@dataclass
class DecayFit:
    t_grid: np.ndarray
    sup_estimates: np.ndarray
    fitted_rate: float
    fitted_smallt_exponent: float
    order: int = 1
    std_errors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, float)
        if np.any(self.t_grid <= 0) or np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t_grid must be positive and strictly increasing")

    def to_dict(self):
        return {
            "t_grid": self.t_grid.tolist(),
            "sup_estimates": np.asarray(self.sup_estimates).tolist(),
            "std_errors": None if self.std_errors is None else np.asarray(self.std_errors).tolist(),
            "fitted_rate": self.fitted_rate,
            "fitted_smallt_exponent": self.fitted_smallt_exponent,
            "order": self.order,
        }


def _decay_configs(M, x0, rng, n_configs):
    n = M.dim
    pts = [x0]
    for _ in range(n_configs - 1):
        v = M.random_tangent(rng, x0, scale=0.5)
        pts.append(M.exp(x0, v))
    pts = np.array(pts)
    dirs = [np.array([_unit(rng.standard_normal(n)) for _ in range(n_configs)]) for _ in range(3)]
    return pts, dirs


def decay_profile(f, pot, x, order, t_grid, n_samples, seed, manifold=None, n_configs=32, variant="c1",
                  large_t=1.0, small_t=0.1, steps_per_unit=STEPS_PER_UNIT, min_steps=MIN_STEPS, workers=1) -> DecayFit:
    """Size of the derivative estimates of P_t f across t.

    At each t the bound estimate is the sum over formula terms of E|term|,
    maximized over n_configs sampled (x, unit u, v, w).  The rate is the
    least-squares slope of -log(sup) over t >= large_t, the exponent that of
    -log(sup) against log t over t <= small_t; each is NaN with fewer than
    two points in its range.  Order 1 reads all t off one run.
    """
    M, x0 = _resolve(x, manifold)
    t_grid = np.asarray(sorted(t_grid), float)
    rng = np.random.default_rng([int(seed), 0xDECA])
    pts, dirs = _decay_configs(M, x0, rng, n_configs)
    C = n_configs
    per = int(n_samples)
    starts = np.repeat(pts, per, axis=0)
    pdirs = [np.repeat(d, per, axis=0) for d in dirs]
    sups, ses = [], []
    if order == 1:
        grid = np.union1d(time_grid(t_grid[-1], (), steps_per_unit, min_steps), t_grid)
        idx = {int(np.argmin(np.abs(grid - t))) for t in t_grid}

        class _C:
            def __init__(self, P, ids):
                self.ids = ids
                self.vals = {}

            def step(self, st):
                if st.i in idx:
                    g = frame_derivs(M, st.x, st.E, f, 1)[1]
                    u = pdirs[0][self.ids]
                    self.vals[st.i] = np.abs(np.einsum("pa,pau,pu->p", g, st.W, u))

            def result(self):
                return np.stack([self.vals[i] for i in sorted(self.vals)], axis=1)

        S = run_paths(M, pot, starts, t_grid[-1], len(grid) - 1, C * per, seed, 1, _C, grid=grid, workers=workers)
        S = S.reshape(C, per, len(t_grid))
        means = S.mean(1)
        sd = S.std(1, ddof=1) / math.sqrt(per)
        j = np.argmax(means, axis=0)
        sups = means[j, np.arange(len(t_grid))]
        ses = sd[j, np.arange(len(t_grid))]
    else:
        mode = "hess" if order == 2 else "third_" + variant
        for t in t_grid:
            S = derivative_samples(M, starts, f, pot, t, C * per, seed, mode, steps_per_unit=steps_per_unit,
                                   min_steps=min_steps, workers=workers)
            S = np.abs(_contract(S, pdirs[:order])).sum(axis=1).reshape(C, per)
            means = S.mean(1)
            j = int(np.argmax(means))
            sups.append(means[j])
            ses.append(S[j].std(ddof=1) / math.sqrt(per))
    sups = np.asarray(sups)
    ses = np.asarray(ses)
    rate = _slope(t_grid, sups, t_grid >= large_t, log_t=False)
    expo = _slope(t_grid, sups, t_grid <= small_t, log_t=True) if order >= 2 else float("nan")
    return DecayFit(t_grid, sups, rate, expo, order, ses)


def _slope(t, y, mask, log_t):
    if mask.sum() < 2:
        return float("nan")
    xx = np.log(t[mask]) if log_t else t[mask]
    slope = np.polyfit(xx, np.log(y[mask]), 1)[0]
    return float(-slope)


# -- Stein equation ------------------------------------------------------------------------

def contraction_rate(M: Manifold, pot: PotentialSpec, K=None):
    """Exponential rate used for the tail of the time integral: K when
    positive, otherwise the spectral gap of a compact model space with zero
    potential.  Raises NotContractive when neither applies."""
    K = pot.K if K is None else K
    if K is not None and K > 0:
        return float(K)
    if M.compact and pot.is_zero:
        if M.kind == "circle":
            return 0.5 * (2 * np.pi / M.length) ** 2
        if M.kind == "sphere":
            return 0.5 * M.dim * M.kappa
    raise NotContractive("Bakry-Emery bound K <= 0 on a non-compact manifold")


def invariant_mean(M, pot, h, n_samples, seed, burn_in=0.1, T_long=None, dt=0.01, x_start=None):
    """mu_psi(h) with standard error: i.i.d. draws when the potential has a
    sampler, else the ergodic average of one long trajectory after burn-in
    (standard error from 20 batch means).  Also returns the sample points."""
    if pot.sampler is not None:
        rng = path_rng(seed, 2 ** 40)
        ys = np.asarray(pot.sampler(rng, n_samples), float)
        vals = np.asarray(h.value(ys), float)
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))), ys
    rate = contraction_rate(M, pot)
    T_long = T_long if T_long is not None else max(200.0, 100.0 / rate)
    steps = int(math.ceil(T_long / dt))
    x0 = M.base_point() if x_start is None and hasattr(M, "base_point") else (
        np.zeros(M.ambient_dim) if x_start is None else np.asarray(x_start, float))
    keep_from = int(burn_in * steps)

    class _C:
        def __init__(self, P, ids):
            self.pts = []

        def step(self, st):
            if st.i >= keep_from:
                self.pts.append(st.x[0].copy())

        def result(self):
            return np.array(self.pts)[None]

    pts = run_paths(M, pot, x0, T_long, steps, 1, seed + 2 ** 20, 0, _C)[0]
    vals = np.asarray(h.value(pts), float)
    batches = np.array_split(vals, 20)
    bm = np.array([b.mean() for b in batches])
    return float(vals.mean()), float(bm.std(ddof=1) / math.sqrt(len(bm))), pts


def _trapezoid_weights(nodes):
    w = np.zeros(len(nodes))
    dt = np.diff(nodes)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def solve_stein(x, h: ScalarField, pot: PotentialSpec, K=None, T_max=20.0, n_samples=4000, seed=0, manifold=None,
                t_min=1e-3, ratio=1.3, h_max=1e-2, n_mu=None, lipschitz=None, want_gradient=True):
    """f(x) = -int_0^inf (P_t h(x) - mu(h)) dt and df_x, truncated at T_max.

    Quadrature: trapezoid rule on {0} + geometric grid t_min * ratio^k up to
    T_max, with paths refined to steps <= h_max between nodes; one set of
    paths serves all nodes.  The tail beyond T_max is bounded by
    Lip(h) W_1(delta_x, mu) exp(-rate T_max) / rate.
    """
    M, x0 = _resolve(x, manifold)
    n = M.dim
    if _is_constant(h):
        return {"f": 0.0, "df": np.zeros(n), "tail_bound": 0.0, "mu_h": float(h.value(x0)), "mu_se": 0.0,
                "f_se": 0.0, "df_se": np.zeros(n), "f_quad_error": 0.0, "df_quad_error": np.zeros(n),
                "T_max": float(T_max)}
    rate = contraction_rate(M, pot, K)
    nodes = [0.0]
    tk = t_min
    while tk < T_max:
        nodes.append(tk)
        tk *= ratio
    nodes.append(float(T_max))
    nodes = np.array(nodes)
    grid = [0.0]
    for a, b in zip(nodes[:-1], nodes[1:]):
        m = max(1, int(math.ceil((b - a) / h_max - 1e-9)))
        grid.extend(np.linspace(a, b, m + 1)[1:])
    grid = np.array(grid)
    node_idx = np.searchsorted(grid, nodes - 1e-12)
    nodeset = set(int(i) for i in node_idx)

    class _C:
        def __init__(self, P, ids):
            self.vals = []
            self.grads = []

        def step(self, st):
            if st.i in nodeset:
                d = frame_derivs(M, st.x, st.E, h, 1 if want_gradient else 0)
                self.vals.append(np.asarray(d[0], float))
                if want_gradient:
                    self.grads.append(np.einsum("pa,pau->pu", d[1], st.W))

        def result(self):
            v = np.stack(self.vals, axis=1)[..., None]
            if want_gradient:
                return np.concatenate([v, np.stack(self.grads, axis=1)], axis=2)
            return v

    S = run_paths(M, pot, x0, T_max, len(grid) - 1, n_samples, seed, 1 if want_gradient else 0, _C, grid=grid)
    mu, mu_se, ys = invariant_mean(M, pot, h, n_mu or max(n_samples, 200000), seed)
    wts = _trapezoid_weights(nodes)
    # every other node: the difference estimates the trapezoid error (Richardson)
    coarse = np.unique(np.r_[np.arange(0, len(nodes), 2), len(nodes) - 1])
    wts_c = np.zeros(len(nodes))
    wts_c[coarse] = _trapezoid_weights(nodes[coarse])
    f_paths = -np.einsum("k,pk->p", wts, S[:, :, 0] - mu)
    f_val = float(f_paths.mean())
    f_se = float(math.hypot(f_paths.std(ddof=1) / math.sqrt(len(f_paths)), T_max * mu_se))
    f_coarse = float(-np.einsum("k,pk->p", wts_c, S[:, :, 0] - mu).mean())
    out = {"f": f_val, "f_se": f_se, "f_quad_error": abs(f_val - f_coarse) / 3.0, "mu_h": mu, "mu_se": mu_se,
           "T_max": float(T_max), "rate": rate, "n_nodes": int(len(nodes))}
    if want_gradient:
        g_paths = -np.einsum("k,pka->pa", wts, S[:, :, 1:])
        out["df"] = g_paths.mean(0)
        out["df_se"] = g_paths.std(0, ddof=1) / math.sqrt(len(g_paths))
        g_coarse = -np.einsum("k,pka->pa", wts_c, S[:, :, 1:]).mean(0)
        out["df_quad_error"] = np.abs(out["df"] - g_coarse) / 3.0
    if lipschitz is None:
        Eys = M.frame(ys)
        lipschitz = float(np.max(np.linalg.norm(frame_derivs(M, ys, Eys, h, 1)[1], axis=-1)))
    w1 = float(np.mean(M.dist(np.broadcast_to(x0, ys.shape), ys)))
    out["lipschitz"] = lipschitz
    out["wasserstein_start"] = w1
    out["tail_bound"] = float(lipschitz * w1 * math.exp(-rate * T_max) / rate)
    return out
