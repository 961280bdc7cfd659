"""Pair statistics and explicit distance bounds.

A pair sampler draws base points W and, for each, m conditional replicas W'.
From delta = log_W(W') (frame coordinates at W) we form

    R1(W) = mean_j delta_j / lam - grad psi(W)
    R2(W) = (mean_j delta_j delta_j^T / lam - I) / 2

and combine E|R1|, E|R2| (Euclidean / Frobenius norms) with moments of
|delta| into the Wasserstein bound

    (1/K) E|R1| + c1 E|R2| + (c2/lam) E[|d|^2 (|d| ^ 1)]
        + (c3/(6 lam)) E[|d|^3 (|log|d|| v 1) e^{-K (|d| v 1)^2}]

and its headline form C (E|R1| + E|R2| + E[|d|^3 (|log|d|| v 1)]/lam).
Conditional expectations are replaced by averages over the m replicas, which
biases E|R1| and E|R2| upward by O(m^{-1/2}).
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.optimize
import scipy.stats

from .errors import (
    DimensionUnsupported,
    ExcessiveCutLocus,
    MissingConstants,
    NotContractive,
    UnboundedCurvature,
    Unsupported,
)
from .fields import PotentialSpec, frame_derivs
from .manifolds import ChartDiffusion, Circle, Euclidean, Manifold, Sphere

log = logging.getLogger(__name__)

DISCARD_WARN = 1e-3
DISCARD_MAX = 0.05
LP_MAX_POINTS = 512


# -- samplers --------------------------------------------------------------------

@dataclass
class PairSampler:
    """base_sampler(rng, n) -> (n, d) points; conditional_sampler(rng, W, m)
    -> (n, m, d) replicas given the rows of W."""

    manifold: Manifold
    base_sampler: Callable
    conditional_sampler: Callable
    lam: float
    description: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def check_marginals(self, n=5000, seed=0, level=1e-3, summary=None):
        """Two-sample Kolmogorov-Smirnov test of a 1-D summary of W and W'."""
        rng = np.random.default_rng(seed)
        W = self.base_sampler(rng, n)
        Wp = self.conditional_sampler(rng, W, 1)[:, 0]
        fn = summary or (lambda x: x[..., -1])
        res = scipy.stats.ks_2samp(fn(W), fn(Wp))
        return {"statistic": float(res.statistic), "p_value": float(res.pvalue), "ok": bool(res.pvalue >= level)}


def circle_metropolis_sampler(M: Circle, lam, target_density=None, grid_size=4096) -> PairSampler:
    """Base W from the target (uniform by default); W' is one Metropolis step
    with a wrapped N(0, lam) proposal, so W and W' share the target law.

    target_density is an unnormalized density on [0, L); base draws then use
    its inverse CDF on a fine grid.
    """
    L = M.length
    if target_density is None:
        def base(rng, n):
            return rng.uniform(0.0, L, size=(n, 1))

        def accept_ratio(x, y):
            return np.ones(np.broadcast_shapes(x.shape, y.shape))
    else:
        g = (np.arange(grid_size) + 0.5) * (L / grid_size)
        dens = np.asarray(target_density(g), float)
        cdf = np.concatenate([[0.0], np.cumsum(dens)])
        cdf /= cdf[-1]
        edges = np.arange(grid_size + 1) * (L / grid_size)

        def base(rng, n):
            return np.interp(rng.uniform(size=(n, 1)), cdf, edges)

        def accept_ratio(x, y):
            return np.minimum(1.0, target_density(y) / target_density(x))

    sd = math.sqrt(lam)

    def cond(rng, W, m):
        x = np.repeat(W[:, None, :], m, axis=1)
        y = np.mod(x + sd * rng.standard_normal(x.shape), L)
        u = rng.uniform(size=x.shape[:2])
        acc = u < accept_ratio(x[..., 0], y[..., 0])
        return np.where(acc[..., None], y, x)

    return PairSampler(M, base, cond, lam, "circle metropolis", {"target": "uniform" if target_density is None else "custom"})


def gaussian_perturbation_sampler(M: Euclidean, pot: PotentialSpec, lam, drift=True, base_sampler=None) -> PairSampler:
    """W' = W + lam grad psi(W) + sqrt(lam) xi on euclidean space."""
    base = base_sampler or pot.sampler
    if base is None:
        raise ValueError("need a base sampler")
    sd = math.sqrt(lam)

    def cond(rng, W, m):
        shift = lam * pot.grad_psi(W) if drift else 0.0
        x = W[:, None, :] + (shift[:, None, :] if drift else 0.0)
        return x + sd * rng.standard_normal((W.shape[0], m, W.shape[1]))

    return PairSampler(M, base, cond, lam, "gaussian perturbation", {"drift": drift})


def geodesic_step_sampler(M: Manifold, pot: PotentialSpec, lam, base_sampler=None) -> PairSampler:
    """W' = exp_W(lam grad psi(W) + sqrt(lam) xi), xi standard normal in T_W M."""
    base = base_sampler or pot.sampler
    if base is None:
        raise ValueError("need a base sampler")
    sd = math.sqrt(lam)

    def cond(rng, W, m):
        n, d = W.shape
        E = M.frame(W)
        Z = M.grad_frame(W, E, pot.grad_psi(W)) if not pot.is_zero else np.zeros((n, M.dim))
        xi = rng.standard_normal((n, m, M.dim))
        c = lam * Z[:, None, :] + sd * xi
        v = np.einsum("nda,nma->nmd", E, c)
        x = np.repeat(W[:, None, :], m, axis=1)
        return M.exp(x.reshape(-1, d), v.reshape(-1, d)).reshape(n, m, d)

    return PairSampler(M, base, cond, lam, "geodesic step")


def antipodal_sampler(M: Sphere, lam, p_antipode=0.2) -> PairSampler:
    """Sphere pairs that jump to the antipode with probability p_antipode
    (a deliberate violation of the no-cut-locus assumption)."""
    inner = geodesic_step_sampler(M, _zero_pot(M), lam, base_sampler=lambda rng, n: M.random_point(rng, size=n))

    def cond(rng, W, m):
        y = inner.conditional_sampler(rng, W, m)
        flip = rng.uniform(size=y.shape[:2]) < p_antipode
        return np.where(flip[..., None], -W[:, None, :], y)

    return PairSampler(M, inner.base_sampler, cond, lam, "antipodal-prone", {"p_antipode": p_antipode})


def _zero_pot(M):
    from .fields import zero_potential

    return zero_potential(M)


# -- batches ---------------------------------------------------------------------

@dataclass
class PairBatch:
    manifold: Manifold
    W: np.ndarray            # (n, d)
    W_prime: np.ndarray      # (n, m, d)
    delta: np.ndarray        # (n, m, dim) frame coordinates at W
    frames: np.ndarray       # (n, d, dim)
    valid: np.ndarray        # (n, m) False for cut-locus discards
    seed: Optional[int] = None
    lam: Optional[float] = None

    @property
    def n_base(self):
        return self.W.shape[0]

    @property
    def m_cond(self):
        return self.W_prime.shape[1]

    @property
    def cut_locus_discards(self):
        return int((~self.valid).sum())

    @property
    def n_total(self):
        return int(self.valid.size)

    @property
    def n_used(self):
        return int(self.valid.sum())

    @property
    def discard_fraction(self):
        return self.cut_locus_discards / self.n_total

    @property
    def distances(self):
        return np.linalg.norm(self.delta, axis=-1)

    def _base_mask(self):
        return self.valid.any(axis=1)


def collect_pairs(sampler: PairSampler, n_base, m_cond, seed, chunk=4096) -> PairBatch:
    """Draw n_base base points with m_cond replicas each and map the pairs
    through log_W.  Pairs on the cut locus are discarded and counted."""
    if n_base < 100:
        raise ValueError("n_base must be at least 100")
    if m_cond < 1:
        raise ValueError("m_cond must be at least 1")
    M = sampler.manifold
    rng = np.random.default_rng(seed)
    W = np.asarray(sampler.base_sampler(rng, n_base), float)
    parts = []
    for s in range(0, n_base, chunk):
        parts.append(np.asarray(sampler.conditional_sampler(rng, W[s:s + chunk], m_cond), float))
    Wp = np.concatenate(parts, 0)
    n, m, d = Wp.shape
    x = np.repeat(W[:, None, :], m, axis=1).reshape(-1, d)
    y = Wp.reshape(-1, d)
    cut = np.asarray(M.is_cut(x, y), bool).reshape(n, m)
    y_safe = np.where(cut.reshape(-1, 1), x, y)
    v = M.log(x, y_safe)
    E = M.frame(W)
    Ex = np.repeat(E[:, None], m, axis=1).reshape((-1,) + E.shape[1:])
    delta = M.to_frame(x, Ex, v).reshape(n, m, M.dim)
    delta[cut] = 0.0
    batch = PairBatch(M, W, Wp, delta, E, ~cut, seed, sampler.lam)
    frac = batch.discard_fraction
    if frac > DISCARD_MAX:
        raise ExcessiveCutLocus(f"{frac:.3%} of pairs lie on the cut locus")
    if frac > DISCARD_WARN:
        warnings.warn(f"{frac:.3%} of pairs discarded on the cut locus", RuntimeWarning)
    return batch


# -- R1, R2 and moments ---------------------------------------------------------------

@dataclass
class ScalarEstimate:
    value: float
    std_error: float

    def to_dict(self):
        return {"value": self.value, "std_error": self.std_error}


def _mean_se(x):
    x = np.asarray(x, float)
    if len(x) < 2:
        return ScalarEstimate(float(x.mean()), float("nan"))
    return ScalarEstimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))))


def _replica_means(batch: PairBatch, values):
    """Per-base averages of `values` (n, m, ...) over valid replicas."""
    v = batch.valid.reshape(batch.valid.shape + (1,) * (values.ndim - 2))
    cnt = batch.valid.sum(1).reshape((-1,) + (1,) * (values.ndim - 2))
    return np.where(v, values, 0.0).sum(1) / np.maximum(cnt, 1)


def _grad_psi_frame(batch: PairBatch, pot: PotentialSpec):
    if pot is None or pot.is_zero:
        return np.zeros((batch.n_base, batch.manifold.dim))
    return frame_derivs(batch.manifold, batch.W, batch.frames, pot.field, 1)[1]


@dataclass
class RemainderEstimate:
    per_base: np.ndarray
    norms: np.ndarray
    mean_norm: ScalarEstimate
    note: str

    def to_dict(self):
        return {**self.mean_norm.to_dict(), "note": self.note}


def estimate_R1(batch: PairBatch, pot: PotentialSpec, lam) -> RemainderEstimate:
    keep = batch._base_mask()
    R1 = _replica_means(batch, batch.delta) / lam - _grad_psi_frame(batch, pot)
    R1 = R1[keep]
    norms = np.linalg.norm(R1, axis=-1)
    note = f"conditional mean from {batch.m_cond} replicas; finite-m bias O(m^-1/2)"
    return RemainderEstimate(R1, norms, _mean_se(norms), note)


def estimate_R2(batch: PairBatch, lam) -> RemainderEstimate:
    keep = batch._base_mask()
    n = batch.manifold.dim
    outer = np.einsum("nma,nmb->nmab", batch.delta, batch.delta)
    R2 = (_replica_means(batch, outer) / lam - np.eye(n)) / 2.0
    R2 = R2[keep]
    norms = np.sqrt(np.sum(R2 ** 2, axis=(-1, -2)))
    note = f"Frobenius norm; conditional second moment from {batch.m_cond} replicas"
    return RemainderEstimate(R2, norms, _mean_se(norms), note)


def _log_weight(d):
    with np.errstate(divide="ignore"):
        return np.maximum(np.abs(np.log(np.where(d > 0, d, 1.0))), 1.0)


def delta_moments(batch: PairBatch, lam, K=None):
    """Per-base averaged moments of |delta| divided by lam."""
    keep = batch._base_mask()
    d = batch.distances
    out = {
        "third_log": _replica_means(batch, d ** 3 * _log_weight(d))[keep] / lam,
        "second_min": _replica_means(batch, d ** 2 * np.minimum(d, 1.0))[keep] / lam,
        "third": _replica_means(batch, d ** 3)[keep] / lam,
    }
    if K is not None:
        out["third_log_damped"] = _replica_means(batch, d ** 3 * _log_weight(d) * np.exp(-K * np.maximum(d, 1.0) ** 2))[keep] / lam
    return {k: _mean_se(v) for k, v in out.items()}


# -- constants ----------------------------------------------------------------------

def integral_inv_sqrt(K):
    """int_0^inf e^{-K t} / sqrt(1 ^ t) dt for K > 0."""
    if not K > 0:
        raise NotContractive("the time integral diverges for K <= 0")
    return math.sqrt(math.pi / K) * math.erf(math.sqrt(K)) + math.exp(-K) / K


@dataclass
class CurvatureNorms:
    """Sup norms (operator norms) of R, nabla R, T and nabla T."""

    R: float
    nabla_R: float
    T: float
    nabla_T: float
    source: str = "user"


def curvature_norms(M: Manifold, pot: PotentialSpec) -> CurvatureNorms:
    """Closed-form sup norms on the model spaces for the bundled potentials."""
    if isinstance(M, ChartDiffusion):
        raise UnboundedCurvature("chart manifolds need user-supplied curvature norms")
    rho_R = abs(M.kappa) if M.kind in ("sphere", "hyperbolic3") else 0.0
    if pot.is_zero:
        return CurvatureNorms(rho_R, 0.0, 0.0, 0.0, "closed form")
    if pot.name == "gaussian" and M.kind == "euclidean":
        return CurvatureNorms(0.0, 0.0, 0.0, 0.0, "closed form")
    if pot.name == "height" and isinstance(M, Sphere):
        # |grad psi| <= beta, Hess psi = -kappa psi g with |psi| <= beta R
        beta, kap = abs(pot.params["beta"]), M.kappa
        return CurvatureNorms(rho_R, 0.0, 4 * kap * beta, 4 * kap ** 2 * beta * M.radius, "closed form")
    raise UnboundedCurvature(f"no curvature norms for potential {pot.name!r} on {M.kind}")


@dataclass
class SteinConstants:
    kind: str                 # "curvature" or "spectral"
    rate: float               # K, or the spectral gap
    grad: float               # coefficient of E|R1| (bound on |grad f|)
    c1: float
    c2: float
    c3: float
    C: float                  # headline constant for the Wasserstein bound
    c4: Optional[float] = None
    C_c2: Optional[float] = None   # headline constant for the C2-class distance
    trace: list = field(default_factory=list)

    def scaled(self, s):
        keys = ("grad", "c1", "c2", "c3", "C", "c4", "C_c2")
        kw = {k: (None if getattr(self, k) is None else s * getattr(self, k)) for k in keys}
        return SteinConstants(self.kind, self.rate, trace=list(self.trace), **kw)

    def to_dict(self):
        return asdict(self)


def _log_step(trace, name, value, formula):
    trace.append({"name": name, "value": float(value), "formula": formula})
    log.debug("%s = %.6g  (%s)", name, value, formula)


def small_time_constants(n, K, norms: CurvatureNorms, trace=None):
    """Constants C1, C2, C3 with

        |Hess P_t f| <= C1 e^{-Kt} / sqrt(1 ^ t) |grad f|
        |nabla^3 P_t f| <= C2 e^{-Kt} / (1 ^ t) |grad f|
        |nabla^3 P_t f| <= C3 e^{-Kt} / sqrt(1 ^ t) (|grad f| + |Hess f|)

    from second-moment bounds on W, W', W'' over the weight window [0, 1 ^ t]
    (Cauchy-Schwarz and the Ito isometry).  C3 uses the all-time bound on W'
    and requires K > 0; otherwise it is the bound valid for t <= 1.
    """
    trace = [] if trace is None else trace
    Km = max(-K, 0.0)
    a = math.exp(Km)            # sup_{s<=1} e^{-Ks}
    b = math.exp(abs(K))        # sup_{s<=t<=1} |W_t W_s^-1| e^{Kt}
    rR, rnR, rT, rnT = norms.R, norms.nabla_R, norms.T, norms.nabla_T
    sn = math.sqrt(n)
    mu1 = a ** 3 * (sn * rR + 0.5 * rT)
    A2 = a * sn * (rnR * a ** 3 + 3 * rR * a * mu1) + a * (0.5 * rnT * a ** 3 + 1.5 * rT * a * mu1 + n * rR ** 2 * a ** 3)
    C1 = a + b * a ** 3 * ((2.0 / 3.0) * sn * rR + 0.25 * rT)
    C2 = 2 * mu1 / math.sqrt(2) + 2 * a ** 2 + b * (rR * a ** 3 + (2.0 / 3.0) * A2) + math.sqrt(2) * a * b * mu1
    if K > 0:
        mu_inf = sn * rR / math.sqrt(2 * K) + rT / (2 * K)
        C3 = 2 * mu1 / math.sqrt(2) + a * (1 + mu_inf) + b * (rR * a ** 3 + (2.0 / 3.0) * A2)
    else:
        mu_inf = None
        C3 = 2 * mu1 / math.sqrt(2) + a * a * (1 + mu1) + b * (rR * a ** 3 + (2.0 / 3.0) * A2)
    _log_step(trace, "a", a, "exp(max(-K,0))")
    _log_step(trace, "b", b, "exp(|K|)")
    _log_step(trace, "mu1", mu1, "a^3 (sqrt(n) |R| + |T|/2): sqrt(E|W'_s|^2) <= mu1 sqrt(s), s <= 1")
    _log_step(trace, "A2", A2, "sqrt(E|W''_s|^2) <= A2 sqrt(s), s <= 1")
    if mu_inf is not None:
        _log_step(trace, "mu1_inf", mu_inf, "sqrt(E|W'_t|^2) <= e^{-Kt} (sqrt(n)|R|/sqrt(2K) + |T|/(2K))")
    _log_step(trace, "C1", C1, "a + b a^3 (2/3 sqrt(n)|R| + |T|/4)")
    _log_step(trace, "C2", C2, "sqrt(2) mu1 + 2 a^2 + b(|R| a^3 + 2/3 A2) + sqrt(2) a b mu1")
    _log_step(trace, "C3", C3, "sqrt(2) mu1 + a(1 + mu1_inf) + b(|R| a^3 + 2/3 A2)")
    return C1, C2, C3


def _assemble(kind, rate, grad, C1, C2, C3, trace):
    I1 = integral_inv_sqrt(rate)
    c1 = C1 * I1
    c2 = C1 * max(2.0, I1)
    c3 = C2 * (2 * math.exp(rate) + 1.0 / rate)
    c4 = C3 * I1
    C = max(grad, c1, c2 + c3 / 6.0)
    C_c2 = max(grad, c1, c4 / 6.0)
    _log_step(trace, "I1", I1, "int_0^inf e^{-rate t}/sqrt(1^t) dt")
    _log_step(trace, "grad", grad, "sup |grad f| for 1-Lipschitz h")
    _log_step(trace, "c1", c1, "C1 I1")
    _log_step(trace, "c2", c2, "C1 max(2, I1)")
    _log_step(trace, "c3", c3, "C2 (2 e^rate + 1/rate)")
    _log_step(trace, "c4", c4, "C3 I1")
    _log_step(trace, "C", C, "max(grad, c1, c2 + c3/6)")
    _log_step(trace, "C_c2", C_c2, "max(grad, c1, c4/6)")
    return SteinConstants(kind, rate, grad, c1, c2, c3, C, c4, C_c2, trace)


def derive_constants(pot: PotentialSpec, manifold: Manifold, K=None, norms: CurvatureNorms = None, eps=0.1,
                     route="auto") -> SteinConstants:
    """Explicit constants for the Stein bounds.

    route "curvature" uses Ric - 2 Hess psi >= 2K > 0 and the curvature sup
    norms; route "spectral" (compact, psi = 0, circle only) combines the
    spectral gap with the kernel-derivative constants C_m(eps) for t > eps and
    the small-time constants for t <= eps.  "auto" picks curvature when K > 0.
    """
    M = manifold
    K = pot.K if K is None else K
    if route == "auto":
        route = "curvature" if (K is not None and K > 0) else "spectral"
    if norms is None:
        norms = curvature_norms(M, pot)
    trace = []
    _log_step(trace, "|R|", norms.R, norms.source)
    _log_step(trace, "|nabla R|", norms.nabla_R, norms.source)
    _log_step(trace, "|T|", norms.T, norms.source)
    _log_step(trace, "|nabla T|", norms.nabla_T, norms.source)
    if route == "curvature":
        if K is None or not K > 0:
            raise NotContractive("curvature route needs K > 0")
        C1, C2, C3 = small_time_constants(M.dim, K, norms, trace)
        return _assemble("curvature", K, 1.0 / K, C1, C2, C3, trace)
    if route != "spectral":
        raise ValueError(f"unknown route {route!r}")
    from .spectral import decay_constant, spectral_gap

    if not getattr(M, "compact", False):
        raise NotContractive("spectral route needs a compact manifold")
    if not pot.is_zero:
        raise Unsupported("spectral route needs psi = 0")
    if not isinstance(M, Circle):
        raise Unsupported("kernel-derivative constants are implemented on the circle only")
    lam = spectral_gap(M).gap
    K0 = 0.0 if K is None else K
    C1, C2, C3 = small_time_constants(M.dim, K0, norms, trace)
    grow = math.exp((max(-K0, 0.0) + lam) * eps)
    Cm = [decay_constant(M, m, eps, lam) for m in (1, 2, 3)]
    for m, c in zip((1, 2, 3), Cm):
        _log_step(trace, f"C_{m}(eps)", c, f"vol ||d^{m} p_eps||_2 e^(gap eps)/sqrt(2 gap), eps={eps}")
    Cp0 = max(Cm[0], grow)
    Cp1 = max(Cm[1], C1 * grow)
    Cp2 = max(Cm[2], C2 * grow)
    Cp3 = max(Cm[2], C3 * grow)
    _log_step(trace, "gap", lam, "closed form")
    _log_step(trace, "C'0", Cp0, "max(C_1(eps), e^{(K- + gap) eps})")
    _log_step(trace, "C'1", Cp1, "max(C_2(eps), C1 e^{(K- + gap) eps})")
    _log_step(trace, "C'2", Cp2, "max(C_3(eps), C2 e^{(K- + gap) eps})")
    _log_step(trace, "C'3", Cp3, "max(C_3(eps), C3 e^{(K- + gap) eps})")
    return _assemble("spectral", lam, Cp0 / lam, Cp1, Cp2, Cp3, trace)


# -- reports -------------------------------------------------------------------------

@dataclass
class SteinReport:
    e_abs_r1: dict
    e_abs_r2: dict
    third_moment_term: dict
    constants: dict
    bound: float
    metric_kind: str
    n_base: int
    m_cond: int
    discard_fraction: float
    seed: Optional[int]
    lam: float
    four_term_bound: float
    moments: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def assemble_bound(batch: PairBatch, pot: PotentialSpec, constants: SteinConstants, metric_kind="wasserstein",
                   lam=None) -> SteinReport:
    """Combine pair statistics with the constants into a SteinReport."""
    if constants is None:
        raise MissingConstants("derive or supply constants first")
    lam = batch.lam if lam is None else lam
    if lam is None or not lam > 0:
        raise ValueError("lambda must be positive")
    r1 = estimate_R1(batch, pot, lam).mean_norm
    r2 = estimate_R2(batch, lam).mean_norm
    mom = delta_moments(batch, lam, constants.rate)
    if metric_kind == "wasserstein":
        third = mom["third_log"]
        C = constants.C
        four = (constants.grad * r1.value + constants.c1 * r2.value + constants.c2 * mom["second_min"].value
                + constants.c3 / 6.0 * mom["third_log_damped"].value)
    elif metric_kind == "c2_class":
        if constants.C_c2 is None or constants.c4 is None:
            raise MissingConstants("c2_class bound needs c4")
        third = mom["third"]
        C = constants.C_c2
        four = constants.grad * r1.value + constants.c1 * r2.value + constants.c4 / 6.0 * third.value
    else:
        raise ValueError(f"unknown metric kind {metric_kind!r}")
    bound = C * (third.value + r1.value + r2.value)
    cdict = {k: v for k, v in constants.to_dict().items() if k != "trace"}
    cdict["trace"] = constants.trace
    return SteinReport(
        e_abs_r1=r1.to_dict(),
        e_abs_r2=r2.to_dict(),
        third_moment_term=third.to_dict(),
        constants=cdict,
        bound=float(bound),
        metric_kind=metric_kind,
        n_base=int(batch.n_base),
        m_cond=int(batch.m_cond),
        discard_fraction=float(batch.discard_fraction),
        seed=batch.seed,
        lam=float(lam),
        four_term_bound=float(four),
        moments={k: v.to_dict() for k, v in mom.items()},
        notes=[f"conditional moments from {batch.m_cond} replicas per base point; E|R1|, E|R2| carry O(m^-1/2) bias"],
    )


# -- exact Wasserstein distances in one dimension ---------------------------------------

def _abs_linear_integral(d0, d1, length):
    """int_0^length |d0 + (d1 - d0) s / length| ds, elementwise."""
    same = d0 * d1 >= 0
    diff = np.where(same, 1.0, np.abs(d0 - d1))
    return np.where(same, length * np.abs(d0 + d1) / 2, length * (d0 ** 2 + d1 ** 2) / (2 * diff))


def _circle_segments(a, b, L):
    """CDF difference F_a - F_b on [0, L) as linear pieces (d0, d1, length)."""
    a = np.sort(np.mod(np.asarray(a, float).ravel(), L))
    if isinstance(b, str) and b == "uniform":
        pts = np.concatenate([[0.0], a, [L]])
        lens = np.diff(pts)
        Fa = np.arange(len(a) + 1) / len(a)
        d0 = Fa - pts[:-1] / L
        d1 = Fa - pts[1:] / L
        return d0, d1, lens
    b = np.sort(np.mod(np.asarray(b, float).ravel(), L))
    pts = np.unique(np.concatenate([[0.0, L], a, b]))
    mid = pts[:-1]
    Fa = np.searchsorted(a, mid, side="right") / len(a)
    Fb = np.searchsorted(b, mid, side="right") / len(b)
    d = Fa - Fb
    return d, d, np.diff(pts)


def _median_shift_objective(d0, d1, lens):
    def obj(alpha):
        return float(np.sum(_abs_linear_integral(d0 - alpha, d1 - alpha, lens)))

    lo, hi = float(min(d0.min(), d1.min())), float(max(d0.max(), d1.max()))
    if hi - lo < 1e-15:
        return obj(lo)
    # piecewise-constant case: the optimum sits at a weighted median of the values
    if np.array_equal(d0, d1):
        order = np.argsort(d0)
        cw = np.cumsum(lens[order])
        alpha = d0[order][np.searchsorted(cw, cw[-1] / 2)]
        return obj(alpha)
    res = scipy.optimize.minimize_scalar(obj, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
    return min(float(res.fun), obj(lo), obj(hi))


def exact_wasserstein_1d(samples_a, samples_b="uniform", manifold: Manifold = None, lp_fallback=False) -> float:
    """W1 between empirical laws in one dimension.

    Line: integral of |F_a - F_b| (samples_b may be samples or a CDF callable).
    Circle: min over alpha of the integral of |F_a - F_b - alpha|, the optimal
    transport cost on the circle; samples_b may be "uniform".
    Higher dimensions raise DimensionUnsupported unless lp_fallback is set and
    both sets have at most 512 points (then the empirical transport LP is
    solved; the result is flagged approximate by a warning).
    """
    M = manifold
    if M is not None and M.dim >= 2:
        if not lp_fallback:
            raise DimensionUnsupported("exact Wasserstein distance is one-dimensional")
        a = np.asarray(samples_a, float)
        b = np.asarray(samples_b, float)
        if len(a) > LP_MAX_POINTS or len(b) > LP_MAX_POINTS:
            raise DimensionUnsupported(f"LP fallback limited to {LP_MAX_POINTS} points")
        warnings.warn("approximate: empirical transport LP in dimension >= 2", RuntimeWarning)
        return transport_lp(a, b, M)
    if isinstance(M, Circle):
        d0, d1, lens = _circle_segments(samples_a, samples_b, M.length)
        return _median_shift_objective(d0, d1, lens)
    a = np.sort(np.asarray(samples_a, float).ravel())
    if callable(samples_b):
        F = samples_b
        import scipy.integrate

        lo, hi = a[0], a[-1]
        total = 0.0
        # tails: beyond the sample range the empirical CDF is 0 or 1
        total += scipy.integrate.quad(lambda x: F(x), -np.inf, lo, limit=200)[0]
        total += scipy.integrate.quad(lambda x: 1 - F(x), hi, np.inf, limit=200)[0]
        for i in range(len(a) - 1):
            if a[i + 1] > a[i]:
                c = (i + 1) / len(a)
                total += scipy.integrate.quad(lambda x: abs(c - F(x)), a[i], a[i + 1])[0]
        return float(total)
    b = np.sort(np.asarray(samples_b, float).ravel())
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    pts = np.concatenate([a, b])
    pts.sort()
    Fa = np.searchsorted(a, pts[:-1], side="right") / len(a)
    Fb = np.searchsorted(b, pts[:-1], side="right") / len(b)
    return float(np.sum(np.abs(Fa - Fb) * np.diff(pts)))


def transport_lp(a, b, manifold: Manifold = None, cost=None) -> float:
    """Optimal transport cost between two uniform empirical measures by
    linear programming (assignment when the sizes agree)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if cost is None:
        if manifold is None:
            cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        else:
            na, nb = len(a), len(b)
            cost = np.asarray(manifold.dist(np.repeat(a, nb, 0), np.tile(b, (na, 1))), float).reshape(na, nb)
    na, nb = cost.shape
    if na == nb:
        r, c = scipy.optimize.linear_sum_assignment(cost)
        return float(cost[r, c].mean())
    A_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        A_eq[i, i * nb:(i + 1) * nb] = 1
    for j in range(nb):
        A_eq[na + j, j::nb] = 1
    b_eq = np.concatenate([np.full(na, 1.0 / na), np.full(nb, 1.0 / nb)])
    res = scipy.optimize.linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(res.message)
    return float(res.fun)
