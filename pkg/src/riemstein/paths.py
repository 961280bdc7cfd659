"""Diffusion paths with generator Laplacian/2 + grad psi, stochastic parallel
frames, and the damped transports W, W', W'' in frame coordinates.

Stepping is geodesic Euler-Maruyama: x_{i+1} = exp_{x_i}(E_i dB_i + Z(x_i) h).
Frames are parallel transported along each step and re-orthonormalized.

Frame-coordinate conventions (batch axis p first):
    W[p, a, u]          component a of W_s(e_u)
    Wp[p, a, u, v]      component a of W'_s(e_u, e_v)
    Wpp[p, a, u, v, w]  component a of W''_s(e_u, e_v, e_w)

Every path owns an RNG stream derived from (seed, path index), so results do
not depend on chunking or on the number of workers.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .curvature import BundleEvaluator
from .errors import StepTooLarge
from .fields import PotentialSpec
from .manifolds import Manifold, ManifoldPoint

DEFAULT_CHUNK = 1024


def path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def brownian_increments(seed, path_ids, steps, n, h, antithetic=False):
    """Increments of shape (len(path_ids), steps, n) with N(0, h) entries;
    h may also be an array of per-step sizes.

    With `antithetic`, paths 2j and 2j+1 share a stream and the odd one is
    negated."""
    out = np.empty((len(path_ids), steps, n))
    sq = np.sqrt(np.asarray(h, float))
    if sq.ndim == 1:
        sq = sq[:, None]
    for k, pid in enumerate(path_ids):
        if antithetic:
            z = path_rng(seed, pid // 2).standard_normal((steps, n))
            out[k] = -z if pid % 2 else z
        else:
            out[k] = path_rng(seed, pid).standard_normal((steps, n))
    return out * sq


def default_steps(t, steps_per_unit=1000, min_steps=20):
    n = max(int(math.ceil(t * steps_per_unit - 1e-9)), min_steps)
    return n + (n % 2)


@dataclass
class StepState:
    i: int
    s: float
    h: float
    x: np.ndarray
    E: np.ndarray
    dB: Optional[np.ndarray]
    W: Optional[np.ndarray] = None
    Wp: Optional[np.ndarray] = None
    Wpp: Optional[np.ndarray] = None
    ric_Z: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None


class PathEngine:
    """Simulates batches of paths and carries W up to the requested order
    (0: points and frames only, 1: W, 2: W and W', 3: W, W' and W'')."""

    def __init__(self, M: Manifold, pot: PotentialSpec, t: float, steps: int, order: int = 1, grid=None):
        if steps < 1 or not t > 0:
            raise ValueError("need steps >= 1 and t > 0")
        self.M = M
        self.pot = pot
        self.t = float(t)
        self.steps = int(steps)
        self.h = self.t / self.steps
        if grid is None:
            self.times = np.linspace(0.0, self.t, self.steps + 1)
            self.hs = np.full(self.steps, self.h)
        else:
            # non-uniform time grid 0 = t_0 < ... < t_N = t
            self.times = np.asarray(grid, float)
            if len(self.times) != self.steps + 1 or self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
                raise ValueError("grid must increase from 0 with steps + 1 entries")
            self.hs = np.diff(self.times)
        self.order = int(order)
        self.ev = BundleEvaluator(M, pot)
        self.n = M.dim
        # constant-curvature models use R(X, Y) V = kappa (<Y, V> X - <X, V> Y)
        self.closed_form_R = self.ev.const_R
        self._const_ric = None
        self._C_cache = {}
        if self.ev.const_ric_Z:
            xr = M.base_point() if hasattr(M, "base_point") else np.zeros(M.ambient_dim)
            ric = self.ev.ric_Z(xr[None], M.frame(xr)[None])[0]
            self._const_ric = np.asarray(ric)

    def _const_C(self, h):
        """exp(-h Ric_Z / 2) for a constant Ric_Z: the exact propagator."""
        C = self._C_cache.get(h)
        if C is None:
            lam, V = np.linalg.eigh(0.5 * (self._const_ric + self._const_ric.T))
            C = self._C_cache[h] = (V * np.exp(-0.5 * h * lam)) @ V.T
        return C

    def _drift(self, x, E):
        if self.ev.zero_psi:
            return None
        Zc = self.ev.psi_derivs(x, E, 1)[1]
        return self.M.from_frame(E, Zc)

    def _local(self, x, E):
        """Curvature data needed at the current points."""
        ev = self.ev
        out = {}
        if self.order >= 1 and self._const_ric is None:
            out["ric_Z"] = np.asarray(ev.ric_Z(x, E))
        if self.order >= 2:
            out["R"] = ev.riemann(x, E)
            out["T"] = None if ev.zero_T else ev.T(x, E)
        if self.order >= 3:
            out["nR"] = None if ev.const_R else ev.nabla_R(x, E)
            out["nT"] = None if ev.zero_nabla_T else ev.nabla_T(x, E)
        return out

    def _move(self, x, E, dB, h):
        M = self.M
        v = M.from_frame(E, dB)
        drift = self._drift(x, E)
        if drift is not None:
            v = v + drift * h
        if math.isfinite(M.inj_radius):
            nv = M.norm(x, v)
            if np.any(nv > 0.5 * M.inj_radius):
                raise StepTooLarge(f"step length {float(nv.max()):.3g} exceeds half the injectivity radius")
        xn = M.exp(x, v)
        En = M.transport_along(x, v, E, frame=True)
        if not self.ev.flat:  # flat transport is the identity on frames
            En = M.orthonormalize(xn, En)
        return xn, En

    # ------------------------------------------------------------------
    def states(self, x0, E0, dB, replay=None) -> Iterator[StepState]:
        """Yield the state at every grid time 0..N (dB is None at the end).

        x0: (P, d); E0: (P, d, n); dB: (P, N, n).  If `replay` is given as a
        pair (points, frames) of shapes (P, N+1, d) and (P, N+1, d, n), the
        stored path is followed instead of being simulated.
        """
        M, n = self.M, self.n
        x = np.asarray(x0, float)
        E = np.asarray(E0, float)
        P = x.shape[0]
        order = self.order
        W = np.broadcast_to(np.eye(n), (P, n, n)).copy() if order >= 1 else None
        Wp = np.zeros((P, n, n, n)) if order >= 2 else None
        Wpp = np.zeros((P, n, n, n, n)) if order >= 3 else None
        loc = self._local(x, E) if order >= 1 else {}
        for i in range(self.steps + 1):
            last = i == self.steps
            dBi = None if last else dB[:, i]
            h = 0.0 if last else float(self.hs[i])
            yield StepState(i, float(self.times[i]), h, x, E, dBi, W, Wp, Wpp, loc.get("ric_Z"), loc.get("R"))
            if last:
                break
            if replay is None:
                xn, En = self._move(x, E, dBi, h)
            else:
                xn, En = replay[0][:, i + 1], replay[1][:, i + 1]
            if order >= 1:
                locn = self._local(xn, En)
                if self._const_ric is not None:
                    C = self._const_C(h)
                    prop = lambda arr: (C @ arr.reshape(P, n, -1)).reshape(arr.shape)
                else:
                    Cb = np.linalg.solve(
                        np.eye(n) + h * (loc["ric_Z"] + locn["ric_Z"]) / 8.0,
                        np.eye(n) - h * (loc["ric_Z"] + locn["ric_Z"]) / 8.0,
                    )
                    prop = lambda arr: (Cb @ arr.reshape(P, n, -1)).reshape(arr.shape)
                Fp = self._forcing1(loc, W, dBi, h) if order >= 2 else None
                Fpp = self._forcing2(loc, W, Wp, dBi, h) if order >= 3 else None
                W = prop(W)
                if order >= 2:
                    Wp = prop(Wp + Fp)
                if order >= 3:
                    Wpp = prop(Wpp + Fpp)
                loc = locn
            x, E = xn, En

    # forcing terms -------------------------------------------------------
    def _RdB(self, R, dB):
        if R.ndim == 4:
            return np.einsum("kqra,pk->pqra", R, dB)
        return np.einsum("pkqra,pk->pqra", R, dB)

    def _forcing1(self, loc, W, dB, h):
        """R(dB, W u) W v - (h/2) T(W u, W v)."""
        if self.closed_form_R:
            return self._forcing1_cc(loc, W, dB, h)
        R = np.asarray(loc["R"])
        R = R[0] if self.ev.const_R else R
        RdB = self._RdB(R, dB)
        B = np.einsum("pqra,pqu->pura", RdB, W)
        out = np.einsum("pura,prv->pauv", B, W)
        T = loc["T"]
        if T is not None:
            out = out - 0.5 * h * self._T_terms1(T, W)
        return out

    def _T_terms1(self, T, W):
        TW = np.einsum("pqra,pqu->pura", T, W)
        return np.einsum("pura,prv->pauv", TW, W)

    def _T_terms2(self, loc, W, Wp):
        T = loc.get("T")
        TWp = np.einsum("pqra,pquv->puvra", T, Wp)
        drift = np.einsum("puvra,prw->pauvw", TWp, W)
        TW = np.einsum("pqra,pqv->pvra", T, W)
        drift = drift + np.einsum("pvra,pruw->pauvw", TW, Wp)
        drift = drift + np.einsum("pura,prvw->pauvw", TW, Wp)
        nT = loc.get("nT")
        if nT is not None:
            t5 = np.einsum("piqra,piu->puqra", nT, W)
            t5 = np.einsum("puqra,pqv->puvra", t5, W)
            drift = drift + np.einsum("puvra,prw->pauvw", t5, W)
        return drift

    # constant curvature: R(X, Y) V = kappa (<Y, V> X - <X, V> Y)
    def _forcing1_cc(self, loc, W, dB, h):
        P, n = W.shape[0], self.n
        out = np.zeros((P, n, n, n))
        k = 0.0 if self.ev.flat else self.M.kappa
        if k != 0.0:
            G = np.einsum("pau,pav->puv", W, W)
            beta = np.einsum("pa,pau->pu", dB, W)
            out = k * (G[:, None, :, :] * dB[:, :, None, None] - W[:, :, :, None] * beta[:, None, None, :])
        T = loc["T"]
        if T is not None:
            out = out - 0.5 * h * self._T_terms1(T, W)
        return out

    def _forcing2_cc(self, loc, W, Wp, dB, h):
        P, n = W.shape[0], self.n
        out = np.zeros((P, n, n, n, n))
        k = 0.0 if self.ev.flat else self.M.kappa
        if k != 0.0:
            G = np.einsum("pau,pav->puv", W, W)
            beta = np.einsum("pa,pau->pu", dB, W)
            H = np.einsum("pauv,paw->puvw", Wp, W)  # <W'(u,v), W w>
            gam = np.einsum("pa,pauv->puv", dB, Wp)  # <dB, W'(u,v)>
            dBx = dB[:, :, None, None, None]
            # R(dB, W'(u,v)) W w
            out = H[:, None] * dBx - Wp[:, :, :, :, None] * beta[:, None, None, None, :]
            # R(dB, W v) W'(u, w)
            out = out + np.einsum("puwv->puvw", H)[:, None] * dBx - np.einsum("pav,puw->pauvw", W, gam)
            # R(dB, W u) W'(v, w)
            out = out + np.einsum("pvwu->puvw", H)[:, None] * dBx - np.einsum("pau,pvw->pauvw", W, gam)
            out = k * out
            # + h sum_k R(e_k, W u) R(e_k, W v) W w
            tr = (2 - n) * np.einsum("pvw,pau->pauvw", G, W) - np.einsum("puv,paw->pauvw", G, W)
            out = out + h * k * k * tr
        if loc.get("T") is not None:
            out = out - 0.5 * h * self._T_terms2(loc, W, Wp)
        return out

    def _forcing2(self, loc, W, Wp, dB, h):
        if self.closed_form_R:
            return self._forcing2_cc(loc, W, Wp, dB, h)
        R = np.asarray(loc["R"])
        Rc = R[0] if self.ev.const_R else R
        RdB = self._RdB(Rc, dB)
        B = np.einsum("pqra,pqu->pura", RdB, W)
        A = np.einsum("pqra,pquv->puvra", RdB, Wp)
        out = np.einsum("puvra,prw->pauvw", A, W)
        out = out + np.einsum("pvra,pruw->pauvw", B, Wp)
        out = out + np.einsum("pura,prvw->pauvw", B, Wp)
        nR = loc.get("nR")
        if nR is not None:
            t1 = np.einsum("pikqra,pk->piqra", nR, dB)
            t1 = np.einsum("piqra,piu->puqra", t1, W)
            t1 = np.einsum("puqra,pqv->puvra", t1, W)
            out = out + np.einsum("puvra,prw->pauvw", t1, W)
        if loc.get("T") is not None:
            out = out - 0.5 * h * self._T_terms2(loc, W, Wp)
        # + h sum_k R(e_k, W u) R(e_k, W v) W w
        if Rc.ndim == 4:
            RW = np.einsum("kqrb,pqv->pkvrb", Rc, W)
            Y = np.einsum("pkvrb,prw->pkvwb", RW, W)
            RWu = np.einsum("ksba,psu->pkuba", Rc, W)
        else:
            RW = np.einsum("pkqrb,pqv->pkvrb", Rc, W)
            Y = np.einsum("pkvrb,prw->pkvwb", RW, W)
            RWu = np.einsum("pksba,psu->pkuba", Rc, W)
        out = out + h * np.einsum("pkuba,pkvwb->pauvw", RWu, Y)
        return out


@dataclass
class DiffusionPath:
    grid: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    dB: np.ndarray
    seed: int
    path_ids: np.ndarray
    manifold: Manifold

    @property
    def h(self):
        return float(self.grid[1] - self.grid[0])


@dataclass
class TransportState:
    W: np.ndarray
    Wp: Optional[np.ndarray] = None
    Wpp: Optional[np.ndarray] = None


def _start(M: Manifold, x0):
    if isinstance(x0, ManifoldPoint):
        x0 = x0.coords
    x0 = np.asarray(x0, float)
    if M.kind in ("sphere", "hyperbolic3", "circle"):
        x0 = M.project_point(x0)
    return x0


def simulate_path(x0, pot: PotentialSpec, t, steps, seed, manifold: Manifold = None, n_paths=1, path_ids=None, antithetic=False):
    """Simulate and store whole paths (points, frames and increments)."""
    M = manifold if manifold is not None else x0.manifold
    x0 = _start(M, x0)
    ids = np.arange(n_paths) if path_ids is None else np.asarray(path_ids)
    P = len(ids)
    eng = PathEngine(M, pot, t, steps, order=0)
    dB = brownian_increments(seed, ids, steps, M.dim, eng.h, antithetic)
    xs = np.broadcast_to(x0, (P, M.ambient_dim)).copy()
    Es = M.frame(xs)
    pts = np.empty((P, steps + 1, M.ambient_dim))
    frs = np.empty((P, steps + 1, M.ambient_dim, M.dim))
    for st in eng.states(xs, Es, dB):
        pts[:, st.i] = st.x
        frs[:, st.i] = st.E
    return DiffusionPath(np.linspace(0, t, steps + 1), pts, frs, dB, int(seed), ids, M)


# -- debugging dump ----------------------------------------------------------
# 32-byte little-endian header: magic b"RSPATHS\0", then uint32 version, n
# (coordinates per point), N (steps), count (paths), and 8 reserved bytes;
# followed by float64 points laid out [count, N + 1, n].

DUMP_MAGIC = b"RSPATHS\0"
DUMP_VERSION = 1
_HEADER = struct.Struct("<8sIIII8x")


def write_path_dump(path: DiffusionPath, filename):
    pts = np.ascontiguousarray(path.points, dtype="<f8")
    count, n1, n = pts.shape
    with open(filename, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, n, n1 - 1, count))
        fh.write(pts.tobytes())


def read_path_dump(filename):
    with open(filename, "rb") as fh:
        magic, version, n, N, count = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != DUMP_MAGIC or version != DUMP_VERSION:
            raise ValueError("not a path dump")
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(count, N + 1, n)


def _transport(path: DiffusionPath, pot, order) -> TransportState:
    M = path.manifold
    steps = path.dB.shape[1]
    eng = PathEngine(M, pot, path.grid[-1], steps, order=order)
    P = path.points.shape[0]
    n = M.dim
    W = np.empty((P, steps + 1, n, n))
    Wp = np.empty((P, steps + 1, n, n, n)) if order >= 2 else None
    Wpp = np.empty((P, steps + 1, n, n, n, n)) if order >= 3 else None
    for st in eng.states(path.points[:, 0], path.frames[:, 0], path.dB, replay=(path.points, path.frames)):
        W[:, st.i] = st.W
        if order >= 2:
            Wp[:, st.i] = st.Wp
        if order >= 3:
            Wpp[:, st.i] = st.Wpp
    return TransportState(W, Wp, Wpp)


def transport_W(path: DiffusionPath, pot) -> TransportState:
    return _transport(path, pot, 1)


def transport_W_prime(path: DiffusionPath, pot) -> TransportState:
    return _transport(path, pot, 2)


def transport_W_doubleprime(path: DiffusionPath, pot) -> TransportState:
    return _transport(path, pot, 3)


@dataclass(frozen=True)
class CameronMartinWeights:
    """Piecewise-linear scalar weights k and l on [0, t]."""

    t: float
    t1: float
    t_end: float
    profile: str

    def k(self, s):
        s = np.asarray(s, float)
        return np.clip((self.t1 - s) / self.t1, 0.0, 1.0)

    def k_dot(self, s):
        s = np.asarray(s, float)
        return np.where(s < self.t1 - 1e-12, -1.0 / self.t1, 0.0)

    def l(self, s):
        s = np.asarray(s, float)
        if self.profile != "third_deriv":
            return np.ones_like(s)
        span = self.t_end - self.t1
        return np.clip((self.t_end - s) / span, 0.0, 1.0)

    def l_dot(self, s):
        s = np.asarray(s, float)
        if self.profile != "third_deriv":
            return np.zeros_like(s)
        span = self.t_end - self.t1
        return np.where((s >= self.t1 - 1e-12) & (s < self.t_end - 1e-12), -1.0 / span, 0.0)

    def energy(self):
        e_k = 1.0 / self.t1
        e_l = 1.0 / (self.t_end - self.t1) if self.profile == "third_deriv" else 0.0
        return e_k, e_l


def cameron_martin(t, profile="second_deriv") -> CameronMartinWeights:
    if not t > 0:
        raise ValueError("t must be positive")
    tau = min(1.0, float(t))
    if profile == "second_deriv":
        return CameronMartinWeights(float(t), tau, tau, profile)
    if profile == "third_deriv":
        return CameronMartinWeights(float(t), tau / 2.0, tau, profile)
    raise ValueError(f"unknown profile {profile!r}")


# -- chunked runner ---------------------------------------------------------

def run_paths(
    M: Manifold,
    pot: PotentialSpec,
    x0,
    t: float,
    steps: int,
    n_paths: int,
    seed: int,
    order: int,
    make_consumer: Callable,
    chunk: int = DEFAULT_CHUNK,
    workers: int = 1,
    antithetic: bool = False,
    E0=None,
    grid=None,
):
    """Simulate n_paths paths in chunks and feed every step to a consumer.

    make_consumer(P, ids) must return an object with `step(state)` and
    `result()`, the latter giving an array whose first axis indexes paths.
    x0 may be one point or an array of per-path start points (n_paths, d);
    E0 likewise.  Results are concatenated in path order, so the output does
    not depend on `chunk` or `workers`.  `grid` optionally replaces the
    uniform time grid (steps + 1 increasing times from 0 to t).
    """
    x0 = np.asarray(x0.coords if isinstance(x0, ManifoldPoint) else x0, float)
    per_path = x0.ndim == 2
    eng = PathEngine(M, pot, t, steps, order=order, grid=grid)
    starts = list(range(0, n_paths, chunk))

    def job(start):
        ids = np.arange(start, min(start + chunk, n_paths))
        P = len(ids)
        xs = x0[ids] if per_path else np.broadcast_to(x0, (P, x0.shape[-1]))
        xs = np.array(xs, dtype=float)
        if E0 is None:
            Es = M.frame(xs)
        else:
            E0a = np.asarray(E0, float)
            Es = np.array(E0a[ids] if E0a.ndim == 3 else np.broadcast_to(E0a, (P,) + E0a.shape), dtype=float)
        dB = brownian_increments(seed, ids, steps, M.dim, eng.hs, antithetic)
        cons = make_consumer(P, ids)
        for st in eng.states(xs, Es, dB):
            cons.step(st)
        return cons.result()

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    return np.concatenate(parts, axis=0)


def endpoint_consumer(fn):
    """Consumer returning fn(final state) per path."""

    class _C:
        def __init__(self, P, ids):
            self.out = None

        def step(self, st):
            if st.dB is None:
                self.out = np.asarray(fn(st))

        def result(self):
            return self.out

    return _C
