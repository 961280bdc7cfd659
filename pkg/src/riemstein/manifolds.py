"""Model manifolds with closed-form geometry plus a chart manifold induced by a
diffusion coefficient.

Points and tangent vectors are plain numpy arrays whose last axis holds the
coordinates (embedding coordinates for the sphere and the hyperboloid, chart
coordinates otherwise).  Frames are arrays of shape (..., d, n) whose columns
are orthonormal tangent vectors.  All methods broadcast over leading axes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import CutLocus, NoConvergence, SingularCoefficient

CUT_TOL = 1e-8


def _sn_over_theta(theta, sign):
    # sin(t)/t or sinh(t)/t, safe near zero
    theta = np.asarray(theta, dtype=float)
    small = np.abs(theta) < 1e-4
    t2 = theta * theta
    series = 1.0 - sign * t2 / 6.0 + t2 * t2 / 120.0
    with np.errstate(invalid="ignore", divide="ignore"):
        exact = (np.sin(theta) if sign > 0 else np.sinh(theta)) / np.where(small, 1.0, theta)
    return np.where(small, series, exact)


def _cs(theta, sign):
    return np.cos(theta) if sign > 0 else np.cosh(theta)


def _sn(theta, sign):
    return np.sin(theta) if sign > 0 else np.sinh(theta)


class Manifold:
    """Common interface.  Subclasses fill in the geometry."""

    kind: str = "abstract"
    dim: int
    ambient_dim: int
    kappa: float = 0.0
    constant_curvature: bool = True
    compact: bool = False
    inj_radius: float = math.inf

    # -- inner products -------------------------------------------------
    def inner(self, x, u, v):
        return np.sum(u * v, axis=-1)

    def norm(self, x, v):
        return np.sqrt(np.maximum(self.inner(x, v, v), 0.0))

    def to_frame(self, x, E, v):
        """Frame components of the tangent vector v."""
        return (np.swapaxes(E * self._signature()[:, None], -1, -2) @ v[..., None])[..., 0]

    def from_frame(self, E, c):
        return (E @ np.asarray(c, float)[..., None])[..., 0]

    def _signature(self):
        return np.ones(self.ambient_dim)

    def base_point(self):
        return np.zeros(self.ambient_dim)

    # -- geometry -------------------------------------------------------
    def dist(self, x, y):
        return self.norm(x, self.log(x, y))

    def transport(self, x, y, w, frame: bool = False):
        """Parallel transport of w from x to y along the minimizing geodesic."""
        return self.transport_along(x, self.log(x, y), w, frame=frame)

    def project_point(self, x):
        return np.asarray(x, dtype=float)

    def to_tangent(self, x, v):
        return np.asarray(v, dtype=float)

    def constraint_residual(self, x):
        return np.zeros(np.shape(x)[:-1])

    def orthonormalize(self, x, E):
        """Modified Gram-Schmidt of the frame columns in the tangent space at x."""
        E = self.to_tangent(x[..., None, :], np.swapaxes(E, -1, -2))
        E = np.swapaxes(E, -1, -2).copy()
        n = E.shape[-1]
        for a in range(n):
            col = E[..., :, a]
            for b in range(a):
                prev = E[..., :, b]
                col = col - self.inner(x, col, prev)[..., None] * prev
            col = col / self.norm(x, col)[..., None]
            E[..., :, a] = col
        return E

    def random_tangent(self, rng, x, scale=1.0):
        E = self.frame(x)
        c = rng.standard_normal(np.shape(x)[:-1] + (self.dim,)) * scale
        return self.from_frame(E, c)

    def metric_at(self, x):
        return np.broadcast_to(np.eye(self.dim), np.shape(x)[:-1] + (self.dim, self.dim)).copy()

    # -- covariant derivatives of scalar fields in a frame ---------------
    def grad_frame(self, x, E, DF):
        return (np.swapaxes(E, -1, -2) @ DF[..., None])[..., 0]

    def describe(self) -> dict:
        raise NotImplementedError


class Euclidean(Manifold):
    kind = "euclidean"

    def __init__(self, n: int):
        if int(n) < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = self.ambient_dim = int(n)

    def exp(self, x, v):
        return np.asarray(x, float) + v

    def log(self, x, y):
        return np.asarray(y, float) - x

    def is_cut(self, x, y, tol=CUT_TOL):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]), dtype=bool)

    def transport_along(self, x, v, w, frame=False):
        return np.array(w, dtype=float, copy=True)

    def frame(self, x):
        return np.broadcast_to(np.eye(self.dim), np.shape(x)[:-1] + (self.dim, self.dim)).copy()

    def random_point(self, rng, size=(), radius=1.0):
        shape = tuple(np.atleast_1d(size)) if size != () else ()
        return rng.standard_normal(shape + (self.dim,)) * radius

    def hess_frame(self, x, E, DF, D2F):
        return np.swapaxes(E, -1, -2) @ D2F @ E

    def third_frame(self, x, E, DF, D2F, D3F):
        return np.einsum("...da,...eb,...fc,...def->...abc", E, E, E, D3F)

    def describe(self):
        return {"kind": "euclidean", "n": self.dim}


class Circle(Manifold):
    """Circle of the given circumference; the coordinate is arc length in [0, L)."""

    kind = "circle"
    compact = True

    def __init__(self, length: float = 2 * math.pi):
        if not length > 0:
            raise ValueError("circumference must be positive")
        self.length = float(length)
        self.dim = self.ambient_dim = 1
        self.inj_radius = self.length / 2

    def project_point(self, x):
        return np.mod(np.asarray(x, float), self.length)

    def exp(self, x, v):
        return np.mod(np.asarray(x, float) + v, self.length)

    def _wrap(self, d):
        L = self.length
        return np.mod(d + L / 2, L) - L / 2

    def is_cut(self, x, y, tol=CUT_TOL):
        d = self._wrap(np.asarray(y, float) - x)[..., 0]
        return np.abs(np.abs(d) - self.length / 2) <= tol

    def log(self, x, y):
        if np.any(self.is_cut(x, y)):
            raise CutLocus("points are antipodal on the circle")
        return self._wrap(np.asarray(y, float) - x)

    def dist(self, x, y):
        # well defined on the cut locus too
        return np.abs(self._wrap(np.asarray(y, float) - x))[..., 0]

    def transport_along(self, x, v, w, frame=False):
        return np.array(w, dtype=float, copy=True)

    def frame(self, x):
        return np.ones(np.shape(x)[:-1] + (1, 1))

    def random_point(self, rng, size=()):
        shape = tuple(np.atleast_1d(size)) if size != () else ()
        return rng.uniform(0, self.length, size=shape + (1,))

    def hess_frame(self, x, E, DF, D2F):
        return np.swapaxes(E, -1, -2) @ D2F @ E

    def third_frame(self, x, E, DF, D2F, D3F):
        return np.einsum("...da,...eb,...fc,...def->...abc", E, E, E, D3F)

    @property
    def volume(self):
        return self.length

    def describe(self):
        return {"kind": "circle", "circumference": self.length}


class _ConstantCurvatureEmbedded(Manifold):
    """Shared formulas for the round sphere and the hyperboloid model.

    The model is {x : <x, x> = 1/kappa} for the bilinear form with the given
    signature; tangent spaces are the <., x>-orthogonal complements.
    """

    def _signature(self):
        return self._J

    def inner(self, x, u, v):
        return np.sum(u * v * self._J, axis=-1)

    def project_point(self, x):
        x = np.asarray(x, dtype=float)
        q = self.kappa * self.inner(x, x, x)
        return x / np.sqrt(q)[..., None]

    def to_tangent(self, x, v):
        return v - (self.kappa * self.inner(x, v, x))[..., None] * x

    def constraint_residual(self, x):
        return np.abs(self.inner(x, x, x) - 1.0 / self.kappa)

    def exp(self, x, v):
        sign = np.sign(self.kappa)
        theta = math.sqrt(abs(self.kappa)) * self.norm(x, v)
        y = _cs(theta, sign)[..., None] * x + _sn_over_theta(theta, sign)[..., None] * v
        return self.project_point(y)

    def _angle(self, x, y):
        sign = np.sign(self.kappa)
        c = self.kappa * self.inner(x, x, y)
        w = y - c[..., None] * x
        nw = self.norm(x, w)
        s = math.sqrt(abs(self.kappa)) * nw
        if sign > 0:
            theta = np.arctan2(s, c)
        else:
            theta = np.arcsinh(s)
        return theta, w

    def is_cut(self, x, y, tol=CUT_TOL):
        if self.kappa < 0:
            return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]), dtype=bool)
        theta, _ = self._angle(x, y)
        return (math.pi - theta) / math.sqrt(self.kappa) <= tol

    def log(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if np.any(self.is_cut(x, y)):
            raise CutLocus("points lie on the cut locus")
        sign = np.sign(self.kappa)
        theta, w = self._angle(x, y)
        # w/|w| * theta/sqrt|k| = w * theta/sn(theta), finite as theta -> 0
        v = w / _sn_over_theta(theta, sign)[..., None]
        return self.to_tangent(x, v)

    def dist(self, x, y):
        theta, _ = self._angle(np.asarray(x, float), np.asarray(y, float))
        return theta / math.sqrt(abs(self.kappa))

    def transport_along(self, x, v, w, frame=False):
        """Parallel transport of w along s -> exp(x, s v), s in [0, 1]."""
        sign = np.sign(self.kappa)
        sk = math.sqrt(abs(self.kappa))
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        w = np.asarray(w, float)
        nv = self.norm(x, v)
        safe = np.where(nv > 0, nv, 1.0)
        uhat = v / safe[..., None]
        theta = sk * nv
        direction = (_cs(theta, sign) - 1.0)[..., None] * uhat - (sign * sk * _sn(theta, sign))[..., None] * x
        if frame:
            coef = np.einsum("...d,...da->...a", uhat * self._J, w)
            out = w + direction[..., :, None] * coef[..., None, :]
        else:
            coef = self.inner(x, uhat, w)
            out = w + direction * coef[..., None]
        return out

    def hess_frame(self, x, E, DF, D2F):
        """Riemannian Hessian in the frame E from ambient partial derivatives."""
        base = np.swapaxes(E, -1, -2) @ D2F @ E
        radial = np.sum(DF * x, axis=-1)
        return base - self.kappa * radial[..., None, None] * np.eye(self.dim)

    def third_frame(self, x, E, DF, D2F, D3F):
        """Third covariant derivative (nabla nabla df)(e_a, e_b, e_c)."""
        k = self.kappa
        I = np.eye(self.dim)
        t3 = np.einsum("...da,...eb,...fc,...def->...abc", E, E, E, D3F)
        D2x = np.einsum("...de,...e->...d", D2F, x)
        m = np.einsum("...da,...d->...a", E, D2x)  # D2F(e_a, x)
        g = np.einsum("...da,...d->...a", E, DF)  # DF . e_a
        t3 = t3 - k * (m + g)[..., :, None, None] * I[None, :, :]
        t3 = t3 - k * I[:, :, None] * m[..., None, None, :]
        t3 = t3 - k * I[:, None, :] * m[..., None, :, None]
        return t3

    def chart_coordinates(self, x):
        """Coordinates in the conformal chart centred at the base point."""
        o = self.base_point()
        E = self.frame(o)
        c = self.kappa * self.inner(x, np.broadcast_to(o, np.shape(x)), x)
        comp = np.einsum("da,...d->...a", E * self._J[:, None], x)
        return 2.0 * comp / (1.0 + c)[..., None]

    def chart_point(self, xi):
        """Inverse of chart_coordinates: ((1 - q) o + E xi) / (1 + q), q = kappa |xi|^2 / 4."""
        o = self.base_point()
        E = self.frame(o)
        xi = np.asarray(xi, float)
        q = self.kappa * np.sum(xi * xi, axis=-1) / 4.0
        y = ((1 - q)[..., None] * o + np.einsum("da,...a->...d", E, xi)) / (1 + q)[..., None]
        return y

    def metric_at(self, x):
        """Metric of the conformal chart at x: g = ((1 + c)/2)^2 I, c = kappa <x, o>."""
        o = self.base_point()
        c = self.kappa * self.inner(x, np.broadcast_to(o, np.shape(x)), x)
        if np.any(1.0 + c <= 1e-12):
            raise SingularCoefficient("chart is singular at the antipode of the base point")
        s = ((1.0 + c) / 2.0) ** 2
        return s[..., None, None] * np.eye(self.dim)


class Sphere(_ConstantCurvatureEmbedded):
    kind = "sphere"
    compact = True

    def __init__(self, n: int = 2, kappa: float = 1.0):
        if not kappa > 0:
            raise ValueError("sphere curvature must be positive")
        if int(n) < 1:
            raise ValueError("dimension must be >= 1")
        self.dim = int(n)
        self.ambient_dim = self.dim + 1
        self.kappa = float(kappa)
        self.radius = 1.0 / math.sqrt(self.kappa)
        self.inj_radius = math.pi * self.radius
        self._J = np.ones(self.ambient_dim)

    def base_point(self):
        o = np.zeros(self.ambient_dim)
        o[-1] = self.radius
        return o

    def frame(self, x):
        """Householder frame: columns 0..n-1 of the reflection sending e_last to x/|x|."""
        x = np.asarray(x, float)
        xh = x * math.sqrt(self.kappa)
        e = np.zeros(self.ambient_dim)
        e[-1] = 1.0
        w = xh - e
        nw2 = np.sum(w * w, axis=-1)
        small = nw2 < 1e-30
        coef = np.where(small, 0.0, 2.0 / np.where(small, 1.0, nw2))
        H = np.eye(self.ambient_dim) - coef[..., None, None] * w[..., :, None] * w[..., None, :]
        return H[..., :, : self.dim]

    def random_point(self, rng, size=()):
        shape = tuple(np.atleast_1d(size)) if size != () else ()
        z = rng.standard_normal(shape + (self.ambient_dim,))
        return self.project_point(z)

    @property
    def volume(self):
        n = self.dim
        return 2 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2) * self.radius ** n

    def describe(self):
        return {"kind": "sphere", "n": self.dim, "kappa": self.kappa}


class Hyperbolic3(_ConstantCurvatureEmbedded):
    """Three-dimensional hyperbolic space as the upper sheet of a hyperboloid in
    Minkowski space with form -x0 y0 + x1 y1 + x2 y2 + x3 y3."""

    kind = "hyperbolic3"

    def __init__(self, kappa: float = -1.0, n: int = 3):
        if not kappa < 0:
            raise ValueError("hyperbolic curvature must be negative")
        if int(n) != 3:
            raise ValueError("hyperbolic3 has dimension 3")
        self.dim = 3
        self.ambient_dim = 4
        self.kappa = float(kappa)
        self.radius = 1.0 / math.sqrt(-self.kappa)
        self.inj_radius = math.inf
        self._J = np.array([-1.0, 1.0, 1.0, 1.0])

    def project_point(self, x):
        # solve the constraint for the time coordinate: exact up to rounding
        x = np.array(x, dtype=float, copy=True)
        x[..., 0] = np.sqrt(self.radius ** 2 + np.sum(x[..., 1:] ** 2, axis=-1))
        return x

    def base_point(self):
        o = np.zeros(4)
        o[0] = self.radius
        return o

    def frame(self, x):
        """Boost frame f_i = e_i + x_i/(1 + x_0) (x + e_0) for unit-normalized x."""
        x = np.asarray(x, float)
        xh = x * math.sqrt(-self.kappa)
        e0 = np.zeros(4)
        e0[0] = 1.0
        coef = xh[..., 1:] / (1.0 + xh[..., 0:1])
        F = np.zeros(x.shape[:-1] + (4, 3))
        F[..., 1:, :] = np.eye(3)
        F = F + (xh + e0)[..., :, None] * coef[..., None, :]
        return F

    def random_point(self, rng, size=(), max_radius=2.0):
        shape = tuple(np.atleast_1d(size)) if size != () else ()
        o = self.base_point()
        direction = rng.standard_normal(shape + (3,))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        r = max_radius * rng.uniform(0, 1, size=shape) ** (1 / 3)
        E = self.frame(o)
        v = np.einsum("da,...a->...d", E, direction * r[..., None])
        return self.exp(np.broadcast_to(o, v.shape), v)

    def describe(self):
        return {"kind": "hyperbolic3", "kappa": self.kappa}


SigmaField = Callable[[np.ndarray], np.ndarray]


def _call_batched(fn, x, out_tail):
    x = np.asarray(x, float)
    try:
        out = np.asarray(fn(x), dtype=float)
        if out.shape == x.shape[:-1] + out_tail:
            return out
    except Exception:
        pass
    flat = x.reshape(-1, x.shape[-1])
    out = np.stack([np.asarray(fn(p), float) for p in flat])
    return out.reshape(x.shape[:-1] + out_tail)


class ChartDiffusion(Manifold):
    """R^n (or a box in it) with the metric g = (sigma sigma^T)^{-1} induced by
    the diffusion coefficient sigma.  Curvature comes from central finite
    differences of the Christoffel symbols.

    sigma must accept arrays of shape (..., n) and return (..., n, n); scalar
    callbacks are looped over automatically.  Callbacks must be pure so they
    can be called concurrently.
    """

    kind = "chart_diffusion"
    constant_curvature = False

    def __init__(self, n: int, sigma: SigmaField, box=None, name: str = "custom", params=None):
        self.dim = self.ambient_dim = int(n)
        self.sigma_fn = sigma
        self.box = None if box is None else np.asarray(box, float)
        self.name = name
        self.params = params or {}
        self.kappa = float("nan")

    # metric -------------------------------------------------------------
    def sigma(self, x):
        s = _call_batched(self.sigma_fn, x, (self.dim, self.dim))
        det = np.linalg.det(s)
        scale = np.max(np.abs(s), axis=(-1, -2))
        if np.any(np.abs(det) <= 1e-12 * np.maximum(scale, 1e-300) ** self.dim) or not np.all(np.isfinite(s)):
            raise SingularCoefficient("sigma(x) is singular")
        return s

    def metric_at(self, x):
        s = self.sigma(x)
        return np.linalg.inv(s @ np.swapaxes(s, -1, -2))

    def inner(self, x, u, v):
        g = self.metric_at(x)
        return np.einsum("...i,...ij,...j->...", u, g, v)

    def to_frame(self, x, E, v):
        g = self.metric_at(x)
        return np.einsum("...ia,...ij,...j->...a", E, g, v)

    def frame(self, x):
        # columns of sigma are orthonormal for g = (sigma sigma^T)^{-1}
        return self.sigma(x)

    def fd_step(self, x):
        return 1e-4 * (1.0 + np.linalg.norm(np.asarray(x, float), axis=-1))

    def metric_derivative(self, x):
        """dg[..., m, i, j] = d g_ij / d x^m by central differences."""
        x = np.asarray(x, float)
        h = self.fd_step(x)
        n = self.dim
        I = np.eye(n)
        xp = x[..., None, :] + h[..., None, None] * I
        xm = x[..., None, :] - h[..., None, None] * I
        return (self.metric_at(xp) - self.metric_at(xm)) / (2 * h[..., None, None, None])

    def christoffel(self, x):
        """Gamma[..., k, i, j] = Gamma^k_ij."""
        x = np.asarray(x, float)
        s = self.sigma(x)
        ginv = s @ np.swapaxes(s, -1, -2)
        dg = self.metric_derivative(x)
        # lower[l, i, j] = 1/2 (d_j g_li + d_i g_lj - d_l g_ij)
        lower = 0.5 * (np.einsum("...jli->...lij", dg) + np.einsum("...ilj->...lij", dg) - dg)
        return np.einsum("...kl,...lij->...kij", ginv, lower)

    def christoffel_derivative(self, x):
        """dGamma[..., m, k, i, j] = d Gamma^k_ij / d x^m."""
        x = np.asarray(x, float)
        h = self.fd_step(x)
        I = np.eye(self.dim)
        xp = x[..., None, :] + h[..., None, None] * I
        xm = x[..., None, :] - h[..., None, None] * I
        return (self.christoffel(xp) - self.christoffel(xm)) / (2 * h[..., None, None, None, None])

    def riemann_coords(self, x):
        """R_ijkl = <R(d_i, d_j) d_k, d_l> in chart coordinates."""
        G = self.christoffel(x)
        dG = self.christoffel_derivative(x)
        # R^l_ijk = d_i G^l_jk - d_j G^l_ik + G^m_jk G^l_im - G^m_ik G^l_jm
        up = (
            np.einsum("...iljk->...ijkl", dG)
            - np.einsum("...jlik->...ijkl", dG)
            + np.einsum("...mjk,...lim->...ijkl", G, G)
            - np.einsum("...mik,...ljm->...ijkl", G, G)
        )
        g = self.metric_at(x)
        return np.einsum("...ijkm,...ml->...ijkl", up, g)

    def ricci_coords(self, x):
        """Ricci components from the contracted Christoffel formula."""
        G = self.christoffel(x)
        dG = self.christoffel_derivative(x)
        return (
            np.einsum("...llij->...ij", dG)
            - np.einsum("...jlil->...ij", dG)
            + np.einsum("...mij,...llm->...ij", G, G)
            - np.einsum("...mil,...ljm->...ij", G, G)
        )

    # geodesics ----------------------------------------------------------
    def _n_steps(self, x, v):
        nv = np.max(np.sqrt(np.maximum(self.inner(x, v, v), 0.0))) if np.size(v) else 0.0
        return int(max(2, math.ceil(float(nv) / 0.02)))

    def _flow(self, x, v, w=None, steps=None):
        """RK4 integration of the geodesic equation with optional transported
        vectors w of shape (..., n, k)."""
        x = np.asarray(x, float).copy()
        v = np.asarray(v, float).copy()
        steps = steps or self._n_steps(x, v)
        dt = 1.0 / steps

        def rhs(xx, vv, ww):
            G = self.christoffel(xx)
            acc = -np.einsum("...kij,...i,...j->...k", G, vv, vv)
            dw = None if ww is None else -np.einsum("...kij,...i,...jc->...kc", G, vv, ww)
            return vv, acc, dw

        for _ in range(steps):
            k1 = rhs(x, v, w)
            k2 = rhs(x + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1], None if w is None else w + 0.5 * dt * k1[2])
            k3 = rhs(x + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1], None if w is None else w + 0.5 * dt * k2[2])
            k4 = rhs(x + dt * k3[0], v + dt * k3[1], None if w is None else w + dt * k3[2])
            x = x + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            v = v + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            if w is not None:
                w = w + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        return x, v, w

    def exp(self, x, v):
        return self._flow(x, v)[0]

    def transport_along(self, x, v, w, frame=False):
        w = np.asarray(w, float)
        ww = w if frame else w[..., None]
        out = self._flow(x, v, ww)[2]
        return out if frame else out[..., 0]

    def log(self, x, y, tol=1e-12, max_iter=50):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        if x.ndim > 1 or y.ndim > 1:
            xb, yb = np.broadcast_arrays(x, y)
            flat = [self.log(a, b, tol, max_iter) for a, b in zip(xb.reshape(-1, self.dim), yb.reshape(-1, self.dim))]
            return np.stack(flat).reshape(xb.shape)
        v = y - x
        n = self.dim
        for _ in range(max_iter):
            r = self.exp(x, v) - y
            if np.linalg.norm(r) <= tol * (1.0 + np.linalg.norm(y)):
                return v
            eps = 1e-7 * (1.0 + np.linalg.norm(v))
            J = np.empty((n, n))
            for j in range(n):
                dv = np.zeros(n)
                dv[j] = eps
                J[:, j] = (self.exp(x, v + dv) - self.exp(x, v - dv)) / (2 * eps)
            try:
                v = v - np.linalg.solve(J, r)
            except np.linalg.LinAlgError as exc:
                raise NoConvergence("singular shooting Jacobian") from exc
            if not np.all(np.isfinite(v)):
                break
        raise NoConvergence("geodesic shooting did not converge")

    def is_cut(self, x, y, tol=CUT_TOL):
        warnings.warn(
            "cut locus is not computed for chart_diffusion manifolds; returning False",
            UserWarning,
            stacklevel=2,
        )
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1]), dtype=bool)

    def random_point(self, rng, size=(), radius=0.5):
        shape = tuple(np.atleast_1d(size)) if size != () else ()
        if self.box is not None:
            lo, hi = self.box[..., 0], self.box[..., 1]
            return rng.uniform(lo, hi, size=shape + (self.dim,))
        return rng.standard_normal(shape + (self.dim,)) * radius

    def hess_frame(self, x, E, DF, D2F):
        G = self.christoffel(x)
        H = D2F - np.einsum("...kij,...k->...ij", G, DF)
        return np.einsum("...ia,...ij,...jb->...ab", E, H, E)

    def third_frame(self, x, E, DF, D2F, D3F, field=None):
        if field is None:
            raise ValueError("chart third derivatives need the field for finite differences")
        x2 = np.atleast_2d(x)
        E2 = E.reshape((-1,) + E.shape[-2:])

        def hess_fn(xx, EE):
            return self.hess_frame(xx, EE, field.grad(xx), field.hess(xx))

        out = covariant_fd(self, x2, E2, hess_fn, h=1e-3)
        return out.reshape(np.shape(x)[:-1] + out.shape[1:])

    def describe(self):
        return {"kind": "chart_diffusion", "n": self.dim, "sigma": self.name, "params": self.params}


def covariant_fd(M: Manifold, x, E, fn, h=1e-3, richardson=True):
    """Covariant derivative of a tensor field by central differences along
    geodesics with parallel-transported frames.

    x has shape (B, d) and E shape (B, d, n); fn(x, E) returns frame components
    of shape (B, ...).  The result has shape (B, n, ...) with the derivative
    direction first.
    """
    x = np.asarray(x, float)
    E = np.asarray(E, float)
    B, d = x.shape
    n = E.shape[-1]
    steps = [h, h / 2] if richardson else [h]
    dirs = []
    for s in steps:
        for sgn in (1.0, -1.0):
            dirs.append(sgn * s)
    nd = len(dirs)
    # v[b, j, a] = dirs[j] * E[b, :, a]
    V = np.einsum("j,bda->bjad", np.array(dirs), E)
    xs = np.broadcast_to(x[:, None, None, :], (B, nd, n, d)).reshape(-1, d)
    Vs = V.reshape(-1, d)
    Es = np.broadcast_to(E[:, None, None], (B, nd, n, d, n)).reshape(-1, d, n)
    xn = M.exp(xs, Vs)
    En = M.transport_along(xs, Vs, Es, frame=True)
    vals = np.asarray(fn(xn, En))
    vals = vals.reshape((B, nd, n) + vals.shape[1:])
    D = []
    for k, s in enumerate(steps):
        D.append((vals[:, 2 * k] - vals[:, 2 * k + 1]) / (2 * s))
    if richardson:
        return (4 * D[1] - D[0]) / 3
    return D[0]


@dataclass(frozen=True)
class ManifoldPoint:
    manifold: Manifold
    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float))


@dataclass(frozen=True)
class TangentVector:
    base: ManifoldPoint
    components: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "components", np.asarray(self.components, dtype=float))


def make_manifold(spec: dict, sigma_registry=None) -> Manifold:
    """Build a manifold from a JSON-style description."""
    kind = spec.get("kind")
    if kind == "euclidean":
        return Euclidean(spec.get("n", 1))
    if kind == "sphere":
        return Sphere(spec.get("n", 2), spec.get("kappa", 1.0))
    if kind == "hyperbolic3":
        return Hyperbolic3(spec.get("kappa", -1.0))
    if kind == "circle":
        return Circle(spec.get("circumference", 2 * math.pi))
    if kind == "chart_diffusion":
        from .fields import sigma_preset

        name = spec.get("sigma", "identity")
        params = spec.get("params", {})
        n = spec.get("n", 2)
        return ChartDiffusion(n, sigma_preset(name, n, **params), box=spec.get("box"), name=name, params=params)
    raise ValueError(f"unknown manifold kind {kind!r}")


# -- point-level wrappers --------------------------------------------------

def metric_at(p: ManifoldPoint):
    return p.manifold.metric_at(p.coords)


def exp_map(p: ManifoldPoint, v: TangentVector) -> ManifoldPoint:
    return ManifoldPoint(p.manifold, p.manifold.exp(p.coords, v.components))


def log_map(p: ManifoldPoint, q: ManifoldPoint) -> TangentVector:
    return TangentVector(p, p.manifold.log(p.coords, q.coords))


def parallel_transport(p: ManifoldPoint, q: ManifoldPoint, v: TangentVector) -> TangentVector:
    return TangentVector(q, p.manifold.transport(p.coords, q.coords, v.components))


def cut_locus_indicator(p: ManifoldPoint, q: ManifoldPoint) -> bool:
    return bool(np.all(p.manifold.is_cut(p.coords, q.coords)))


def distance(p: ManifoldPoint, q: ManifoldPoint) -> float:
    return float(p.manifold.dist(p.coords, q.coords))
