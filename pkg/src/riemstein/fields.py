"""Scalar fields, potentials and diffusion-coefficient presets.

A ScalarField is a function on ambient (or chart) coordinates together with
its partial derivatives up to third order.  Missing derivatives fall back to
central finite differences of the next lower order.  Riemannian quantities in
a frame are produced by frame_derivs, which applies the manifold's connection.

Callbacks must be pure functions of their argument so they can be evaluated
from several worker threads at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .manifolds import ChartDiffusion, Hyperbolic3, Manifold, Sphere, covariant_fd


def _fd_jacobian(fn, x, h):
    """Central differences of fn along each coordinate axis; the new index is last."""
    x = np.asarray(x, float)
    d = x.shape[-1]
    I = np.eye(d)
    cols = []
    for j in range(d):
        cols.append((np.asarray(fn(x + h * I[j])) - np.asarray(fn(x - h * I[j]))) / (2 * h))
    return np.stack(cols, axis=-1)


class ScalarField:
    def __init__(self, value, grad=None, hess=None, third=None, name="field", fd_step=1e-4):
        self._value = value
        self._grad = grad
        self._hess = hess
        self._third = third
        self.name = name
        self.fd_step = fd_step

    def value(self, x):
        return np.asarray(self._value(np.asarray(x, float)), float)

    def grad(self, x):
        if self._grad is not None:
            return np.asarray(self._grad(np.asarray(x, float)), float)
        return _fd_jacobian(self.value, x, self.fd_step)

    def hess(self, x):
        if self._hess is not None:
            return np.asarray(self._hess(np.asarray(x, float)), float)
        H = _fd_jacobian(self.grad, x, self.fd_step)
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    def third(self, x):
        if self._third is not None:
            return np.asarray(self._third(np.asarray(x, float)), float)
        return _fd_jacobian(self.hess, x, self.fd_step)

    def __call__(self, x):
        return self.value(x)

    def scaled(self, alpha):
        return linear_combination([(alpha, self)])

    @property
    def has_analytic_derivatives(self):
        return self._grad is not None and self._hess is not None


def linear_combination(terms, name="combination"):
    """Field sum_k alpha_k f_k; derivatives combine the same way."""
    terms = [(float(a), f) for a, f in terms]

    def make(attr):
        def fn(x):
            return sum(a * getattr(f, attr)(x) for a, f in terms)
        return fn

    return ScalarField(make("value"), make("grad"), make("hess"), make("third"), name=name)


class PolynomialField(ScalarField):
    """c0 + <b, x> + x^T Q x / 2 + T(x, x, x) / 6 with symmetric Q and T."""

    def __init__(self, c0=0.0, b=None, Q=None, T=None, dim=None, name="polynomial"):
        dim = dim if dim is not None else len(b if b is not None else Q if Q is not None else T)
        self.dim = dim
        self.c0 = float(c0)
        self.b = np.zeros(dim) if b is None else np.asarray(b, float)
        Q = np.zeros((dim, dim)) if Q is None else np.asarray(Q, float)
        self.Q = 0.5 * (Q + Q.T)
        T = np.zeros((dim, dim, dim)) if T is None else np.asarray(T, float)
        self.T = _symmetrize3(T)
        self._cubic = bool(np.any(self.T != 0))
        super().__init__(self._val, self._grad_fn, self._hess_fn, self._third_fn, name=name)

    def _val(self, x):
        out = self.c0 + x @ self.b + 0.5 * np.sum((x @ self.Q) * x, -1)
        if self._cubic:
            Tx = np.einsum("ijk,...j,...k->...i", self.T, x, x)
            out = out + np.sum(Tx * x, -1) / 6.0
        return out

    def _grad_fn(self, x):
        out = self.b + x @ self.Q
        if self._cubic:
            out = out + 0.5 * np.einsum("ijk,...j,...k->...i", self.T, x, x)
        return out

    def _hess_fn(self, x):
        if not self._cubic:
            return np.broadcast_to(self.Q, np.shape(x)[:-1] + self.Q.shape)
        return self.Q + np.einsum("ijk,...k->...ij", self.T, x)

    def _third_fn(self, x):
        return np.broadcast_to(self.T, np.shape(x)[:-1] + self.T.shape)

    @classmethod
    def random(cls, rng, dim, degree=3, scale=1.0):
        b = rng.standard_normal(dim) * scale
        Q = rng.standard_normal((dim, dim)) * scale if degree >= 2 else None
        T = rng.standard_normal((dim, dim, dim)) * scale if degree >= 3 else None
        return cls(rng.standard_normal() * scale, b, Q, T, dim=dim, name=f"random_poly{degree}")


def _symmetrize3(T):
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    return sum(np.transpose(T, p) for p in perms) / 6.0


def coordinate_field(dim, index, scale=1.0, name=None):
    b = np.zeros(dim)
    b[index] = scale
    return PolynomialField(0.0, b, dim=dim, name=name or f"x{index}")


def constant_field(dim, value=1.0):
    return PolynomialField(value, dim=dim, name="constant")


def frame_derivs(M: Manifold, x, E, f: ScalarField, order: int):
    """Value and covariant derivatives of f up to `order` in the frame E.

    Returns a list [f, df, Hess f, nabla nabla df] truncated after `order`.
    Third derivatives on chart manifolds use covariant finite differences.
    """
    x = np.asarray(x, float)
    out = [f.value(x)]
    if order < 1:
        return out
    DF = f.grad(x)
    out.append(M.grad_frame(x, E, DF))
    if order < 2:
        return out
    D2F = f.hess(x)
    out.append(M.hess_frame(x, E, DF, D2F))
    if order < 3:
        return out
    if isinstance(M, ChartDiffusion):
        out.append(M.third_frame(x, E, DF, D2F, None, field=f))
    else:
        out.append(M.third_frame(x, E, DF, D2F, f.third(x)))
    return out


@dataclass
class PotentialSpec:
    """Potential psi with claimed lower bound Ric - 2 Hess psi >= 2K.

    `parallel_hessian` records that Hess psi is parallel (so its covariant
    derivative vanishes); `sampler(rng, size)` draws from the invariant law
    when it is available in closed form.
    """

    field: ScalarField
    K: Optional[float]
    name: str = "custom"
    parallel_hessian: bool = False
    is_zero: bool = False
    sampler: Optional[Callable] = None
    params: dict = dc_field(default_factory=dict)

    def psi(self, x):
        return self.field.value(x)

    def grad_psi(self, x):
        return self.field.grad(x)

    def hess_psi(self, x):
        return self.field.hess(x)

    def self_test(self, M: Manifold, rng, n_points=8, tol=1e-4, step=1e-5):
        """Check grad/hess callbacks against central differences of psi and grad
        along tangent directions at sampled points."""
        x = M.random_point(rng, size=n_points)
        v = M.random_tangent(rng, x)
        w = M.random_tangent(rng, x)
        g = self.field.grad(x)
        H = self.field.hess(x)
        fd1 = (self.field.value(x + step * v) - self.field.value(x - step * v)) / (2 * step)
        an1 = np.sum(g * v, -1)
        fd2 = np.sum((self.field.grad(x + step * v) - self.field.grad(x - step * v)) / (2 * step) * w, -1)
        an2 = np.einsum("...i,...ij,...j->...", v, H, w)
        e1 = float(np.max(np.abs(fd1 - an1) / (1 + np.abs(an1))))
        e2 = float(np.max(np.abs(fd2 - an2) / (1 + np.abs(an2))))
        return {"grad_error": e1, "hess_error": e2, "ok": bool(e1 <= tol and e2 <= tol)}

    def describe(self):
        return {"name": self.name, "K": self.K, **{k: _jsonable(v) for k, v in self.params.items()}}


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def ricci_lower_bound(M: Manifold):
    if M.kind in ("euclidean", "circle"):
        return 0.0
    if M.kind in ("sphere", "hyperbolic3"):
        return (M.dim - 1) * M.kappa
    return None


def zero_potential(M: Manifold) -> PotentialSpec:
    d = M.ambient_dim
    lb = ricci_lower_bound(M)
    sampler = None
    if isinstance(M, Sphere):
        sampler = lambda rng, size: M.random_point(rng, size=size)
    elif M.kind == "circle":
        sampler = lambda rng, size: M.random_point(rng, size=size)
    return PotentialSpec(
        constant_field(d, 0.0),
        None if lb is None else lb / 2.0,
        name="zero",
        parallel_hessian=True,
        is_zero=True,
        sampler=sampler,
    )


def gaussian_potential(A, y) -> PotentialSpec:
    """psi(x) = -<x - y, A (x - y)>/2 on euclidean space.

    The generator (Laplacian/2 + grad psi) has invariant density proportional
    to exp(2 psi), i.e. the normal law with mean y and covariance (2A)^{-1}.
    """
    A = np.atleast_2d(np.asarray(A, float))
    A = 0.5 * (A + A.T)
    y = np.asarray(y, float).reshape(-1)
    n = len(y)
    if A.shape != (n, n):
        raise ConfigError("gaussian potential: A and y have inconsistent shapes")
    evals = np.linalg.eigvalsh(A)
    cov = np.linalg.inv(2 * A) if evals.min() > 0 else None
    chol = np.linalg.cholesky(cov) if cov is not None else None

    def sampler(rng, size):
        shape = tuple(np.atleast_1d(size))
        return y + rng.standard_normal(shape + (n,)) @ chol.T

    fld = PolynomialField(-0.5 * y @ A @ y, A @ y, -A, None, dim=n, name="gaussian")
    return PotentialSpec(
        fld,
        float(evals.min()),
        name="gaussian",
        parallel_hessian=True,
        sampler=sampler if chol is not None else None,
        params={"A": A, "y": y},
    )


def ou_semigroup_matrices(A, t):
    """exp(-A t) and the covariance (I - exp(-2At)) (2A)^{-1} of the OU process
    dX = -A (X - y) dt + dB."""
    A = np.atleast_2d(np.asarray(A, float))
    lam, V = np.linalg.eigh(0.5 * (A + A.T))
    Phi = (V * np.exp(-lam * t)) @ V.T
    var = np.where(np.abs(lam) > 1e-14, -np.expm1(-2 * lam * t) / (2 * np.where(lam == 0, 1, lam)), t)
    Sigma = (V * var) @ V.T
    return Phi, Sigma


class _HeatKernelRadial:
    """log p_t as a function of c = kappa <x, y> = cosh(a r) on the hyperboloid."""

    def __init__(self, kappa, t):
        self.kappa = float(kappa)
        self.a = math.sqrt(-kappa)
        self.t = float(t)
        self.beta = -1.0 / (2 * t) + kappa / 6.0
        self.const = -1.5 * math.log(2 * math.pi * t) + kappa * t / 2.0

    def phi(self, c):
        a, t = self.a, self.t
        c = np.maximum(np.asarray(c, float), 1.0)
        s = c - 1.0
        small = s < 1e-5
        r = np.arccosh(np.where(small, 2.0, c)) / a
        ar = a * r
        exact = self.const - r * r / (2 * t) + np.log(ar / np.sinh(ar))
        ser = self.const + self.beta * (2 * s - s * s / 3 + 4 * s ** 3 / 45) / a ** 2 + (4 * s * s - 4 * s ** 3 / 3) / 180
        return np.where(small, ser, exact)

    def dphi(self, c):
        a, t = self.a, self.t
        c = np.maximum(np.asarray(c, float), 1.0)
        s = c - 1.0
        small = s < 1e-5
        r = np.arccosh(np.where(small, 2.0, c)) / a
        ar = a * r
        g1 = -r / t + 1 / r - a / np.tanh(ar)
        r1 = 1.0 / (a * np.sinh(ar))
        exact = g1 * r1
        ser = self.beta * (2 - 2 * s / 3 + 12 * s * s / 45) / a ** 2 + (8 * s - 4 * s * s) / 180
        return np.where(small, ser, exact)

    def d2phi(self, c):
        a, t = self.a, self.t
        c = np.maximum(np.asarray(c, float), 1.0)
        s = c - 1.0
        small = s < 1e-5
        r = np.arccosh(np.where(small, 2.0, c)) / a
        ar = a * r
        sh = np.sinh(ar)
        g1 = -r / t + 1 / r - a / np.tanh(ar)
        g2 = -1 / t - 1 / r ** 2 + a * a / sh ** 2
        r1 = 1.0 / (a * sh)
        r2 = -np.cosh(ar) / (a * sh ** 3)
        exact = g2 * r1 * r1 + g1 * r2
        ser = self.beta * (-2 / 3 + 24 * s / 45) / a ** 2 + (8 - 8 * s) / 180
        return np.where(small, ser, exact)


def log_heat_kernel_potential(kappa, t, y) -> PotentialSpec:
    """psi(x) = log p_t(x, y) on hyperbolic3(kappa), expressed through the
    ambient coordinate c = kappa <x, y>."""
    M = Hyperbolic3(kappa)
    y = M.project_point(np.asarray(y, float))
    J = M._J
    Jy = J * y
    rad = _HeatKernelRadial(kappa, t)

    def cval(x):
        return kappa * np.sum(x * Jy, -1)

    def value(x):
        return rad.phi(cval(x))

    def grad(x):
        return (rad.dphi(cval(x)) * kappa)[..., None] * Jy

    def hess(x):
        return (rad.d2phi(cval(x)) * kappa ** 2)[..., None, None] * np.multiply.outer(Jy, Jy)

    fld = ScalarField(value, grad, hess, None, name="log_heat_kernel", fd_step=1e-4)
    return PotentialSpec(
        fld,
        kappa + 1.0 / t,
        name="log_heat_kernel",
        parallel_hessian=False,
        params={"kappa": kappa, "t": t, "y": y},
    )


def height_potential(M: Sphere, beta=0.5, axis=-1) -> PotentialSpec:
    """psi = beta * x[axis] on the sphere (a first spherical harmonic)."""
    d = M.ambient_dim
    b = np.zeros(d)
    b[axis] = beta
    fld = PolynomialField(0.0, b, dim=d, name="height")
    # Hess psi = -kappa psi g, so Ric - 2 Hess psi >= ((n-1) kappa - 2 kappa |beta| R) g
    K = 0.5 * ((M.dim - 1) * M.kappa - 2 * M.kappa * abs(beta) * M.radius)
    return PotentialSpec(fld, K, name="height", parallel_hessian=False, params={"beta": beta, "axis": axis})


def make_potential(spec: dict, M: Manifold) -> PotentialSpec:
    name = (spec or {}).get("name", "zero")
    if name == "zero":
        return zero_potential(M)
    if name == "gaussian":
        n = M.dim
        A = np.asarray(spec.get("A", np.eye(n)), float)
        if A.ndim == 0:
            A = A * np.eye(n)
        y = np.asarray(spec.get("y", np.zeros(n)), float)
        return gaussian_potential(A, y)
    if name == "log_heat_kernel":
        kappa = float(spec.get("kappa", getattr(M, "kappa", -1.0)))
        y = spec.get("y")
        if y is None:
            y = Hyperbolic3(kappa).base_point()
        return log_heat_kernel_potential(kappa, float(spec["t"]), y)
    if name == "height":
        if not isinstance(M, Sphere):
            raise ConfigError("height potential requires a sphere")
        return height_potential(M, spec.get("beta", 0.5))
    raise ConfigError(f"unknown potential preset {name!r}")


# -- diffusion coefficient presets for chart manifolds ---------------------

def sigma_preset(name, n, **params):
    if name == "identity":
        return lambda x: np.broadcast_to(np.eye(n), np.shape(x)[:-1] + (n, n))
    if name == "scaled":
        s = float(params.get("scale", 2.0))
        return lambda x: np.broadcast_to(s * np.eye(n), np.shape(x)[:-1] + (n, n))
    if name == "poincare":
        # metric 4|dx|^2/(1 - |x|^2)^2: constant curvature -1 on the unit ball
        def sig(x):
            r2 = np.sum(np.asarray(x) ** 2, -1)
            return ((1 - r2) / 2)[..., None, None] * np.eye(n)
        return sig
    if name == "stereographic":
        # metric 4|dx|^2/(1 + |x|^2)^2: constant curvature +1
        def sig(x):
            r2 = np.sum(np.asarray(x) ** 2, -1)
            return ((1 + r2) / 2)[..., None, None] * np.eye(n)
        return sig
    if name == "shear":
        eps = float(params.get("eps", 0.3))

        def sig(x):
            x = np.asarray(x, float)
            out = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()
            out[..., 0, -1] = eps * np.sin(x[..., 0])
            out[..., -1, -1] = 1.0 + 0.5 * eps * np.cos(x[..., -1])
            return out
        return sig
    raise ConfigError(f"unknown sigma preset {name!r}")
