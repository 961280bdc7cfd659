"""Geodesic Taylor expansion and numerical checks of the commutation and
Weitzenbock identities for covariant derivatives of functions.

All tensors are frame components; derivative indices come first, so
c[i, j, k] = (nabla_{e_i} Hess f)(e_j, e_k) and so on.  Iterated covariant
derivatives are computed by nested central differences along geodesics with
parallel frames (inner step 1e-4, outer steps 1e-3, Richardson extrapolated).
"""
from __future__ import annotations

import numpy as np

from .curvature import BundleEvaluator
from .fields import PotentialSpec, ScalarField, frame_derivs
from .manifolds import ChartDiffusion, Manifold, ManifoldPoint, covariant_fd


def geodesic_taylor(M: Manifold, f: ScalarField, w, w2, order: int = 3, n_quad: int = 24):
    """Taylor expansion of f along the minimizing geodesic from w to w2.

    Returns the terms df(delta) and Hess f(delta, delta)/2, the exact remainder
    f(w2) - f(w) - (terms up to the requested order), the same remainder from
    the integral formula evaluated by Gauss-Legendre quadrature, and the sup
    bound sup|nabla^order f| |delta|^order / order!.
    Raises CutLocus when (w, w2) is on the cut locus.
    """
    if order not in (2, 3):
        raise ValueError("order must be 2 or 3")
    w = np.asarray(w, float)
    w2 = np.asarray(w2, float)
    delta = M.log(w, w2)
    E = M.frame(w)
    dc = M.to_frame(w, E, delta)
    vals = frame_derivs(M, w[None], E[None], f, 2)
    t1 = float(vals[1][0] @ dc)
    t2 = float(0.5 * dc @ vals[2][0] @ dc)
    exact = float(f.value(w2) - f.value(w))
    if order == 2:
        remainder = exact - t1
    else:
        remainder = exact - t1 - t2

    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    s = 0.5 * (nodes + 1.0)
    wq = 0.5 * weights
    V = s[:, None] * delta[None, :]
    xs = M.exp(np.broadcast_to(w, V.shape), V)
    Es = M.transport_along(np.broadcast_to(w, V.shape), V, np.broadcast_to(E, (len(s),) + E.shape), frame=True)
    d = frame_derivs(M, xs, Es, f, order)
    top = d[order]
    if order == 2:
        integrand = np.einsum("kab,a,b->k", top, dc, dc) * (1 - s)
        integral = float(np.sum(wq * integrand))
        bound = float(np.max(np.linalg.norm(top.reshape(len(s), -1), axis=1))) * float(dc @ dc) / 2.0
    else:
        integrand = np.einsum("kabc,a,b,c->k", top, dc, dc, dc) * (1 - s) ** 2 / 2.0
        integral = float(np.sum(wq * integrand))
        bound = float(np.max(np.linalg.norm(top.reshape(len(s), -1), axis=1))) * float(np.sqrt(dc @ dc)) ** 3 / 6.0
    return {
        "delta": delta,
        "terms": [t1, t2],
        "remainder": remainder,
        "integral_remainder": integral,
        "bound": bound,
        "order": order,
    }


def verify_tensor_identities(
    p: ManifoldPoint, pot: PotentialSpec, f: ScalarField, h_outer=1e-3, h_inner=1e-4, frame=None, closed_form_third=None
):
    """Residuals of the six first/second/third-order commutator and
    Weitzenbock identities at p, each maximized over frame indices.

    Keys: commutator_1..3 for d(Zf), nabla(Hess f(Z, .)), nabla(nabla Hess f(Z, ., .))
    and weitzenbock_1..3 for d Delta f, nabla Box df, nabla Box nabla df.
    Also reports `scale`, the largest left-hand side, so residuals can be read
    relative to the size of the quantities involved.

    On manifolds with a closed-form third covariant derivative the nesting
    starts from it (default), which removes one level of cancellation; chart
    manifolds always difference the Hessian.
    """
    M = p.manifold
    x = np.asarray(p.coords, float)[None]
    E = (M.frame(p.coords) if frame is None else np.asarray(frame, float))[None]
    ev = BundleEvaluator(M, pot)

    def grad_f(xx, EE):
        return frame_derivs(M, xx, EE, f, 1)[1]

    def hess_f(xx, EE):
        return frame_derivs(M, xx, EE, f, 2)[2]

    if closed_form_third is None:
        closed_form_third = not isinstance(M, ChartDiffusion)

    def c_fn(xx, EE):
        if closed_form_third:
            return frame_derivs(M, xx, EE, f, 3)[3]
        return covariant_fd(M, xx, EE, hess_f, h=h_inner)

    def d_fn(xx, EE):
        return covariant_fd(M, xx, EE, c_fn, h=h_outer)

    def Z_fn(xx, EE):
        return ev.psi_derivs(xx, EE, 1)[1]

    a = grad_f(x, E)[0]
    b = hess_f(x, E)[0]
    c = c_fn(x, E)[0]
    d = d_fn(x, E)[0]
    e = covariant_fd(M, x, E, d_fn, h=h_outer)[0]
    psi = ev.psi_derivs(x, E, 2)
    Z, HZ = psi[1][0], psi[2][0]
    R = np.asarray(ev.riemann(x, E))[0]
    ric = np.einsum("accb->ab", R)
    nR = ev.nabla_R(x, E)[0]
    dstar = -np.einsum("iiabc->abc", nR)

    out = {}
    # d(Zf)(X) = Hess f(Z, X) + df(nabla_X Z)
    lhs = covariant_fd(M, x, E, lambda xx, EE: np.sum(Z_fn(xx, EE) * grad_f(xx, EE), -1), h=h_inner)[0]
    rhs = Z @ b + HZ @ a
    out["commutator_1"] = (lhs, rhs)

    # nabla_X (Hess f(Z, .))(Y) = nabla Hess f(Z, X, Y) + df(R(Z, X) Y) + Hess f(nabla_X Z, Y)
    lhs = covariant_fd(M, x, E, lambda xx, EE: np.einsum("bz,bzj->bj", Z_fn(xx, EE), hess_f(xx, EE)), h=h_inner)[0]
    rhs = np.einsum("z,zij->ij", Z, c) + np.einsum("z,zijl,l->ij", Z, R, a) + HZ @ b
    out["commutator_2"] = (lhs, rhs)

    # third-order analogue
    lhs = covariant_fd(M, x, E, lambda xx, EE: np.einsum("bz,bzjk->bjk", Z_fn(xx, EE), c_fn(xx, EE)), h=h_outer)[0]
    rhs = (
        np.einsum("z,zijk->ijk", Z, d)
        + np.einsum("z,zijl,lk->ijk", Z, R, b)
        + np.einsum("z,zikl,jl->ijk", Z, R, b)
        + np.einsum("iz,zjk->ijk", HZ, c)
    )
    out["commutator_3"] = (lhs, rhs)

    # d Delta f = tr nabla^2 df - df(Ric#)
    lhs = covariant_fd(M, x, E, lambda xx, EE: np.einsum("baa->b", hess_f(xx, EE)), h=h_inner)[0]
    rhs = np.einsum("aai->i", c) - ric @ a
    out["weitzenbock_1"] = (lhs, rhs)

    # nabla_X Box df = (Box nabla df)(X) - Hess f(Ric# X) - df(d*R(X, .)) + 2 sum_a Hess f(e_a, R(e_a, X) .)
    lhs = covariant_fd(M, x, E, lambda xx, EE: np.einsum("baaj->bj", c_fn(xx, EE)), h=h_outer)[0]
    rhs = (
        np.einsum("aaij->ij", d)
        - ric @ b
        - np.einsum("ijl,l->ij", dstar, a)
        + 2 * np.einsum("al,aijl->ij", b, R)
    )
    out["weitzenbock_2"] = (lhs, rhs)

    # third-order Weitzenbock formula for nabla Box nabla df
    lhs = covariant_fd(M, x, E, lambda xx, EE: np.einsum("baajk->bjk", d_fn(xx, EE)), h=h_outer)[0]
    rhs = (
        np.einsum("aaijk->ijk", e)
        - np.einsum("il,ljk->ijk", ric, c)
        - np.einsum("ijl,lk->ijk", dstar, b)
        - np.einsum("ikl,jl->ijk", dstar, b)
        - 2 * np.einsum("iajl,alk->ijk", R, c)
        - 2 * np.einsum("iakl,ajl->ijk", R, c)
    )
    out["weitzenbock_3"] = (lhs, rhs)

    report = {k: float(np.max(np.abs(l - r))) for k, (l, r) in out.items()}
    report["scale"] = float(max(np.max(np.abs(l)) for l, _ in out.values()))
    return report
