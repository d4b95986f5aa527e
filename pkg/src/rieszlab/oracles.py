"""Slow reference evaluators used to validate the fast kernel tables.

These take different routes to the same quantities: a Gaussian-regularized
Fourier series extrapolated to zero regularization, the classical erfc
Ewald sum for the Coulomb case, and direct product quadrature over spheres.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .riesz_kernel import RieszParams


def _fourier_sum_regularized(params: RieszParams, x: np.ndarray, eps: float, K: int) -> tuple[np.ndarray, np.ndarray]:
    """c sum_{k != 0} (2 pi |k|)^(s-d) exp(-eps |k|^2) exp(2 pi i k.x), with gradient.

    Folds the sum onto the nonnegative octant so that each term becomes a product
    of cosines, then contracts one axis at a time.  Only d = 3.
    """
    d, s = params.d, params.s
    if d != 3:
        raise ValueError("the Fourier-sum oracle is written for d = 3")
    x = np.atleast_2d(x)
    k = np.arange(K + 1, dtype=float)
    mult = np.where(k == 0, 1.0, 2.0)
    C = [np.cos(2 * math.pi * np.outer(k, x[:, j])) * mult[:, None] for j in range(3)]
    Sn = [-np.sin(2 * math.pi * np.outer(k, x[:, j])) * mult[:, None] * (2 * math.pi * k)[:, None] for j in range(3)]
    k23 = k[:, None] ** 2 + k[None, :] ** 2
    val = np.zeros(x.shape[0])
    grad = np.zeros_like(x)
    for i in range(K + 1):
        ksq = k[i] ** 2 + k23
        w = np.zeros_like(ksq)
        nz = ksq > 0
        w[nz] = (4 * math.pi**2 * ksq[nz]) ** ((s - d) / 2) * np.exp(-eps * ksq[nz])
        T3c = w @ C[2]
        T3s = w @ Sn[2]
        a = np.sum(T3c * C[1], axis=0)
        b = np.sum(T3c * Sn[1], axis=0)
        c = np.sum(T3s * C[1], axis=0)
        val += C[0][i] * a
        grad[:, 0] += Sn[0][i] * a
        grad[:, 1] += C[0][i] * b
        grad[:, 2] += C[0][i] * c
    return params.c_ds * val, params.c_ds * grad


def fourier_sum_oracle(params: RieszParams, x, eps_list=(1e-3, 5e-4, 2.5e-4), tail=40.0):
    """Regularized Fourier series, Richardson-extrapolated to eps = 0.

    The regularization acts as heat flow for time eps/(4 pi^2), so the error is a
    power series in eps; with eps halved at each level the extrapolation removes
    the first len(eps_list) - 1 orders.  Accurate for |x| >~ 0.1.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    vals, grads = [], []
    for eps in eps_list:
        K = int(math.ceil(math.sqrt(tail / eps)))
        v, g = _fourier_sum_regularized(params, x, eps, K)
        vals.append(v)
        grads.append(g)
    # Neville-style elimination for ratios of two
    for level in range(1, len(eps_list)):
        f = 2.0**level
        vals = [(f * vals[i + 1] - vals[i]) / (f - 1) for i in range(len(vals) - 1)]
        grads = [(f * grads[i + 1] - grads[i]) / (f - 1) for i in range(len(grads) - 1)]
    return vals[0], grads[0]


def coulomb_ewald_classical(x, beta: float = 4.0, images: int = 2, kmax: int = 10):
    """Zero-mean periodic Coulomb potential on the unit 3-torus by the erfc Ewald sum.

    phi(x) = sum_n erfc(beta|x+n|)/|x+n| + (1/pi) sum_{k!=0} exp(-pi^2 k^2/beta^2)/k^2 cos(2 pi k.x) - pi/beta^2
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x = x - np.rint(x)
    rng = np.arange(-images, images + 1)
    shifts = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    real = np.zeros(x.shape[0])
    for n in shifts:
        r = np.linalg.norm(x + n, axis=1)
        real += special.erfc(beta * r) / r
    m = np.arange(-kmax, kmax + 1)
    kv = np.stack(np.meshgrid(m, m, m, indexing="ij"), axis=-1).reshape(-1, 3)
    kv = kv[np.any(kv != 0, axis=1)].astype(float)
    ksq = np.sum(kv**2, axis=1)
    coef = np.exp(-(math.pi**2) * ksq / beta**2) / (math.pi * ksq)
    recip = np.cos(2 * math.pi * x @ kv.T) @ coef
    return real + recip - math.pi / beta**2


def sphere_average(func, x, eta: float, n_theta: int = 48, n_phi: int = 96):
    """Average of func over the sphere of radius eta around each point of x (d = 3).

    Product rule: Gauss-Legendre in cos(theta), uniform in phi.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
    st = np.sqrt(1 - ct**2)
    dirs = np.stack(
        [np.outer(st, np.cos(phi)).ravel(), np.outer(st, np.sin(phi)).ravel(), np.repeat(ct, n_phi)], axis=1
    )
    w = np.repeat(wt, n_phi) / (2 * n_phi)
    out = np.empty(x.shape[0])
    for i, p in enumerate(x):
        out[i] = np.sum(w * np.asarray(func(p + eta * dirs)))
    return out
