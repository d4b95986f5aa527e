"""Periodic Riesz potential on the torus [-1/2, 1/2)^d.

The kernel g is the zero-mean periodic function with Fourier coefficients
c_ds (2 pi |k|)^(s-d) for k != 0.  Near the origin it behaves like |x|^-s
(or -log|x| when s = 0).

Evaluation uses a screened split with screening parameter alpha:

    g(x) = S(|x|) + L(x) + C0

where S is the screened radial part taken over the minimum image only, L is
a trigonometric polynomial and C0 restores zero mean.  The screening is
chosen so that S is below the accuracy target beyond |x| = 1/2, so no other
images contribute.  For the radial part we write S(r) = n(r) - w(r^2), with
n the near-field singularity and w an entire function tabulated by cubic
Hermite interpolation in u = r^2.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .blob import read_blob, write_blob


class KernelError(ValueError):
    pass


class SingularityError(KernelError):
    pass


def riesz_constant(d: int, s: float) -> float:
    if s > 0:
        return 4.0 ** ((d - s) / 2) * math.gamma((d - s) / 2) * math.pi ** (d / 2) / math.gamma(s / 2)
    return math.gamma(d / 2) * (4 * math.pi) ** (d / 2) / 2


@dataclass(frozen=True)
class RieszParams:
    d: int = 3
    s: float = 0.5

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise KernelError(f"dimension must be a positive integer, got {self.d}")
        if not (0 <= self.s < self.d):
            raise KernelError(f"need 0 <= s < d, got s={self.s}, d={self.d}")

    @property
    def c_ds(self) -> float:
        return riesz_constant(self.d, self.s)

    @property
    def dynamics_valid(self) -> bool:
        return self.s < self.d - 2

    def require_dynamics(self) -> None:
        if not self.dynamics_valid:
            raise KernelError(f"s={self.s} is not sub-Coulomb in d={self.d} (need s < d-2)")

    def as_dict(self) -> dict:
        return {"d": int(self.d), "s": float(self.s)}


def fourier_multiplier(params: RieszParams, ksq: np.ndarray) -> np.ndarray:
    """c_ds (2 pi |k|)^(s-d) with the zero mode set to 0."""
    ksq = np.asarray(ksq, dtype=float)
    out = np.zeros_like(ksq)
    nz = ksq > 0
    out[nz] = params.c_ds * (4 * math.pi**2 * ksq[nz]) ** ((params.s - params.d) / 2)
    return out


# smooth cutoff: chi = 1 on |y| <= 1/2, 0 for |y| >= 1, C^2 quintic transition
def cutoff_chi(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return chi(|y|) and its radial derivative at |y| = t."""
    z = np.clip(2.0 * np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    p = z**3 * (10 - 15 * z + 6 * z**2)
    dp = 30 * z**2 * (1 - z) ** 2
    return 1.0 - p, -2.0 * dp


def _near(s: float, r: np.ndarray) -> np.ndarray:
    return -np.log(r) if s == 0 else r ** (-s)


def _near_dr_over_r(s: float, rsq: np.ndarray) -> np.ndarray:
    # n'(r)/r, so that grad n = (n'(r)/r) x
    return -1.0 / rsq if s == 0 else -s * rsq ** (-(s + 2) / 2)


def _near_moment(s: float, rho: np.ndarray) -> np.ndarray:
    # int_0^rho n(t) t dt
    rho = np.asarray(rho, dtype=float)
    if s == 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = rho**2 * (0.25 - 0.5 * np.log(rho))
        return np.where(rho > 0, out, 0.0)
    return rho ** (2 - s) / (2 - s)


def _screened_exact(s: float, alpha: float, r: np.ndarray) -> np.ndarray:
    """S(r) straight from the incomplete gamma function."""
    x = math.pi * alpha * np.asarray(r, dtype=float) ** 2
    if s == 0:
        return 0.5 * special.exp1(x)
    return np.asarray(r, dtype=float) ** (-s) * special.gammaincc(s / 2, x)


def _screened_exact_dr(s: float, alpha: float, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    x = math.pi * alpha * r**2
    if s == 0:
        return -np.exp(-x) / r
    a = s / 2
    return -s * r ** (-s - 1) * special.gammaincc(a, x) - 2 * (math.pi * alpha) ** a * np.exp(-x) / (math.gamma(a) * r)


def _w_exact(s: float, alpha: float, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smooth part w(u) with w' and w'', u = r^2, where S(r) = n(r) - w(r^2)."""
    u = np.asarray(u, dtype=float)
    pa = math.pi * alpha
    x = pa * u
    if s == 0:
        ein = np.empty_like(x)
        small = x < 2.0
        xs = x[small]
        term = xs.copy()
        acc = xs.copy()
        for n in range(2, 60):
            term = -term * xs * (n - 1) / (n * n)
            acc = acc + term
        ein[small] = acc
        xl = x[~small]
        ein[~small] = special.exp1(xl) + np.euler_gamma + np.log(xl)
        w = 0.5 * (np.euler_gamma + math.log(pa)) - 0.5 * ein
        # f = (1 - e^-x)/x and its derivative, by series near 0
        f = np.empty_like(x)
        df = np.empty_like(x)
        small = x < 0.5
        xs = x[small]
        tf = np.ones_like(xs)
        sf = tf.copy()
        td = np.full_like(xs, -0.5)
        sdf = td.copy()
        for n in range(1, 30):
            tf = -tf * xs / (n + 1)
            sf += tf
            td = -td * xs / (n + 2)
            sdf += (n + 1) * td
        f[small] = sf
        df[small] = sdf
        xl = x[~small]
        f[~small] = -np.expm1(-xl) / xl
        df[~small] = (np.exp(-xl) * (1 + xl) - 1) / xl**2
        return w, -0.5 * pa * f, -0.5 * pa * pa * df
    a = s / 2
    xmax = float(np.max(x, initial=0.0))
    nmax = int(xmax + 12 * math.sqrt(xmax) + 60)
    terms = [np.full_like(x, 1.0 / math.gamma(a + m + 1)) for m in range(3)]
    sums = [t.copy() for t in terms]
    for n in range(nmax):
        for m in range(3):
            terms[m] = terms[m] * x / (a + n + m + 1)
            sums[m] += terms[m]
    ex = np.exp(-x)
    scale = pa**a * ex
    return scale * sums[0], -a * pa * scale * sums[1], a * (a + 1) * pa * pa * scale * sums[2]


def _hermite(f, df, i, t, h):
    t2 = t * t
    t3 = t2 * t
    return ((2 * t3 - 3 * t2 + 1) * f[i] + (t3 - 2 * t2 + t) * h * df[i]
            + (-2 * t3 + 3 * t2) * f[i + 1] + (t3 - t2) * h * df[i + 1])


class _HermiteTable:
    """Cubic Hermite interpolants of w and w' on a uniform grid in u.

    w' is interpolated from (w', w'') rather than differentiated, which avoids
    the cancellation of a divided difference on fine grids.  The integral of
    the w interpolant is exact.
    """

    def __init__(self, h: float, w: np.ndarray, dw: np.ndarray, d2w: np.ndarray):
        self.h = float(h)
        self.w = np.asarray(w, dtype=float)
        self.dw = np.asarray(dw, dtype=float)
        self.d2w = np.asarray(d2w, dtype=float)
        seg = h * (self.w[:-1] + self.w[1:]) / 2 + h * h * (self.dw[:-1] - self.dw[1:]) / 12
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.umax = h * (len(self.w) - 1)

    def _locate(self, u):
        q = np.asarray(u, dtype=float) / self.h
        i = np.clip(np.floor(q).astype(np.int64), 0, len(self.w) - 2)
        return i, q - i

    def value(self, u):
        i, t = self._locate(u)
        return _hermite(self.w, self.dw, i, t, self.h)

    def value_and_deriv(self, u):
        i, t = self._locate(u)
        return _hermite(self.w, self.dw, i, t, self.h), _hermite(self.dw, self.d2w, i, t, self.h)

    def integral(self, u):
        i, t = self._locate(u)
        h = self.h
        t2 = t * t
        t3 = t2 * t
        t4 = t3 * t
        part = h * ((t4 / 2 - t3 + t) * self.w[i] + (t4 / 4 - 2 * t3 / 3 + t2 / 2) * h * self.dw[i]
                    + (-t4 / 2 + t3) * self.w[i + 1] + (t4 / 4 - t3 / 3) * h * self.dw[i + 1])
        return self.cum[i] + part


def _choose_alpha(params: RieszParams, accuracy: float) -> float:
    s, d = params.s, params.d

    def err(alpha):
        r = np.array([0.5])
        return 3**d * max(abs(_screened_exact(s, alpha, r)[0]), abs(_screened_exact_dr(s, alpha, r)[0]))

    lo, hi = 0.5, 800.0
    if err(hi) > accuracy / 10:
        raise KernelError("accuracy too tight for the minimum-image screened split")
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if err(mid) > accuracy / 10:
            lo = mid
        else:
            hi = mid
    return hi


def _long_coeffs(params: RieszParams, alpha: float, K: int) -> np.ndarray:
    """Half-space coefficient tensor, first axis m1 = 0..K already weighted by 1 or 2."""
    d, s = params.d, params.s
    m = np.arange(-K, K + 1)
    axes = [np.arange(0, K + 1)] + [m] * (d - 1)
    grids = np.meshgrid(*axes, indexing="ij")
    ksq = sum(g.astype(float) ** 2 for g in grids)
    coef = fourier_multiplier(params, ksq) * special.gammaincc((d - s) / 2, math.pi * ksq / alpha)
    coef[ksq == 0] = 0.0
    weight = np.where(grids[0] == 0, 1.0, 2.0)
    return coef * weight


def _choose_cutoff(params: RieszParams, alpha: float, accuracy: float) -> int:
    d, s = params.d, params.s
    kmax = {1: 4000, 2: 600}.get(d, 48)
    m = np.arange(-kmax, kmax + 1)
    grids = np.meshgrid(*([m] * d), indexing="ij", sparse=True)
    ksq = sum(g.astype(float) ** 2 for g in grids)
    kinf = np.zeros(ksq.shape, dtype=np.int64)
    for g in grids:
        kinf = np.maximum(kinf, np.abs(g))
    mag = fourier_multiplier(params, ksq) * special.gammaincc((d - s) / 2, math.pi * ksq / alpha)
    mag = mag * (1 + 2 * math.pi * np.sqrt(ksq))
    shell = np.bincount(kinf.ravel(), weights=mag.ravel(), minlength=kmax + 1)
    tail = np.cumsum(shell[::-1])[::-1]  # tail[K] = sum over |k|_inf >= K
    for K in range(1, kmax):
        if tail[K + 1] <= accuracy / 10:
            return K
    raise KernelError("accuracy too tight for the Fourier cutoff range")


def trig_sum(coeffs: np.ndarray, x: np.ndarray, K: int, chunk: int = 2048) -> np.ndarray:
    """Real part of sum_k c_k exp(2 pi i k.x) for half-space tensors.

    coeffs has shape (C, K+1, 2K+1, ..., 2K+1); x has shape (P, d).
    Returns shape (C, P).
    """
    coeffs = np.asarray(coeffs)
    C = coeffs.shape[0]
    d = coeffs.ndim - 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    P = x.shape[0]
    out = np.empty((C, P))
    M = 2 * K + 1
    m_full = np.arange(-K, K + 1)
    m_half = np.arange(0, K + 1)
    for lo in range(0, P, chunk):
        xs = x[lo : lo + chunk]
        p = xs.shape[0]
        if d == 1:
            E = np.exp(2j * math.pi * np.outer(xs[:, 0], m_half))
            out[:, lo : lo + p] = (coeffs.reshape(C, K + 1) @ E.T).real
            continue
        Ed = np.exp(2j * math.pi * np.outer(xs[:, d - 1], m_full))
        T = coeffs.reshape(-1, M) @ Ed.T
        for j in range(d - 2, -1, -1):
            mj = m_half if j == 0 else m_full
            Ej = np.exp(2j * math.pi * np.outer(xs[:, j], mj))
            T = T.reshape(-1, len(mj), p)
            T = np.einsum("amp,pm->ap", T, Ej)
        out[:, lo : lo + p] = T.reshape(C, p).real
    return out


def structure_factor(x: np.ndarray, K: int) -> np.ndarray:
    """sum_j exp(-2 pi i k.x_j) on the half-space index layout (K+1, 2K+1, ...)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    N, d = x.shape
    m_full = np.arange(-K, K + 1)
    E1 = np.exp(-2j * math.pi * np.outer(x[:, 0], np.arange(0, K + 1)))
    if d == 1:
        return E1.sum(axis=0)
    P = np.ones((N, 1), dtype=complex)
    for j in range(1, d):
        Ej = np.exp(-2j * math.pi * np.outer(x[:, j], m_full))
        P = (P[:, :, None] * Ej[:, None, :]).reshape(N, -1)
    return (E1.T @ P).reshape((K + 1,) + (2 * K + 1,) * (d - 1))


def half_space_wavevectors(d: int, K: int) -> list[np.ndarray]:
    m = np.arange(-K, K + 1)
    axes = [np.arange(0, K + 1)] + [m] * (d - 1)
    return [g.astype(float) for g in np.meshgrid(*axes, indexing="ij")]


def minimum_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x - np.rint(x)


@dataclass
class KernelTable:
    params: RieszParams
    split_parameter: float
    fourier_cutoff: int
    accuracy: float
    radial: _HermiteTable
    long_coeffs: np.ndarray
    mean_shift: float
    long_at_origin: float
    r0: float
    lap: "KernelTable | None" = None

    # --- radial screened part -------------------------------------------------
    def _short(self, rsq):
        s = self.params.s
        r = np.sqrt(rsq)
        return _near(s, r) - self.radial.value(rsq)

    def _short_grad_factor(self, rsq):
        # grad S = factor * x
        _, dw = self.radial.value_and_deriv(rsq)
        return _near_dr_over_r(self.params.s, rsq) - 2.0 * dw

    def short_pair(self, rsq):
        """Radial part S and gradient factor, grad S = factor * x."""
        s = self.params.s
        w, dw = self.radial.value_and_deriv(rsq)
        r = np.sqrt(rsq)
        return _near(s, r) - w, _near_dr_over_r(s, rsq) - 2.0 * dw

    def long_values(self, x, grad=False):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.params.d
        K = self.fourier_cutoff
        if not grad:
            return trig_sum(self.long_coeffs[None], x, K)[0]
        ks = half_space_wavevectors(d, K)
        stack = [self.long_coeffs] + [2j * math.pi * k * self.long_coeffs for k in ks]
        out = trig_sum(np.stack(stack), x, K)
        return out[0], out[1:].T

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        for arr in self._arrays().values():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _meta(self) -> dict:
        meta = {
            "params": self.params.as_dict(),
            "split_parameter": self.split_parameter,
            "fourier_cutoff": self.fourier_cutoff,
            "accuracy": self.accuracy,
            "radial_step": self.radial.h,
            "mean_shift": self.mean_shift,
            "long_at_origin": self.long_at_origin,
            "r0": self.r0,
        }
        if self.lap is not None:
            meta["lap"] = self.lap._meta()
        return meta

    def _arrays(self, prefix="") -> dict:
        arrs = {prefix + "w": self.radial.w, prefix + "dw": self.radial.dw, prefix + "d2w": self.radial.d2w,
                prefix + "long": self.long_coeffs}
        if self.lap is not None:
            arrs.update(self.lap._arrays(prefix + "lap_"))
        return arrs


def _assemble(meta: dict, arrays: dict, prefix: str = "") -> KernelTable:
    lap = _assemble(meta["lap"], arrays, prefix + "lap_") if "lap" in meta else None
    return KernelTable(
        params=RieszParams(**meta["params"]),
        split_parameter=meta["split_parameter"],
        fourier_cutoff=meta["fourier_cutoff"],
        accuracy=meta["accuracy"],
        radial=_HermiteTable(meta["radial_step"], arrays[prefix + "w"], arrays[prefix + "dw"], arrays[prefix + "d2w"]),
        long_coeffs=arrays[prefix + "long"],
        mean_shift=meta["mean_shift"],
        long_at_origin=meta["long_at_origin"],
        r0=meta["r0"],
        lap=lap,
    )


def save_table(table: KernelTable, path: str | Path) -> None:
    write_blob(path, {"kind": "riesz_kernel_table", **table._meta()}, table._arrays())


def load_table(path: str | Path) -> KernelTable:
    meta, arrays = read_blob(path)
    if meta.get("kind") != "riesz_kernel_table":
        raise KernelError(f"{path} is not a kernel table")
    return _assemble(meta, arrays)


def _build_radial(params: RieszParams, alpha: float, accuracy: float) -> _HermiteTable:
    s, d = params.s, params.d
    umax = (math.sqrt(d) / 2 + 0.3) ** 2
    n = 512
    while True:
        h = umax / n
        u = np.arange(n + 1) * h
        tab = _HermiteTable(h, *_w_exact(s, alpha, u))
        mid = (np.arange(n) + 0.5) * h
        we, dwe, _ = _w_exact(s, alpha, mid)
        wi, dwi = tab.value_and_deriv(mid)
        # gradient error is 2 r |dw error| with r <= sqrt(umax)
        err = max(np.max(np.abs(wi - we)), 2 * math.sqrt(umax) * np.max(np.abs(dwi - dwe)))
        if err <= accuracy / 20:
            return tab
        if n >= 2**20:
            raise KernelError(f"radial table cannot reach accuracy {accuracy:g}; achievable {err:g}")
        n *= 2


def _mean_shift(params: RieszParams, alpha: float) -> float:
    d, s = params.d, params.s
    if s == 0:
        return -(alpha ** (-d / 2)) / d
    return -(math.pi ** (s / 2) / math.gamma(s / 2)) * 2 * alpha ** ((s - d) / 2) / (d - s)


def _scan_r0(table: KernelTable) -> float:
    d = table.params.d
    dirs = [np.eye(d)[i] for i in range(d)]
    dirs.append(np.ones(d) / math.sqrt(d))
    rng = np.random.default_rng(12345)
    for _ in range(24):
        v = rng.normal(size=d)
        dirs.append(v / np.linalg.norm(v))
    radii = np.geomspace(1e-4, 0.25, 400)
    pts = np.concatenate([np.outer(radii, v) for v in dirs])
    lap = eval_lap_g(table, pts).reshape(len(dirs), len(radii))
    bad = np.nonzero(np.max(lap, axis=0) > 0)[0]
    if len(bad) == 0:
        return 0.25
    if bad[0] == 0:
        return 0.0
    return float(radii[bad[0] - 1])


def make_kernel(params: RieszParams, accuracy: float = 1e-8, with_laplacian: bool = True) -> KernelTable:
    """Build an evaluator for g with absolute error about `accuracy`."""
    if not accuracy > 0:
        raise KernelError("accuracy must be positive")
    if accuracy < 1e-12:
        raise KernelError(f"accuracy {accuracy:g} below what double-precision tables certify; achievable 1e-12")
    alpha = _choose_alpha(params, accuracy)
    K = _choose_cutoff(params, alpha, accuracy)
    radial = _build_radial(params, alpha, accuracy)
    coeffs = _long_coeffs(params, alpha, K)
    lap = None
    if with_laplacian and params.s + 2 < params.d:
        lap = make_kernel(RieszParams(params.d, params.s + 2), accuracy, with_laplacian=False)
    table = KernelTable(
        params=params,
        split_parameter=alpha,
        fourier_cutoff=K,
        accuracy=accuracy,
        radial=radial,
        long_coeffs=coeffs,
        mean_shift=_mean_shift(params, alpha),
        long_at_origin=float(coeffs.sum()),
        r0=float("nan"),
        lap=lap,
    )
    if lap is not None:
        table.r0 = _scan_r0(table)
    return table


def _prep(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = minimum_image(np.atleast_2d(x))
    if x.shape[-1] != d:
        raise KernelError(f"points must have {d} coordinates")
    rsq = np.sum(x * x, axis=-1)
    return x, rsq, single


def _check_nonzero(rsq):
    if np.any(rsq == 0):
        raise SingularityError("g is singular at x = 0")


def eval_g(table: KernelTable, x) -> np.ndarray | float:
    x, rsq, single = _prep(x, table.params.d)
    _check_nonzero(rsq)
    val = table._short(rsq) + table.long_values(x) + table.mean_shift
    return float(val[0]) if single else val


def eval_grad_g(table: KernelTable, x) -> np.ndarray:
    x, rsq, single = _prep(x, table.params.d)
    _check_nonzero(rsq)
    _, lg = table.long_values(x, grad=True)
    grad = table._short_grad_factor(rsq)[:, None] * x + lg
    return grad[0] if single else grad


def eval_g_and_grad(table: KernelTable, x):
    x, rsq, single = _prep(x, table.params.d)
    _check_nonzero(rsq)
    lv, lg = table.long_values(x, grad=True)
    sv, sf = table.short_pair(rsq)
    val = sv + lv + table.mean_shift
    grad = sf[:, None] * x + lg
    return (val[0], grad[0]) if single else (val, grad)


def lap_ratio(params: RieszParams) -> float:
    return params.c_ds / riesz_constant(params.d, params.s + 2)


def eval_minus_lap_g(table: KernelTable, x):
    """(-Laplacian) g, evaluated as a scaled s+2 kernel."""
    if table.lap is None:
        raise KernelError(f"Laplacian of g needs s < d-2 (s={table.params.s}, d={table.params.d})")
    return lap_ratio(table.params) * eval_g(table.lap, x)


def eval_lap_g(table: KernelTable, x):
    return -eval_minus_lap_g(table, x)


def eval_g_delta(table: KernelTable, x, delta: float, grad: bool = False):
    """Truncated kernel (1 - chi(x/delta)) g(x); optionally with its gradient."""
    if not (0 < delta < 0.25):
        raise KernelError("truncation radius must lie in (0, 1/4)")
    x, rsq, single = _prep(x, table.params.d)
    r = np.sqrt(rsq)
    chi, dchi = cutoff_chi(r / delta)
    val = np.zeros(len(r))
    gval = np.zeros_like(x)
    live = chi < 1.0
    if np.any(live):
        v, gr = eval_g_and_grad(table, x[live])
        v = np.atleast_1d(v)
        gr = np.atleast_2d(gr)
        c = chi[live]
        val[live] = (1 - c) * v
        if grad:
            rl = r[live]
            radial = np.where(rl > 0, dchi[live] / (delta * np.where(rl > 0, rl, 1.0)), 0.0)
            gval[live] = (1 - c)[:, None] * gr - (v * radial)[:, None] * x[live]
    if grad:
        return (val[0], gval[0]) if single else (val, gval)
    return float(val[0]) if single else val


def sphere_multiplier(d: int, z: np.ndarray) -> np.ndarray:
    """Fourier transform of the uniform probability measure on the unit sphere at |xi| = z/(2 pi)."""
    z = np.asarray(z, dtype=float)
    if d == 1:
        return np.cos(z)
    if d == 3:
        return np.sinc(z / math.pi)
    nu = d / 2 - 1
    out = np.ones_like(z)
    nz = z > 1e-8
    out[nz] = math.gamma(d / 2) * (2 / z[nz]) ** nu * special.jv(nu, z[nz])
    out[~nz] = 1 - z[~nz] ** 2 / (2 * d)
    return out


def _radial_moment(table: KernelTable, rho):
    # G(rho) = int_0^rho S(t) t dt
    return _near_moment(table.params.s, rho) - 0.5 * table.radial.integral(np.asarray(rho) ** 2)


def _smeared_short(table: KernelTable, r, eta):
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    tiny = r < 1e-9 * eta
    rr = r[~tiny]
    out[~tiny] = (_radial_moment(table, rr + eta) - _radial_moment(table, np.abs(rr - eta))) / (2 * rr * eta)
    if np.any(tiny):
        out[tiny] = table._short(np.array([eta * eta]))[0]
    return out


_GL_X, _GL_W = np.polynomial.legendre.leggauss(40)


def _double_smeared_short(table: KernelTable, r, eta, chunk: int = 4096):
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    tiny = r < 1e-9 * eta
    if np.any(tiny):
        out[tiny] = _smeared_short(table, np.array([eta]), eta)[0]
    idx = np.nonzero(~tiny)[0]
    v = (_GL_X + 1) / 2
    wv = _GL_W / 2
    for lo_ in range(0, len(idx), chunk):
        ii = idx[lo_ : lo_ + chunk]
        ri = r[ii]
        lo, hi = np.abs(ri - eta), ri + eta
        # substitution t = a + (b-a) v^2 from the kink at t = eta when it lies inside
        split = ri < 2 * eta
        a1 = np.where(split, eta, lo)
        s1 = np.where(split, -1.0, 1.0)
        b1 = lo
        a2 = np.where(split, eta, hi)
        total = np.zeros(len(ii))
        for a, b, sign in ((a1, np.where(split, b1, hi), s1), (a2, hi, 1.0)):
            t = a[:, None] + (b - a)[:, None] * v[None] ** 2
            jac = 2 * (b - a)[:, None] * v[None]
            f = _smeared_short(table, t.ravel(), eta).reshape(t.shape)
            total += sign * np.sum(wv * jac * t * f, axis=1)
        out[ii] = total / (2 * ri * eta)
    return out


def _check_eta(table: KernelTable, eta: float):
    if table.params.d != 3:
        raise KernelError("real-space sphere smearing is implemented for d = 3")
    if not np.isfinite(table.r0):
        raise KernelError("smearing needs a sub-Coulomb table with a subharmonicity radius")
    if not (0 < eta < table.r0 / 2):
        raise KernelError(f"smearing radius must lie in (0, r0/2) = (0, {table.r0 / 2:g})")


def eval_g_smeared(table: KernelTable, x, eta: float, times: int = 1):
    """g convolved with the uniform sphere measure of radius eta, once or twice."""
    _check_eta(table, eta)
    x, rsq, single = _prep(x, table.params.d)
    r = np.sqrt(rsq)
    ks = half_space_wavevectors(table.params.d, table.fourier_cutoff)
    kabs = np.sqrt(sum(k * k for k in ks))
    mult = sphere_multiplier(3, 2 * math.pi * eta * kabs) ** times
    lv = trig_sum((table.long_coeffs * mult)[None], x, table.fourier_cutoff)[0]
    if times == 1:
        sv = _smeared_short(table, r, eta)
    elif times == 2:
        sv = _double_smeared_short(table, r, eta)
    else:
        raise KernelError("smearing power must be 1 or 2")
    val = sv + lv + table.mean_shift
    return float(val[0]) if single else val


def kernel_fourier_coefficients(table: KernelTable, n: int) -> np.ndarray:
    """Fourier coefficients of g on an n^d band, computed from real-space values.

    g is split into the screened radial function S (taken from the incomplete
    gamma function, not from the table) plus the periodic remainder g - S.
    The remainder is sampled on a cell-centred grid and transformed by FFT; S is
    transformed by one-dimensional radial quadrature over |x| < 1/2.  Only
    d = 3.  Returns the full fftn-ordered coefficient array.
    """
    from scipy import integrate

    d, s = table.params.d, table.params.s
    if d != 3:
        raise KernelError("real-space coefficient check is implemented for d = 3")
    alpha = table.split_parameter
    ax = (np.arange(n) + 0.5) / n - 0.5
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    r = np.linalg.norm(X, axis=1)
    rem = np.empty(len(r))
    for lo in range(0, len(r), 65536):
        sl = slice(lo, lo + 65536)
        rem[sl] = eval_g(table, X[sl]) - _screened_exact(s, alpha, r[sl])
    rem = rem.reshape(n, n, n)
    # cell-centred samples carry a half-cell phase
    k1 = np.fft.fftfreq(n, 1.0 / n)
    coef = np.fft.fftn(rem) / n**3
    phase = np.exp(-2j * math.pi * k1 * (0.5 / n - 0.5))
    coef = coef * phase[:, None, None] * phase[None, :, None] * phase[None, None, :]
    ksq = k1[:, None, None] ** 2 + k1[None, :, None] ** 2 + k1[None, None, :] ** 2
    uniq, inv = np.unique(ksq, return_inverse=True)
    radial_ft = np.empty(len(uniq))
    for i, kq in enumerate(uniq):
        kv = math.sqrt(kq)
        if kv == 0:
            f = lambda t: 4 * math.pi * t * t * _screened_exact(s, alpha, t)
        else:
            f = lambda t, kv=kv: 2 * t * _screened_exact(s, alpha, t) * math.sin(2 * math.pi * kv * t) / kv
        radial_ft[i] = integrate.quad(f, 0, 0.5, limit=500, epsabs=1e-15, epsrel=1e-13)[0]
    return coef + radial_ft[inv].reshape(ksq.shape)
