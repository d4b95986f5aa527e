"""Fourier toolbox for fields on uniform grids over the torus [-1/2, 1/2)^d.

Grid point j sits at -1/2 + j/n along each axis.  Coefficients follow the
Fourier-series convention f(x) = sum_k fhat(k) exp(2 pi i k.(x + 1/2)),
stored in the rfftn half layout (last axis nonnegative).  The shift by 1/2
only matters for point evaluation and painting, where it is applied
explicitly; multipliers are indifferent to it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import special

from .blob import read_blob, write_blob
from .riesz_kernel import KernelTable, RieszParams, sphere_multiplier


class FieldError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class SpectralGrid:
    """Wavevectors, norms and half-layout weights for one grid shape."""

    def __init__(self, shape: tuple[int, ...]):
        shape = tuple(int(n) for n in shape)
        for n in shape:
            if n < 2 or n & (n - 1):
                raise FieldError(f"grid sizes must be powers of two, got {shape}")
        self.shape = shape
        self.d = len(shape)
        self.size = int(np.prod(shape))
        axes = [np.fft.fftfreq(n, 1.0 / n) for n in shape[:-1]] + [np.fft.rfftfreq(shape[-1], 1.0 / shape[-1])]
        self.k = [g for g in np.meshgrid(*axes, indexing="ij", sparse=True)]
        self.coeff_shape = tuple(len(a) for a in axes)
        self.ksq = sum(kj.astype(float) ** 2 for kj in self.k)
        self.kabs = np.sqrt(self.ksq)
        # derivative symbols 2 pi i k_j with the Nyquist mode removed
        self.deriv = []
        for j, kj in enumerate(self.k):
            sym = 2j * math.pi * kj.astype(float)
            sym = np.where(np.abs(kj) == shape[j] // 2, 0.0, sym)
            self.deriv.append(sym)
        last = np.fft.rfftfreq(shape[-1], 1.0 / shape[-1])
        wl = np.full(len(last), 2.0)
        wl[0] = 1.0
        if shape[-1] % 2 == 0:
            wl[-1] = 1.0
        self.weight = np.broadcast_to(wl.reshape((1,) * (self.d - 1) + (-1,)), self.coeff_shape)
        self.zero = (0,) * self.d

    def points(self) -> np.ndarray:
        axes = [-0.5 + np.arange(n) / n for n in self.shape]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)

    def dealias_mask(self) -> np.ndarray:
        m = np.ones(self.coeff_shape, dtype=bool)
        for j, kj in enumerate(self.k):
            m &= np.abs(kj) < self.shape[j] / 3
        return m

    def active_band(self) -> np.ndarray:
        """Modes with no Nyquist component along any axis."""
        m = np.ones(self.coeff_shape, dtype=bool)
        for j, kj in enumerate(self.k):
            m &= np.abs(kj) < self.shape[j] // 2
        return m

    def riesz_symbol(self, params: RieszParams) -> np.ndarray:
        out = np.zeros(self.coeff_shape)
        nz = self.ksq > 0
        out[nz] = params.c_ds * (4 * math.pi**2 * self.ksq[nz]) ** ((params.s - params.d) / 2)
        return out

    def full_sum(self, values: np.ndarray) -> float:
        """Sum over all of Z^d of a quantity given on the half layout (Hermitian-symmetric)."""
        return float(np.sum(self.weight * values))


@lru_cache(maxsize=16)
def spectral_grid(shape: tuple[int, ...]) -> SpectralGrid:
    return SpectralGrid(tuple(shape))


def forward(values: np.ndarray, d: int) -> np.ndarray:
    axes = tuple(range(values.ndim - d, values.ndim))
    shape = values.shape[values.ndim - d :]
    return sfft.rfftn(values, axes=axes) / float(np.prod(shape))


def backward(coeffs: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    d = len(shape)
    axes = tuple(range(coeffs.ndim - d, coeffs.ndim))
    return sfft.irfftn(coeffs, s=shape, axes=axes) * float(np.prod(shape))


class SpectralField:
    """Scalar or vector field stored on a grid, with lazy Fourier coefficients.

    Vector fields carry a leading component axis of length d.
    """

    def __init__(self, shape, values=None, coeffs=None, kind: str = "scalar"):
        self.grid = spectral_grid(tuple(shape))
        if kind not in ("scalar", "density", "vector"):
            raise FieldError(f"unknown field kind {kind!r}")
        self.kind = kind
        if values is None and coeffs is None:
            raise FieldError("need values or coefficients")
        self._values = None if values is None else np.asarray(values, dtype=float)
        self._coeffs = None if coeffs is None else np.asarray(coeffs, dtype=complex)
        expect = self.grid.shape if kind != "vector" else (self.grid.d,) + self.grid.shape
        if self._values is not None and self._values.shape != expect:
            raise FieldError(f"values have shape {self._values.shape}, expected {expect}")

    @property
    def shape(self):
        return self.grid.shape

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = backward(self._coeffs, self.grid.shape)
        return self._values

    @property
    def coeffs(self) -> np.ndarray:
        if self._coeffs is None:
            self._coeffs = forward(self._values, self.grid.d)
        return self._coeffs

    @property
    def mean(self) -> float:
        if self.kind == "vector":
            raise FieldError("mean of a vector field is per component")
        return float(self.coeffs[self.grid.zero].real)

    @classmethod
    def from_function(cls, shape, func, kind="scalar"):
        pts = spectral_grid(tuple(shape)).points()
        return cls(shape, values=np.asarray(func(pts), dtype=float), kind=kind)

    def with_coeffs(self, coeffs, kind=None):
        return SpectralField(self.shape, coeffs=coeffs, kind=kind or self.kind)

    def check_density(self, tol: float = 1e-10) -> None:
        if abs(self.mean - 1.0) > 1e-9:
            raise FieldError(f"density mean is {self.mean}, expected 1")
        lo = float(self.values.min())
        if lo < -tol:
            raise FieldError(f"density has negative values down to {lo:.3e}")

    def l2_norm(self) -> float:
        return float(np.sqrt(np.mean(self.values**2)))


@dataclass
class FieldTrajectory:
    times: np.ndarray
    fields: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.fields):
            raise FieldError("times and fields differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise FieldError("trajectory times must be strictly increasing")
        if len({f.shape for f in self.fields}) > 1:
            raise FieldError("all fields in a trajectory must share a grid")

    @property
    def shape(self):
        return self.fields[0].shape

    def stack(self) -> np.ndarray:
        return np.stack([f.values for f in self.fields])

    def at(self, t: float) -> SpectralField:
        """Linear interpolation in time."""
        if t <= self.times[0]:
            return self.fields[0]
        if t >= self.times[-1]:
            return self.fields[-1]
        i = int(np.searchsorted(self.times, t)) - 1
        lam = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        v = (1 - lam) * self.fields[i].values + lam * self.fields[i + 1].values
        return SpectralField(self.shape, values=v, kind=self.fields[i].kind)

    def save(self, path) -> None:
        write_blob(path, {"kind": "field_trajectory", "field_kind": self.fields[0].kind, "shape": list(self.shape),
                          "metadata": self.metadata}, {"times": self.times, "values": self.stack()})

    @classmethod
    def load(cls, path):
        meta, arrs = read_blob(path)
        if meta.get("kind") != "field_trajectory":
            raise FieldError(f"{path} is not a field trajectory")
        fields = [SpectralField(meta["shape"], values=v, kind=meta["field_kind"]) for v in arrs["values"]]
        return cls(arrs["times"], fields, meta["metadata"])


def _symbol_of(obj) -> RieszParams:
    return obj.params if isinstance(obj, KernelTable) else obj


def sobolev_norm(f: SpectralField, alpha: float) -> float:
    """Homogeneous H^alpha seminorm over the resolved band, zero mode excluded."""
    g = f.grid
    mult = np.zeros(g.coeff_shape)
    nz = g.ksq > 0
    mult[nz] = (4 * math.pi**2 * g.ksq[nz]) ** alpha
    c = f.coeffs
    return math.sqrt(max(g.full_sum(mult * np.abs(c) ** 2), 0.0))


def riesz_convolve(f: SpectralField, kernel, kind: str = "g", mask=None) -> SpectralField:
    """g*f, grad g*f, or Laplacian g*f through the Fourier multiplier."""
    params = _symbol_of(kernel)
    g = f.grid
    sym = g.riesz_symbol(params)
    if mask is not None:
        sym = sym * mask
    c = f.coeffs
    if kind == "g":
        return f.with_coeffs(sym * c, kind="scalar")
    if kind == "grad":
        return f.with_coeffs(np.stack([dj * sym * c for dj in g.deriv]), kind="vector")
    if kind == "lap":
        return f.with_coeffs(-4 * math.pi**2 * g.ksq * sym * c, kind="scalar")
    raise FieldError(f"unknown convolution kind {kind!r}")


def energy(mu: SpectralField, kernel) -> float:
    """Riesz energy: sum_k ghat(k) |muhat(k)|^2."""
    params = _symbol_of(kernel)
    g = mu.grid
    return g.full_sum(g.riesz_symbol(params) * np.abs(mu.coeffs) ** 2)


def enstrophy(mu: SpectralField, kernel) -> float:
    """Riesz enstrophy: sum_k (2 pi |k|)^2 ghat(k) |muhat(k)|^2."""
    params = _symbol_of(kernel)
    g = mu.grid
    return g.full_sum(4 * math.pi**2 * g.ksq * g.riesz_symbol(params) * np.abs(mu.coeffs) ** 2)


def gradient(f: SpectralField) -> SpectralField:
    return f.with_coeffs(np.stack([dj * f.coeffs for dj in f.grid.deriv]), kind="vector")


def divergence(v: SpectralField) -> SpectralField:
    c = v.coeffs
    return v.with_coeffs(sum(dj * c[j] for j, dj in enumerate(v.grid.deriv)), kind="scalar")


def heat_mollify(f: SpectralField, eps: float, sigma: float = 1.0) -> SpectralField:
    """Multiply by exp(-sigma 4 pi^2 |k|^2 eps)."""
    if eps < 0:
        raise FieldError("mollification time must be nonnegative")
    if eps == 0:
        return f
    return f.with_coeffs(f.coeffs * np.exp(-sigma * 4 * math.pi**2 * f.grid.ksq * eps))


def smear_field(f: SpectralField, eta: float) -> SpectralField:
    g = f.grid
    return f.with_coeffs(f.coeffs * sphere_multiplier(g.d, 2 * math.pi * eta * g.kabs))


def fractional_gradient(f: SpectralField, order: float) -> SpectralField:
    """|grad|^order f, i.e. multiply by (2 pi |k|)^order off the zero mode."""
    g = f.grid
    mult = np.zeros(g.coeff_shape)
    nz = g.ksq > 0
    mult[nz] = (4 * math.pi**2 * g.ksq[nz]) ** (order / 2)
    return f.with_coeffs(mult * f.coeffs, kind="scalar")


def lp_norm(values: np.ndarray, p: float) -> float:
    """L^p norm on the unit torus by the periodic trapezoid rule."""
    return float(np.mean(np.abs(values) ** p) ** (1.0 / p))


def paint_particles(x: np.ndarray, shape, eta: float | None = None) -> SpectralField:
    """Band-limited projection of the empirical measure onto a grid.

    Returns the field whose coefficients on the grid band are
    (1/N) sum_j exp(-2 pi i k.(x_j + 1/2)), optionally sphere-smeared.
    Nyquist modes are dropped so the result is real and symmetric.
    """
    g = spectral_grid(tuple(shape))
    x = np.atleast_2d(np.asarray(x, dtype=float)) + 0.5
    N = x.shape[0]
    c = np.ones((N,) + g.coeff_shape, dtype=complex)
    for j, kj in enumerate(g.k):
        c = c * np.exp(-2j * math.pi * kj[None] * x[:, j].reshape((N,) + (1,) * g.d))
    coeffs = c.mean(axis=0) * g.active_band()
    f = SpectralField(shape, coeffs=coeffs, kind="scalar")
    return smear_field(f, eta) if eta else f


def evaluate_at_points(f: SpectralField, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Exact trigonometric interpolation of a scalar field at arbitrary points."""
    g = f.grid
    x = np.atleast_2d(np.asarray(x, dtype=float)) + 0.5
    c = f.coeffs * g.weight
    # Nyquist modes of the non-last axes carry their own conjugates; take real part at the end
    out = np.empty(x.shape[0])
    axes_k = [np.fft.fftfreq(n, 1.0 / n) for n in g.shape[:-1]] + [np.fft.rfftfreq(g.shape[-1], 1.0 / g.shape[-1])]
    for lo in range(0, x.shape[0], chunk):
        xs = x[lo : lo + chunk]
        p = xs.shape[0]
        T = c.reshape(-1, len(axes_k[-1])) @ np.exp(2j * math.pi * np.outer(axes_k[-1], xs[:, -1]))
        for j in range(g.d - 2, -1, -1):
            T = T.reshape(-1, len(axes_k[j]), p)
            T = np.einsum("amp,mp->ap", T, np.exp(2j * math.pi * np.outer(axes_k[j], xs[:, j])))
        out[lo : lo + p] = T.reshape(p).real
    return out


def torus_distance_matrix(shape) -> np.ndarray:
    g = spectral_grid(tuple(shape))
    pts = g.points().reshape(g.d, -1).T
    diff = pts[:, None, :] - pts[None, :, :]
    diff -= np.rint(diff)
    return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass
class TransportResult:
    value: float
    bias_bound: float
    iterations: int
    residual: float


def wasserstein1_proxy(mu: SpectralField, nu: SpectralField, regularization: float = 1e-3,
                       max_iters: int = 2000, tol: float = 1e-5,
                       fail_residual: float = 1e-3) -> TransportResult:
    """Entropic transport cost for the geodesic distance on the grid.

    Log-domain Sinkhorn with regularization annealed geometrically down to
    `regularization`, warm-starting the potentials.  The final plan is rounded
    onto the exact marginals, so value = <pi, C> is the cost of a coupling and
    W1 <= value <= W1 + bias_bound, with bias_bound = 2 reg log(M) plus the
    marginal residual times the diameter (M the number of grid cells).
    Running out of iterations is an error only above `fail_residual`.
    """
    if mu.shape != nu.shape:
        raise FieldError("measures must share a grid")
    a = np.clip(mu.values.ravel(), 0, None)
    b = np.clip(nu.values.ravel(), 0, None)
    a = a / a.sum()
    b = b / b.sum()
    ia = a > 0
    ib = b > 0
    C = torus_distance_matrix(mu.shape)[np.ix_(ia, ib)]
    M = len(a)
    la, lb = np.log(a[ia]), np.log(b[ib])
    # potentials scaled by reg: f = reg * fpot
    f = np.zeros(ia.sum())
    g = np.zeros(ib.sum())
    schedule = []
    r = max(float(C.max()), regularization)
    while r > regularization:
        schedule.append(r)
        r /= 4
    schedule.append(regularization)
    residual = np.inf
    it = 0
    for k, reg in enumerate(schedule):
        last = k == len(schedule) - 1
        stage_tol = tol if last else 1e-3
        lK = -C / reg
        for _ in range(max_iters):
            it += 1
            fp = la - special.logsumexp(lK + (g / reg)[None, :], axis=1)
            f = reg * fp
            gp = lb - special.logsumexp(lK + (f / reg)[:, None], axis=0)
            g = reg * gp
            if it % 5 == 0:
                row = np.exp(special.logsumexp(lK + (g / reg)[None, :] + (f / reg)[:, None], axis=1))
                residual = float(np.abs(row - a[ia]).sum())
                if residual < stage_tol:
                    break
        else:
            if last and residual > fail_residual:
                raise ConvergenceError("Sinkhorn iteration did not converge", residual)
    plan = np.exp(-C / regularization + (f / regularization)[:, None] + (g / regularization)[None, :])
    plan = _round_to_marginals(plan, a[ia], b[ib])
    value = float(np.sum(plan * C))
    return TransportResult(value, 2 * regularization * math.log(M) + residual * float(C.max()), it, residual)


def _round_to_marginals(plan, a, b):
    """Project an approximate plan onto the exact coupling set of (a, b)."""
    plan = plan * np.minimum(a / plan.sum(axis=1), 1.0)[:, None]
    plan = plan * np.minimum(b / plan.sum(axis=0), 1.0)[None, :]
    ea = a - plan.sum(axis=1)
    eb = b - plan.sum(axis=0)
    mass = ea.sum()
    if mass > 0:
        plan = plan + np.outer(ea, eb) / mass
    return plan


def wasserstein1_circle(mu: np.ndarray, nu: np.ndarray) -> float:
    """Exact W1 on the unit circle between two cell-averaged densities on the same grid."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    n = len(mu)
    diff = np.cumsum(mu / mu.sum() - nu / nu.sum())
    # W1 = min_c (1/n) sum |F - G - c|, minimized at the median
    return float(np.mean(np.abs(diff - np.median(diff))))


def save_field(path, f: SpectralField) -> None:
    write_blob(path, {"kind": "spectral_field", "shape": list(f.shape), "field_kind": f.kind,
                      "mean_one": f.kind == "density"}, {"values": f.values})


def load_field(path) -> SpectralField:
    meta, arrs = read_blob(path)
    if meta.get("kind") != "spectral_field":
        raise FieldError(f"{path} is not a field file")
    return SpectralField(meta["shape"], values=arrs["values"], kind=meta["field_kind"])


def radial_profile(f: SpectralField, nbins: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Bin-averaged values against distance to the origin."""
    pts = f.grid.points()
    r = np.sqrt(np.sum(pts**2, axis=0)).ravel()
    edges = np.linspace(0, r.max() + 1e-12, nbins + 1)
    idx = np.clip(np.digitize(r, edges) - 1, 0, nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    sums = np.bincount(idx, weights=f.values.ravel(), minlength=nbins)
    keep = counts > 0
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers[keep], sums[keep] / counts[keep]


def write_radial_profile_csv(path, f: SpectralField, nbins: int = 32) -> None:
    r, v = radial_profile(f, nbins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius", "value"])
        for a, b in zip(r, v):
            w.writerow([f"{a:.12g}", f"{b:.17g}"])


@dataclass
class ActiveModes:
    """The nonnegligible modes of a scalar or vector field, for cheap point evaluation."""

    kvecs: np.ndarray  # (M, d)
    coeffs: np.ndarray  # (C, M), half-layout weights folded in

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Values at points, shape (C, P)."""
        y = np.atleast_2d(np.asarray(x, dtype=float)) + 0.5
        if self.kvecs.shape[0] == 0:
            return np.zeros((self.coeffs.shape[0], y.shape[0]))
        phase = np.exp(2j * math.pi * (self.kvecs @ y.T))
        return (self.coeffs @ phase).real


def active_modes(f: SpectralField, rel_tol: float = 1e-14) -> ActiveModes:
    g = f.grid
    c = f.coeffs if f.kind == "vector" else f.coeffs[None]
    c = c * g.weight
    mag = np.max(np.abs(c), axis=0)
    top = float(mag.max()) if mag.size else 0.0
    keep = mag > rel_tol * top if top > 0 else np.zeros(mag.shape, dtype=bool)
    kv = np.stack([np.broadcast_to(kj, g.coeff_shape)[keep] for kj in g.k], axis=1).astype(float)
    return ActiveModes(kv, c[:, keep])
