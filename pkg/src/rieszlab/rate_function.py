"""Action functionals, the weighted dual norm and the rate function.

Residuals are tested against the weighted Dirichlet form: for a density nu
and a mean-zero distribution r,

    ||r||_{-1,nu}^2 = sup_psi { 2 <r, psi> - int |grad psi|^2 dnu },

attained at the solution of -div(nu grad psi) = r, where the sup equals
int |grad psi|^2 dnu.  With this sign a tilted solution with drift b
(a gradient) has residual -div(b mu) and recovered drift grad psi = b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mckean_vlasov import a_class_norm, q_functional, self_interaction_weak_form
from .particle_dynamics import DriftField, pairwise_force
from .riesz_kernel import KernelTable, RieszParams
from .spectral_fields import (
    ActiveModes,
    FieldError,
    FieldTrajectory,
    SpectralField,
    active_modes,
    backward,
    energy,
    forward,
    spectral_grid,
)


class SolverError(RuntimeError):
    pass


INFINITE = math.inf


# --- test functions -------------------------------------------------------

@dataclass
class TestFunction:
    """Space-time test function phi(t, x) given by its value and time derivative at any t."""

    __test__ = False  # not a pytest class

    value: Callable[[float], SpectralField]
    time_derivative: Callable[[float], SpectralField]
    descriptor: str = ""

    @classmethod
    def separable(cls, f: SpectralField, a: Callable[[float], float], da: Callable[[float], float], descriptor=""):
        return cls(lambda t: f.with_coeffs(a(t) * f.coeffs, "scalar"),
                   lambda t: f.with_coeffs(da(t) * f.coeffs, "scalar"), descriptor)

    def __add__(self, other):
        return TestFunction(lambda t: _add(self.value(t), other.value(t), 1.0),
                            lambda t: _add(self.time_derivative(t), other.time_derivative(t), 1.0),
                            f"({self.descriptor})+({other.descriptor})")

    def __sub__(self, other):
        return TestFunction(lambda t: _add(self.value(t), other.value(t), -1.0),
                            lambda t: _add(self.time_derivative(t), other.time_derivative(t), -1.0),
                            f"({self.descriptor})-({other.descriptor})")


def _add(a: SpectralField, b: SpectralField, sign: float) -> SpectralField:
    return a.with_coeffs(a.coeffs + sign * b.coeffs, "scalar")


def zero_test_function(shape) -> TestFunction:
    z = SpectralField(shape, values=np.zeros(shape))
    return TestFunction(lambda t: z, lambda t: z, "0")


def _grad(f: SpectralField) -> np.ndarray:
    g = f.grid
    return backward(np.stack([dj * f.coeffs for dj in g.deriv]), g.shape)


def _lap(f: SpectralField) -> np.ndarray:
    return backward(-4 * math.pi**2 * f.grid.ksq * f.coeffs, f.grid.shape)


@dataclass
class ActionReport:
    value: float
    terms: dict
    descriptor: str = ""


def action_S(traj: FieldTrajectory, phi: TestFunction, sigma: float, params: RieszParams,
             q_bound: float | None = None) -> ActionReport:
    """S(mu, phi) with its five terms; time integrals by the trapezoid rule on traj.times."""
    q = q_functional(traj, params, sigma) if q_bound is None else q_bound
    if not np.isfinite(q):
        return ActionReport(INFINITE, {}, phi.descriptor)
    t = traj.times
    heat, quad, inter = [], [], []
    for ti, mu in zip(t, traj.fields):
        ph = phi.value(ti)
        dph = phi.time_derivative(ti)
        m = mu.values
        heat.append(float(np.mean(m * (dph.values + sigma * _lap(ph)))))
        gp = _grad(ph)
        quad.append(float(np.mean(m * np.sum(gp**2, axis=0))))
        inter.append(self_interaction_weak_form(mu, SpectralField(mu.shape, values=gp, kind="vector"), params))
    terms = {
        "final_pairing": float(np.mean(traj.fields[-1].values * phi.value(t[-1]).values)),
        "initial_pairing": -float(np.mean(traj.fields[0].values * phi.value(t[0]).values)),
        "heat": -float(np.trapezoid(heat, t)),
        "quadratic": -sigma * float(np.trapezoid(quad, t)),
        "interaction": float(np.trapezoid(inter, t)),
    }
    return ActionReport(sum(terms.values()), terms, phi.descriptor)


def discrete_action_S_N(times: np.ndarray, positions: np.ndarray, phi: TestFunction, sigma: float,
                        table: KernelTable) -> ActionReport:
    """S_N along a particle path: the same terms with empirical measures, diagonal removed.

    The interaction term uses sum_{j != i} grad g(x_i - x_j) = -N * force_i with
    the untruncated kernel.
    """
    times = np.asarray(times, dtype=float)
    heat, quad, inter = [], [], []
    for ti, x in zip(times, positions):
        ph = phi.value(ti)
        dph = phi.time_derivative(ti)
        lap = ph.with_coeffs(-4 * math.pi**2 * ph.grid.ksq * ph.coeffs, "scalar")
        heat_f = dph.with_coeffs(dph.coeffs + sigma * lap.coeffs, "scalar")
        heat.append(float(np.mean(active_modes(heat_f, 0.0)(x)[0])))
        gmodes = active_modes(SpectralField(ph.shape, coeffs=np.stack([dj * ph.coeffs for dj in ph.grid.deriv]),
                                            kind="vector"), 0.0)
        gp = gmodes(x).T
        quad.append(float(np.mean(np.sum(gp**2, axis=1))))
        F = pairwise_force(x, table, None)
        inter.append(-float(np.mean(np.sum(gp * F, axis=1))))
    first = active_modes(phi.value(times[0]), 0.0)(positions[0])[0]
    last = active_modes(phi.value(times[-1]), 0.0)(positions[-1])[0]
    terms = {
        "final_pairing": float(np.mean(last)),
        "initial_pairing": -float(np.mean(first)),
        "heat": -float(np.trapezoid(heat, times)),
        "quadratic": -sigma * float(np.trapezoid(quad, times)),
        "interaction": float(np.trapezoid(inter, times)),
    }
    return ActionReport(sum(terms.values()), terms, phi.descriptor)


# --- weighted dual norm ---------------------------------------------------

@dataclass
class DualNormResult:
    norm: float
    psi: SpectralField
    grad_psi: np.ndarray
    sup_value: float
    dirichlet: float
    gap_abs: float
    gap_rel: float
    iterations: int
    rel_residual: float
    null_component: float


def _null_mask(g) -> np.ndarray:
    """Modes annihilated by every spectral derivative (all components 0 or Nyquist)."""
    m = np.ones(g.coeff_shape, dtype=bool)
    for j, kj in enumerate(g.k):
        m &= (kj == 0) | (np.abs(kj) == g.shape[j] // 2)
    return m


def dual_norm_minus1(r: SpectralField, mu: SpectralField, tol: float = 1e-10, maxiter: int = 500,
                     floor: float = 1e-8) -> DualNormResult:
    """||r||_{-1,mu} by preconditioned CG on -div(mu grad psi) = r.

    Works on half-layout coefficients with the real inner product of the
    full Fourier series.  The preconditioner inverts mean(mu) (2 pi |k|)^2.
    """
    if r.shape != mu.shape:
        raise FieldError("residual and density live on different grids")
    m = mu.values
    if float(m.min()) <= floor:
        raise SolverError(f"density touches zero (min {m.min():.3e}); weighted norm undefined")
    g = r.grid
    null = _null_mask(g)
    w = g.weight

    def dot(a, b):
        return float(np.sum(w * (a.conj() * b).real))

    def apply(c):
        grads = backward(np.stack([dj * c for dj in g.deriv]), g.shape)
        flux = forward(m[None] * grads, g.d)
        out = -sum(dj * flux[j] for j, dj in enumerate(g.deriv))
        out[null] = 0.0
        return out

    sym = sum(np.abs(dj) ** 2 for dj in g.deriv)
    pre = np.zeros(g.coeff_shape)
    pre[~null] = 1.0 / (float(m.mean()) * sym[~null])

    rhs = r.coeffs.copy()
    null_comp = math.sqrt(max(dot(rhs * null, rhs * null), 0.0))
    rhs[null] = 0.0
    bnorm = math.sqrt(dot(rhs, rhs))
    x = np.zeros_like(rhs)
    it = 0
    rel = 0.0
    if bnorm > 0:
        res = rhs.copy()
        z = pre * res
        p = z.copy()
        rz = dot(res, z)
        for it in range(1, maxiter + 1):
            Ap = apply(p)
            alpha = rz / dot(p, Ap)
            x += alpha * p
            res -= alpha * Ap
            rel = math.sqrt(dot(res, res)) / bnorm
            if rel < tol:
                break
            z = pre * res
            rz_new = dot(res, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        else:
            raise SolverError(f"CG did not reach relative residual {tol:g} (got {rel:.3e})")
    psi = SpectralField(g.shape, coeffs=x)
    gp = backward(np.stack([dj * x for dj in g.deriv]), g.shape)
    dirichlet = float(np.mean(np.sum(gp**2, axis=0) * m))
    pairing = dot(rhs, x)
    sup_value = 2 * pairing - dirichlet
    gap = abs(sup_value - dirichlet)
    return DualNormResult(math.sqrt(max(dirichlet, 0.0)), psi, gp, sup_value, dirichlet, gap,
                          gap / dirichlet if dirichlet > 0 else 0.0, it, rel, null_comp)


# --- residuals, drift recovery and the rate function ----------------------

def mve_residuals(traj: FieldTrajectory, sigma: float, params: RieszParams) -> list:
    """d/dt mu - sigma Lap mu - div(mu grad g*mu) per time slice.

    Time derivative by second-order finite differences (one-sided at the ends)."""
    stack = traj.stack()
    dmu = np.gradient(stack, traj.times, axis=0, edge_order=2)
    out = []
    for i, mu in enumerate(traj.fields):
        g = mu.grid
        sym = g.riesz_symbol(params)
        vel = backward(np.stack([dj * sym * mu.coeffs for dj in g.deriv]), g.shape)
        flux = forward(mu.values[None] * vel, g.d)
        div = sum(dj * flux[j] for j, dj in enumerate(g.deriv))
        c = forward(dmu[i], g.d) + sigma * 4 * math.pi**2 * g.ksq * mu.coeffs - div
        c[g.zero] = 0.0
        out.append(SpectralField(g.shape, coeffs=c))
    return out


@dataclass
class DriftRecovery:
    drift: DriftField
    solves: list
    norms_sq: np.ndarray


def recover_drift(traj: FieldTrajectory, sigma: float, params: RieszParams, tol: float = 1e-10) -> DriftRecovery:
    res = mve_residuals(traj, sigma, params)
    solves = [dual_norm_minus1(r, mu, tol) for r, mu in zip(res, traj.fields)]
    fields = [SpectralField(traj.shape, values=s.grad_psi, kind="vector") for s in solves]
    return DriftRecovery(DriftField(traj.times, fields), solves, np.array([s.dirichlet for s in solves]))


@dataclass
class RateReport:
    I: float
    sup_branch: float
    energy_branch: float
    Q: float
    initial_mismatch: float
    a_class: float
    max_gap_abs: float
    max_gap_rel: float
    max_cg_residual: float
    recovery: DriftRecovery | None = None
    notes: dict = field(default_factory=dict)

    @property
    def I_tilde(self) -> float:
        return self.sup_branch


def initial_mismatch(traj: FieldTrajectory, gamma: SpectralField, params: RieszParams) -> float:
    diff = traj.fields[0].with_coeffs(traj.fields[0].coeffs - gamma.coeffs, "scalar")
    return math.sqrt(max(energy(diff, params) / params.c_ds, 0.0))


def rate_function_I(traj: FieldTrajectory, gamma: SpectralField, sigma: float, params: RieszParams,
                    init_tol: float = 1e-10, tol: float = 1e-10) -> RateReport:
    mis = initial_mismatch(traj, gamma, params)
    q = q_functional(traj, params, sigma)
    if mis > init_tol or not np.isfinite(q):
        return RateReport(INFINITE, INFINITE, INFINITE, q, mis, math.nan, math.nan, math.nan, math.nan)
    rec = recover_drift(traj, sigma, params, tol)
    sup_branch = float(np.trapezoid(rec.norms_sq, traj.times)) / (4 * sigma)
    energy_branch = (q - energy(gamma, params)) / (2 * sigma)
    return RateReport(
        I=max(sup_branch, energy_branch),
        sup_branch=sup_branch,
        energy_branch=energy_branch,
        Q=q,
        initial_mismatch=mis,
        a_class=a_class_norm(traj, params),
        max_gap_abs=max(s.gap_abs for s in rec.solves),
        max_gap_rel=max(s.gap_rel for s in rec.solves),
        max_cg_residual=max(s.rel_residual for s in rec.solves),
        recovery=rec,
    )


def girsanov_log_density(noise_pairing: float, quadratic: float, sigma: float) -> float:
    """log dP/dP_b along a path simulated under the tilted law.

    noise_pairing = sum_i int b(x_i) . dW_i with W the driving noise of the tilted
    system; quadratic = sum_i int |b(x_i)|^2 dt.
    """
    return -noise_pairing / math.sqrt(2 * sigma) - quadratic / (4 * sigma)
