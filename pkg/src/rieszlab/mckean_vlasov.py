"""Pseudo-spectral solver for the (optionally tilted) McKean-Vlasov equation

    d/dt mu = sigma Lap mu + div(mu grad g*mu) - div(b mu)

on the torus, plus the functionals evaluated along its trajectories.
Diffusion is integrated exactly through an integrating factor; the
transport term goes through classical RK4 in the transformed variable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .particle_dynamics import DriftField
from .riesz_kernel import RieszParams
from .spectral_fields import (
    FieldError,
    FieldTrajectory,
    SpectralField,
    backward,
    energy,
    enstrophy,
    forward,
    fractional_gradient,
    heat_mollify,
    lp_norm,
    spectral_grid,
)


class StabilityError(RuntimeError):
    pass


@dataclass
class MveConfig:
    params: RieszParams
    grid_shape: tuple
    sigma: float
    dt: float
    T: float
    initial: SpectralField
    drift: DriftField | None = None
    dealias: bool = False
    save_every: int = 1
    positivity_floor: float = -1e-8

    def __post_init__(self):
        self.params.require_dynamics()
        self.grid_shape = tuple(int(n) for n in self.grid_shape)
        if len(self.grid_shape) != self.params.d:
            raise FieldError("grid dimension does not match d")
        if not self.sigma > 0:
            raise FieldError("sigma must be positive")
        if tuple(self.initial.shape) != self.grid_shape:
            raise FieldError("initial datum lives on a different grid")
        if abs(self.initial.mean - 1) > 1e-9 or self.initial.values.min() < -1e-12:
            raise FieldError("initial datum must be a probability density")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


def _drift_values(drift: DriftField | None, t: float, shape) -> np.ndarray | None:
    if drift is None:
        return None
    f = drift.field_at(t)
    if tuple(f.shape) == tuple(shape):
        return f.values
    pts = spectral_grid(tuple(shape)).points().reshape(len(shape), -1).T
    return drift(t, pts).T.reshape((len(shape),) + tuple(shape))


class _Rhs:
    """Nonlinear part in coefficient space: div(mu (grad g*mu - b))."""

    def __init__(self, cfg: MveConfig):
        self.cfg = cfg
        self.grid = spectral_grid(cfg.grid_shape)
        self.sym = self.grid.riesz_symbol(cfg.params)
        self.mask = self.grid.dealias_mask() if cfg.dealias else None

    def velocity(self, c: np.ndarray) -> np.ndarray:
        g = self.grid
        return backward(np.stack([dj * self.sym * c for dj in g.deriv]), g.shape)

    def __call__(self, c: np.ndarray, t: float) -> np.ndarray:
        g = self.grid
        if self.mask is not None:
            c = c * self.mask
        mu = backward(c, g.shape)
        vel = self.velocity(c)
        b = _drift_values(self.cfg.drift, t, g.shape)
        if b is not None:
            vel = vel - b
        flux = forward(mu[None] * vel, g.d)
        out = sum(dj * flux[j] for j, dj in enumerate(g.deriv))
        if self.mask is not None:
            out = out * self.mask
        return out


@dataclass
class EnergyLedger:
    times: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    enstrophy: list = field(default_factory=list)
    dissipation: list = field(default_factory=list)  # 2 sigma int_0^t D
    ledger: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "energy", "enstrophy", "dissipation", "ledger"])
            for row in zip(self.times, self.energy, self.enstrophy, self.dissipation, self.ledger):
                w.writerow([repr(float(v)) for v in row])


def mve_step(mu: SpectralField, cfg: MveConfig, t: float, rhs: _Rhs | None = None) -> SpectralField:
    """One integrating-factor RK4 step of size cfg.dt from time t."""
    rhs = rhs or _Rhs(cfg)
    g = rhs.grid
    h = cfg.dt
    E = np.exp(-cfg.sigma * 4 * math.pi**2 * g.ksq * h)
    E2 = np.exp(-cfg.sigma * 4 * math.pi**2 * g.ksq * h / 2)
    u = mu.coeffs
    k1 = rhs(u, t)
    k2 = rhs(E2 * (u + 0.5 * h * k1), t + h / 2)
    k3 = rhs(E2 * u + 0.5 * h * k2, t + h / 2)
    k4 = rhs(E * u + h * E2 * k3, t + h)
    new = E * u + (h / 6) * (E * k1 + 2 * E2 * (k2 + k3) + k4)
    new[g.zero] = u[g.zero]
    out = SpectralField(g.shape, coeffs=new, kind="density")
    lo = float(out.values.min())
    if lo < cfg.positivity_floor:
        raise StabilityError(f"density dropped to {lo:.3e} at t={t + h:.4g}; reduce dt or refine the grid")
    return out


def mve_solve(cfg: MveConfig) -> tuple[FieldTrajectory, EnergyLedger]:
    rhs = _Rhs(cfg)
    mu = SpectralField(cfg.grid_shape, values=cfg.initial.values.copy(), kind="density")
    led = EnergyLedger()
    times = [0.0]
    fields = [mu]
    diss = 0.0
    e0, d0 = energy(mu, cfg.params), enstrophy(mu, cfg.params)
    led.times.append(0.0)
    led.energy.append(e0)
    led.enstrophy.append(d0)
    led.dissipation.append(0.0)
    led.ledger.append(e0)
    prevD = d0
    n = cfg.n_steps
    for step in range(n):
        t = step * cfg.dt
        mu = mve_step(mu, cfg, t, rhs)
        e, dd = energy(mu, cfg.params), enstrophy(mu, cfg.params)
        diss += cfg.sigma * cfg.dt * (prevD + dd)
        prevD = dd
        tn = (step + 1) * cfg.dt
        led.times.append(tn)
        led.energy.append(e)
        led.enstrophy.append(dd)
        led.dissipation.append(diss)
        led.ledger.append(e + diss)
        if (step + 1) % cfg.save_every == 0 or step + 1 == n:
            times.append(tn)
            fields.append(mu)
    meta = {"sigma": cfg.sigma, "dt": cfg.dt, "T": cfg.T, "params": cfg.params.as_dict(),
            "grid_shape": list(cfg.grid_shape), "dealias": cfg.dealias, "tilted": cfg.drift is not None}
    return FieldTrajectory(np.asarray(times), fields, meta), led


def self_interaction_weak_form(mu: SpectralField, psi: SpectralField, params: RieszParams,
                               parts: bool = False):
    """(1/2) int int (psi(x) - psi(y)) . grad g(x - y) dmu(x) dmu(y).

    The psi(x) half is int psi . (grad g*mu) dmu; the psi(y) half is computed
    separately as -(1/2) sum_j int mu (d_j g * (psi_j mu)).
    """
    g = mu.grid
    sym = g.riesz_symbol(params)
    m = mu.values
    vel = backward(np.stack([dj * sym * mu.coeffs for dj in g.deriv]), g.shape)
    A = 0.5 * float(np.mean(np.sum(psi.values * vel, axis=0) * m))
    pm = forward(psi.values * m[None], g.d)
    conv = sum(backward(dj * sym * pm[j], g.shape) for j, dj in enumerate(g.deriv))
    B = -0.5 * float(np.mean(m * conv))
    return (A, B) if parts else A + B


def interaction_flux(mu: SpectralField, params: RieszParams) -> SpectralField:
    """The vector field mu grad g*mu."""
    g = mu.grid
    sym = g.riesz_symbol(params)
    vel = backward(np.stack([dj * sym * mu.coeffs for dj in g.deriv]), g.shape)
    return SpectralField(g.shape, values=mu.values[None] * vel, kind="vector")


def gradient_energy_rate(mu: SpectralField, params: RieszParams) -> float:
    """int |grad g*mu|^2 dmu."""
    g = mu.grid
    sym = g.riesz_symbol(params)
    vel = backward(np.stack([dj * sym * mu.coeffs for dj in g.deriv]), g.shape)
    return float(np.mean(np.sum(vel**2, axis=0) * mu.values))


def q_functional(traj: FieldTrajectory, params: RieszParams, sigma: float) -> float:
    """sup_t { E(mu^t) + 2 sigma int_0^t D }, trapezoid in time."""
    E = np.array([energy(f, params) for f in traj.fields])
    D = np.array([enstrophy(f, params) for f in traj.fields])
    dt = np.diff(traj.times)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dt * (D[1:] + D[:-1]))])
    return float(np.max(E + 2 * sigma * cum))


def a_class_exponents(params: RieszParams) -> tuple[float, float]:
    d, s = params.d, params.s
    return 0.5 + (s - d) / 2, 6 * d / (3 * d - s - 1)


def a_class_norm(traj: FieldTrajectory, params: RieszParams) -> float:
    """int_0^T || |grad|^(1/2 + (s-d)/2) mu^t ||_{L^p}^3 dt, p = 6d/(3d - s - 1)."""
    order, p = a_class_exponents(params)
    vals = np.array([lp_norm(fractional_gradient(f, order).values, p) ** 3 for f in traj.fields])
    return float(np.trapezoid(vals, traj.times))


def a_psi(psi: SpectralField, params: RieszParams) -> float:
    """||grad psi||_inf + || |grad|^((d-s)/2) psi ||_{L^(2d/(d-2-s))} for a vector field psi."""
    from .spectral_fields import gradient

    d, s = params.d, params.s
    comps = [SpectralField(psi.shape, values=psi.values[j]) for j in range(psi.grid.d)]
    lip = max(float(np.max(np.abs(gradient(c).values))) for c in comps)
    p = 2 * d / (d - 2 - s)
    frac = np.sqrt(sum(fractional_gradient(c, (d - s) / 2).values ** 2 for c in comps))
    return lip + lp_norm(frac, p)


def heat_flow(gamma: SpectralField, t: float, sigma: float) -> SpectralField:
    return heat_mollify(gamma, t, sigma)


@dataclass
class RecoveryTrajectory:
    eps: float
    nu: FieldTrajectory
    drift_fields: list
    cost: float
    commutator: float
    residual: float
    log: dict = field(default_factory=dict)


def _velocity(mu: SpectralField, params: RieszParams) -> np.ndarray:
    g = mu.grid
    sym = g.riesz_symbol(params)
    return backward(np.stack([dj * sym * mu.coeffs for dj in g.deriv]), g.shape)


def _mollify_vec(values: np.ndarray, eps: float, sigma: float) -> np.ndarray:
    shape = values.shape[1:]
    g = spectral_grid(shape)
    c = forward(values, g.d) * np.exp(-sigma * 4 * math.pi**2 * g.ksq * eps)
    return backward(c, shape)


def build_recovery(mu: FieldTrajectory, drift: list, gamma: SpectralField, eps: float, sigma: float,
                   params: RieszParams, floor: float = 1e-3, phase1_points: int = 17) -> RecoveryTrajectory:
    """Heat-mollified recovery trajectory nu_eps with its drift b_eps.

    drift[i] is the vector field values of b at mu.times[i].  Returns the cost
    (1/4 sigma) int int |b_eps|^2 dnu_eps dt, the commutator term
    int int |(mu grad g*mu)_eps / mu_eps - grad g*mu_eps|^2 dmu_eps dt, and
    the max-norm PDE residual of nu_eps with drift b_eps on the interior
    time grid.
    """
    times = mu.times
    T = times[-1]
    if not 0 < eps < T:
        raise FieldError("mollification time must lie in (0, T)")
    # phase 1: nu = gamma_t on [0, eps], b = grad g*gamma_t
    t1 = np.linspace(0.0, eps, phase1_points)
    c1 = []
    nu_fields = []
    nu_times = []
    drift_fields = []
    for t in t1:
        nu = heat_flow(gamma, t, sigma)
        v = _velocity(nu, params)
        c1.append(float(np.mean(np.sum(v**2, axis=0) * nu.values)))
        nu_times.append(t)
        nu_fields.append(nu)
        drift_fields.append(v)
    cost1 = float(np.trapezoid(c1, t1))
    # phase 2: nu^t = (mu^{t-eps})_eps for tau = t - eps on the trajectory grid
    taus = times[times <= T - eps + 1e-12]
    c2, comm = [], []
    for tau in taus:
        i = int(np.argmin(np.abs(times - tau)))
        m = mu.fields[i] if abs(times[i] - tau) < 1e-12 else mu.at(tau)
        b = drift[i] if abs(times[i] - tau) < 1e-12 else None
        if b is None:
            j = max(int(np.searchsorted(times, tau)) - 1, 0)
            lam = (tau - times[j]) / (times[j + 1] - times[j])
            b = (1 - lam) * drift[j] + lam * drift[j + 1]
        me = heat_mollify(m, eps, sigma)
        lo = float(me.values.min())
        if lo < floor:
            raise FieldError(f"mollified density drops to {lo:.3e}; cannot divide")
        flux_e = _mollify_vec(m.values[None] * _velocity(m, params), eps, sigma)
        bm_e = _mollify_vec(m.values[None] * b, eps, sigma)
        ve = _velocity(me, params)
        comm_field = flux_e / me.values[None] - ve
        be = bm_e / me.values[None] - comm_field
        c2.append(float(np.mean(np.sum(be**2, axis=0) * me.values)))
        comm.append(float(np.mean(np.sum(comm_field**2, axis=0) * me.values)))
        if tau > 0:
            nu_times.append(tau + eps)
            nu_fields.append(me)
            drift_fields.append(be)
    cost2 = float(np.trapezoid(c2, taus + eps))
    commutator = float(np.trapezoid(comm, taus + eps))
    nu_traj = FieldTrajectory(np.asarray(nu_times), nu_fields, {"eps": eps})
    residual = _recovery_residual(nu_traj, drift_fields, sigma, params, skip=eps)
    cost = (cost1 + cost2) / (4 * sigma)
    return RecoveryTrajectory(eps, nu_traj, drift_fields, cost, commutator, residual,
                              {"phase1_cost": cost1 / (4 * sigma), "phase2_cost": cost2 / (4 * sigma)})


def _recovery_residual(nu: FieldTrajectory, drift: list, sigma: float, params: RieszParams, skip: float) -> float:
    """Max residual of the tilted equation on phase-two interior points, by centred differences."""
    t = nu.times
    worst = 0.0
    for i in range(1, len(t) - 1):
        if t[i - 1] < skip - 1e-12 or t[i] <= skip + 1e-12:
            continue
        f = nu.fields[i]
        g = f.grid
        dmu = (nu.fields[i + 1].values - nu.fields[i - 1].values) / (t[i + 1] - t[i - 1])
        lap = backward(-4 * math.pi**2 * g.ksq * f.coeffs, g.shape)
        vel = _velocity(f, params)
        flux = forward(f.values[None] * (vel - drift[i]), g.d)
        div = backward(sum(dj * flux[j] for j, dj in enumerate(g.deriv)), g.shape)
        res = dmu - sigma * lap - div
        worst = max(worst, float(np.max(np.abs(res))))
    return worst
