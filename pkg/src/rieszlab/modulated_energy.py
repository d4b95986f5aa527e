"""Modulated energy between a particle configuration and a density, and the
family of inequalities that control it.

F_N(x, mu) = (1/N^2) sum_{i != j} g(x_i - x_j) - (2/N) sum_i (g*mu)(x_i) + E(mu)

Densities live on spectral grids and are assumed band-limited with Nyquist
modes empty; products of two or three such fields are formed on a grid of
twice the size, which keeps them exact.

Each inequality has the shape lhs <= fixed + C * scaled, where `fixed` is a
term with coefficient one (only the monotonicity bound has one) and C is
fitted on a calibration family and frozen before the test family is run.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .mckean_vlasov import a_class_exponents, a_psi, self_interaction_weak_form
from .particle_dynamics import CoincidentPointsError, ParticleState, _pairs, pair_sums, sample_iid
from .riesz_kernel import (
    KernelError,
    KernelTable,
    RieszParams,
    _double_smeared_short,
    eval_g,
    eval_g_smeared,
    half_space_wavevectors,
    make_kernel,
    minimum_image,
    sphere_multiplier,
    structure_factor,
)
from .spectral_fields import (
    SpectralField,
    active_modes,
    backward,
    energy,
    forward,
    fractional_gradient,
    gradient,
    lp_norm,
    riesz_convolve,
    smear_field,
    sobolev_norm,
    spectral_grid,
)


def _positions(state) -> np.ndarray:
    x = state.positions if isinstance(state, ParticleState) else state
    return np.atleast_2d(np.asarray(x, dtype=float))


def refine(f: SpectralField, factor: int = 2) -> SpectralField:
    """Zero-pad the coefficients of f onto a grid `factor` times finer."""
    g = f.grid
    shape = tuple(n * factor for n in g.shape)
    big = spectral_grid(shape)
    c = f.coeffs if f.kind == "vector" else f.coeffs[None]
    out = np.zeros((c.shape[0],) + big.coeff_shape, dtype=complex)
    # negative frequencies move to the top of each enlarged axis
    idx = np.ix_(*[np.mod(np.fft.fftfreq(n, 1.0 / n).astype(int), m) for n, m in zip(g.shape[:-1], shape[:-1])])
    out[(slice(None),) + tuple(idx) + (slice(0, g.coeff_shape[-1]),)] = c * g.active_band()
    return SpectralField(shape, coeffs=out if f.kind == "vector" else out[0], kind=f.kind)


def sup_norm(f: SpectralField) -> float:
    """Max of |f| sampled on a twice-refined grid."""
    return float(np.max(np.abs(refine(f).values)))


def homogeneous_norm(f: SpectralField, params: RieszParams) -> float:
    """||f|| in the energy space Hdot^((s-d)/2)."""
    return sobolev_norm(f, (params.s - params.d) / 2)


# --- the modulated energy -----------------------------------------------------


@dataclass
class ModulatedEnergyReport:
    F_N: float
    H_N: float
    cross: float  # -(2/N) sum_i (g*mu)(x_i), or its smeared version
    self_energy: float  # E(mu)
    N: int
    grid_shape: tuple
    eta: float | None = None

    @property
    def parts(self) -> tuple[float, float, float]:
        return self.H_N, self.cross, self.self_energy

    def as_dict(self) -> dict:
        out = asdict(self)
        out["grid_shape"] = list(self.grid_shape)
        return out


def potential_at(mu: SpectralField, table, x: np.ndarray, eta: float | None = None) -> np.ndarray:
    """(g*mu)(x_i), or (g^(eta)*mu)(x_i) with the sphere-smeared kernel."""
    pot = riesz_convolve(mu, table, "g")
    if eta:
        pot = smear_field(pot, eta)
    return active_modes(pot)(x)[0]


def modulated_energy(state, mu: SpectralField, table: KernelTable, H: float | None = None) -> ModulatedEnergyReport:
    """F_N(x, mu) from its three parts.  Pass H to reuse a known H_N."""
    x = _positions(state)
    mu.check_density()
    N = x.shape[0]
    if H is None:
        H = pair_sums(table, x, None, want_force=False, want_lap=False).H
    cross = -2.0 * float(np.mean(potential_at(mu, table, x)))
    E = energy(mu, table)
    return ModulatedEnergyReport(H + cross + E, H, cross, E, N, mu.grid.shape)


def smeared_pair_energy(table: KernelTable, x: np.ndarray, eta: float) -> float:
    """(1/N^2) sum_{i,j} g^(eta,eta)(x_i - x_j), diagonal included: E(mu_N^(eta))."""
    if table.params.d != 3:
        raise KernelError("sphere smearing is implemented for d = 3")
    x = minimum_image(np.atleast_2d(np.asarray(x, dtype=float)))
    N, d = x.shape
    K = table.fourier_cutoff
    ks = half_space_wavevectors(d, K)
    kabs = np.sqrt(sum(k * k for k in ks))
    m2 = sphere_multiplier(d, 2 * math.pi * eta * kabs) ** 2
    Sk = structure_factor(x, K)
    long_total = float(np.sum(table.long_coeffs * m2 * np.abs(Sk) ** 2))
    diag_short = _double_smeared_short(table, np.array([0.0]), eta)[0]
    short = N * diag_short
    cut = 0.5 + 2 * eta
    I, J = _pairs(N)
    for lo in range(0, len(I), 1 << 15):
        i, j = I[lo : lo + (1 << 15)], J[lo : lo + (1 << 15)]
        r = np.sqrt(np.sum(minimum_image(x[i] - x[j]) ** 2, axis=1))
        r = r[r < cut]
        if r.size:
            short += 2 * float(np.sum(_double_smeared_short(table, r, eta)))
    return (short + long_total) / N**2 + table.mean_shift


def smeared_modulated_energy(state, mu: SpectralField, table: KernelTable, eta: float) -> ModulatedEnergyReport:
    """E(mu_N^(eta) - mu), the energy-space distance after smearing each Dirac."""
    x = _positions(state)
    self_p = smeared_pair_energy(table, x, eta)
    cross = -2.0 * float(np.mean(potential_at(mu, table, x, eta)))
    E = energy(mu, table)
    return ModulatedEnergyReport(self_p + cross + E, self_p, cross, E, x.shape[0], mu.grid.shape, eta)


def default_eta(N: int, d: int, scale: float = 0.25) -> float:
    """Smearing radius scale * N^(-1/d); the scale keeps eta inside (0, r0/2) at small N."""
    return scale * N ** (-1.0 / d)


def close_pair_excess(table: KernelTable, x: np.ndarray, eta: float, radius: float) -> float:
    """(1/N^2) sum_{i != j, |x_i - x_j| <= radius} (g - g^(eta))_+ (x_i - x_j)."""
    x = _positions(x)
    N = x.shape[0]
    diffs = []
    I, J = _pairs(N)
    for lo in range(0, len(I), 1 << 15):
        i, j = I[lo : lo + (1 << 15)], J[lo : lo + (1 << 15)]
        dv = minimum_image(x[i] - x[j])
        near = np.sum(dv * dv, axis=1) <= radius * radius
        diffs.append(dv[near])
    dv = np.concatenate(diffs) if diffs else np.zeros((0, x.shape[1]))
    if dv.shape[0] == 0:
        return 0.0
    gap = np.atleast_1d(eval_g(table, dv)) - np.atleast_1d(eval_g_smeared(table, dv, eta, 1))
    return 2.0 * float(np.sum(np.maximum(gap, 0.0))) / N**2


def close_pair_mass(table: KernelTable, x: np.ndarray, eps: float) -> float:
    """(1/N^2) sum_{i < j, |x_i - x_j| <= eps} of g (s > 0) or of 1 (s = 0)."""
    x = _positions(x)
    N = x.shape[0]
    total = 0.0
    I, J = _pairs(N)
    for lo in range(0, len(I), 1 << 15):
        i, j = I[lo : lo + (1 << 15)], J[lo : lo + (1 << 15)]
        dv = minimum_image(x[i] - x[j])
        near = np.sum(dv * dv, axis=1) <= eps * eps
        if not np.any(near):
            continue
        if table.params.s > 0:
            total += float(np.sum(np.atleast_1d(eval_g(table, dv[near]))))
        else:
            total += float(np.count_nonzero(near))
    return total / N**2


# --- commutator and trilinear forms ----------------------------------------------


def _vector_components(psi: SpectralField) -> list[SpectralField]:
    return [SpectralField(psi.shape, coeffs=psi.coeffs[j]) for j in range(psi.grid.d)]


def commutator_parts(state, mu: SpectralField, psi: SpectralField, table: KernelTable, force=None) -> dict:
    """The three pieces of int int_{x != y} (psi(x) - psi(y)) . grad g(x - y) against (mu_N, mu).

    pp: (1/N^2) sum_{i != j} k_psi(x_i, x_j), from the untruncated forces
    pf: int int k_psi dmu_N dmu (k_psi is symmetric, so this counts once)
    ff: int int k_psi dmu dmu
    """
    x = _positions(state)
    N = x.shape[0]
    if force is None:
        force = pair_sums(table, x, None, want_energy=False, want_lap=False).force
    psi_x = active_modes(psi)(x).T
    # sum_{i != j} (psi_i - psi_j) . grad g(x_i - x_j) = -2 N sum_i psi_i . F_i
    pp = -2.0 * float(np.sum(psi_x * force)) / N
    fine_mu, fine_psi = refine(mu), refine(psi)
    vel = riesz_convolve(mu, table, "grad")
    term1 = float(np.mean(np.sum(psi_x * active_modes(vel)(x).T, axis=1)))
    prod = fine_psi.values * fine_mu.values[None]
    pm = SpectralField(fine_mu.shape, values=prod, kind="vector")
    gpm = riesz_convolve(pm, table, "g")  # scalar multiplier applied to each component
    fine = fine_mu.grid
    conv_coeffs = sum(dj * gpm.coeffs[j] for j, dj in enumerate(fine.deriv))
    conv = SpectralField(fine_mu.shape, coeffs=conv_coeffs)
    term2 = float(np.mean(active_modes(conv)(x)[0]))
    pf = term1 - term2
    ff = 2.0 * self_interaction_weak_form(fine_mu, fine_psi, table.params)
    return {"pp": pp, "pf": pf, "ff": ff}


def commutator_lhs(state, mu: SpectralField, psi: SpectralField, table: KernelTable, form: str = "modulated",
                   force=None) -> float:
    """Off-diagonal commutator integral against (mu_N - mu)^2 or mu_N^2 - mu^2."""
    p = commutator_parts(state, mu, psi, table, force)
    if form == "modulated":
        return p["pp"] - 2.0 * p["pf"] + p["ff"]
    if form == "difference":
        return p["pp"] - p["ff"]
    raise ValueError(f"unknown commutator form {form!r}")


def trilinear_form(f: SpectralField, gfield: SpectralField, h: SpectralField, kernel) -> float:
    """int (grad g*f) . (grad g*gfield) h, with the triple product formed on a 2x grid."""
    F = riesz_convolve(refine(f), kernel, "grad").values
    G = riesz_convolve(refine(gfield), kernel, "grad").values
    H = refine(h).values
    return float(np.mean(np.sum(F * G, axis=0) * H))


def trilinear_bound_terms(f, gfield, h, params: RieszParams) -> dict:
    order, p = a_class_exponents(params)

    def nrm(u):
        return lp_norm(fractional_gradient(refine(u), order).values, p)

    return {"h": nrm(h), "h_mean": abs(h.mean), "f": nrm(f), "g": nrm(gfield)}


def scalar_smoothness(psi: SpectralField, params: RieszParams) -> float:
    """||grad psi||_inf + ||psi||_{Hdot^((d-s)/2)} for a scalar field."""
    lip = float(np.max(np.abs(refine(gradient(psi)).values)))
    return lip + sobolev_norm(psi, (params.d - params.s) / 2)


# --- inequality records -----------------------------------------------------------


@dataclass
class InequalityRecord:
    name: str
    lhs: float
    fixed: float
    scaled: float
    terms: dict
    instance: dict
    ratio: float | None = None

    def needed_constant(self) -> float:
        """Smallest C with lhs <= fixed + C * scaled."""
        if self.scaled <= 0:
            return math.inf if self.lhs > self.fixed else 0.0
        return max((self.lhs - self.fixed) / self.scaled, 0.0)

    def rhs(self, C: float) -> float:
        return self.fixed + C * self.scaled

    def with_constant(self, C: float) -> "InequalityRecord":
        rhs = self.rhs(C)
        ratio = self.lhs / rhs if rhs > 0 else math.inf
        return InequalityRecord(self.name, self.lhs, self.fixed, self.scaled, self.terms, self.instance, ratio)

    def row(self) -> dict:
        out = {"name": self.name, "lhs": self.lhs, "fixed": self.fixed, "scaled": self.scaled,
               "ratio": "" if self.ratio is None else self.ratio}
        out.update({f"term_{k}": v for k, v in sorted(self.terms.items())})
        out.update({f"inst_{k}": v for k, v in sorted(self.instance.items())})
        return out


@dataclass
class SlackConstants:
    """N^(-beta) slack shared by all bounds: F_N + C_pos ||mu||_inf N^(-beta) >= 0."""

    C_pos: float
    beta: float

    def slack(self, N: int, mu_inf: float) -> float:
        return self.C_pos * mu_inf * N ** (-self.beta)


def monotonicity_check(state, mu: SpectralField, table: KernelTable, eta: float, F: float | None = None,
                       instance: dict | None = None) -> InequalityRecord:
    """Smeared energy plus close-pair excess against F_N + C ||mu||_inf (eta^2 + (eta^(-s) - log eta)/N)."""
    x = _positions(state)
    N = x.shape[0]
    s = table.params.s
    if F is None:
        F = modulated_energy(x, mu, table).F_N
    sm = smeared_modulated_energy(x, mu, table, eta).F_N
    excess = close_pair_excess(table, x, eta, table.r0 / 2)
    inf = sup_norm(mu)
    slack = eta**2 + (eta ** (-s) - math.log(eta)) / N
    return InequalityRecord("monotonicity", excess + sm, F, inf * slack,
                            {"smeared": sm, "close_excess": excess, "F_N": F, "mu_inf": inf, "eta": eta},
                            instance or {})


def microscale_check(state, mu: SpectralField, table: KernelTable, eps: float, F: float | None = None,
                     instance: dict | None = None) -> InequalityRecord:
    x = _positions(state)
    N = x.shape[0]
    s = table.params.s
    if F is None:
        F = modulated_energy(x, mu, table).F_N
    lhs = close_pair_mass(table, x, eps)
    inf = sup_norm(mu)
    scaled = F + inf * (eps + (eps ** (-s) - math.log(eps)) / N)
    return InequalityRecord("microscale", lhs, 0.0, scaled, {"F_N": F, "mu_inf": inf, "eps": eps}, instance or {})


def renormalized_cs_check(state, mu: SpectralField, nu: SpectralField, table: KernelTable, consts: SlackConstants,
                          F: float | None = None, instance: dict | None = None) -> InequalityRecord:
    """|int g d(mu_N - mu) d(mu - nu)| against sqrt(F_N + slack) ||mu - nu|| + ||mu - nu||_inf N^(-beta)."""
    x = _positions(state)
    N = x.shape[0]
    if F is None:
        F = modulated_energy(x, mu, table).F_N
    diff = mu.with_coeffs(mu.coeffs - nu.coeffs)
    pot = riesz_convolve(diff, table, "g")
    lhs = abs(float(np.mean(active_modes(pot)(x)[0])) - float(np.mean(refine(pot).values * refine(mu).values)))
    inf = sup_norm(mu)
    Fp = max(F + consts.slack(N, inf), 0.0)
    hn = homogeneous_norm(diff, table.params)
    dinf = sup_norm(diff)
    scaled = math.sqrt(Fp) * hn + dinf * N ** (-consts.beta)
    return InequalityRecord("renormalized_cs", lhs, 0.0, scaled,
                            {"F_N": F, "F_plus": Fp, "diff_norm": hn, "diff_inf": dinf}, instance or {})


def weak_control_check(state, mu: SpectralField, psi: SpectralField, table: KernelTable, consts: SlackConstants,
                       F: float | None = None, instance: dict | None = None) -> InequalityRecord:
    x = _positions(state)
    N = x.shape[0]
    if F is None:
        F = modulated_energy(x, mu, table).F_N
    lhs = abs(float(np.mean(active_modes(psi)(x)[0])) - float(np.mean(refine(psi).values * refine(mu).values)))
    inf = sup_norm(mu)
    Fp = max(F + consts.slack(N, inf), 0.0)
    sm = scalar_smoothness(psi, table.params)
    return InequalityRecord("weak_control", lhs, 0.0, sm * math.sqrt(Fp), {"F_N": F, "F_plus": Fp, "smoothness": sm},
                            instance or {})


def commutator_checks(state, mu: SpectralField, psi: SpectralField, table: KernelTable, consts: SlackConstants,
                      F: float | None = None, H: float | None = None, force=None,
                      instance: dict | None = None) -> tuple[InequalityRecord, InequalityRecord]:
    """Both commutator bounds: linear in F_N + slack, and its square-root form."""
    x = _positions(state)
    N = x.shape[0]
    if force is None or H is None:
        ps = pair_sums(table, x, None, want_lap=False)
        force, H = ps.force, ps.H
    if F is None:
        F = modulated_energy(x, mu, table, H=H).F_N
    p = commutator_parts(x, mu, psi, table, force)
    lhs1 = abs(p["pp"] - 2 * p["pf"] + p["ff"])
    lhs2 = abs(p["pp"] - p["ff"])
    A = a_psi(refine(psi), table.params)
    inf = sup_norm(mu)
    sl = consts.slack(N, inf)
    Fp = max(F + sl, 0.0)
    mu_norm2 = homogeneous_norm(mu, table.params) ** 2
    energy_side = max(H + mu_norm2 + sl + 1.0, 0.0)
    terms = {"A_psi": A, "F_N": F, "F_plus": Fp, "H_N": H, "mu_norm2": mu_norm2}
    r1 = InequalityRecord("commutator", lhs1, 0.0, A * Fp, dict(terms), instance or {})
    r2 = InequalityRecord("commutator_sqrt", lhs2, 0.0, A * math.sqrt(Fp * energy_side), dict(terms), instance or {})
    return r1, r2


def trilinear_check(f, gfield, h, table, instance: dict | None = None) -> InequalityRecord:
    lhs = abs(trilinear_form(f, gfield, h, table))
    t = trilinear_bound_terms(f, gfield, h, table.params)
    return InequalityRecord("trilinear", lhs, 0.0, (t["h"] + t["h_mean"]) * t["f"] * t["g"], t, instance or {})


INEQUALITIES = ("monotonicity", "microscale", "renormalized_cs", "weak_control", "commutator", "commutator_sqrt",
                "trilinear")


# --- randomized instances ------------------------------------------------------------

FAMILY_SEEDS = {"calib": 1009, "test": 2003}
INSTANCE_GRID = (16, 16, 16)


def random_trig_field(rng: np.random.Generator, shape, kmax: int, components: int = 1,
                      decay: float = 1.0) -> SpectralField:
    """Real zero-mean trigonometric polynomial on all modes with |k_j| <= kmax.

    Coefficients are complex Gaussians damped by |k|^(-decay).
    """
    g = spectral_grid(tuple(shape))
    band = np.ones(g.coeff_shape, dtype=bool)
    for kj in g.k:
        band &= np.abs(kj) <= kmax
    band[g.zero] = False
    amp = np.zeros(g.coeff_shape)
    amp[band] = g.kabs[band] ** (-decay)
    z = rng.normal(size=(components,) + g.coeff_shape) + 1j * rng.normal(size=(components,) + g.coeff_shape)
    vals = backward(z * amp, g.shape)  # irfftn takes the Hermitian part of the last-axis zero plane
    vals = vals / np.sqrt(np.mean(vals**2))
    if components == 1:
        return SpectralField(g.shape, values=vals[0])
    return SpectralField(g.shape, values=vals, kind="vector")


def random_density(rng: np.random.Generator, shape=INSTANCE_GRID, kmax: int = 2,
                   depth: float | None = None) -> SpectralField:
    """1 + a zero-mean perturbation scaled so that the minimum sits at 1 - depth."""
    pert = random_trig_field(rng, shape, kmax, decay=2.0)
    lo = -float(np.min(refine(pert).values))
    depth = rng.uniform(0.1, 0.8) if depth is None else depth
    vals = 1.0 + pert.values * (depth / lo if lo > 0 else 0.0)
    return SpectralField(pert.shape, values=vals, kind="density")


def _clustered(x: np.ndarray, rng: np.random.Generator, fraction: float = 0.15,
               reach: tuple = (0.002, 0.03)) -> np.ndarray:
    """Move a fraction of the points next to other points, at distances drawn from `reach`."""
    N, d = x.shape
    m = max(1, int(fraction * N))
    movers = rng.choice(N, size=m, replace=False)
    anchors = rng.integers(0, N, size=m)
    for a, b in zip(movers, anchors):
        if a == b:
            continue
        u = rng.normal(size=d)
        x[a] = x[b] + rng.uniform(*reach) * u / np.linalg.norm(u)
    return minimum_image(x)


@dataclass
class Instance:
    descriptor: dict
    x: np.ndarray
    mu: SpectralField
    nu: SpectralField
    psi_vec: SpectralField
    psi: SpectralField
    eps: float
    tri: tuple


def make_instance(family: str, index: int, N: int, base_seed: int | None = None) -> Instance:
    """Deterministic instance from (family seed, index, N).

    Fields and parameters depend on (seed, index) only, so the same index at a
    doubled N changes nothing but the particles.
    """
    seed = FAMILY_SEEDS[family] if base_seed is None else base_seed
    frng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
    prng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, N])))
    kind = ("iid_mu", "iid_other", "clustered")[index % 3]
    mu = random_density(frng)
    nu = random_density(frng, kmax=1, depth=float(frng.uniform(0.6, 0.95)))
    psi_vec = random_trig_field(frng, INSTANCE_GRID, 2, components=3, decay=2.0)
    psi = random_trig_field(frng, INSTANCE_GRID, 2, decay=2.0)
    eps = float(frng.uniform(0.01, 0.04))
    f, g = (random_trig_field(frng, INSTANCE_GRID, 3) for _ in range(2))
    h = random_trig_field(frng, INSTANCE_GRID, 3)
    hc = h.coeffs.copy()
    hc[h.grid.zero] = frng.normal()  # random mean for the |int h| term
    h = h.with_coeffs(hc)
    x = sample_iid(nu if kind == "iid_other" else mu, N, prng).positions
    if kind == "clustered":
        x = _clustered(x, prng)
    desc = {"family": family, "seed": seed, "N": N, "index": index, "kind": kind}
    return Instance(desc, x, mu, nu, psi_vec, psi, eps, (f, g, h))


def instance_records(inst: Instance, table: KernelTable, consts: SlackConstants,
                     eta_scale: float = 0.25) -> list[InequalityRecord]:
    x, mu = inst.x, inst.mu
    N = x.shape[0]
    ps = pair_sums(table, x, None, want_lap=False)
    F = modulated_energy(x, mu, table, H=ps.H).F_N
    eta = default_eta(N, table.params.d, eta_scale)
    desc = dict(inst.descriptor)
    recs = [
        monotonicity_check(x, mu, table, eta, F, desc),
        microscale_check(x, mu, table, inst.eps, F, desc),
        renormalized_cs_check(x, mu, inst.nu, table, consts, F, desc),
        weak_control_check(x, mu, inst.psi, table, consts, F, desc),
    ]
    recs.extend(commutator_checks(x, mu, inst.psi_vec, table, consts, F, ps.H, ps.force, desc))
    recs.append(trilinear_check(*inst.tri, table, desc))
    return recs


# --- positivity fit and the suite --------------------------------------------------------


@dataclass
class PositivityFit:
    C: float
    beta: float
    worst: dict  # N -> max over replicas of -F_N / ||mu||_inf
    safety: float

    def as_constants(self) -> SlackConstants:
        return SlackConstants(self.C, self.beta)


def positivity_samples(table: KernelTable, N: int, replicas: int, seed: int, density: str = "uniform") -> np.ndarray:
    """F_N / ||mu||_inf over replicas of iid samples; uniform or random smooth densities."""
    out = np.empty(replicas)
    d = table.params.d
    for r in range(replicas):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, N, r])))
        if density == "uniform":
            x = rng.uniform(-0.5, 0.5, size=(N, d))
            out[r] = pair_sums(table, x, None, want_force=False, want_lap=False).H
        else:
            mu = random_density(rng)
            x = sample_iid(mu, N, rng).positions
            out[r] = modulated_energy(x, mu, table).F_N / sup_norm(mu)
    return out


def fit_positivity(samples: dict, safety: float = 1.5) -> PositivityFit:
    """Log-log regression of the worst negative excursion against N, then C from the worst ratio."""
    Ns = sorted(samples)
    worst = {N: float(max(-np.min(samples[N]), 0.0)) for N in Ns}
    pos = [N for N in Ns if worst[N] > 0]
    if len(pos) < 2:
        raise ValueError("need negative excursions at two or more N to fit the decay rate")
    slope, _ = np.polyfit(np.log(pos), np.log([worst[N] for N in pos]), 1)
    beta = float(-slope)
    C = safety * max(worst[N] * N**beta for N in pos)
    return PositivityFit(C, beta, worst, safety)


def fit_constants(records: list[InequalityRecord], safety: float = 1.5) -> dict:
    out = {}
    for name in INEQUALITIES:
        need = [r.needed_constant() for r in records if r.name == name]
        if need:
            out[name] = safety * max(need)
    return out


@dataclass
class SuiteSummary:
    violations: dict
    max_ratio: dict  # name -> {N: max ratio}
    count: dict
    records: list = field(default_factory=list)

    def stability(self) -> dict:
        """max ratio at the largest N over that at the smallest N, per inequality."""
        out = {}
        for name, by_n in self.max_ratio.items():
            Ns = sorted(by_n)
            lo, hi = by_n[Ns[0]], by_n[Ns[-1]]
            out[name] = max(hi / lo, lo / hi) if lo > 0 and hi > 0 else math.inf
        return out


def run_family(table: KernelTable, family: str, N_list, n_instances: int, consts: SlackConstants,
               base_seed: int | None = None, eta_scale: float = 0.25) -> list[InequalityRecord]:
    recs = []
    for N in N_list:
        for i in range(n_instances):
            recs.extend(instance_records(make_instance(family, i, N, base_seed), table, consts, eta_scale))
    return recs


def evaluate(records: list[InequalityRecord], constants: dict) -> SuiteSummary:
    scored = [r.with_constant(constants[r.name]) for r in records]
    viol, mx, cnt = {}, {}, {}
    for r in scored:
        viol[r.name] = viol.get(r.name, 0) + int(r.ratio > 1.0)
        cnt[r.name] = cnt.get(r.name, 0) + 1
        by = mx.setdefault(r.name, {})
        N = r.instance.get("N")
        by[N] = max(by.get(N, 0.0), r.ratio)
    return SuiteSummary(viol, mx, cnt, scored)


def write_records_csv(path, records: list[InequalityRecord]) -> None:
    rows = [r.row() for r in records]
    cols = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in cols})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def save_constants(path, fit: PositivityFit, constants: dict, params: RieszParams) -> None:
    payload = {"params": params.as_dict(), "C_pos": fit.C, "beta": fit.beta, "safety": fit.safety,
               "worst": {str(k): v for k, v in fit.worst.items()}, "constants": constants}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_constants(path) -> tuple[SlackConstants, dict]:
    with open(path) as fh:
        p = json.load(fh)
    return SlackConstants(p["C_pos"], p["beta"]), p["constants"]
