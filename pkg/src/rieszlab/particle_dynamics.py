"""Interacting particle system on the torus with the truncated Riesz interaction.

Euler-Maruyama for

    dx_i = -(1/N) sum_{j != i} grad g_delta(x_i - x_j) dt + b(t, x_i) dt + sqrt(2 sigma) dW_i

with per-step diagnostics H_N (interaction energy), D_N (discrete enstrophy)
and the running energy functional Q_N.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .blob import read_blob, write_blob
from .riesz_kernel import (
    KernelError,
    KernelTable,
    RieszParams,
    cutoff_chi,
    eval_g_and_grad,
    lap_ratio,
    minimum_image,
    structure_factor,
    trig_sum,
    half_space_wavevectors,
)
from .spectral_fields import ActiveModes, FieldTrajectory, SpectralField, active_modes, riesz_convolve, energy


class CoincidentPointsError(RuntimeError):
    def __init__(self, pairs):
        self.pairs = [tuple(int(v) for v in p) for p in pairs]
        super().__init__(f"coincident particles at index pairs {self.pairs[:10]}")


class ConfigError(ValueError):
    pass


@dataclass
class ParticleState:
    positions: np.ndarray
    time: float = 0.0
    unwrapped: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = minimum_image(np.atleast_2d(np.asarray(self.positions, dtype=float)))
        if self.unwrapped is None:
            self.unwrapped = self.positions.copy()
        if self.labels is None:
            self.labels = np.arange(self.positions.shape[0])

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def min_distance(self) -> float:
        return min_pair_distance(self.positions)

    def permuted(self, perm) -> "ParticleState":
        perm = np.asarray(perm)
        return ParticleState(self.positions[perm], self.time, self.unwrapped[perm], self.labels[perm])

    def save(self, path) -> None:
        write_blob(path, {"kind": "particle_state", "time": self.time},
                   {"positions": self.positions, "unwrapped": self.unwrapped, "labels": self.labels})

    @classmethod
    def load(cls, path) -> "ParticleState":
        meta, a = read_blob(path)
        if meta.get("kind") != "particle_state":
            raise ValueError(f"{path} is not a particle checkpoint")
        return cls(a["positions"], meta["time"], a["unwrapped"], a["labels"])


class DriftField:
    """Time-dependent vector field b(t, x), piecewise constant on a time grid.

    fields[i] applies on [times[i], times[i+1]); the last one applies thereafter.
    """

    def __init__(self, times, fields, rel_tol: float = 1e-14):
        self.times = np.asarray(times, dtype=float)
        self.fields = list(fields)
        if len(self.times) != len(self.fields):
            raise ConfigError("drift times and fields differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("drift times must be increasing")
        for f in self.fields:
            if f.kind != "vector":
                raise ConfigError("drift fields must be vector fields")
        self._modes = [active_modes(f, rel_tol) for f in self.fields]

    @classmethod
    def constant(cls, f: SpectralField) -> "DriftField":
        return cls([0.0], [f])

    @classmethod
    def from_function(cls, shape, func) -> "DriftField":
        return cls.constant(SpectralField.from_function(shape, func, kind="vector"))

    def index(self, t: float) -> int:
        return max(int(np.searchsorted(self.times, t, side="right")) - 1, 0)

    def field_at(self, t: float) -> SpectralField:
        return self.fields[self.index(t)]

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self._modes[self.index(t)](x).T

    def c1_surrogate(self, T: float) -> float:
        """int_0^T ||b^t||_{C^1}^2 dt with sup norms taken on the grid."""
        from .spectral_fields import gradient

        edges = np.append(self.times, max(T, self.times[-1]))
        total = 0.0
        for i, f in enumerate(self.fields):
            lo, hi = min(edges[i], T), min(edges[i + 1], T)
            if hi <= lo:
                continue
            sup = float(np.max(np.abs(f.values)))
            dsup = max(float(np.max(np.abs(gradient(SpectralField(f.shape, values=f.values[j])).values)))
                       for j in range(f.grid.d))
            total += (sup + dsup) ** 2 * (hi - lo)
        return total


@dataclass
class SdeConfig:
    params: RieszParams
    N: int
    sigma: float
    dt: float
    T: float
    seed: int = 0
    replica: int = 0
    delta: float | None = None
    drift: DriftField | None = None
    stride: int = 1
    fn_stride: int = 0
    truncation_warn_fraction: float = 0.01
    noise_block: int = 256

    def __post_init__(self):
        self.params.require_dynamics()
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive; vanishing noise is not supported")
        if self.N < 1:
            raise ConfigError("need at least one particle")
        if not self.dt > 0 or not self.T > 0:
            raise ConfigError("dt and T must be positive")
        if self.delta is None:
            self.delta = min(self.N ** (-2.0 / self.params.d), 0.2)
        if not (0 < self.delta < 0.25):
            raise ConfigError("truncation radius must lie in (0, 1/4)")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


class NoiseStreams:
    """Independent counter-based Gaussian streams keyed by (seed, replica, label)."""

    def __init__(self, seed: int, replica: int, labels, d: int, block: int = 256):
        self.d = d
        self.block = block
        self.gens = [np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replica), int(l)])))
                     for l in labels]
        self._buf = None
        self._pos = block

    def next(self) -> np.ndarray:
        if self._pos >= self.block:
            self._buf = np.stack([g.standard_normal((self.block, self.d)) for g in self.gens], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


@lru_cache(maxsize=8)
def _pairs(N: int):
    i, j = np.triu_indices(N, 1)
    return i.astype(np.int64), j.astype(np.int64)


def min_pair_distance(x: np.ndarray) -> float:
    N = x.shape[0]
    if N < 2:
        return math.inf
    best = math.inf
    i, j = _pairs(N)
    for lo in range(0, len(i), 1 << 16):
        sl = slice(lo, lo + (1 << 16))
        diff = minimum_image(x[i[sl]] - x[j[sl]])
        best = min(best, float(np.min(np.sum(diff * diff, axis=1))))
    return math.sqrt(best)


@dataclass
class PairSums:
    """Everything computed from one pass over the configuration."""

    force: np.ndarray
    H: float
    D: float | None
    min_dist: float


def _sub_structure(Sk: np.ndarray, Kbig: int, K: int, d: int) -> np.ndarray:
    sl = (slice(0, K + 1),) + (slice(Kbig - K, Kbig + K + 1),) * (d - 1)
    return Sk[sl]


def _long_parts(table: KernelTable, x: np.ndarray, want_force: bool, want_lap: bool):
    d = table.params.d
    K = table.fourier_cutoff
    Klap = table.lap.fourier_cutoff if (want_lap and table.lap is not None) else 0
    Kbig = max(K, Klap)
    Sk = structure_factor(x, Kbig)
    N = x.shape[0]
    S_main = _sub_structure(Sk, Kbig, K, d)
    H_long = float(np.sum(table.long_coeffs * np.abs(S_main) ** 2)) - N * table.long_at_origin
    D_long = None
    if want_lap and table.lap is not None:
        S_lap = _sub_structure(Sk, Kbig, Klap, d)
        D_long = float(np.sum(table.lap.long_coeffs * np.abs(S_lap) ** 2)) - N * table.lap.long_at_origin
    grad = None
    if want_force:
        ks = half_space_wavevectors(d, K)
        c = table.long_coeffs * S_main
        grad = trig_sum(np.stack([2j * math.pi * k * c for k in ks]), x, K).T
    return grad, H_long, D_long


def pair_sums(table: KernelTable, x: np.ndarray, delta: float | None, want_force=True, want_energy=True,
              want_lap=True, chunk: int = 1 << 15) -> PairSums:
    """Forces -(1/N) sum_j grad g_delta(x_i - x_j), plus H_N and D_N with the untruncated kernel.

    The short screened part runs over unordered pairs on the minimum image in a
    fixed chunk order; the smooth long part goes through the structure factor.
    """
    x = minimum_image(np.atleast_2d(np.asarray(x, dtype=float)))
    N, d = x.shape
    force = np.zeros((N, d))
    H_short = 0.0
    D_short = 0.0
    want_lap = want_lap and table.lap is not None
    dmin2 = math.inf
    if N >= 2:
        I, J = _pairs(N)
        for lo in range(0, len(I), chunk):
            i, j = I[lo : lo + chunk], J[lo : lo + chunk]
            diff = minimum_image(x[i] - x[j])
            rsq = np.sum(diff * diff, axis=1)
            m = float(rsq.min())
            if m == 0.0:
                bad = np.nonzero(rsq == 0)[0]
                raise CoincidentPointsError(np.stack([i[bad], j[bad]], axis=1))
            dmin2 = min(dmin2, m)
            val, fac = table.short_pair(rsq)
            if want_energy:
                H_short += float(np.sum(val))
            if want_lap:
                D_short += float(np.sum(table.lap.short_pair(rsq)[0]))
            if want_force:
                fij = fac[:, None] * diff
                if delta is not None:
                    close = rsq < delta * delta
                    if np.any(close):
                        fij[close] += _truncation_correction(table, diff[close], rsq[close], delta)
                for k in range(d):
                    force[:, k] += np.bincount(j, weights=fij[:, k], minlength=N) - np.bincount(i, weights=fij[:, k], minlength=N)
    grad_long, H_long, D_long = _long_parts(table, x, want_force, want_lap)
    npairs = N * (N - 1) / 2
    H = (2 * H_short + 2 * npairs * table.mean_shift + H_long) / N**2
    D = None
    if want_lap:
        D = lap_ratio(table.params) * (2 * D_short + 2 * npairs * table.lap.mean_shift + D_long) / N**2
    if want_force:
        force = force / N - grad_long / N
    return PairSums(force, H, D, math.sqrt(dmin2) if N >= 2 else math.inf)


def _truncation_correction(table, diff, rsq, delta):
    """grad g_delta - grad g for pairs inside the truncation radius."""
    v, gr = eval_g_and_grad(table, diff)
    v = np.atleast_1d(v)
    gr = np.atleast_2d(gr)
    r = np.sqrt(rsq)
    chi, dchi = cutoff_chi(r / delta)
    return -(chi[:, None] * gr + (v * dchi / (delta * r))[:, None] * diff)


def pairwise_force(state: ParticleState | np.ndarray, table: KernelTable, delta: float | None) -> np.ndarray:
    x = state.positions if isinstance(state, ParticleState) else state
    return pair_sums(table, x, delta, want_energy=False, want_lap=False).force


def interaction_energy(state: ParticleState | np.ndarray, table: KernelTable) -> float:
    x = state.positions if isinstance(state, ParticleState) else state
    return pair_sums(table, x, None, want_force=False, want_lap=False).H


def discrete_enstrophy(state: ParticleState | np.ndarray, table: KernelTable) -> float:
    if table.lap is None:
        raise KernelError("discrete enstrophy needs a sub-Coulomb table")
    x = state.positions if isinstance(state, ParticleState) else state
    return pair_sums(table, x, None, want_force=False, want_energy=False).D


@dataclass
class DiagnosticsSeries:
    times: list = field(default_factory=list)
    H: list = field(default_factory=list)
    D: list = field(default_factory=list)
    intD: list = field(default_factory=list)
    Q: list = field(default_factory=list)
    Q_sup: list = field(default_factory=list)
    min_dist: list = field(default_factory=list)
    F_times: list = field(default_factory=list)
    F: list = field(default_factory=list)
    girsanov_noise: float = 0.0
    girsanov_quadratic: float = 0.0
    truncation_active_fraction: float = 0.0

    def as_arrays(self) -> dict:
        return {k: np.asarray(getattr(self, k)) for k in ("times", "H", "D", "intD", "Q", "Q_sup", "min_dist")}

    def csv_rows(self):
        F_map = dict(zip(self.F_times, self.F))
        for t, h, d, idd, q, md in zip(self.times, self.H, self.D, self.intD, self.Q_sup, self.min_dist):
            yield [t, h, d, idd, q, md, F_map.get(t, "")]

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "H_N", "D_N", "intD", "Q_N", "minDist", "F_N"])
            for row in self.csv_rows():
                w.writerow([v if v == "" else repr(float(v)) for v in row])


@dataclass
class ParticleTrajectory:
    times: np.ndarray
    positions: np.ndarray  # (T, N, d)


class Reference:
    """Mean-field reference trajectory prepared for F_N evaluation at particles."""

    def __init__(self, traj: FieldTrajectory, table: KernelTable, rel_tol: float = 1e-13):
        self.traj = traj
        self.table = table
        self.rel_tol = rel_tol

    def modulated_energy(self, t: float, x: np.ndarray, H: float) -> float:
        mu = self.traj.at(t)
        pot = riesz_convolve(mu, self.table, "g")
        cross = float(np.mean(active_modes(pot, self.rel_tol)(x)[0]))
        return H - 2 * cross + energy(mu, self.table)


def step_em(state: ParticleState, cfg: SdeConfig, table: KernelTable, noise: np.ndarray,
            sums: PairSums | None = None) -> tuple[ParticleState, np.ndarray | None]:
    """One Euler-Maruyama step.  Returns the new state and the drift used (or None)."""
    if state.time + cfg.dt > cfg.T * (1 + 1e-12) + 1e-15:
        raise ConfigError("step would pass the horizon")
    if sums is None:
        sums = pair_sums(table, state.positions, cfg.delta, want_energy=False, want_lap=False)
    inc = sums.force * cfg.dt + math.sqrt(2 * cfg.sigma * cfg.dt) * noise
    b = None
    if cfg.drift is not None:
        b = cfg.drift(state.time, state.positions)
        inc = inc + b * cfg.dt
    new = ParticleState(state.positions + inc, state.time + cfg.dt, state.unwrapped + inc, state.labels)
    return new, b


def simulate(cfg: SdeConfig, init: ParticleState, table: KernelTable, reference: Reference | None = None,
             diagnostics: bool = True, noise_streams: NoiseStreams | None = None):
    """Run to the horizon.  Returns (ParticleTrajectory, DiagnosticsSeries, final state)."""
    if init.N != cfg.N or init.d != cfg.params.d:
        raise ConfigError("initial state does not match the configuration")
    streams = noise_streams or NoiseStreams(cfg.seed, cfg.replica, init.labels, init.d, cfg.noise_block)
    diag = DiagnosticsSeries()
    rec_t = [init.time]
    rec_x = [init.positions.copy()]
    state = init
    qsup = -math.inf
    intD = 0.0
    prevD = None
    active = 0
    n = cfg.n_steps
    for step in range(n + 1):
        sums = pair_sums(table, state.positions, cfg.delta, want_force=step < n,
                         want_energy=diagnostics, want_lap=diagnostics)
        if sums.min_dist < 2 * cfg.delta:
            active += 1
        if diagnostics:
            if prevD is not None:
                intD += 0.5 * (prevD + sums.D) * cfg.dt
            prevD = sums.D
            q = sums.H + 2 * cfg.sigma * intD
            qsup = max(qsup, q)
            diag.times.append(state.time)
            diag.H.append(sums.H)
            diag.D.append(sums.D)
            diag.intD.append(intD)
            diag.Q.append(q)
            diag.Q_sup.append(qsup)
            diag.min_dist.append(sums.min_dist)
            if reference is not None and cfg.fn_stride and step % cfg.fn_stride == 0:
                diag.F_times.append(state.time)
                diag.F.append(reference.modulated_energy(state.time, state.positions, sums.H))
        if step == n:
            break
        xi = streams.next()
        state, b = step_em(state, cfg, table, xi, sums)
        if b is not None:
            diag.girsanov_noise += float(np.sum(b * xi)) * math.sqrt(cfg.dt)
            diag.girsanov_quadratic += float(np.sum(b * b)) * cfg.dt
        if (step + 1) % cfg.stride == 0:
            rec_t.append(state.time)
            rec_x.append(state.positions.copy())
    diag.truncation_active_fraction = active / (n + 1)
    if diag.truncation_active_fraction > cfg.truncation_warn_fraction:
        warnings.warn(f"truncation active on {diag.truncation_active_fraction:.1%} of steps "
                      f"(min pair distance below 2 delta = {2 * cfg.delta:.3g})", RuntimeWarning)
    return ParticleTrajectory(np.asarray(rec_t), np.stack(rec_x)), diag, state


def sample_iid(mu: SpectralField, N: int, rng: np.random.Generator, return_stats: bool = False):
    """N iid draws from a grid density by rejection against its maximum.

    The density is evaluated exactly (trigonometric interpolation) at uniform proposals.
    """
    vals = mu.values
    if vals.min() < -1e-12:
        raise ValueError(f"density has negative values down to {vals.min():.3e}")
    modes = active_modes(mu, 1e-15)
    bound = float(vals.max()) * 1.05 + 1e-12
    d = mu.grid.d
    out = []
    proposed = 0
    while sum(len(o) for o in out) < N:
        need = N - sum(len(o) for o in out)
        m = max(64, int(need * bound * 1.2))
        prop = rng.uniform(-0.5, 0.5, size=(m, d))
        dens = modes(prop)[0]
        if np.any(dens > bound):
            raise ValueError("rejection bound exceeded; density is not resolved on its grid")
        acc = rng.uniform(0, bound, size=m) < dens
        out.append(prop[acc])
        proposed += m
    x = np.concatenate(out)[:N]
    state = ParticleState(x)
    if return_stats:
        return state, {"proposed": proposed, "accepted": N, "acceptance": N / proposed}
    return state


def sample_uniform(N: int, d: int, rng: np.random.Generator) -> ParticleState:
    return ParticleState(rng.uniform(-0.5, 0.5, size=(N, d)))
