"""End-to-end studies: particle runs against PDE references, energy tails,
Girsanov costs, small-N large-deviation frequencies and the inequality suite.

Every study takes a nested config dict (see DEFAULTS), writes CSV files with a
fixed column schema plus a JSON manifest into an output directory, and
returns a summary dict.  Replicas run in worker processes with BLAS pinned to
one thread and are merged by replica index, so outputs do not depend on the
number of workers.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from . import modulated_energy as me
from .mckean_vlasov import MveConfig, mve_solve, q_functional
from .particle_dynamics import (
    ConfigError,
    DriftField,
    NoiseStreams,
    ParticleState,
    Reference,
    SdeConfig,
    sample_iid,
    simulate,
)
from .rate_function import girsanov_log_density, rate_function_I
from .riesz_kernel import KernelTable, RieszParams, load_table, make_kernel
from .spectral_fields import FieldTrajectory, SpectralField, energy

DEFAULTS = {
    "model": {"d": 3, "s": 0.5, "sigma": 0.5},
    "kernel": {"accuracy": 1e-6, "path": ""},
    "initial": {"profile": "cosine", "amplitude": 0.2},
    "drift": {"kind": "none", "amplitude": -0.5},
    "time": {"T": 0.5},
    "sde": {"dt": 1.0 / 256, "fn_stride": 4, "delta": None},
    "pde": {"grid": 32, "dt": 1.0 / 512, "save_every": 4},
    "study": {"N": [64, 128, 256, 512], "replicas": 32, "seed": 0},
    "energy_tail": {"levels": [0.25, 0.5, 1.0]},
    "ldp": {"N": [4, 8, 16], "replicas": 2000, "epsilon": 0.05},
    "inequality": {"family": "test", "N": [64, 128], "instances": 500, "safety": 1.5, "eta_scale": 0.25,
                   "positivity_N": [64, 128, 256, 512], "positivity_replicas": 256, "constants": ""},
}


class NumericalFailure(RuntimeError):
    """Raised for failures that should map to exit code 3."""


# --- configuration ------------------------------------------------------------------


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None) -> dict:
    """TOML config, or a manifest JSON whose config snapshot is reused."""
    if not path:
        return {}
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as fh:
            data = json.load(fh)
        return data.get("config", data)
    import tomli

    with open(path, "rb") as fh:
        return tomli.load(fh)


def resolve_config(user: dict, seed: int | None = None) -> dict:
    cfg = deep_merge(DEFAULTS, user or {})
    if seed is not None:
        cfg["study"]["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    m = cfg["model"]
    try:
        params = RieszParams(int(m["d"]), float(m["s"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not float(m["sigma"]) > 0:
        raise ConfigError("sigma must be positive")
    for section in ("sde", "pde"):
        for key in ("d", "s", "sigma"):
            if key in cfg[section] and float(cfg[section][key]) != float(m[key]):
                raise ConfigError(f"[{section}].{key} = {cfg[section][key]} disagrees with [model].{key} = {m[key]}")
    n = int(cfg["pde"]["grid"])
    if n < 4 or n & (n - 1):
        raise ConfigError("pde.grid must be a power of two")
    if cfg["drift"]["kind"] not in ("none", "sine"):
        raise ConfigError(f"unknown drift kind {cfg['drift']['kind']!r}")
    if cfg["initial"]["profile"] not in ("cosine", "uniform"):
        raise ConfigError(f"unknown initial profile {cfg['initial']['profile']!r}")
    if not (0 <= float(cfg["initial"]["amplitude"]) < 1):
        raise ConfigError("initial amplitude must lie in [0, 1)")
    T = float(cfg["time"]["T"])
    for sec in ("sde", "pde"):
        steps = T / float(cfg[sec]["dt"])
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError(f"[{sec}].dt must divide T")
    if not params.dynamics_valid and cfg.get("_needs_dynamics", True):
        raise ConfigError("dynamics need s < d - 2")


def model_params(cfg: dict) -> RieszParams:
    return RieszParams(int(cfg["model"]["d"]), float(cfg["model"]["s"]))


def build_kernel(cfg: dict) -> KernelTable:
    path = cfg["kernel"].get("path")
    if path:
        table = load_table(path)
        if table.params != model_params(cfg):
            raise ConfigError("kernel table was built for different (d, s)")
        return table
    return make_kernel(model_params(cfg), float(cfg["kernel"]["accuracy"]))


def grid_shape(cfg: dict) -> tuple:
    return (int(cfg["pde"]["grid"]),) * int(cfg["model"]["d"])


def initial_density(cfg: dict, shape=None) -> SpectralField:
    shape = shape or grid_shape(cfg)
    a = float(cfg["initial"]["amplitude"]) if cfg["initial"]["profile"] == "cosine" else 0.0
    return SpectralField.from_function(shape, lambda X: 1 + a * np.cos(2 * np.pi * X[0]), kind="density")


def drift_field(cfg: dict, shape=None) -> DriftField | None:
    if cfg["drift"]["kind"] == "none":
        return None
    shape = shape or grid_shape(cfg)
    a = float(cfg["drift"]["amplitude"])

    def field(X):
        out = np.zeros((len(shape),) + X.shape[1:])
        out[0] = a * np.sin(2 * np.pi * X[0])
        return out

    return DriftField.from_function(shape, field)


def solve_reference(cfg: dict, tilted: bool | None = None):
    shape = grid_shape(cfg)
    drift = drift_field(cfg, shape) if (tilted is None or tilted) else None
    mcfg = MveConfig(model_params(cfg), shape, float(cfg["model"]["sigma"]), float(cfg["pde"]["dt"]),
                     float(cfg["time"]["T"]), initial_density(cfg, shape), drift=drift,
                     save_every=int(cfg["pde"]["save_every"]))
    return mve_solve(mcfg)


def tilt_cost(traj: FieldTrajectory, drift: DriftField, sigma: float) -> float:
    """(1/4 sigma) int_0^T int |b|^2 dmu^t dt from a PDE trajectory."""
    vals = [float(np.mean(np.sum(drift.field_at(t).values ** 2, axis=0) * f.values))
            for t, f in zip(traj.times, traj.fields)]
    return float(np.trapezoid(vals, traj.times)) / (4 * sigma)


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


# --- replica pool --------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(payload: dict) -> None:
    _WORKER.clear()
    _WORKER.update(payload)


def _call(task):
    func, args = task
    with threadpool_limits(limits=1):
        return func(_WORKER, *args)


def run_replicas(func, args_list: list, payload: dict, threads: int = 1) -> list:
    """func(payload, *args) for every args tuple, merged in input order."""
    tasks = [(func, a) for a in args_list]
    if threads <= 1 or len(tasks) <= 1:
        _init_worker(payload)
        try:
            return [_call(t) for t in tasks]
        finally:
            _WORKER.clear()
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(payload,)) as ex:
        return list(ex.map(_call, tasks, chunksize=1))


def replica_rng(seed: int, N: int, replica: int, label: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(N), int(replica), label])))


def _sde_config(cfg: dict, params: RieszParams, N: int, replica: int, drift, fn_stride: int | None = None) -> SdeConfig:
    sde = cfg["sde"]
    return SdeConfig(params, N, float(cfg["model"]["sigma"]), float(sde["dt"]), float(cfg["time"]["T"]),
                     seed=int(cfg["study"]["seed"]), replica=replica,
                     delta=None if sde.get("delta") in (None, "") else float(sde["delta"]), drift=drift,
                     stride=10**9, fn_stride=int(sde["fn_stride"] if fn_stride is None else fn_stride))


def _initial_state(gamma: SpectralField, N: int, seed: int, replica: int) -> ParticleState:
    return sample_iid(gamma, N, replica_rng(seed, N, replica, 0))


def _mean_field_replica(w, N, replica):
    cfg = w["cfg"]
    sde = _sde_config(cfg, w["params"], N, replica, w["drift"])
    init = _initial_state(w["gamma"], N, sde.seed, replica)
    ref = Reference(w["reference"], w["table"])
    _, diag, _ = simulate(sde, init, w["table"], reference=ref)
    F = np.asarray(diag.F)
    return {"N": N, "replica": replica, "sup_F": float(F.max()), "final_F": float(F[-1]), "initial_F": float(F[0]),
            "Q_N": float(diag.Q_sup[-1]), "min_dist": float(min(diag.min_dist))}


def _energy_tail_replica(w, N, replica):
    cfg = w["cfg"]
    sde = _sde_config(cfg, w["params"], N, replica, None, fn_stride=0)
    init = _initial_state(w["gamma"], N, sde.seed, replica)
    _, diag, _ = simulate(sde, init, w["table"])
    return {"N": N, "replica": replica, "Q_N": float(diag.Q_sup[-1]), "H0": float(diag.H[0]),
            "min_dist": float(min(diag.min_dist))}


def _girsanov_replica(w, N, replica):
    cfg = w["cfg"]
    sigma = float(cfg["model"]["sigma"])
    sde = _sde_config(cfg, w["params"], N, replica, w["drift"], fn_stride=0)
    init = _initial_state(w["gamma"], N, sde.seed, replica)
    _, diag, _ = simulate(sde, init, w["table"], diagnostics=False)
    logd = girsanov_log_density(diag.girsanov_noise, diag.girsanov_quadratic, sigma)
    return {"N": N, "replica": replica, "log_density_per_N": logd / N,
            "quadratic_per_N": diag.girsanov_quadratic / (4 * sigma * N)}


def _ldp_replica(w, N, replica, tilted):
    cfg = w["cfg"]
    sigma = float(cfg["model"]["sigma"])
    drift = w["drift"] if tilted else None
    sde = _sde_config(cfg, w["params"], N, replica + (10**6 if tilted else 0), drift)
    init = _initial_state(w["gamma"], N, sde.seed, sde.replica)
    ref = Reference(w["reference"], w["table"])
    _, diag, _ = simulate(sde, init, w["table"], reference=ref)
    logd = girsanov_log_density(diag.girsanov_noise, diag.girsanov_quadratic, sigma) if tilted else 0.0
    return {"N": N, "replica": replica, "law": "P_b" if tilted else "P", "sup_F": float(max(diag.F)),
            "log_density": logd}


# --- output plumbing ---------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path: Path, columns: list, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class ExperimentManifest:
    experiment: str
    config: dict
    seeds: dict
    kernel_hash: str
    code_version: str
    outputs: dict
    wall_clock: float
    summary: dict

    def write(self, path: Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def finish(name: str, cfg: dict, out: Path, files: list[str], table: KernelTable | None, t0: float,
           summary: dict) -> dict:
    outputs = {f: _sha256(out / f) for f in files}
    ExperimentManifest(name, cfg, {"seed": cfg["study"]["seed"]}, table.digest() if table else "", code_version(),
                       outputs, time.time() - t0, summary).write(out / "manifest.json")
    return summary


def _prepare(cfg: dict, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- studies -------------------------------------------------------------------------


def run_mean_field_study(cfg: dict, out, threads: int = 1) -> dict:
    """sup_t F_N(x_N^t, mu^t) over replicas for each N of the ladder."""
    t0 = time.time()
    out = _prepare(cfg, out)
    table = build_kernel(cfg)
    params = model_params(cfg)
    traj, _ = solve_reference(cfg)
    payload = {"cfg": cfg, "params": params, "table": table, "reference": traj, "drift": drift_field(cfg),
               "gamma": initial_density(cfg)}
    Ns = [int(n) for n in cfg["study"]["N"]]
    R = int(cfg["study"]["replicas"])
    rows = run_replicas(_mean_field_replica, [(N, r) for N in Ns for r in range(R)], payload, threads)
    cols = ["N", "replica", "initial_F", "sup_F", "final_F", "Q_N", "min_dist"]
    write_csv(out / "replicas.csv", cols, rows)
    qrows = []
    for N in Ns:
        v = np.array([r["sup_F"] for r in rows if r["N"] == N])
        qrows.append({"N": N, "replicas": len(v), "q10": float(np.quantile(v, 0.1)), "q25": float(np.quantile(v, 0.25)),
                      "median": float(np.median(v)), "q75": float(np.quantile(v, 0.75)),
                      "q90": float(np.quantile(v, 0.9)), "mean": float(v.mean())})
    write_csv(out / "quantiles.csv", ["N", "replicas", "q10", "q25", "median", "q75", "q90", "mean"], qrows)
    med = [q["median"] for q in qrows]
    summary = {"median_sup_F": dict(zip(map(str, Ns), med)),
               "strictly_decreasing": bool(all(b < a for a, b in zip(med, med[1:]))),
               "last_over_first": med[-1] / med[0] if med[0] else math.nan}
    return finish("mean-field-study", cfg, out, ["replicas.csv", "quantiles.csv"], table, t0, summary)


def run_energy_tail_study(cfg: dict, out, threads: int = 1) -> dict:
    """Frequencies of Q_N >= E(gamma) + L against N, with Wilson intervals.

    The level-L benchmark slope in N is -L / (2 sigma); at desk N this is an
    order-of-magnitude comparison only.
    """
    t0 = time.time()
    out = _prepare(cfg, out)
    table = build_kernel(cfg)
    params = model_params(cfg)
    gamma = initial_density(cfg)
    E0 = energy(gamma, params)
    sigma = float(cfg["model"]["sigma"])
    payload = {"cfg": cfg, "params": params, "table": table, "gamma": gamma}
    Ns = [int(n) for n in cfg["study"]["N"]]
    R = int(cfg["study"]["replicas"])
    rows = run_replicas(_energy_tail_replica, [(N, r) for N in Ns for r in range(R)], payload, threads)
    write_csv(out / "replicas.csv", ["N", "replica", "Q_N", "H0", "min_dist"], rows)
    levels = [float(L) for L in cfg["energy_tail"]["levels"]]
    frows = []
    for L in levels:
        for N in Ns:
            q = np.array([r["Q_N"] for r in rows if r["N"] == N])
            k = int(np.sum(q >= E0 + L))
            lo, hi = wilson_interval(k, len(q))
            frows.append({"level": L, "N": N, "replicas": len(q), "exceed": k, "freq": k / len(q),
                          "wilson_low": lo, "wilson_high": hi})
    write_csv(out / "tail.csv", ["level", "N", "replicas", "exceed", "freq", "wilson_low", "wilson_high"], frows)
    slopes = []
    for L in levels:
        pts = [(r["N"], r["freq"]) for r in frows if r["level"] == L and r["freq"] > 0]
        slope = float(np.polyfit([p[0] for p in pts], np.log([p[1] for p in pts]), 1)[0]) if len(pts) >= 2 else math.nan
        slopes.append({"level": L, "fitted_slope": slope, "benchmark_slope": -L / (2 * sigma)})
    write_csv(out / "slopes.csv", ["level", "fitted_slope", "benchmark_slope"], slopes)
    summary = {"E_gamma": E0, "freq": {f"{r['level']}@{r['N']}": r["freq"] for r in frows},
               "slopes": {str(s["level"]): s["fitted_slope"] for s in slopes}}
    return finish("energy-tail-study", cfg, out, ["replicas.csv", "tail.csv", "slopes.csv"], table, t0, summary)


def run_girsanov_cost_study(cfg: dict, out, threads: int = 1) -> dict:
    """Mean of (1/N) log dP/dP_b on tilted paths against -(1/4 sigma) int int |b|^2 dmu dt."""
    t0 = time.time()
    out = _prepare(cfg, out)
    if cfg["drift"]["kind"] == "none":
        raise ConfigError("the Girsanov study needs a drift")
    table = build_kernel(cfg)
    params = model_params(cfg)
    sigma = float(cfg["model"]["sigma"])
    drift = drift_field(cfg)
    traj, _ = solve_reference(cfg)
    target = -tilt_cost(traj, drift, sigma)
    payload = {"cfg": cfg, "params": params, "table": table, "drift": drift, "gamma": initial_density(cfg)}
    Ns = [int(n) for n in cfg["study"]["N"]]
    R = int(cfg["study"]["replicas"])
    rows = run_replicas(_girsanov_replica, [(N, r) for N in Ns for r in range(R)], payload, threads)
    write_csv(out / "replicas.csv", ["N", "replica", "log_density_per_N", "quadratic_per_N"], rows)
    srows = []
    for N in Ns:
        v = np.array([r["log_density_per_N"] for r in rows if r["N"] == N])
        mean = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.nan
        tol = max(0.05 * abs(target), 3 * se)
        srows.append({"N": N, "replicas": len(v), "mean": mean, "se": se, "target": target,
                      "rel_err": abs(mean - target) / abs(target), "within": int(abs(mean - target) <= tol)})
    write_csv(out / "summary.csv", ["N", "replicas", "mean", "se", "target", "rel_err", "within"], srows)
    summary = {"target": target, "rows": srows}
    return finish("girsanov-study", cfg, out, ["replicas.csv", "summary.csv"], table, t0, summary)


def run_local_ldp_diagnostics(cfg: dict, out, threads: int = 1) -> dict:
    """P(sup_t F_N(x^t, mu^t) < eps) under P and P_b for a tilted target mu.

    Under P the frequency is also estimated by reweighting P_b paths with
    dP/dP_b.  Reports are order-of-magnitude only: observability needs N I to
    stay below about 15.
    """
    t0 = time.time()
    out = _prepare(cfg, out)
    if cfg["drift"]["kind"] == "none":
        raise ConfigError("local LDP diagnostics need a tilted target")
    table = build_kernel(cfg)
    params = model_params(cfg)
    sigma = float(cfg["model"]["sigma"])
    traj, _ = solve_reference(cfg)
    rate = rate_function_I(traj, initial_density(cfg), sigma, params).I
    payload = {"cfg": cfg, "params": params, "table": table, "reference": traj, "drift": drift_field(cfg),
               "gamma": initial_density(cfg)}
    Ns = [int(n) for n in cfg["ldp"]["N"]]
    R = int(cfg["ldp"]["replicas"])
    eps = float(cfg["ldp"]["epsilon"])
    tasks = [(N, r, tilted) for N in Ns for tilted in (False, True) for r in range(R)]
    rows = run_replicas(_ldp_replica, tasks, payload, threads)
    write_csv(out / "replicas.csv", ["N", "law", "replica", "sup_F", "log_density"], rows)
    srows = []
    for N in Ns:
        for law in ("P", "P_b"):
            v = [r for r in rows if r["N"] == N and r["law"] == law]
            hit = np.array([r["sup_F"] < eps for r in v])
            k = int(hit.sum())
            lo, hi = wilson_interval(k, len(v))
            row = {"N": N, "law": law, "replicas": len(v), "hits": k, "freq": k / len(v), "wilson_low": lo,
                   "wilson_high": hi, "rate_prediction": math.exp(-N * rate), "N_times_I": N * rate,
                   "label": "order-of-magnitude only" if law == "P" else "law of large numbers side"}
            if law == "P_b":
                w = np.exp(np.array([r["log_density"] for r in v]))
                row["reweighted_P"] = float(np.mean(w * hit))
            srows.append(row)
    cols = ["N", "law", "replicas", "hits", "freq", "wilson_low", "wilson_high", "reweighted_P", "rate_prediction",
            "N_times_I", "label"]
    write_csv(out / "summary.csv", cols, srows)
    summary = {"rate_function": rate, "epsilon": eps}
    return finish("ldp-diagnostics", cfg, out, ["replicas.csv", "summary.csv"], table, t0, summary)


def _inequality_replica(w, N, index):
    inst = me.make_instance(w["family"], index, N)
    return me.instance_records(inst, w["table"], w["consts"], w["eta_scale"])


def _positivity_replica(w, N, replica, density):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([w["seed"], N, replica, 7])))
    table = w["table"]
    if density == "uniform":
        x = rng.uniform(-0.5, 0.5, size=(N, table.params.d))
        return float(me.pair_sums(table, x, None, want_force=False, want_lap=False).H)
    mu = me.random_density(rng)
    x = sample_iid(mu, N, rng).positions
    return me.modulated_energy(x, mu, table).F_N / me.sup_norm(mu)


def positivity_family(table, N_list, replicas, seed, densities, threads=1) -> dict:
    tasks = [(N, r, dens) for N in N_list for dens in densities for r in range(replicas)]
    vals = run_replicas(_positivity_replica, tasks, {"table": table, "seed": seed}, threads)
    out = {}
    for (N, _, _), v in zip(tasks, vals):
        out.setdefault(N, []).append(v)
    return {N: np.array(v) for N, v in out.items()}


def run_inequality_suite(cfg: dict, out, threads: int = 1) -> dict:
    """Calibrate (family = calib) or test (family = test) the inequality suite.

    Calibration fits the positivity slack (C, beta) and one constant per
    inequality and writes constants.json; testing loads frozen constants and
    counts violations.
    """
    t0 = time.time()
    out = _prepare(cfg, out)
    ic = cfg["inequality"]
    cfg = copy.deepcopy(cfg)
    table = build_kernel(cfg)
    family = ic["family"]
    seed = me.FAMILY_SEEDS[family]
    Ns = [int(n) for n in ic["N"]]
    n_inst = int(ic["instances"])
    files = []
    if family == "calib":
        pos = positivity_family(table, [int(n) for n in ic["positivity_N"]], int(ic["positivity_replicas"]), seed,
                                ("uniform", "smooth"), threads)
        fit = me.fit_positivity(pos, float(ic["safety"]))
        consts = fit.as_constants()
    else:
        path = ic.get("constants") or ""
        if not path:
            raise ConfigError("the test family needs inequality.constants pointing at a calibration output")
        consts, frozen = me.load_constants(path)
    payload = {"table": table, "consts": consts, "family": family, "eta_scale": float(ic["eta_scale"])}
    nested = run_replicas(_inequality_replica, [(N, i) for N in Ns for i in range(n_inst)], payload, threads)
    records = [r for group in nested for r in group]
    if family == "calib":
        frozen = me.fit_constants(records, float(ic["safety"]))
        me.save_constants(out / "constants.json", fit, frozen, table.params)
        files.append("constants.json")
    summ = me.evaluate(records, frozen)
    me.write_records_csv(out / "records.csv", summ.records)
    files.append("records.csv")
    rows = []
    stab = summ.stability()
    for name in me.INEQUALITIES:
        if name not in summ.count:
            continue
        row = {"name": name, "instances": summ.count[name], "violations": summ.violations[name],
               "constant": frozen[name], "stability": stab[name]}
        for N in Ns:
            row[f"max_ratio_N{N}"] = summ.max_ratio[name].get(N, math.nan)
        rows.append(row)
    write_csv(out / "summary.csv", ["name", "instances", "violations", "constant", "stability"]
              + [f"max_ratio_N{N}" for N in Ns], rows)
    files.append("summary.csv")
    summary = {"family": family, "violations": summ.violations, "stability": stab, "constants": frozen,
               "C_pos": consts.C_pos, "beta": consts.beta}
    return finish("inequality-suite", cfg, out, files, table, t0, summary)


def run_positivity_test(cfg: dict, consts: me.SlackConstants, N_list, replicas: int, threads: int = 1) -> dict:
    """min over iid-uniform replicas of F_N + C N^(-beta) per N, on the test seeds."""
    table = build_kernel(cfg)
    vals = positivity_family(table, N_list, replicas, me.FAMILY_SEEDS["test"], ("uniform",), threads)
    return {N: float(np.min(v + consts.C_pos * N ** (-consts.beta))) for N, v in vals.items()}


STUDIES = {
    "mean-field-study": run_mean_field_study,
    "energy-tail-study": run_energy_tail_study,
    "girsanov-study": run_girsanov_cost_study,
    "ldp-diagnostics": run_local_ldp_diagnostics,
    "inequality-suite": run_inequality_suite,
}
