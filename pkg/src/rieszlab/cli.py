"""Command line entry point: `rieszlab <subcommand> ...`.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a
diagnostic dump is written to the output directory).
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiments as ex
from .mckean_vlasov import StabilityError
from .particle_dynamics import CoincidentPointsError, ConfigError, simulate
from .rate_function import SolverError, rate_function_I
from .riesz_kernel import KernelError, eval_g, eval_grad_g, load_table, save_table
from .spectral_fields import ConvergenceError, FieldError, FieldTrajectory

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config, or a manifest.json to rerun")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override study.seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replicas")

    p = argparse.ArgumentParser(prog="rieszlab", description="Periodic Riesz-gas simulations and diagnostics")
    sub = p.add_subparsers(dest="command", required=True)

    kt = sub.add_parser("kernel-table", parents=[common], help="build or check a kernel table")
    kt.add_argument("action", choices=["build", "check"])
    kt.add_argument("--table", default=None, help="table file (default OUT/kernel.blob)")
    kt.add_argument("--points", type=int, default=200)

    sim = sub.add_parser("simulate", parents=[common], help="one particle run with diagnostics")
    sim.add_argument("--N", type=int, default=128)
    sim.add_argument("--replica", type=int, default=0)

    sub.add_parser("mve-solve", parents=[common], help="solve the mean-field PDE")

    rf = sub.add_parser("rate-function", parents=[common], help="rate function of a saved or solved trajectory")
    rf.add_argument("--trajectory", default=None, help="trajectory blob from mve-solve")

    for name in ("mean-field-study", "energy-tail-study", "girsanov-study", "ldp-diagnostics"):
        sub.add_parser(name, parents=[common])
    iq = sub.add_parser("inequality-suite", parents=[common])
    iq.add_argument("action", nargs="?", default="run", choices=["run"])
    iq.add_argument("--family", choices=["calib", "test"], default=None)
    iq.add_argument("--constants", default=None, help="constants.json from a calibration run")
    iq.add_argument("--d", type=int, default=None)
    iq.add_argument("--s", type=float, default=None)
    return p


def _kernel_table(args, cfg) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.table) if args.table else out / "kernel.blob"
    if args.action == "build":
        table = ex.build_kernel(cfg)
        save_table(table, path)
        return {"path": str(path), "digest": table.digest(), "alpha": table.split_parameter,
                "K": table.fourier_cutoff, "r0": table.r0}
    from .oracles import fourier_sum_oracle

    table = load_table(path)
    rng = ex.replica_rng(cfg["study"]["seed"], 0, 0, 99)
    x = rng.uniform(-0.5, 0.5, size=(args.points, table.params.d))
    x = x[np.linalg.norm(x - np.rint(x), axis=1) > 0.1]
    val, grad = fourier_sum_oracle(table.params, x)
    err_v = float(np.max(np.abs(eval_g(table, x) - val)))
    err_g = float(np.max(np.abs(eval_grad_g(table, x) - grad)))
    summary = {"path": str(path), "digest": table.digest(), "points": len(x), "max_abs_err_g": err_v,
               "max_abs_err_grad": err_g}
    ex.write_csv(out / "kernel_check.csv", list(summary), [summary])
    return summary


def _simulate(args, cfg) -> dict:
    import time

    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ex.build_kernel(cfg)
    params = ex.model_params(cfg)
    traj, _ = ex.solve_reference(cfg)
    sde = ex._sde_config(cfg, params, args.N, args.replica, ex.drift_field(cfg))
    init = ex._initial_state(ex.initial_density(cfg), args.N, sde.seed, args.replica)
    _, diag, final = simulate(sde, init, table, reference=ex.Reference(traj, table))
    diag.write_csv(out / "diagnostics.csv")
    final.save(out / "final_state.blob")
    summary = {"N": args.N, "sup_F": float(max(diag.F)), "Q_N": float(diag.Q_sup[-1]),
               "truncation_active_fraction": diag.truncation_active_fraction}
    return ex.finish("simulate", cfg, out, ["diagnostics.csv"], table, t0, summary)


def _mve(args, cfg) -> dict:
    import time

    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj, led = ex.solve_reference(cfg)
    traj.save(out / "trajectory.blob")
    led.write_csv(out / "ledger.csv")
    inc = float(np.max(np.diff(led.ledger))) if len(led.ledger) > 1 else 0.0
    summary = {"steps": len(led.ledger) - 1, "max_ledger_increase": inc, "final_energy": led.energy[-1]}
    return ex.finish("mve-solve", cfg, out, ["ledger.csv"], None, t0, summary)


def _rate(args, cfg) -> dict:
    import time

    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = FieldTrajectory.load(args.trajectory) if args.trajectory else ex.solve_reference(cfg)[0]
    sigma = float(cfg["model"]["sigma"])
    rep = rate_function_I(traj, ex.initial_density(cfg, traj.shape), sigma, ex.model_params(cfg))
    row = {"I": rep.I, "sup_branch": rep.sup_branch, "energy_branch": rep.energy_branch, "Q": rep.Q,
           "initial_mismatch": rep.initial_mismatch, "a_class": rep.a_class, "max_gap_abs": rep.max_gap_abs,
           "max_gap_rel": rep.max_gap_rel, "max_cg_residual": rep.max_cg_residual}
    if cfg["drift"]["kind"] != "none":
        row["tilt_cost"] = ex.tilt_cost(traj, ex.drift_field(cfg, traj.shape), sigma)
    ex.write_csv(out / "rate_function.csv", list(row), [row])
    return ex.finish("rate-function", cfg, out, ["rate_function.csv"], None, t0, row)


def _inequality(args, cfg) -> dict:
    if args.family:
        cfg["inequality"]["family"] = args.family
    if args.constants:
        cfg["inequality"]["constants"] = args.constants
    return ex.run_inequality_suite(cfg, args.out, args.threads)


def _dump(out: str, exc: BaseException) -> None:
    try:
        Path(out).mkdir(parents=True, exist_ok=True)
        info = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        if isinstance(exc, ConvergenceError):
            info["residual"] = exc.residual
        if isinstance(exc, CoincidentPointsError):
            info["pairs"] = np.asarray(exc.pairs).tolist()
        with open(Path(out) / "failure.json", "w") as fh:
            json.dump(info, fh, indent=2, default=str)
    except OSError:
        pass


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        user = ex.load_config(args.config)
        if args.command == "inequality-suite":
            user.setdefault("model", {})
            if args.d is not None:
                user["model"]["d"] = args.d
            if args.s is not None:
                user["model"]["s"] = args.s
        if args.command == "kernel-table":
            user["_needs_dynamics"] = False
        cfg = ex.resolve_config(user, args.seed)
        cfg.pop("_needs_dynamics", None)
    except (ConfigError, FieldError, KernelError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handlers = {"kernel-table": _kernel_table, "simulate": _simulate, "mve-solve": _mve, "rate-function": _rate,
                "inequality-suite": _inequality}
    try:
        with threadpool_limits(limits=1):
            if args.command in handlers:
                summary = handlers[args.command](args, cfg)
            else:
                summary = ex.STUDIES[args.command](cfg, args.out, args.threads)
    except (ConfigError, FieldError, KernelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StabilityError, ConvergenceError, SolverError, CoincidentPointsError, ex.NumericalFailure,
            FloatingPointError) as exc:
        _dump(args.out, exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(summary, indent=2, sort_keys=True, default=ex._json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
