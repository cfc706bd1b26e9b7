"""Command-line interface.

Subcommands: ``complete`` (run a completion), ``gradcheck`` (finite
difference validation of all analytic gradients), ``verify-theorem1`` /
``verify-theorem2`` (dynamics checks), ``synth`` (synthetic data
generators), ``bench`` (per-iteration cost comparison of the regularizer
variants), and ``ablate`` (depth/width sweep).

Exit codes: 0 success, 2 usage or input error, 3 numerical divergence.
Every subcommand echoes its fully resolved configuration as JSON.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from .dataio import (
    gen_mask,
    load_matrix,
    save_matrix,
    synth_blocks,
    synth_lowrank,
    trajectory_csv_text,
    write_outputs,
)
from .errors import ConfigError, DataFormatError, NumericalError
from .factorization import (
    ObjectiveConfig,
    air_objective,
    apply_mask,
    default_lambda,
    forward_product,
    tv_objective,
)
from .metrics import EvalResult, mse_split, nmae
from .training import (
    STOP_DIVERGENCE,
    InitSpec,
    OptimizerSpec,
    TrainConfig,
    train,
)
from .verify import (
    check_corollary1,
    duplicated_row_instance,
    gradient_check_suite,
    verify_theorem1,
    verify_theorem2,
)

GRADCHECK_TOL = 1e-5
BENCH_JOBS_ENV = "AIRMC_BENCH_JOBS"


def _echo(config):
    print(json.dumps(config))


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parse_missing(spec):
    kind, _, rest = spec.partition(":")
    if kind == "random":
        parts = rest.split(":") if rest else []
        if len(parts) not in (1, 2) or parts[0] == "":
            raise ConfigError("--missing random needs the form random:<p>[:seed]")
        try:
            rate = float(parts[0])
            seed = int(parts[1]) if len(parts) == 2 else 0
        except ValueError:
            raise ConfigError(f"bad --missing value {spec!r}") from None
        return {"kind": "random", "rate": rate, "seed": seed}
    if kind == "patch":
        try:
            top, left, height, width = (int(v) for v in rest.split(","))
        except ValueError:
            raise ConfigError("--missing patch needs the form patch:<top,left,h,w>") from None
        return {"kind": "patch", "top": top, "left": left, "height": height, "width": width}
    if kind == "texture":
        if not rest:
            raise ConfigError("--missing texture needs the form texture:<path>")
        return {"kind": "texture", "path": rest}
    raise ConfigError(f"unknown missing pattern {spec!r}")


def _resolve_mask(args, rows, cols):
    if (args.mask is None) == (args.missing is None):
        raise ConfigError("exactly one of --mask and --missing is required")
    if args.mask is not None:
        return gen_mask("file", rows, cols, path=args.mask), {"mask_file": args.mask}
    spec = _parse_missing(args.missing)
    if spec["kind"] == "random":
        mask = gen_mask("random", rows, cols, rate=spec["rate"], seed=spec["seed"])
    elif spec["kind"] == "patch":
        mask = gen_mask("patch", rows, cols, top=spec["top"], left=spec["left"],
                        height=spec["height"], width=spec["width"])
    else:
        mask = gen_mask("texture", rows, cols, path=spec["path"])
    return mask, {"missing": spec}


def _cmd_complete(args):
    data = load_matrix(args.input, args.format)
    m, n = data.shape
    mask, mask_echo = _resolve_mask(args, m, n)
    y = apply_mask(mask, data)

    truth = None
    if args.truth is not None:
        truth = load_matrix(args.truth, args.format)
        if truth.shape != data.shape:
            raise ConfigError(f"truth shape {truth.shape} does not match input shape {data.shape}")

    width = args.width if args.width is not None else min(m, n)
    delta = args.delta if args.delta is not None else m * n / 1000.0
    lam = default_lambda(y, m, n)
    lam_r = args.lambda_row if args.lambda_row is not None else lam
    lam_c = args.lambda_col if args.lambda_col is not None else lam

    reg = args.reg
    if reg == "air":
        objective = air_objective(mask, y, lambda_row=lam_r, lambda_col=lam_c)
    elif reg == "none":
        objective = ObjectiveConfig(mask=mask, y=y)
    elif reg == "tv":
        objective = tv_objective(mask, y, weight_row=lam_r, weight_col=lam_c)
    elif reg.startswith("fixed:"):
        paths = reg[len("fixed:"):].split(",")
        if len(paths) not in (1, 2) or not paths[0]:
            raise ConfigError("--reg fixed needs fixed:<row-lap.csv>[,<col-lap.csv>]")
        laps = [(load_matrix(paths[0]), "row", lam_r)]
        if len(paths) == 2:
            laps.append((load_matrix(paths[1]), "column", lam_c))
        objective = ObjectiveConfig(mask=mask, y=y, fixed_laps=laps)
    else:
        raise ConfigError(f"unknown --reg value {reg!r}")

    snapshot_iters = tuple(_int_list(args.snapshot_laplacians)) if args.snapshot_laplacians else ()
    cfg = TrainConfig(
        objective=objective,
        init=InitSpec(kind="gaussian", depth=args.depth, width=width, variance=1e-5, seed=args.seed),
        optimizer=OptimizerSpec(kind="adam", lr=args.lr),
        max_iters=args.max_iters,
        delta=delta,
        log_every=args.log_every,
        track_sigmas=args.track_sigmas,
        snapshot_iters=snapshot_iters,
    )
    result = train(cfg, truth=truth)
    xhat = forward_product(result.chain)

    config = {
        "command": "complete",
        "input": args.input,
        "format": args.format,
        **mask_echo,
        "truth": args.truth,
        "depth": args.depth,
        "width": width,
        "reg": reg,
        "lambda_row": lam_r,
        "lambda_col": lam_c,
        "lr": args.lr,
        "max_iters": args.max_iters,
        "delta": delta,
        "seed": args.seed,
        "nmae_variant": args.nmae_variant,
        "log_every": args.log_every,
        "track_sigmas": args.track_sigmas,
        "snapshot_laplacians": list(snapshot_iters),
    }

    diverged = result.stop_reason == STOP_DIVERGENCE
    nmae_value = None
    mse_unobs = None
    if diverged:
        # partial outputs: metrics from the last finite trajectory record
        mse_obs = result.log.records[-1].mse_obs if result.log.records else None
    else:
        if truth is not None:
            nmae_value = nmae(xhat, truth, mask, variant=args.nmae_variant)
            _, mse_unobs = mse_split(xhat, truth, mask)
        mse_obs = float(np.mean(np.square(apply_mask(mask, xhat) - y)))

    eval_result = EvalResult(
        nmae=nmae_value,
        nmae_variant=args.nmae_variant,
        mse_observed=mse_obs,
        mse_unobserved=mse_unobs,
        iterations=result.iterations,
        stop_reason=result.stop_reason,
        config=config,
    )
    snapshot_dir = None
    if snapshot_iters:
        anchor = args.out or args.trajectory
        snapshot_dir = os.path.dirname(os.path.abspath(anchor)) if anchor else os.getcwd()
    write_outputs(eval_result, result.log, json_path=args.out,
                  trajectory_path=args.trajectory, snapshot_dir=snapshot_dir)
    if args.save_matrix and not diverged:
        save_matrix(args.save_matrix, xhat)
    _echo(config)
    return 3 if diverged else 0


def _cmd_gradcheck(args):
    worst, rows = gradient_check_suite(seed=args.seed)
    ok = worst <= GRADCHECK_TOL
    _echo(
        {
            "command": "gradcheck",
            "seed": args.seed,
            "instances": len(rows),
            "fd_step": 1e-5,
            "tolerance": GRADCHECK_TOL,
            "max_rel_err": worst,
            "pass": ok,
        }
    )
    print(f"max relative error: {worst:.3e} ({'pass' if ok else 'FAIL'})")
    return 0 if ok else 1


def _cmd_verify_theorem1(args):
    reports = []
    ok = True
    for depth in _int_list(args.depths):
        rep = verify_theorem1(
            args.m, args.n, depth, step=args.step, checks=args.checks,
            stride=args.stride, seed=args.seed,
        )
        good = rep.median_rel_err <= 5e-2 and rep.min_gamma >= -1e-12
        ok = ok and good
        reports.append(rep)
        print(
            f"depth {depth}: median relative error {rep.median_rel_err:.3e}, "
            f"min gamma {rep.min_gamma:.3e}, flagged {rep.flagged} "
            f"({'pass' if good else 'FAIL'})"
        )
    payload = {
        "command": "verify-theorem1",
        "m": args.m,
        "n": args.n,
        "depths": _int_list(args.depths),
        "step": args.step,
        "checks": args.checks,
        "stride": args.stride,
        "seed": args.seed,
        "pass": ok,
        "reports": [r.to_dict() for r in reports],
    }
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    _echo({k: v for k, v in payload.items() if k != "reports"})
    return 0 if ok else 1


def _cmd_verify_theorem2(args):
    x = duplicated_row_instance(args.m, args.dup)
    rep = verify_theorem2(x, epsilon_init=args.eps, step=args.step, iters=args.iters)
    corollary = check_corollary1(rep)
    ok = (
        rep.max_err_s1 <= 1e-3
        and rep.max_err_s2_diag <= 1e-3
        and rep.symmetry_drift <= 1e-12
        and corollary["passed"]
        and not rep.no_decay_flag
    )
    payload = {
        "command": "verify-theorem2",
        "m": args.m,
        "dup": args.dup,
        "eps": args.eps,
        "step": args.step,
        "iters": args.iters,
        "pass": ok,
        "corollary1": corollary,
        "report": rep.to_dict(),
    }
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    print(
        f"limit errors: dissimilar {rep.max_err_s1:.3e}, identical+diag "
        f"{rep.max_err_s2_diag:.3e}; symmetry drift {rep.symmetry_drift:.1e}; "
        f"fitted rate {rep.d_hat:.3e} ({'pass' if ok else 'FAIL'})"
    )
    _echo({k: v for k, v in payload.items() if k != "report"})
    return 0 if ok else 1


def _cmd_synth(args):
    if args.kind == "lowrank":
        x = synth_lowrank(args.m, args.n, args.rank, seed=args.seed)
        config = {
            "command": "synth",
            "kind": "lowrank",
            "m": args.m,
            "n": args.n,
            "rank": args.rank,
            "seed": args.seed,
            "out": args.out,
        }
    else:
        x = synth_blocks(args.m, args.n, args.block_rows, args.block_cols, args.levels,
                         seed=args.seed)
        config = {
            "command": "synth",
            "kind": "blocks",
            "m": args.m,
            "n": args.n,
            "block_rows": args.block_rows,
            "block_cols": args.block_cols,
            "levels": args.levels,
            "seed": args.seed,
            "out": args.out,
        }
    save_matrix(args.out, x)
    _echo(config)
    return 0


def bench_cell(cell):
    """Time one (size, depth) cell for all three regularizer variants."""
    m, depth, iters, reps, seed, rate = cell
    data = synth_lowrank(m, m, 5, seed=seed)
    mask = gen_mask("random", m, m, rate=rate, seed=seed + 1)
    y = apply_mask(mask, data)
    medians = {}
    for reg in ("none", "tv", "air"):
        if reg == "none":
            objective = ObjectiveConfig(mask=mask, y=y)
        elif reg == "tv":
            objective = tv_objective(mask, y)
        else:
            objective = air_objective(mask, y)
        samples = []
        for rep in range(reps):
            cfg = TrainConfig(
                objective=objective,
                init=InitSpec(kind="gaussian", depth=depth, variance=1e-5, seed=seed + rep),
                optimizer=OptimizerSpec(kind="adam", lr=1e-3),
                max_iters=iters,
                delta=0.0,
                check_every=iters + 1,
                log_every=iters,
                track_sigmas=0,
            )
            t0 = time.perf_counter()
            train(cfg)
            samples.append(time.perf_counter() - t0)
        medians[reg] = float(np.median(samples))
    return m, depth, medians


def _cmd_bench(args):
    sizes = _int_list(args.sizes)
    depths = _int_list(args.depths)
    cells = [(m, depth, args.iters, args.reps, args.seed, args.missing_rate)
             for m in sizes for depth in depths]
    jobs = min(len(cells), os.cpu_count() or 1)
    cap = os.environ.get(BENCH_JOBS_ENV)
    if cap:
        jobs = max(1, min(jobs, int(cap)))

    if jobs > 1:
        import multiprocessing as mp

        # Workers run single-threaded BLAS so concurrent cells do not
        # contend, and keep large temporaries on the heap instead of
        # per-allocation mmap (syscalls dominate otherwise on sandboxed
        # kernels); children inherit the environment at spawn time.
        worker_env = {
            "OPENBLAS_NUM_THREADS": "1",
            "OMP_NUM_THREADS": "1",
            "MKL_NUM_THREADS": "1",
            "MALLOC_MMAP_THRESHOLD_": "268435456",
            "MALLOC_TRIM_THRESHOLD_": "268435456",
        }
        saved = {k: os.environ.get(k) for k in worker_env}
        os.environ.update(worker_env)
        try:
            ctx = mp.get_context("spawn")
            order = sorted(cells, key=lambda c: c[0] ** 3 * c[1], reverse=True)
            with ctx.Pool(processes=jobs) as pool:
                results = list(pool.imap_unordered(bench_cell, order))
        finally:
            for k, v in saved.items():
                if v is None:
                    del os.environ[k]
                else:
                    os.environ[k] = v
    else:
        results = [bench_cell(c) for c in cells]

    results.sort(key=lambda r: (r[0], r[1]))
    lines = ["m,L,t_dmf,t_tv,t_air,ratio_tv,ratio_air"]
    table = {}
    for m, depth, med in results:
        r_tv = med["tv"] / med["none"]
        r_air = med["air"] / med["none"]
        table[(m, depth)] = r_air
        lines.append(
            f"{m},{depth},{med['none']:.6g},{med['tv']:.6g},{med['air']:.6g},"
            f"{r_tv:.6g},{r_air:.6g}"
        )
    with open(args.out, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")

    warnings = []
    for m in sizes:
        ratios = [table[(m, depth)] for depth in sorted(depths)]
        for a, b in zip(ratios, ratios[1:]):
            if b > a * 1.15:
                warnings.append(
                    f"adaptive/plain time ratio increased with depth at m={m}: "
                    f"{a:.3f} -> {b:.3f}"
                )
    for w in warnings:
        print(f"advisory: {w}")
    _echo(
        {
            "command": "bench",
            "sizes": sizes,
            "depths": depths,
            "iters": args.iters,
            "reps": args.reps,
            "seed": args.seed,
            "missing_rate": args.missing_rate,
            "jobs": jobs,
            "out": args.out,
            "advisories": warnings,
        }
    )
    return 0


def _cmd_ablate(args):
    data = synth_lowrank(args.m, args.n, args.rank, seed=args.seed)
    mask = gen_mask("random", args.m, args.n, rate=args.missing_rate, seed=args.seed + 1)
    y = apply_mask(mask, data)
    os.makedirs(args.out_dir, exist_ok=True)
    runs = []
    for depth in _int_list(args.depths):
        for width in _int_list(args.widths):
            cfg = TrainConfig(
                objective=air_objective(mask, y),
                init=InitSpec(kind="gaussian", depth=depth, width=width, variance=1e-5,
                              seed=args.seed),
                optimizer=OptimizerSpec(kind="adam", lr=args.lr),
                max_iters=args.iters,
                delta=0.0,
                log_every=args.log_every,
            )
            result = train(cfg, truth=data)
            xhat = forward_product(result.chain)
            run = {
                "depth": depth,
                "width": width,
                "nmae": nmae(xhat, data, mask),
                "mse_unobserved": mse_split(xhat, data, mask)[1],
                "iterations": result.iterations,
                "stop_reason": result.stop_reason,
            }
            runs.append(run)
            path = os.path.join(args.out_dir, f"trajectory_L{depth}_r{width}.csv")
            with open(path, "w", encoding="ascii", newline="\n") as fh:
                fh.write(trajectory_csv_text(result.log))
    config = {
        "command": "ablate",
        "m": args.m,
        "n": args.n,
        "rank": args.rank,
        "missing_rate": args.missing_rate,
        "depths": _int_list(args.depths),
        "widths": _int_list(args.widths),
        "iters": args.iters,
        "lr": args.lr,
        "seed": args.seed,
        "out_dir": args.out_dir,
        "runs": runs,
    }
    with open(os.path.join(args.out_dir, "summary.json"), "w", encoding="ascii") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    _echo(config)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="airmc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", help="run a matrix completion")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "pgm"], default="csv")
    p.add_argument("--mask")
    p.add_argument("--missing")
    p.add_argument("--truth")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--width", type=int)
    p.add_argument("--reg", default="air")
    p.add_argument("--lambda-row", type=float, dest="lambda_row")
    p.add_argument("--lambda-col", type=float, dest="lambda_col")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=100000, dest="max_iters")
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--trajectory")
    p.add_argument("--save-matrix", dest="save_matrix")
    p.add_argument("--track-sigmas", type=int, default=0, dest="track_sigmas")
    p.add_argument("--snapshot-laplacians", dest="snapshot_laplacians")
    p.add_argument("--log-every", type=int, default=100, dest="log_every")
    p.add_argument("--nmae-variant", choices=["absolute", "squared"], default="absolute",
                   dest="nmae_variant")
    p.set_defaults(func=_cmd_complete)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("verify-theorem1", help="singular-value dynamics check")
    p.add_argument("--m", type=int, default=6)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--depths", default="2,3")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--checks", type=int, default=200)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_verify_theorem1)

    p = sub.add_parser("verify-theorem2", help="adjacency-flow limit check")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--dup", type=int, default=2)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=60000)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_verify_theorem2)

    p = sub.add_parser("synth", help="synthetic data generators")
    kinds = p.add_subparsers(dest="kind", required=True)
    lk = kinds.add_parser("lowrank")
    lk.add_argument("--m", type=int, required=True)
    lk.add_argument("--n", type=int, required=True)
    lk.add_argument("--rank", type=int, required=True)
    lk.add_argument("--seed", type=int, default=0)
    lk.add_argument("--out", required=True)
    lk.set_defaults(func=_cmd_synth)
    bk = kinds.add_parser("blocks")
    bk.add_argument("--m", type=int, required=True)
    bk.add_argument("--n", type=int, required=True)
    bk.add_argument("--block-rows", type=int, required=True, dest="block_rows")
    bk.add_argument("--block-cols", type=int, required=True, dest="block_cols")
    bk.add_argument("--levels", type=int, required=True)
    bk.add_argument("--seed", type=int, default=0)
    bk.add_argument("--out", required=True)
    bk.set_defaults(func=_cmd_synth)

    p = sub.add_parser("bench", help="iteration-cost comparison table")
    p.add_argument("--sizes", default="100,170,240")
    p.add_argument("--depths", default="2,3,4")
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-rate", type=float, default=0.3, dest="missing_rate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="depth/width sweep")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--missing-rate", type=float, default=0.5, dest="missing_rate")
    p.add_argument("--depths", default="2,3,4")
    p.add_argument("--widths", default="20,50,100")
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100, dest="log_every")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entry():
    raise SystemExit(main())
