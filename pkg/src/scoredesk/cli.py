"""Command-line front end: run one experiment, sweep a grid, or verify.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 runtime abort. Sweeps keep going past individual failures and report
per-run status in the summary file; any failed run turns the final exit
code into 3.
"""

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import (ConfigError, build_run, config_hash, load_config,
                     save_config, set_path)
from .engine import EngineAbort, run_experiment
from .verify import format_results, verify_suite

THREADS_ENV = "DIVE_DESK_THREADS"


def _parse_axis(text):
    if "=" not in text:
        raise ConfigError(f"axis must look like path=v1,v2,... got {text!r}")
    dotted, _, values = text.partition("=")
    vals = [v.strip() for v in values.split(",") if v.strip() != ""]
    if not vals:
        raise ConfigError(f"axis {dotted!r} has no values")
    return dotted.strip(), vals


def _run_one(cfg, outdir):
    setup, train = build_run(cfg)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    report = run_experiment(setup, train, outdir=out)
    return report


def _sweep_worker(job):
    cfg, outdir = job
    try:
        report = _run_one(cfg, outdir)
        if report.aborted:
            return {"outdir": outdir, "status": "aborted",
                    "entropy": report.final_entropy,
                    "divergence": report.final_divergence}
        return {"outdir": outdir, "status": "ok",
                "entropy": report.final_entropy,
                "divergence": report.final_divergence}
    except Exception as exc:  # keep sweeping; the summary carries the reason
        return {"outdir": outdir, "status": f"error: {exc}",
                "entropy": float("nan"), "divergence": float("nan")}


def cmd_run(args):
    overrides = [kv.partition("=")[::2] for kv in args.set or []]
    cfg = load_config(args.config, overrides=overrides)
    try:
        report = _run_one(cfg, args.out)
    except EngineAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    if report.aborted:
        print("aborted: see abort.json in the output directory",
              file=sys.stderr)
        return 3
    print(f"done: {report.steps_run} steps, entropy "
          f"{report.final_entropy:.4f}, divergence "
          f"{report.final_divergence:.4f}, out {report.outdir}")
    return 0


def _max_workers(n_jobs):
    cap = os.environ.get(THREADS_ENV)
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}")
        if cap < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {cap}")
        return min(n_jobs, cap)
    return min(n_jobs, os.cpu_count() or 1)


def cmd_sweep(args):
    overrides = [kv.partition("=")[::2] for kv in args.set or []]
    base = load_config(args.config, overrides=overrides)
    axes = [_parse_axis(a) for a in args.axis]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    rows = []
    for idx, combo in enumerate(itertools.product(*(v for _, v in axes))):
        cfg = json.loads(json.dumps(base))  # deep copy via round-trip
        for (dotted, _), value in zip(axes, combo):
            set_path(cfg, dotted, value)
        rundir = out / f"run_{idx:03d}"
        jobs.append((cfg, str(rundir)))
        rows.append({"run": f"run_{idx:03d}",
                     **{dotted: val for (dotted, _), val in zip(axes, combo)},
                     "hash": config_hash(cfg)})

    workers = _max_workers(len(jobs))
    if workers == 1:
        outcomes = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_worker, jobs))

    axis_names = [dotted for dotted, _ in axes]
    header = ["run", *axis_names, "hash", "status", "entropy", "divergence"]
    lines = [",".join(header)]
    n_bad = 0
    for row, outcome in zip(rows, outcomes):
        status = outcome["status"].replace(",", ";")
        if status != "ok":
            n_bad += 1
        cells = [row["run"], *[str(row[a]) for a in axis_names], row["hash"],
                 status, "%.6g" % outcome["entropy"],
                 "%.6g" % outcome["divergence"]]
        lines.append(",".join(cells))
    (out / "sweep_summary.csv").write_text("\n".join(lines) + "\n")
    print(f"sweep: {len(jobs) - n_bad}/{len(jobs)} runs ok, "
          f"summary {out / 'sweep_summary.csv'}")
    return 0 if n_bad == 0 else 3


def cmd_verify(args):
    results = verify_suite(quick=args.quick)
    if args.json:
        print(json.dumps(results, indent=2))
    else:
        print(format_results(results))
    return 0 if all(r["pass"] for r in results) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="scoredesk",
        description="score distillation experiments on analytic mixtures")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("-c", "--config", default=None,
                       help="YAML config (defaults used when omitted)")
    p_run.add_argument("-o", "--out", required=True, help="output directory")
    p_run.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config value by dotted path")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a cartesian grid of configs")
    p_sweep.add_argument("-c", "--config", default=None)
    p_sweep.add_argument("-o", "--out", required=True)
    p_sweep.add_argument("--axis", action="append", required=True,
                         metavar="PATH=V1,V2,...",
                         help="sweep axis; repeat for a grid")
    p_sweep.add_argument("--set", action="append", metavar="PATH=VALUE")
    p_sweep.set_defaults(func=cmd_sweep)

    p_verify = sub.add_parser("verify", help="run the self-check suite")
    p_verify.add_argument("--json", action="store_true")
    p_verify.add_argument("--quick", action="store_true")
    p_verify.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
