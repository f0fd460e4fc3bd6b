"""Command line entry point.

    python -m meshsim run configs/default.json --out out/run1
    python -m meshsim compare configs/default.json --policies mesh,exclusive,exclusive_cpu
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence

from .config import LOG_LEVEL, POLICIES, normalize_model_id
from .experiment import ConfigError, ExperimentConfig, load_config
from .perfmodel import PerfTableError, save_table_csv
from .runner import RunResult, build_perf, run_to_dir
from .workload import LengthDatasetError, TraceFormatError

logger = logging.getLogger("meshsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

INPUT_ERRORS = (ConfigError, FileNotFoundError, PerfTableError, TraceFormatError, LengthDatasetError)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshsim", description="Simulate LLM serving on a shared CPU/GPU cluster.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", nargs="?", default=None, help="Experiment config (JSON); defaults apply when omitted")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="Output directory (overrides output.dir)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set policy.disable_cpu=true (repeatable)")
    common.add_argument("--log-level", default=LOG_LEVEL)

    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="Run one policy")
    run.add_argument("--dump-tables", default=None, metavar="DIR", help="Also write the perf tables in use as CSV")
    compare = sub.add_parser("compare", parents=[common], help="Run several policies on the same request stream")
    compare.add_argument("--policies", default=None, help=f"Comma separated subset of {','.join(POLICIES)}")
    compare.add_argument("--jobs", type=int, default=None, help="Policies simulated in parallel")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output.dir={json.dumps(os.path.abspath(args.out))}")
    if getattr(args, "policies", None):
        names = [p.strip() for p in args.policies.split(",") if p.strip()]
        overrides.append(f"run.policies={json.dumps(names)}")
    if getattr(args, "jobs", None) is not None:
        overrides.append(f"run.jobs={args.jobs}")
    return load_config(args.config, overrides)


def dump_tables(cfg: ExperimentConfig, out_dir: str) -> List[str]:
    paths = []
    for (preset, hw), table in build_perf(cfg).items():
        path = os.path.join(out_dir, f"{normalize_model_id(preset)}_{hw}.csv")
        save_table_csv(table, path)
        paths.append(path)
    return paths


def _status(result: RunResult, out_dir: str) -> str:
    r = result.report
    return (
        f"[meshsim] run policy={result.policy} requests={r.total_requests} compliant={r.compliant} "
        f"rate={r.compliance_rate:.4f} dropped={r.dropped} cpu_nodes={r.avg_cpu_nodes:.3f} "
        f"gpu_nodes={r.avg_gpu_nodes:.3f} out={out_dir}"
    )


def improvement(reference: int, other: int) -> Optional[float]:
    """(reference - other) / other, or None when `other` served nothing."""
    if other <= 0:
        return None
    return (reference - other) / other


def comparison_rows(results: Sequence[RunResult]) -> List[Dict[str, object]]:
    ref = results[0]
    rows = []
    for res in results:
        r = res.report
        rows.append(
            {
                "policy": res.policy,
                "total_requests": r.total_requests,
                "compliant": r.compliant,
                "compliance_rate": r.compliance_rate,
                "dropped": r.dropped,
                "avg_cpu_nodes": r.avg_cpu_nodes,
                "avg_gpu_nodes": r.avg_gpu_nodes,
                "cpu_decode_throughput": r.cpu_decode_throughput,
                "gpu_decode_throughput": r.gpu_decode_throughput,
                "improvement": None if res is ref else improvement(ref.report.compliant, r.compliant),
            }
        )
    return rows


def write_comparison(results: Sequence[RunResult], out_dir: str) -> None:
    rows = comparison_rows(results)
    with open(os.path.join(out_dir, "comparison.json"), "w", encoding="utf-8") as f:
        json.dump({"reference": results[0].policy, "policies": rows}, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "comparison.csv"), "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        header = list(rows[0].keys())
        w.writerow(header)
        for row in rows:
            w.writerow(["" if row[k] is None else (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in header])


def _run_policy(job) -> RunResult:
    cfg, out_dir, kind = job
    return run_to_dir(cfg, out_dir, kind)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.dump_tables:
        for path in dump_tables(cfg, args.dump_tables):
            print(f"[meshsim] table {path}")
    result = run_to_dir(cfg, cfg.output.dir)
    print(_status(result, cfg.output.dir))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load(args)
    jobs = [(cfg, os.path.join(cfg.output.dir, kind), kind) for kind in cfg.run.policies]
    if cfg.run.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.run.jobs, len(jobs))) as pool:
            results = list(pool.map(_run_policy, jobs))
    else:
        results = [_run_policy(job) for job in jobs]
    for result, (_cfg, out_dir, _kind) in zip(results, jobs):
        print(_status(result, out_dir))
    write_comparison(results, cfg.output.dir)
    for row in comparison_rows(results)[1:]:
        imp = row["improvement"]
        shown = "n/a" if imp is None else f"{100.0 * imp:+.1f}%"
        print(f"[meshsim] {results[0].policy} vs {row['policy']}: compliant {shown}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    handler = cmd_run if args.command == "run" else cmd_compare
    try:
        return handler(args)
    except INPUT_ERRORS as exc:
        print(f"[meshsim] config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logger.exception("simulation failed")
        print(f"[meshsim] runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
