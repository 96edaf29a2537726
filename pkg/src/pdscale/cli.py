"""Command-line entry point: ``pdscale {run,compare,ablate,analyze,profile}``.

Exit status is 0 on success, 1 when inputs fail validation and 2 when a
run itself faults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, load_perf_config
from .metrics import SimReport, emit_report
from .profiler import build_profile
from .scenarios import ABLATION_STEPS, ablation_settings
from .simulation import simulate, simulate_with_correlation
from .trace import TraceError, burstiness, parse_trace
from .velocity import BUCKET_IDS, ConfigurationError

log = logging.getLogger("pdscale")

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 1, 2


class InvalidInput(Exception):
    """Raised for problems the user can fix by editing inputs."""


def _with_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "trace", None):
        path = Path(args.trace)
        if not path.is_file():
            raise InvalidInput(f"trace file {path} does not exist")
        cfg = replace(cfg, trace_file=path, synthesis=None)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=Path(args.out))
    return cfg


def _execute(cfg: ExperimentConfig, correlation: bool = True) -> SimReport:
    records = cfg.load_trace()
    run = simulate_with_correlation if correlation else simulate
    return run(cfg.settings(), records, cfg.seed, cfg.trace_name)


def _execute_to(cfg: ExperimentConfig, out_dir: Path, correlation: bool) -> dict:
    # top-level so worker processes can pickle it
    report = _execute(cfg, correlation)
    emit_report(report, out_dir)
    return report.summary()


def _table_row(summary: dict) -> str:
    return (f"{summary['policy']:<28} attainment={summary['slo_attainment_overall']:.3f} "
            f"ttft={summary['slo_attainment_ttft']:.3f} tpot={summary['slo_attainment_tpot']:.3f} "
            f"avg_gpus={summary['avg_gpus']:.2f}")


def _write_matrix(rows: list[dict], path: Path) -> None:
    keys = ["policy", "slo_attainment_overall", "slo_attainment_ttft", "slo_attainment_tpot", "avg_gpus",
            "pearson_prefill", "pearson_decode"]
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow(["" if row[k] is None else (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in keys])


# ---------------------------------------------------------------------- subcommands


def cmd_run(args) -> int:
    cfg = _with_overrides(load_config(args.config[0]), args)
    summary = _execute_to(cfg, cfg.output_dir, not args.no_correlation)
    print(_table_row(summary))
    print(f"reports written to {cfg.output_dir}")
    return EXIT_OK


def _trace_identity(cfg: ExperimentConfig):
    if cfg.trace_file is not None:
        return ("file", str(cfg.trace_file.resolve()))
    s = cfg.synthesis
    return ("synth", tuple((g.start_ms, g.end_ms, g.rps) for g in s.segments),
            tuple(sorted(s.bucket_weights.items())), s.length_mode)


def cmd_compare(args) -> int:
    if len(args.config) < 2:
        raise InvalidInput("compare needs at least two --config files")
    configs = [_with_overrides(load_config(p), argparse.Namespace(seed=args.seed, trace=args.trace, out=None))
               for p in args.config]
    first = configs[0]
    for path, cfg in zip(args.config[1:], configs[1:]):
        if _trace_identity(cfg) != _trace_identity(first):
            raise InvalidInput(f"{path} uses a different trace than {args.config[0]}")
        if cfg.seed != first.seed:
            raise InvalidInput(f"{path} uses seed {cfg.seed}, {args.config[0]} uses {first.seed}")
    out = Path(args.out or "out/compare")
    dirs = [out / f"{k:02d}-{c.name or Path(p).stem}" for k, (p, c) in enumerate(zip(args.config, configs))]
    correlation = not args.no_correlation
    if args.jobs == 1:
        rows = [_execute_to(c, d, correlation) for c, d in zip(configs, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_execute_to, c, d, correlation) for c, d in zip(configs, dirs)]
            rows = [f.result() for f in futures]  # config order, whatever finished first
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(rows, out / "matrix.csv")
    for row in rows:
        print(_table_row(row))
    print(f"matrix written to {out / 'matrix.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _with_overrides(load_config(args.config[0]), args)
    if cfg.prefill.policy != "rps" or cfg.decode.policy != "rps":
        raise InvalidInput("ablate needs a base config with the rps policy on both stages")
    settings = ablation_settings(cfg.settings())
    records = cfg.load_trace()
    out = Path(args.out or cfg.output_dir)
    rows = []
    for step, s in zip(ABLATION_STEPS, settings):
        report = simulate(s, records, cfg.seed, cfg.trace_name)
        emit_report(report, out / step.replace("+", "_"))
        rows.append(report.summary())
        print(_table_row(rows[-1]))
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(rows, out / "ablation.csv")
    return EXIT_OK


def _factors(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"factors must be comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("factors must be positive")
    return vals


def cmd_analyze(args) -> int:
    trace = args.trace
    if trace is None and args.config:
        trace = load_config(args.config[0]).trace_file
    if trace is None:
        raise InvalidInput("analyze needs --trace (or a --config whose trace is a file)")
    records = parse_trace(trace)
    if not records:
        raise InvalidInput(f"trace {trace} has no requests")
    report = burstiness(records, args.window_ms, args.factors)
    out = Path(args.out or "out/analyze")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "burstiness.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"burst_time_fraction={report.burst_time_fraction:.4f} "
          + " ".join(f"excess[{k:g}]={v:.4f}" for k, v in report.excess_fraction_requests.items()))
    print(f"written to {path}")
    return EXIT_OK


def cmd_profile(args) -> int:
    perf_cfg = load_perf_config(args.config[0])
    profile = build_profile(
        perf_cfg.perf,
        name=perf_cfg.name,
        tpot_slo_ms=perf_cfg.tpot_slo_ms,
        ttft_slo_ms=perf_cfg.ttft_slo_ms,
        mean_request_tokens=perf_cfg.mean_request_tokens,
        reference_v_d=perf_cfg.reference_v_d,
    )
    out = Path(args.out or "out/profile")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{perf_cfg.name or 'profile'}.json"
    profile.save(path)
    ref_v = perf_cfg.reference_v_d
    errors = {b: (profile.v_d_per_bucket[b] - ref_v[b]) / ref_v[b] for b in ref_v}
    for b in BUCKET_IDS:
        ref = f"  ({errors[b]:+.1%} vs reference)" if b in errors else ""
        print(f"{b}: {profile.v_d_per_bucket[b]:>10.1f} tok/s{ref}")
    print(f"v_p={profile.v_p:.1f} chunk={profile.chunk_size} batch={profile.expected_batch_size} "
          f"reserved={profile.reserved_tokens}")
    print(f"profile written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdscale", description="Disaggregated LLM serving autoscaling simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", action="append", default=[], required=config_required,
                       help="config file (repeat for compare)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--trace", help="trace CSV overriding the config's trace")

    p = sub.add_parser("run", help="one simulation")
    common(p)
    p.add_argument("--no-correlation", action="store_true", help="skip the overprovisioned companion run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="several configs on one trace")
    common(p)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    p.add_argument("--no-correlation", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="B, B+P, B+P+D and Full from an rps base config")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="burstiness of a trace")
    common(p, config_required=False)
    p.add_argument("--window-ms", type=int, default=60_000)
    p.add_argument("--factors", type=_factors, default=[1.0, 2.0, 3.0, 4.0])
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("profile", help="profile velocities from a perf config")
    common(p)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config {exc.source}:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidInput, TraceError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any fault inside a run maps to exit 2
        log.debug("run failed", exc_info=True)
        print(f"error: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
