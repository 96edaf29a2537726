"""Latency records, SLO attainment, GPU cost, correlation and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cluster import Request
from .router import SloPolicy


class UndefinedCorrelation(ValueError):
    """Pearson correlation requested for a constant or too-short series."""


class MissingCompanionRun(ValueError):
    """Required-instance series asked for without an overprovisioned run."""


@dataclass
class LatencyRecord:
    id: int
    arrival_ms: int
    input_tokens: int
    output_tokens: int
    bucket: str
    ttft_ms: int | None
    tpot_ms: float | None  # None while the request is unfinished
    placement: tuple[str, ...]
    ttft_ok: bool = False
    tpot_ok: bool = False

    @property
    def attained(self) -> bool:
        return self.ttft_ok and self.tpot_ok

    @property
    def completed(self) -> bool:
        return self.tpot_ms is not None


def tpot_ms(first_token_ms: int, completion_ms: int, output_tokens: int) -> float:
    if output_tokens <= 1:
        return 0.0
    return (completion_ms - first_token_ms) / (output_tokens - 1)


def latency_record(req: Request, slo: SloPolicy) -> LatencyRecord:
    ttft = None if req.first_token_time is None else req.first_token_time - req.arrival_time
    tpot = None
    if req.completion_time is not None:
        tpot = tpot_ms(req.first_token_time, req.completion_time, req.output_tokens)
    return LatencyRecord(
        id=req.id,
        arrival_ms=req.arrival_time,
        input_tokens=req.input_tokens,
        output_tokens=req.output_tokens,
        bucket=req.true_bucket,
        ttft_ms=ttft,
        tpot_ms=tpot,
        placement=tuple(req.placement),
        ttft_ok=ttft is not None and ttft <= slo.ttft_slo(req.input_tokens),
        tpot_ok=tpot is not None and tpot <= slo.tpot_ms,
    )


def slo_attainment(records: Sequence[LatencyRecord]) -> tuple[float, float, float]:
    """(overall, ttft, tpot) attainment; unfinished requests count as misses."""
    n = len(records)
    if n == 0:
        return 1.0, 1.0, 1.0
    both = sum(r.attained for r in records)
    ttft = sum(r.ttft_ok for r in records)
    tpot = sum(r.tpot_ok for r in records)
    return both / n, ttft / n, tpot / n


def avg_gpu_usage(lifetimes: Iterable[tuple[int, int | None, int]], horizon_ms: int, start_ms: int = 0) -> float:
    """Time-weighted GPUs over ``[start_ms, horizon_ms]``.

    ``lifetimes`` holds ``(started_at, terminated_at or None, gpus)``;
    booting instances already hold their GPUs.
    """
    span = horizon_ms - start_ms
    if span <= 0:
        raise ValueError("horizon must be after start")
    total = 0.0
    for begin, end, gpus in lifetimes:
        lo = max(begin, start_ms)
        hi = horizon_ms if end is None else min(end, horizon_ms)
        if hi > lo:
            total += (hi - lo) * gpus
    return total / span


def required_instances_series(utilization: Sequence[float] | None, provisioned: Sequence[float] | None) -> list[float]:
    """Per-tick demand implied by an overprovisioned run: utilization times instances held."""
    if utilization is None or provisioned is None:
        raise MissingCompanionRun("required-instance series needs an overprovisioned companion run")
    if len(utilization) != len(provisioned):
        raise ValueError("utilization and provisioned series differ in length")
    return [u * p for u, p in zip(utilization, provisioned)]


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be one-dimensional and equally long")
    if len(x) < 2:
        raise UndefinedCorrelation("need at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelation("a series has zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def pearson_or_none(a: Sequence[float], b: Sequence[float]) -> float | None:
    try:
        return pearson(a, b)
    except UndefinedCorrelation:
        return None


# ---------------------------------------------------------------------- reports


@dataclass
class TickSample:
    """Cluster state at a scaler tick, used for timeseries and correlation."""

    time_ms: int
    prefillers: int
    regular_decoders: int
    convertibles: int
    prefill_utilization: float  # prefilled tokens / (V_P x prefillers) over the tick
    decoder_mem_utilization: float  # mean KV occupancy over decoders at the tick
    gpus: int

    @property
    def decoders(self) -> int:
        return self.regular_decoders + self.convertibles


@dataclass
class SimReport:
    records: list[LatencyRecord]
    policy: str
    seed: int
    trace: str
    horizon_ms: int
    avg_gpus: float
    ticks: list[TickSample] = field(default_factory=list)
    decisions: list = field(default_factory=list)
    pearson_prefill: float | None = None
    pearson_decode: float | None = None
    convertible_count: int = 0
    burst_ratio: float | None = None

    @property
    def attainment(self) -> tuple[float, float, float]:
        return slo_attainment(self.records)

    def summary(self) -> dict:
        overall, ttft, tpot = self.attainment
        return {
            "slo_attainment_overall": overall,
            "slo_attainment_ttft": ttft,
            "slo_attainment_tpot": tpot,
            "avg_gpus": self.avg_gpus,
            "pearson_prefill": self.pearson_prefill,
            "pearson_decode": self.pearson_decode,
            "policy": self.policy,
            "seed": self.seed,
            "trace": self.trace,
            "horizon_ms": self.horizon_ms,
            "requests": len(self.records),
            "completed": sum(r.completed for r in self.records),
            "convertible_count": self.convertible_count,
            "burst_ratio": self.burst_ratio,
        }


REQUEST_HEADER = ["id", "arrival_ms", "input_tokens", "output_tokens", "bucket", "ttft_ms", "tpot_ms", "attained", "placement"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def emit_report(report: SimReport, out_dir: str | Path) -> dict[str, Path]:
    """Write summary.json, requests.csv, timeseries.csv and decisions.csv."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "summary": out / "summary.json",
            "requests": out / "requests.csv",
            "timeseries": out / "timeseries.csv",
            "decisions": out / "decisions.csv",
        }
        paths["summary"].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with paths["requests"].open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REQUEST_HEADER)
            for r in report.records:
                w.writerow([r.id, r.arrival_ms, r.input_tokens, r.output_tokens, r.bucket,
                            _fmt(r.ttft_ms), _fmt(r.tpot_ms), int(r.attained), ";".join(r.placement)])
        with paths["timeseries"].open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["time_ms", "prefillers", "regular_decoders", "convertibles", "gpus",
                        "prefill_utilization", "decoder_mem_utilization"])
            for t in report.ticks:
                w.writerow([t.time_ms, t.prefillers, t.regular_decoders, t.convertibles, t.gpus,
                            _fmt(t.prefill_utilization), _fmt(t.decoder_mem_utilization)])
        with paths["decisions"].open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["issued_at", "policy", "target_prefillers", "target_decoders_total",
                        "convertible_count", "target_regular_decoders"])
            for d in report.decisions:
                w.writerow([d.issued_at, d.policy_name, d.target_prefillers, d.target_decoders_total,
                            d.convertible_count, d.target_regular_decoders])
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths


def load_summary(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
