"""Workload traces: CSV I/O, synthetic bursty arrivals, thinning, burstiness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .engine import rng_stream
from .velocity import BUCKETS, BUCKETS_BY_ID, BUCKET_IDS, INPUT_CLASSES, OUTPUT_CLASSES, classify

HEADER = ("arrival_ms", "input_tokens", "output_tokens")


@dataclass(frozen=True, order=True)
class TraceRecord:
    arrival_ms: int
    input_tokens: int
    output_tokens: int

    @property
    def bucket(self) -> str:
        return classify(self.input_tokens, self.output_tokens)


class TraceError(ValueError):
    def __init__(self, path, problems: list[tuple[int, str]]):
        self.path = path
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems)
        super().__init__(f"{path}: {lines}")


def parse_trace(path: str | Path) -> list[TraceRecord]:
    """Read a trace CSV; every malformed line is reported with its number."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_trace_text(text, source=str(path))


def parse_trace_text(text: str, source: str = "<trace>") -> list[TraceRecord]:
    reader = csv.reader(io.StringIO(text))
    problems: list[tuple[int, str]] = []
    try:
        header = next(reader)
    except StopIteration:
        raise TraceError(source, [(1, "empty file, expected header")]) from None
    header = [h.strip() for h in header]
    if tuple(header) != HEADER:
        raise TraceError(source, [(1, f"header must be {','.join(HEADER)}, got {','.join(header)}")])
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            problems.append((lineno, f"expected 3 columns, got {len(row)}"))
            continue
        try:
            arrival, inp, out = (int(c.strip()) for c in row)
        except ValueError:
            problems.append((lineno, f"non-integer field in {row!r}"))
            continue
        if arrival < 0:
            problems.append((lineno, f"negative arrival_ms {arrival}"))
        if inp < 1 or out < 1:
            problems.append((lineno, f"token counts must be >= 1, got {inp},{out}"))
        if arrival >= 0 and inp >= 1 and out >= 1:
            records.append(TraceRecord(arrival, inp, out))
    if problems:
        raise TraceError(source, problems)
    records.sort()
    return records


def format_trace(records: Iterable[TraceRecord]) -> str:
    lines = [",".join(HEADER)]
    lines += [f"{r.arrival_ms},{r.input_tokens},{r.output_tokens}" for r in records]
    return "\n".join(lines) + "\n"


def write_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_trace(records))


# ---------------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class RateSegment:
    start_ms: int
    end_ms: int
    rps: float


@dataclass
class SynthesisSpec:
    segments: list[RateSegment]
    bucket_weights: dict[str, float] = field(default_factory=lambda: {b: 1.0 for b in BUCKET_IDS})
    # "representative": every request takes its bucket's representative lengths;
    # "uniform": lengths drawn uniformly inside the bucket's class ranges
    length_mode: str = "representative"

    def problems(self) -> list[str]:
        out = []
        if not self.segments:
            out.append("synthesis needs at least one segment")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.end_ms != b.start_ms:
                out.append(f"segments not contiguous at {a.end_ms} / {b.start_ms}")
        for s in self.segments:
            if s.end_ms <= s.start_ms:
                out.append(f"segment [{s.start_ms}, {s.end_ms}) is empty")
            if s.rps < 0:
                out.append(f"segment [{s.start_ms}, {s.end_ms}) has negative rate")
        unknown = sorted(set(self.bucket_weights) - set(BUCKET_IDS))
        if unknown:
            out.append(f"unknown buckets in weights: {unknown}")
        if any(w < 0 for w in self.bucket_weights.values()) or sum(self.bucket_weights.values()) <= 0:
            out.append("bucket weights must be non-negative with a positive sum")
        if self.length_mode not in ("representative", "uniform"):
            out.append(f"length_mode must be 'representative' or 'uniform', got {self.length_mode!r}")
        return out

    @property
    def end_ms(self) -> int:
        return self.segments[-1].end_ms if self.segments else 0


def _class_range(classes, label: str) -> tuple[int, int]:
    lo = 1
    for name, bound in classes:
        if name == label:
            return lo, bound
        lo = bound + 1
    raise KeyError(label)


def synthesize(spec: SynthesisSpec, seed: int) -> list[TraceRecord]:
    """Poisson arrivals per segment with lengths drawn from the bucket mixture."""
    problems = spec.problems()
    if problems:
        raise ValueError("; ".join(problems))
    arrivals_rng = rng_stream(seed, "trace.arrivals")
    lengths_rng = rng_stream(seed, "trace.lengths")
    ids = [b for b in BUCKET_IDS if spec.bucket_weights.get(b, 0) > 0]
    weights = np.array([spec.bucket_weights[b] for b in ids], dtype=float)
    weights /= weights.sum()

    times: list[int] = []
    for seg in spec.segments:
        if seg.rps == 0:
            continue
        t = float(seg.start_ms)
        mean_gap = 1000.0 / seg.rps
        while True:
            t += arrivals_rng.exponential(mean_gap)
            if t >= seg.end_ms:
                break
            times.append(int(t))

    choice = lengths_rng.choice(len(ids), size=len(times), p=weights)
    records = []
    for t, k in zip(times, choice):
        bucket = BUCKETS_BY_ID[ids[k]]
        if spec.length_mode == "representative":
            inp, out = bucket.representative_input, bucket.representative_output
        else:
            ilo, ihi = _class_range(INPUT_CLASSES, bucket.input_class)
            olo, ohi = _class_range(OUTPUT_CLASSES, bucket.output_class)
            inp = int(lengths_rng.integers(ilo, ihi + 1))
            out = int(lengths_rng.integers(olo, ohi + 1))
        records.append(TraceRecord(t, inp, out))
    records.sort()
    return records


def trace_span_ms(records: Sequence[TraceRecord]) -> int:
    if not records:
        return 0
    return max(1, records[-1].arrival_ms - records[0].arrival_ms)


def mean_rps(records: Sequence[TraceRecord], span_ms: int | None = None) -> float:
    span = trace_span_ms(records) if span_ms is None else span_ms
    return 1000.0 * len(records) / span if span else 0.0


def rescale(records: Sequence[TraceRecord], target_rps: float, seed: int, span_ms: int | None = None) -> list[TraceRecord]:
    """Thin a trace uniformly at random to ``target_rps`` (no upsampling).

    Keeps exactly round(target * span) records so the mean rate lands on
    target; the kept subset is a uniform sample, preserving arrival shape
    and length distributions in expectation.
    """
    if target_rps <= 0:
        raise ValueError("target_rps must be positive")
    span = trace_span_ms(records) if span_ms is None else span_ms
    source = mean_rps(records, span)
    if target_rps > source * 1.0001:
        raise ValueError(f"target {target_rps:.3f} rps exceeds source rate {source:.3f} rps")
    keep = min(len(records), int(round(target_rps * span / 1000.0)))
    rng = rng_stream(seed, "trace.rescale")
    idx = np.sort(rng.choice(len(records), size=keep, replace=False))
    return [records[i] for i in idx]


def bucket_counts(records: Iterable[TraceRecord]) -> dict[str, int]:
    counts = {b: 0 for b in BUCKET_IDS}
    for r in records:
        counts[r.bucket] += 1
    return counts


# ---------------------------------------------------------------------- burstiness


@dataclass
class BurstReport:
    window_ms: int
    bin_ms: int
    burst_time_fraction: float
    mean_burst_duration_s: float
    excess_fraction_requests: dict[float, float]
    excess_fraction_tokens: dict[float, float]

    @property
    def burst_ratio(self) -> float:
        """Share of token traffic above the running average."""
        return self.excess_fraction_tokens.get(1.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "window_ms": self.window_ms,
            "bin_ms": self.bin_ms,
            "burst_time_fraction": self.burst_time_fraction,
            "mean_burst_duration_s": self.mean_burst_duration_s,
            "excess_fraction_requests": {str(k): v for k, v in self.excess_fraction_requests.items()},
            "excess_fraction_tokens": {str(k): v for k, v in self.excess_fraction_tokens.items()},
        }


def binned_rates(records: Sequence[TraceRecord], bin_ms: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin request and input-token counts, bins anchored at the first arrival."""
    t0 = records[0].arrival_ms
    idx = np.array([(r.arrival_ms - t0) // bin_ms for r in records], dtype=np.int64)
    n = int(idx[-1]) + 1
    reqs = np.bincount(idx, minlength=n).astype(float)
    toks = np.bincount(idx, weights=[r.input_tokens for r in records], minlength=n)
    return reqs, toks


def running_average(series: np.ndarray, width: int) -> np.ndarray:
    """Trailing mean over the last ``width`` bins, including the current one."""
    csum = np.concatenate(([0.0], np.cumsum(series)))
    k = np.arange(1, len(series) + 1)
    lo = np.maximum(0, k - width)
    return (csum[k] - csum[lo]) / (k - lo)


def _excess(series: np.ndarray, avg: np.ndarray, factor: float) -> float:
    total = series.sum()
    if total <= 0:
        return 0.0
    return float(np.clip(series - factor * avg, 0.0, None).sum() / total)


def burstiness(
    records: Sequence[TraceRecord],
    window_ms: int = 60_000,
    factors: Sequence[float] = (1.0, 2.0, 3.0, 4.0),
    bin_ms: int = 1000,
) -> BurstReport:
    """Compare per-second rates against a trailing running average.

    ``excess_fraction[X]`` is the share of traffic that a system provisioned
    at X times the running average could not serve in the bin it arrived in.
    """
    if not records:
        raise ValueError("burstiness needs a non-empty trace")
    records = sorted(records)
    reqs, toks = binned_rates(records, bin_ms)
    width = max(1, window_ms // bin_ms)
    avg_r = running_average(reqs, width)
    avg_t = running_average(toks, width)

    above = reqs > avg_r * (1 + 1e-12)
    runs = []
    run = 0
    for flag in above:
        if flag:
            run += 1
        elif run:
            runs.append(run)
            run = 0
    if run:
        runs.append(run)
    factors = sorted(float(x) for x in factors)
    return BurstReport(
        window_ms=window_ms,
        bin_ms=bin_ms,
        burst_time_fraction=float(above.mean()),
        mean_burst_duration_s=float(np.mean(runs) * bin_ms / 1000) if runs else 0.0,
        excess_fraction_requests={x: _excess(reqs, avg_r, x) for x in factors},
        excess_fraction_tokens={x: _excess(toks, avg_t, x) for x in factors},
    )


def peak_decoder_demand(
    records: Sequence[TraceRecord],
    v_d_per_bucket: Mapping[str, float],
    window_ms: int = 60_000,
    bin_ms: int = 1000,
) -> float:
    """Largest running-average decoder count implied by per-bucket velocities."""
    if not records:
        return 0.0
    records = sorted(records)
    t0 = records[0].arrival_ms
    n = (records[-1].arrival_ms - t0) // bin_ms + 1
    demand = np.zeros(n)
    for r in records:
        b = r.bucket
        spec = BUCKETS_BY_ID[b]
        demand[(r.arrival_ms - t0) // bin_ms] += (r.input_tokens + spec.representative_output) / v_d_per_bucket[b]
    demand *= 1000.0 / bin_ms
    return float(running_average(demand, max(1, window_ms // bin_ms)).max())


__all__ = [
    "BUCKETS",
    "BurstReport",
    "RateSegment",
    "SynthesisSpec",
    "TraceError",
    "TraceRecord",
    "burstiness",
    "classify",
    "format_trace",
    "parse_trace",
    "peak_decoder_demand",
    "rescale",
    "synthesize",
    "write_trace",
]
