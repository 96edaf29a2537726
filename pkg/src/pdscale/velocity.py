"""Token Velocity arithmetic, request buckets, and velocity profiles.

The offline profilers (``profile_prefill_velocity``, ``profile_decode_velocity``)
live in :mod:`pdscale.profiler` because they drive full simulations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .cluster import ConvertibleConfig, PerfModel

INPUT_CLASSES = (("S", 256), ("M", 1024), ("L", 8192))
OUTPUT_CLASSES = (("S", 100), ("M", 350), ("L", 610))


@dataclass(frozen=True)
class BucketSpec:
    id: str
    input_boundary: int
    output_boundary: int

    @property
    def representative_input(self) -> int:
        return self.input_boundary

    @property
    def representative_output(self) -> int:
        return self.output_boundary

    @property
    def input_class(self) -> str:
        return self.id[0]

    @property
    def output_class(self) -> str:
        return self.id[2]


BUCKETS: tuple[BucketSpec, ...] = tuple(
    BucketSpec(f"{i}-{o}", ib, ob) for i, ib in INPUT_CLASSES for o, ob in OUTPUT_CLASSES
)
BUCKET_IDS: tuple[str, ...] = tuple(b.id for b in BUCKETS)
BUCKETS_BY_ID: dict[str, BucketSpec] = {b.id: b for b in BUCKETS}


def _class_of(tokens: int, classes) -> str:
    for label, bound in classes:
        if tokens <= bound:
            return label
    return classes[-1][0]


def classify(input_tokens: int, output_tokens: int) -> str:
    """Bucket id for a request; lengths past the top boundary clamp to L."""
    return f"{_class_of(input_tokens, INPUT_CLASSES)}-{_class_of(output_tokens, OUTPUT_CLASSES)}"


def same_input_class(bucket_id: str) -> list[str]:
    return [b for b in BUCKET_IDS if b[0] == bucket_id[0]]


# ---------------------------------------------------------------------- formulas


class MeasurementError(ValueError):
    pass


def measured_decode_velocity(completed_tokens, tpot_s: float) -> float:
    """Tokens released per second: sum of completed request lengths over TPOT."""
    completed_tokens = list(completed_tokens)
    if not completed_tokens:
        raise MeasurementError("no completed requests to measure")
    if not tpot_s > 0:
        raise MeasurementError(f"TPOT must be positive, got {tpot_s}")
    return sum(completed_tokens) / tpot_s


def convertible_prefill_velocity(chunk_size: int, batch_size: int, tpot_slo_s: float) -> float:
    """Prefill tokens/s a convertible decoder sustains in its chunk headroom."""
    if chunk_size <= batch_size:
        raise ValueError(f"chunk_size {chunk_size} must exceed batch_size {batch_size}")
    if not tpot_slo_s > 0:
        raise ValueError("tpot_slo must be positive")
    return (chunk_size - batch_size) / tpot_slo_s


def reserved_memory(v_dp: float, mem_t: float, ttft_slo_s: float) -> int:
    """Token-slots held back for convertible prefill work, rounded half up."""
    if v_dp < 0 or mem_t < 0 or ttft_slo_s < 0:
        raise ValueError("reservation inputs must be non-negative")
    return int(math.floor(v_dp * mem_t * ttft_slo_s + 0.5))


def expected_batch_size(kvc_capacity: int, mean_request_tokens: float, reserved_tokens: int = 0) -> int:
    if mean_request_tokens <= 0:
        raise ValueError("mean request footprint must be positive")
    return max(1, int((kvc_capacity - reserved_tokens) // mean_request_tokens))


class ConfigurationError(ValueError):
    pass


def _fits(perf: PerfModel, batch: int, chunk: int, tpot_slo_ms: float) -> bool:
    return perf.iteration_time(batch, chunk - batch) <= tpot_slo_ms + 1e-9


def select_chunk_size(perf: PerfModel, tpot_slo_ms: float, expected_batch: int) -> int:
    """Largest chunk whose mixed iteration at ``expected_batch`` meets the TPOT SLO.

    Sweeps the configured iteration model: doubling until the SLO is broken,
    then bisecting. Returns ``expected_batch`` when there is no headroom.
    """
    if tpot_slo_ms <= perf.c0_ms:
        raise ConfigurationError(
            f"TPOT SLO {tpot_slo_ms} ms does not exceed the iteration floor c0={perf.c0_ms} ms"
        )
    if not _fits(perf, expected_batch, expected_batch, tpot_slo_ms):
        raise ConfigurationError(
            f"a decode batch of {expected_batch} alone exceeds the TPOT SLO of {tpot_slo_ms} ms"
        )
    lo = expected_batch
    step = max(1, expected_batch)
    hi = lo + step
    while _fits(perf, expected_batch, hi, tpot_slo_ms):
        lo = hi
        step *= 2
        hi = lo + step
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _fits(perf, expected_batch, mid, tpot_slo_ms):
            lo = mid
        else:
            hi = mid
    return lo


def derive_convertible(
    perf: PerfModel,
    tpot_slo_ms: float,
    ttft_slo_ms: float,
    mean_request_tokens: float,
    mem_t: float = 1.0,
) -> ConvertibleConfig:
    """Chunk size, expected batch and reservation, solved by one fixed-point pass.

    The batch estimate depends on the reservation and the reservation on the
    batch, so the first pass assumes no reservation and the second uses it.
    """
    reserved = 0
    for _ in range(2):
        batch = expected_batch_size(perf.kvc_capacity_tokens, mean_request_tokens, reserved)
        chunk = select_chunk_size(perf, tpot_slo_ms, batch)
        if chunk <= batch:
            raise ConfigurationError(
                f"TPOT SLO {tpot_slo_ms} ms leaves no prefill headroom at batch {batch}"
            )
        v_dp = convertible_prefill_velocity(chunk, batch, tpot_slo_ms / 1000)
        reserved = reserved_memory(v_dp, mem_t, ttft_slo_ms / 1000)
    return ConvertibleConfig(chunk_size=chunk, expected_batch_size=batch, reserved_tokens=reserved)


# ---------------------------------------------------------------------- profiles


@dataclass
class VelocityProfile:
    v_p: float
    v_n: float
    v_d_per_bucket: dict[str, float]
    chunk_size: int
    expected_batch_size: int
    reserved_tokens: int
    c0_ms: float
    c1_ms: float
    kvc_capacity_tokens: int
    gpus_per_instance: int = 1
    max_decode_batch: int = 512
    prefill_seq_equiv: float = 8.0
    tpot_slo_ms: float = 100.0
    ttft_slo_ms: float = 2000.0
    name: str = ""
    reference_v_d: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.v_p <= 0 or self.v_n <= 0:
            out.append("v_p and v_n must be positive")
        missing = [b for b in BUCKET_IDS if b not in self.v_d_per_bucket]
        if missing:
            out.append(f"v_d_per_bucket lacks buckets {missing}")
        bad = [b for b, v in self.v_d_per_bucket.items() if not v > 0]
        if bad:
            out.append(f"non-positive decode velocity for {bad}")
        if self.chunk_size <= self.expected_batch_size:
            out.append("chunk_size must exceed expected_batch_size")
        if self.reserved_tokens != reserved_memory(self.convertible_prefill_velocity, 1.0, self.ttft_slo_ms / 1000):
            out.append("reserved_tokens does not match the convertible prefill velocity and TTFT SLO")
        return out

    @property
    def convertible_prefill_velocity(self) -> float:
        if self.chunk_size <= self.expected_batch_size:
            return 0.0
        return convertible_prefill_velocity(self.chunk_size, self.expected_batch_size, self.tpot_slo_ms / 1000)

    def perf_model(self) -> PerfModel:
        return PerfModel(
            v_p=self.v_p,
            v_n=self.v_n,
            c0_ms=self.c0_ms,
            c1_ms=self.c1_ms,
            kvc_capacity_tokens=self.kvc_capacity_tokens,
            max_decode_batch=self.max_decode_batch,
            gpus_per_instance=self.gpus_per_instance,
            prefill_seq_equiv=self.prefill_seq_equiv,
        )

    def convertible_config(self) -> ConvertibleConfig:
        return ConvertibleConfig(self.chunk_size, self.expected_batch_size, self.reserved_tokens)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["v_n"] = None if math.isinf(self.v_n) else self.v_n
        d["v_d_per_bucket"] = {b: self.v_d_per_bucket[b] for b in BUCKET_IDS}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VelocityProfile":
        d = dict(d)
        if d.get("v_n") is None:
            d["v_n"] = math.inf
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown profile keys: {unknown}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "VelocityProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


BUILTIN_PROFILES = {
    "llama-3.1-8b": "llama-3.1-8b_a100_tp1.json",
    "qwen-2.5-32b": "qwen-2.5-32b_a100_tp4.json",
}


def load_profile(ref: str | Path) -> VelocityProfile:
    """Load a profile by builtin name or file path."""
    ref = str(ref)
    if ref in BUILTIN_PROFILES:
        text = resources.files("pdscale.data").joinpath(BUILTIN_PROFILES[ref]).read_text(encoding="utf-8")
        return VelocityProfile.from_dict(json.loads(text))
    return VelocityProfile.load(ref)
