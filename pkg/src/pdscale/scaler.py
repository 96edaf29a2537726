"""Scaling policies: Token Velocity targets and the baseline families.

All target functions are pure: they see a :class:`TrafficSnapshot`, the
velocity profile and their thresholds, never the simulator itself.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .velocity import BUCKET_IDS, ConfigurationError, VelocityProfile

POLICIES = ("token_velocity", "concurrency", "rps", "utilization", "slo_reactive", "static")


@dataclass
class TrafficSnapshot:
    window_start: int
    window_end: int
    lambda_input: float = 0.0  # input tokens/s
    lambda_prime_per_bucket: dict[str, float] = field(default_factory=dict)  # input + predicted output tokens/s
    request_rate: float = 0.0
    prefill_concurrency: float = 0.0  # sliding-window mean
    decode_concurrency: float = 0.0
    decoder_mem_utilization: float = 0.0  # sliding-window mean over decoders
    prefill_utilization: float = 0.0  # sliding-window busy fraction over prefillers
    ttft_p99: float | None = None  # ms
    tpot_p99: float | None = None  # ms
    # p99 of ttft / ttft_slo(input); >1 means the TTFT SLO is being missed
    ttft_slo_ratio_p99: float | None = None

    @property
    def concurrency(self) -> float:
        return self.prefill_concurrency + self.decode_concurrency


@dataclass
class ScalingDecision:
    issued_at: int
    policy_name: str
    target_prefillers: int
    target_decoders_total: int
    convertible_count: int
    target_regular_decoders: int

    def __post_init__(self) -> None:
        if min(self.target_prefillers, self.target_decoders_total, self.convertible_count, self.target_regular_decoders) < 0:
            raise ValueError("scaling targets must be non-negative")


def _ceil(x: float) -> int:
    # guard against 2.0000000000000004-style float noise
    return math.ceil(x - 1e-9)


# ---------------------------------------------------------------------- token velocity


def tv_prefiller_target(snap: TrafficSnapshot, profile: VelocityProfile, min_prefillers: int = 1) -> int:
    return max(min_prefillers, _ceil(snap.lambda_input / min(profile.v_p, profile.v_n)))


def tv_decoder_target(snap: TrafficSnapshot, profile: VelocityProfile, convertibles: int = 0) -> tuple[int, int]:
    """Total decoders (sum of per-bucket demand, ceiled) and the regular share."""
    demand = 0.0
    for bucket, rate in snap.lambda_prime_per_bucket.items():
        if rate <= 0:
            continue
        velocity = profile.v_d_per_bucket.get(bucket)
        if velocity is None:
            raise ConfigurationError(f"no profiled decode velocity for bucket {bucket}")
        demand += rate / velocity
    total = _ceil(demand)
    return total, max(total - convertibles, 0)


def decoder_demand(snap: TrafficSnapshot, profile: VelocityProfile) -> float:
    return sum(rate / profile.v_d_per_bucket[b] for b, rate in snap.lambda_prime_per_bucket.items() if rate > 0)


def convertible_count(max_decoders: float, burst_ratio: float) -> int:
    """Static convertible pool: estimated peak decoders times the burst ratio."""
    if not 0.0 <= burst_ratio <= 1.0:
        raise ValueError(f"burst_ratio must lie in [0, 1], got {burst_ratio}")
    if max_decoders < 0:
        raise ValueError("max_decoders must be non-negative")
    return _ceil(max_decoders * burst_ratio)


# ---------------------------------------------------------------------- baselines


def baseline_concurrency(concurrency: float, threshold_req: float, floor: int = 1) -> int:
    if threshold_req <= 0:
        raise ValueError("concurrency threshold must be positive")
    return max(floor, _ceil(concurrency / threshold_req))


def baseline_rps(request_rate: float, threshold_rps: float, floor: int = 1) -> int:
    if threshold_rps <= 0:
        raise ValueError("rps threshold must be positive")
    return max(floor, _ceil(request_rate / threshold_rps))


def baseline_utilization(current: int, utilization: float, threshold: float, floor: int = 1) -> int:
    """Step one instance up above the threshold, one down below half of it."""
    if not 0 < threshold <= 1:
        raise ValueError("utilization threshold must lie in (0, 1]")
    if utilization > threshold:
        return max(floor, current + 1)
    if utilization < threshold / 2:
        return max(floor, current - 1)
    return max(floor, current)


def baseline_slo_reactive(
    snap: TrafficSnapshot,
    tpot_slo_ms: float,
    current_prefillers: int,
    current_decoders: int,
) -> tuple[int, int]:
    """Add a prefiller on TTFT p99 violation and a decoder on TPOT p99 violation."""
    ttft_bad = snap.ttft_slo_ratio_p99 is not None and snap.ttft_slo_ratio_p99 > 1.0
    tpot_bad = snap.tpot_p99 is not None and snap.tpot_p99 > tpot_slo_ms
    return current_prefillers + int(ttft_bad), current_decoders + int(tpot_bad)


# ---------------------------------------------------------------------- thresholds

_THRESHOLD_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(req/s|rps|req|%|tok/s)?\s*$")
_UNIT_KIND = {"req/s": "rate", "rps": "rate", "req": "count", "%": "fraction", "tok/s": "token_rate"}
POLICY_THRESHOLD_KIND = {"concurrency": "count", "rps": "rate", "utilization": "fraction"}

# Azure Conversation column of the published baseline thresholds
DEFAULT_THRESHOLDS = {
    ("prefill", "concurrency"): "7 req",
    ("decode", "concurrency"): "45 req",
    ("prefill", "rps"): "14 req/s",
    ("decode", "rps"): "28 req/s",
    ("prefill", "utilization"): "70%",
    ("decode", "utilization"): "70%",
}


def parse_threshold(text) -> tuple[str, float]:
    """'14 req/s' -> ('rate', 14.0); '70%' -> ('fraction', 0.7); '7 req' -> ('count', 7.0)."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        raise ConfigurationError(f"threshold {text!r} needs a unit: 'req', 'req/s' or '%'")
    m = _THRESHOLD_RE.match(str(text))
    if not m or m.group(2) is None:
        raise ConfigurationError(f"cannot parse threshold {text!r}; use e.g. '7 req', '14 req/s', '70%'")
    value = float(m.group(1))
    kind = _UNIT_KIND[m.group(2)]
    if kind == "fraction":
        value /= 100.0
    if value <= 0:
        raise ConfigurationError(f"threshold {text!r} must be positive")
    return kind, value


@dataclass
class StagePolicy:
    """Policy plus threshold for one stage ("prefill" or "decode")."""

    stage: str
    policy: str
    threshold: float | None = None

    def target(
        self,
        snap: TrafficSnapshot,
        profile: VelocityProfile,
        current: int,
        floor: int,
        convertibles: int = 0,
        tpot_slo_ms: float = 100.0,
    ) -> int:
        """Target count for this stage; decoder targets cover regular decoders only."""
        prefill = self.stage == "prefill"
        if self.policy == "static":
            return current
        if self.policy == "token_velocity":
            if prefill:
                return tv_prefiller_target(snap, profile, floor)
            _, regular = tv_decoder_target(snap, profile, convertibles)
            return max(floor, regular)
        if self.policy == "concurrency":
            conc = snap.prefill_concurrency if prefill else snap.decode_concurrency
            return max(floor, baseline_concurrency(conc, self.threshold, floor) - (0 if prefill else convertibles))
        if self.policy == "rps":
            return max(floor, baseline_rps(snap.request_rate, self.threshold, floor) - (0 if prefill else convertibles))
        if self.policy == "utilization":
            util = snap.prefill_utilization if prefill else snap.decoder_mem_utilization
            return baseline_utilization(current, util, self.threshold, floor)
        if self.policy == "slo_reactive":
            p, d = baseline_slo_reactive(snap, tpot_slo_ms, current, current)
            return max(floor, p if prefill else d)
        raise ConfigurationError(f"unknown policy {self.policy!r}")


__all__ = [
    "BUCKET_IDS",
    "POLICIES",
    "ScalingDecision",
    "StagePolicy",
    "TrafficSnapshot",
    "baseline_concurrency",
    "baseline_rps",
    "baseline_slo_reactive",
    "baseline_utilization",
    "convertible_count",
    "parse_threshold",
    "tv_decoder_target",
    "tv_prefiller_target",
]
