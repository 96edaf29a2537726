"""Canned experiments: small scenarios that exercise one scaling property each.

Each builder returns plain data so tests and the CLI can assert on it or
print it without re-running anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

from .metrics import SimReport
from .scaler import DEFAULT_THRESHOLDS, StagePolicy, parse_threshold
from .simulation import SimSettings, Simulation
from .trace import RateSegment, SynthesisSpec, TraceRecord, synthesize
from .velocity import BUCKET_IDS, BUCKETS, VelocityProfile, reserved_memory

# ---------------------------------------------------------------------- request vs token bursts


def toy_profile(v_p: float = 8.0) -> VelocityProfile:
    """One-prefiller toy profile where decode and transfer never bottleneck."""
    chunk, batch, tpot = 2, 1, 100.0
    return VelocityProfile(
        v_p=v_p,
        v_n=math.inf,
        v_d_per_bucket={b: 1e6 for b in BUCKET_IDS},
        chunk_size=chunk,
        expected_batch_size=batch,
        reserved_tokens=reserved_memory((chunk - batch) / (tpot / 1000), 1.0, 2.0),
        c0_ms=1.0,
        c1_ms=0.0,
        kvc_capacity_tokens=10_000,
        tpot_slo_ms=tpot,
        name="toy-8tok",
    )


@dataclass(frozen=True)
class BurstPairTrace:
    records: list[TraceRecord]
    request_burst_tick_ms: int  # the tick that closes the window holding the request burst
    token_burst_tick_ms: int


def burst_pair_trace(
    quiet_s: int = 10,
    request_burst: tuple[int, int] = (5, 2),
    token_burst: tuple[int, int] = (2, 5),
    token_burst_seconds: int = 5,
    tail_s: int = 4,
) -> BurstPairTrace:
    """Steady 2-token arrivals once a second, then a request burst, then a token burst.

    The request burst lands mid-second ``quiet_s`` and the token burst in the
    following second; the token burst then repeats for ``token_burst_seconds``
    so a slow signal has something left to catch.
    """
    end_s = quiet_s + 1 + token_burst_seconds + tail_s
    recs = [TraceRecord(s * 1000, 2, 1) for s in range(end_s)]
    n, tokens = request_burst
    recs += [TraceRecord(quiet_s * 1000 + 500, tokens, 1)] * n
    n, tokens = token_burst
    for s in range(quiet_s + 1, quiet_s + 1 + token_burst_seconds):
        recs += [TraceRecord(s * 1000 + 500, tokens, 1)] * n
    return BurstPairTrace(sorted(recs), (quiet_s + 1) * 1000, (quiet_s + 2) * 1000)


def prefill_targets_by_tick(
    policy: StagePolicy, trace: BurstPairTrace | None = None, profile: VelocityProfile | None = None
) -> dict[int, int]:
    """Prefiller target issued at every scaler tick, keyed by tick time."""
    trace = trace or burst_pair_trace()
    profile = profile or toy_profile()
    settings = SimSettings(
        profile=profile,
        prefill_policy=policy,
        decode_policy=StagePolicy("decode", "static"),
        predictor_accuracy=1.0,
        horizon_ms=trace.records[-1].arrival_ms + 1000,
        name=policy.policy,
    )
    report = Simulation(settings, trace.records, seed=0, trace_name="burst-pair").run()
    return {d.issued_at: d.target_prefillers for d in report.decisions}


# ---------------------------------------------------------------------- decoder-count sweep


def uniform_rate_for_demand(profile: VelocityProfile, decoders: float) -> float:
    """Request rate at which a uniform mix of representative requests needs ``decoders`` decoders."""
    per_request = sum(
        (b.representative_input + b.representative_output) / profile.v_d_per_bucket[b.id] for b in BUCKETS
    ) / len(BUCKETS)
    return decoders / per_request


def decoder_sweep(
    profile: VelocityProfile,
    demand: float = 3.2,
    counts: Sequence[int] = range(1, 7),
    duration_ms: int = 120_000,
    seed: int = 0,
    prefillers: int = 6,
    count_own_prefill: bool = True,
) -> list[tuple[int, SimReport]]:
    """Fixed-size clusters with ``counts`` decoders on one uniform workload.

    Prefillers are overprovisioned so that decode capacity is the only
    variable; autoscaling is off for both stages.
    """
    rate = uniform_rate_for_demand(profile, demand)
    records = synthesize(SynthesisSpec([RateSegment(0, duration_ms, rate)]), seed)
    out = []
    for n in counts:
        settings = SimSettings(
            profile=profile,
            prefill_policy=StagePolicy("prefill", "static"),
            decode_policy=StagePolicy("decode", "static"),
            initial_prefillers=prefillers,
            initial_regular_decoders=n,
            count_own_prefill=count_own_prefill,
            horizon_ms=duration_ms + 60_000,
            name=f"static-{n}d",
        )
        out.append((n, Simulation(settings, records, seed, trace_name=f"uniform-{demand}").run()))
    return out


# ---------------------------------------------------------------------- burst adaptation


BURST_START_MS = 10_000
BURST_END_MS = 14_000


def burst_adaptation_trace(seed: int) -> list[TraceRecord]:
    """1 rps with a 4 s jump to 10 rps; a short-heavy mix with some long prompts."""
    spec = SynthesisSpec(
        [
            RateSegment(0, BURST_START_MS, 1.0),
            RateSegment(BURST_START_MS, BURST_END_MS, 10.0),
            RateSegment(BURST_END_MS, 30_000, 1.0),
        ],
        bucket_weights={"S-S": 2.0, "L-S": 1.0},
        length_mode="uniform",
    )
    return synthesize(spec, seed)


@dataclass
class BurstOutcome:
    convertibles: int
    burst_requests: int
    burst_ttft_ok: int
    # convertible tokens generated per second, summed over seeds
    generation_before: float
    generation_during: float

    @property
    def burst_ttft_attainment(self) -> float:
        return self.burst_ttft_ok / self.burst_requests if self.burst_requests else 1.0


def burst_adaptation(
    profile: VelocityProfile,
    convertibles: int,
    seeds: Sequence[int] = range(10),
    baseline_from_ms: int = 5_000,
    debug_invariants: bool = False,
) -> BurstOutcome:
    """Pooled burst-window TTFT attainment for one prefiller plus ``convertibles`` convertibles."""
    outcome = BurstOutcome(convertibles, 0, 0, 0.0, 0.0)
    for seed in seeds:
        records = burst_adaptation_trace(seed)
        settings = SimSettings(
            profile=profile,
            convertibles=convertibles,
            horizon_ms=60_000,
            debug_invariants=debug_invariants,
            name=f"burst-{convertibles}c",
        )
        sim = Simulation(settings, records, seed, trace_name="burst-adaptation")
        report = sim.run()
        window = [r for r in report.records if BURST_START_MS <= r.arrival_ms < BURST_END_MS]
        outcome.burst_requests += len(window)
        outcome.burst_ttft_ok += sum(r.ttft_ok for r in window)
        if convertibles:
            log = dict(sim.generation_log)
            ids = list(log[BURST_START_MS])
            before = sum(log[BURST_START_MS][i] - log[baseline_from_ms][i] for i in ids)
            during = sum(log[BURST_END_MS][i] - log[BURST_START_MS][i] for i in ids)
            outcome.generation_before += 1000.0 * before / (BURST_START_MS - baseline_from_ms)
            outcome.generation_during += 1000.0 * during / (BURST_END_MS - BURST_START_MS)
    return outcome


# ---------------------------------------------------------------------- ablation ladder


ABLATION_STEPS = ("B", "B+P", "B+P+D", "Full")


def default_threshold(stage: str, policy: str) -> float:
    return parse_threshold(DEFAULT_THRESHOLDS[(stage, policy)])[1]


def ablation_settings(base: SimSettings) -> list[SimSettings]:
    """The four cumulative variants, starting from an rps/rps base.

    The prefill stage switches to token velocity first, then the decode
    stage, then convertible decoders are sized from the trace.
    """
    tv_p = StagePolicy("prefill", "token_velocity")
    tv_d = StagePolicy("decode", "token_velocity")
    b = replace(base, convertibles=0, name="B")
    return [
        b,
        replace(b, prefill_policy=tv_p, name="B+P"),
        replace(b, prefill_policy=tv_p, decode_policy=tv_d, name="B+P+D"),
        replace(b, prefill_policy=tv_p, decode_policy=tv_d, convertibles="auto", name="Full"),
    ]


def rps_baseline(profile: VelocityProfile) -> SimSettings:
    return SimSettings(
        profile=profile,
        prefill_policy=StagePolicy("prefill", "rps", default_threshold("prefill", "rps")),
        decode_policy=StagePolicy("decode", "rps", default_threshold("decode", "rps")),
    )


def periodic_burst_trace(
    seed: int,
    base_rps: float = 5.0,
    peak_rps: float = 15.0,
    burst_ms: int = 10_000,
    period_ms: int = 60_000,
    duration_ms: int = 300_000,
    bucket_weights: dict[str, float] | None = None,
) -> list[TraceRecord]:
    """A mixed trace whose every period ends with a burst at ``peak_rps``."""
    segments = []
    for start in range(0, duration_ms, period_ms):
        segments.append(RateSegment(start, start + period_ms - burst_ms, base_rps))
        segments.append(RateSegment(start + period_ms - burst_ms, start + period_ms, peak_rps))
    weights = bucket_weights or {"S-S": 1.0, "M-S": 1.0, "M-M": 1.0, "L-S": 1.0, "L-M": 1.0}
    return synthesize(SynthesisSpec(segments, weights, length_mode="uniform"), seed)


def ablation_ladder(base: SimSettings, records: Sequence[TraceRecord], seed: int, trace_name: str = "") -> list[SimReport]:
    return [Simulation(s, records, seed, trace_name).run() for s in ablation_settings(base)]
