"""Offline profiling: find saturation velocities by sweeping arrival rates.

Each sweep step runs a private single-instance harness with evenly spaced
arrivals. The ladder climbs by a fixed factor and stops once throughput
gains stay under a threshold for consecutive steps.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cluster import Cluster, PerfModel, Request, Role
from .engine import Engine, EventKind
from .velocity import BUCKETS, BUCKETS_BY_ID, BucketSpec, MeasurementError, VelocityProfile, derive_convertible


@dataclass(frozen=True)
class SweepSettings:
    growth: float = 1.25
    min_gain: float = 0.02
    flat_steps: int = 2
    start_fraction: float = 0.25  # first rung, as a fraction of the analytic bound
    max_steps: int = 60


def _ladder(measure, start_rate: float, sweep: SweepSettings) -> tuple[float, list[tuple[float, float]]]:
    """Climb the rate ladder; return the peak throughput and the (rate, throughput) steps."""
    steps: list[tuple[float, float]] = []
    rate = start_rate
    best = 0.0
    flat = 0
    for _ in range(sweep.max_steps):
        got = measure(rate)
        steps.append((rate, got))
        if best > 0 and got < best * (1 + sweep.min_gain):
            flat += 1
        else:
            flat = 0
        best = max(best, got)
        if flat >= sweep.flat_steps:
            break
        rate *= sweep.growth
    return best, steps


# ---------------------------------------------------------------------- prefill


def _prefill_throughput(perf: PerfModel, tokens: int, tokens_per_s: float, duration_ms: int) -> float:
    engine = Engine()
    cluster = Cluster(engine, perf, startup_delay_ms=0)
    inst = cluster.start_instance(Role.PREFILLER, 0, warm=True)
    warmup = duration_ms // 4
    done = []
    cluster.on_prefill_done = lambda req: done.append((engine.now, req.input_tokens))
    engine.on(EventKind.REQUEST_ARRIVAL, lambda ev: cluster.assign_prefill(inst, ev.payload))
    gap = 1000.0 * tokens / tokens_per_s
    n = int(duration_ms / gap) + 1
    for k in range(n):
        engine.schedule(int(k * gap), EventKind.REQUEST_ARRIVAL, Request(k, int(k * gap), tokens, 1))
    engine.run_until(duration_ms)
    finished = sum(t for when, t in done if warmup < when <= duration_ms)
    return 1000.0 * finished / (duration_ms - warmup)


def profile_prefill_velocity(
    perf: PerfModel,
    tokens: int = 1400,
    duration_ms: int = 20_000,
    sweep: SweepSettings = SweepSettings(),
) -> float:
    """Saturated prefill throughput (tokens/s) of one prefiller."""
    best, _ = _ladder(
        lambda rate: _prefill_throughput(perf, tokens, rate, duration_ms),
        sweep.start_fraction * perf.v_p,
        sweep,
    )
    return best


# ---------------------------------------------------------------------- decode


def steady_state_batch(perf: PerfModel, footprint: int) -> int:
    return max(1, min(perf.max_decode_batch, perf.kvc_capacity_tokens // footprint))


def analytic_decode_velocity(perf: PerfModel, bucket: BucketSpec) -> float:
    """Released tokens/s of a saturated decoder under the affine iteration model."""
    footprint = bucket.representative_input + bucket.representative_output
    batch = steady_state_batch(perf, footprint)
    iteration_s = perf.iteration_ms(batch) / 1000.0
    return batch * footprint / (bucket.representative_output * iteration_s)


def _decode_throughput(perf: PerfModel, bucket: BucketSpec, req_per_s: float, warmup_ms: int, measure_ms: int) -> float:
    engine = Engine()
    cluster = Cluster(engine, perf, startup_delay_ms=0)
    inst = cluster.start_instance(Role.REGULAR_DECODER, 0, warm=True)
    horizon = warmup_ms + measure_ms
    completions: list[tuple[int, int]] = []
    peak_batch = 0

    def on_complete(req: Request) -> None:
        nonlocal peak_batch
        if engine.now > warmup_ms:
            completions.append((engine.now, req.footprint))
            peak_batch = max(peak_batch, len(inst.decode_batch) + 1)

    cluster.on_complete = on_complete
    # prefill is assumed free: KV lands on the decoder at arrival
    engine.on(EventKind.REQUEST_ARRIVAL, lambda ev: cluster.assign_decode(inst, ev.payload))
    inp, out = bucket.representative_input, bucket.representative_output
    gap = 1000.0 / req_per_s
    n = int(horizon / gap) + 1
    for k in range(n):
        t = int(k * gap)
        req = Request(k, t, inp, out, true_bucket=bucket.id, predicted_bucket=bucket.id)
        engine.schedule(t, EventKind.REQUEST_ARRIVAL, req)
    engine.run_until(horizon)
    # A saturated batch completes in clusters, one per generation of the
    # batch; spanning a whole number of batches keeps the window in phase.
    cycles = (len(completions) - 1) // max(1, peak_batch)
    if cycles < 1:
        raise MeasurementError(f"bucket {bucket.id}: fewer than one batch of completions after warm-up")
    last = cycles * peak_batch
    t_first, t_last = completions[0][0], completions[last][0]
    if t_last == t_first:
        raise MeasurementError(f"bucket {bucket.id}: completions collapse onto one instant")
    released = sum(f for _, f in completions[1 : last + 1])
    return 1000.0 * released / (t_last - t_first)


def profile_decode_velocity(
    bucket: BucketSpec | str,
    perf: PerfModel,
    sweep: SweepSettings = SweepSettings(),
) -> float:
    """Peak completed-token rate (tokens/s) of one decoder on a single bucket."""
    if isinstance(bucket, str):
        bucket = BUCKETS_BY_ID[bucket]
    footprint = bucket.representative_input + bucket.representative_output
    batch = steady_state_batch(perf, footprint)
    life_ms = bucket.representative_output * perf.iteration_ms(batch)
    warmup_ms = max(10_000, 2 * life_ms)
    measure_ms = max(30_000, 4 * life_ms)
    bound_rps = analytic_decode_velocity(perf, bucket) / footprint
    best, _ = _ladder(
        lambda rate: _decode_throughput(perf, bucket, rate, warmup_ms, measure_ms),
        sweep.start_fraction * bound_rps,
        sweep,
    )
    return best


# ---------------------------------------------------------------------- full profile


def reference_mean_tokens() -> float:
    """Mean footprint of a uniform mix over the nine representative requests."""
    return sum(b.representative_input + b.representative_output for b in BUCKETS) / len(BUCKETS)


def build_profile(
    perf: PerfModel,
    name: str = "",
    tpot_slo_ms: float = 100.0,
    ttft_slo_ms: float = 2000.0,
    mean_request_tokens: float | None = None,
    reference_v_d: dict[str, float] | None = None,
    sweep: SweepSettings = SweepSettings(),
) -> VelocityProfile:
    """Profile every velocity and size the convertible decoder for ``perf``."""
    v_p = profile_prefill_velocity(perf, sweep=sweep)
    v_d = {b.id: round(profile_decode_velocity(b, perf, sweep), 1) for b in BUCKETS}
    mean = reference_mean_tokens() if mean_request_tokens is None else mean_request_tokens
    conv = derive_convertible(perf, tpot_slo_ms, ttft_slo_ms, mean)
    return VelocityProfile(
        v_p=round(v_p, 1),
        v_n=perf.v_n,
        v_d_per_bucket=v_d,
        chunk_size=conv.chunk_size,
        expected_batch_size=conv.expected_batch_size,
        reserved_tokens=conv.reserved_tokens,
        c0_ms=perf.c0_ms,
        c1_ms=perf.c1_ms,
        kvc_capacity_tokens=perf.kvc_capacity_tokens,
        gpus_per_instance=perf.gpus_per_instance,
        max_decode_batch=perf.max_decode_batch,
        prefill_seq_equiv=perf.prefill_seq_equiv,
        tpot_slo_ms=tpot_slo_ms,
        ttft_slo_ms=ttft_slo_ms,
        name=name,
        reference_v_d=dict(reference_v_d or {}),
    )


def relative_errors(measured: dict[str, float], reference: dict[str, float]) -> dict[str, float]:
    return {b: abs(measured[b] - reference[b]) / reference[b] for b in reference}


__all__ = [
    "SweepSettings",
    "analytic_decode_velocity",
    "build_profile",
    "profile_decode_velocity",
    "profile_prefill_velocity",
    "reference_mean_tokens",
    "relative_errors",
]
