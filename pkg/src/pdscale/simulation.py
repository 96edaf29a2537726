"""One simulated serving run: arrivals, routing, scaling and accounting."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

from .cluster import Cluster, Instance, Request, Role, State
from .engine import Engine, EventKind, rng_stream
from .metrics import (
    SimReport,
    TickSample,
    avg_gpu_usage,
    latency_record,
    pearson_or_none,
    required_instances_series,
)
from .router import OutputPredictor, PendingQueue, SloPolicy, TrafficRecorder, route_decode, route_prefill
from .scaler import ScalingDecision, StagePolicy, convertible_count
from .trace import TraceRecord, binned_rates, burstiness, peak_decoder_demand
from .velocity import VelocityProfile


class InvariantViolation(AssertionError):
    """A debug-mode consistency check failed."""


@dataclass
class SimSettings:
    profile: VelocityProfile
    prefill_policy: StagePolicy = field(default_factory=lambda: StagePolicy("prefill", "token_velocity"))
    decode_policy: StagePolicy = field(default_factory=lambda: StagePolicy("decode", "token_velocity"))
    slo: SloPolicy = field(default_factory=SloPolicy)
    predictor_accuracy: float = 0.85
    convertibles: int | str = 0  # a count, or "auto" to size from the trace's burstiness
    startup_delay_ms: int = 5000
    scaler_tick_ms: int = 1000
    metrics_tick_ms: int = 100
    rate_window_ms: int = 1000
    slow_window_ms: int = 5000
    initial_prefillers: int = 1
    initial_regular_decoders: int = 1
    min_prefillers: int = 1
    min_regular_decoders: int = 1
    scale_down_ticks: int = 3  # consecutive agreeing ticks before a token-velocity scale-down
    convertible_mem_threshold: float = 0.9
    count_own_prefill: bool = False  # stricter prefill feasibility: add the request's own input
    burst_window_ms: int = 60_000
    horizon_ms: int | None = None
    drain_ms: int = 60_000  # default horizon slack after the last arrival
    debug_invariants: bool = False
    name: str = ""

    def problems(self) -> list[str]:
        out = list(self.slo.problems())
        if not 0 <= self.predictor_accuracy <= 1:
            out.append("predictor_accuracy must lie in [0, 1]")
        if not (self.convertibles == "auto" or (isinstance(self.convertibles, int) and self.convertibles >= 0)):
            out.append("convertibles must be a non-negative count or 'auto'")
        if not 0 <= self.startup_delay_ms <= 10_000:
            out.append("startup_delay_ms must lie in [0, 10000]")
        for key in ("scaler_tick_ms", "metrics_tick_ms", "rate_window_ms", "slow_window_ms", "burst_window_ms"):
            if getattr(self, key) <= 0:
                out.append(f"{key} must be positive")
        if self.min_prefillers < 1:
            out.append("min_prefillers must be at least 1")
        if self.min_regular_decoders < 0:
            out.append("min_regular_decoders must be non-negative")
        if self.initial_prefillers < self.min_prefillers:
            out.append("initial_prefillers is below min_prefillers")
        if self.initial_regular_decoders < self.min_regular_decoders:
            out.append("initial_regular_decoders is below min_regular_decoders")
        if not 0 < self.convertible_mem_threshold <= 1:
            out.append("convertible_mem_threshold must lie in (0, 1]")
        if self.scale_down_ticks < 1:
            out.append("scale_down_ticks must be at least 1")
        return out

    @property
    def policy_name(self) -> str:
        if self.name:
            return self.name
        return f"{self.prefill_policy.policy}/{self.decode_policy.policy}"


def resolve_convertible_count(settings: SimSettings, records: Sequence[TraceRecord]) -> tuple[int, float | None]:
    """Static convertible pool size and the burst ratio it was derived from."""
    if settings.convertibles != "auto":
        return int(settings.convertibles), None
    if not records:
        return 0, 0.0
    ratio = burstiness(records, settings.burst_window_ms).burst_ratio
    peak = peak_decoder_demand(records, settings.profile.v_d_per_bucket, settings.burst_window_ms)
    return convertible_count(peak, ratio), ratio


class Simulation:
    def __init__(self, settings: SimSettings, records: Sequence[TraceRecord], seed: int, trace_name: str = "") -> None:
        problems = settings.problems()
        if problems:
            raise ValueError("; ".join(problems))
        self.settings = settings
        self.profile = settings.profile
        self.slo = settings.slo
        self.seed = seed
        self.trace_name = trace_name
        self.records = sorted(records)

        self.engine = Engine()
        self.cluster = Cluster(self.engine, self.profile.perf_model(), settings.startup_delay_ms)
        self.cluster.on_prefill_done = self._on_prefill_done
        self.cluster.on_capacity = self._on_capacity
        self.cluster.on_first_token = self._on_first_token
        self.cluster.on_complete = self._on_complete
        self.cluster.on_ready = self._on_ready
        self.cluster.on_terminated = self._on_terminated

        self.pending = PendingQueue()
        self.decode_wait: deque[Request] = deque()
        self.recorder = TrafficRecorder(settings.rate_window_ms, settings.slow_window_ms)
        self.predictor = OutputPredictor(settings.predictor_accuracy, rng_stream(seed, "predictor"))
        self.requests: list[Request] = []
        self.decisions: list[ScalingDecision] = []
        self.ticks: list[TickSample] = []
        self.generation_log: list[tuple[int, dict[int, int]]] = []  # convertible tokens generated, cumulative
        self._lower_streak: dict[str, list[int]] = {"prefill": [], "decode": []}
        self._prefilled_seen = 0
        self.completed = 0

        self.n_convertibles, self.burst_ratio = resolve_convertible_count(settings, self.records)
        self.v_dp = self.profile.convertible_prefill_velocity if self.n_convertibles else 0.0

        last = self.records[-1].arrival_ms if self.records else 0
        self.horizon_ms = settings.horizon_ms if settings.horizon_ms is not None else last + settings.drain_ms

        for _ in range(settings.initial_prefillers):
            self.cluster.start_instance(Role.PREFILLER, 0, warm=True)
        for _ in range(settings.initial_regular_decoders):
            self.cluster.start_instance(Role.REGULAR_DECODER, 0, warm=True)
        conv_cfg = self.profile.convertible_config() if self.n_convertibles else None
        for _ in range(self.n_convertibles):
            self.cluster.start_instance(Role.CONVERTIBLE_DECODER, 0, convertible=conv_cfg, warm=True)
        self._refresh()

        self.engine.on(EventKind.REQUEST_ARRIVAL, self._on_arrival)
        self.engine.on(EventKind.SCALER_TICK, self._on_scaler_tick)
        self.engine.on(EventKind.METRICS_TICK, self._on_metrics_tick)
        for rec in self.records:
            self.engine.schedule(rec.arrival_ms, EventKind.REQUEST_ARRIVAL, rec)
        self.engine.schedule(settings.scaler_tick_ms, EventKind.SCALER_TICK)
        self.engine.schedule(settings.metrics_tick_ms, EventKind.METRICS_TICK)
        if settings.debug_invariants:
            self.engine.observe(lambda ev: self.check_invariants())

    # ------------------------------------------------------------------ instance views

    def _refresh(self) -> None:
        by_id = sorted(self.cluster.instances.values(), key=lambda i: i.id)
        self.ready_prefillers = [i for i in by_id if i.state is State.READY and i.role is Role.PREFILLER]
        self.ready_convertibles = [i for i in by_id if i.state is State.READY and i.role is Role.CONVERTIBLE_DECODER]
        self.ready_decoders = [i for i in by_id if i.state is State.READY and i.is_decoder]

    def _active(self, role: Role) -> list[Instance]:
        """Starting or Ready instances of ``role``; these count toward targets."""
        return [i for i in self.cluster.instances.values() if i.role is role and i.state in (State.STARTING, State.READY)]

    # ------------------------------------------------------------------ request flow

    def _on_arrival(self, event) -> None:
        rec: TraceRecord = event.payload
        req = Request(
            id=len(self.requests),
            arrival_time=self.engine.now,
            input_tokens=rec.input_tokens,
            output_tokens=rec.output_tokens,
            true_bucket=rec.bucket,
        )
        req.predicted_bucket = self.predictor.predict(req.true_bucket)
        self.requests.append(req)
        self.recorder.record_arrival(req, self.engine.now)
        if not self._place_prefill(req):
            self.pending.push(req, self.slo.ttft_slo(req.input_tokens))

    def _place_prefill(self, req: Request) -> bool:
        target = route_prefill(
            req, self.ready_prefillers, self.ready_convertibles,
            self.profile.v_p, self.v_dp, self.slo.ttft_slo(req.input_tokens),
            self.settings.count_own_prefill,
        )
        if target is None:
            return False
        self.cluster.assign_prefill(target, req)
        return True

    def _place_decode(self, req: Request) -> bool:
        target = route_decode(req, self.ready_decoders, self.settings.convertible_mem_threshold)
        if target is None:
            return False
        self.cluster.assign_decode(target, req)
        return True

    def _on_prefill_done(self, req: Request) -> None:
        if not self._place_decode(req):
            self.decode_wait.append(req)

    def _retry_decode_wait(self) -> None:
        while self.decode_wait and self._place_decode(self.decode_wait[0]):
            self.decode_wait.popleft()

    def _reevaluate_pending(self) -> None:
        if len(self.pending):
            self.pending.reevaluate(self._place_prefill)

    def _on_capacity(self, inst: Instance) -> None:
        if inst.role is not Role.REGULAR_DECODER:
            self._reevaluate_pending()
        if inst.is_decoder:
            self._retry_decode_wait()

    def _on_ready(self, inst: Instance) -> None:
        self._refresh()
        self._reevaluate_pending()
        self._retry_decode_wait()

    def _on_terminated(self, inst: Instance) -> None:
        self._refresh()

    def _on_first_token(self, req: Request) -> None:
        now = self.engine.now
        self.recorder.record_first_token(now - req.arrival_time, self.slo.ttft_slo(req.input_tokens), now)

    def _on_complete(self, req: Request) -> None:
        self.completed += 1
        if req.output_tokens > 1:
            tpot = (req.completion_time - req.first_token_time) / (req.output_tokens - 1)
            self.recorder.record_completion(tpot, self.engine.now)

    # ------------------------------------------------------------------ ticks

    def _prefill_concurrency(self) -> int:
        n = len(self.pending)
        for inst in self.cluster.instances.values():
            if inst.role is Role.PREFILLER:
                n += len(inst.prefill_queue) + int(inst.busy)
            elif inst.role is Role.CONVERTIBLE_DECODER:
                n += len(inst.prefill_queue) + int(inst.active_prefill is not None)
        return n

    def _decode_concurrency(self) -> int:
        return len(self.decode_wait) + sum(i.decode_load for i in self.cluster.instances.values() if i.is_decoder)

    def _decoder_mem_utilization(self) -> float:
        decs = [i for i in self.cluster.instances.values() if i.is_decoder and i.state is State.READY]
        return sum(i.memory_utilization for i in decs) / len(decs) if decs else 0.0

    def _on_metrics_tick(self, event) -> None:
        now = self.engine.now
        prefillers = self.ready_prefillers
        busy = sum(p.busy for p in prefillers) / len(prefillers) if prefillers else 0.0
        self.recorder.record_sample(
            now, self._prefill_concurrency(), self._decode_concurrency(), self._decoder_mem_utilization(), busy
        )
        if self.n_convertibles:
            self.generation_log.append(
                (now, {i.id: i.tokens_generated_total for i in self.cluster.instances.values()
                       if i.role is Role.CONVERTIBLE_DECODER})
            )
        self.engine.schedule(now + self.settings.metrics_tick_ms, EventKind.METRICS_TICK)

    def _record_tick(self, now: int) -> None:
        prefilled = sum(i.prefilled_total for i in self.cluster.instances.values() if i.role is Role.PREFILLER)
        delta = prefilled - self._prefilled_seen
        self._prefilled_seen = prefilled
        n_ready_p = len(self.ready_prefillers)
        capacity = self.profile.v_p * n_ready_p * self.settings.scaler_tick_ms / 1000.0
        alive = self.cluster.alive()
        self.ticks.append(TickSample(
            time_ms=now,
            prefillers=sum(i.role is Role.PREFILLER and i.state is not State.DRAINING for i in alive),
            regular_decoders=sum(i.role is Role.REGULAR_DECODER and i.state is not State.DRAINING for i in alive),
            convertibles=sum(i.role is Role.CONVERTIBLE_DECODER for i in alive),
            prefill_utilization=min(1.0, delta / capacity) if capacity else 0.0,
            decoder_mem_utilization=self._decoder_mem_utilization(),
            gpus=sum(i.gpus for i in alive),
        ))

    def _damp(self, stage: str, policy: StagePolicy, current: int, target: int) -> int:
        if policy.policy != "token_velocity" or target >= current:
            self._lower_streak[stage].clear()
            return target
        streak = self._lower_streak[stage]
        streak.append(target)
        if len(streak) < self.settings.scale_down_ticks:
            return current
        applied = max(streak[-self.settings.scale_down_ticks:])
        streak.clear()
        return applied

    def _on_scaler_tick(self, event) -> None:
        now = self.engine.now
        s = self.settings
        self._record_tick(now)
        snap = self.recorder.snapshot(now)
        cur_p = len(self._active(Role.PREFILLER))
        cur_d = len(self._active(Role.REGULAR_DECODER))
        d_floor = max(s.min_regular_decoders, 0 if self.n_convertibles else 1)
        tp = s.prefill_policy.target(snap, self.profile, cur_p, s.min_prefillers, tpot_slo_ms=self.slo.tpot_ms)
        td = s.decode_policy.target(
            snap, self.profile, cur_d, d_floor, convertibles=self.n_convertibles, tpot_slo_ms=self.slo.tpot_ms
        )
        tp = self._damp("prefill", s.prefill_policy, cur_p, tp)
        td = self._damp("decode", s.decode_policy, cur_d, td)
        self.decisions.append(ScalingDecision(now, s.policy_name, tp, td + self.n_convertibles, self.n_convertibles, td))
        self._resize(Role.PREFILLER, tp)
        self._resize(Role.REGULAR_DECODER, td)
        self.engine.schedule(now + s.scaler_tick_ms, EventKind.SCALER_TICK)

    def _resize(self, role: Role, target: int) -> None:
        active = self._active(role)
        now = self.engine.now
        if target > len(active):
            need = target - len(active)
            draining = sorted(
                (i for i in self.cluster.instances.values() if i.role is role and i.state is State.DRAINING),
                key=lambda i: i.id,
            )
            for inst in draining[:need]:
                self.cluster.revive(inst)
            for _ in range(need - min(need, len(draining))):
                self.cluster.start_instance(role, now)
            self._refresh()
            if draining[:need]:
                self._reevaluate_pending()
                self._retry_decode_wait()
        elif target < len(active):
            def load(i: Instance) -> int:
                return i.inflight_prefill_tokens if role is Role.PREFILLER else i.committed + i.decode_load

            # booting instances go first, then the least loaded; ties to the newest
            victims = sorted(active, key=lambda i: (i.state is not State.STARTING, load(i), -i.id))
            evicted: list[Request] = []
            for inst in victims[: len(active) - target]:
                evicted.extend(self.cluster.drain(inst))
            self._refresh()
            for req in evicted:
                if not self._place_decode(req):
                    self.decode_wait.append(req)

    # ------------------------------------------------------------------ invariants

    def check_invariants(self) -> None:
        now = self.engine.now
        expected: dict[int, int] = {}
        located = len(self.pending) + len(self.decode_wait) + self.completed
        for req in self.requests:
            if req.completed or req.decoder is None:
                continue
            held = req.input_tokens + req.tokens_generated if req.kv_resident else req.prefilled_tokens
            expected[req.decoder.id] = expected.get(req.decoder.id, 0) + held
        for inst in self.cluster.instances.values():
            if not 0 <= inst.kvc_used <= inst.kvc_capacity:
                raise InvariantViolation(f"t={now}: {inst.name} kvc_used={inst.kvc_used} outside [0, {inst.kvc_capacity}]")
            if inst.committed > inst.kvc_capacity:
                raise InvariantViolation(f"t={now}: {inst.name} committed {inst.committed} past capacity")
            if inst.kvc_used != expected.get(inst.id, 0):
                raise InvariantViolation(
                    f"t={now}: {inst.name} holds {inst.kvc_used} token-slots, requests account for {expected.get(inst.id, 0)}"
                )
            if inst.role is Role.PREFILLER:
                located += len(inst.prefill_queue) + int(inst.busy)
            else:
                located += len(inst.prefill_queue) + int(inst.active_prefill is not None)
                located += len(inst.admission_queue) + inst.transfers_inflight + len(inst.joining) + len(inst.decode_batch)
        if located != len(self.requests):
            raise InvariantViolation(f"t={now}: {len(self.requests)} requests arrived, {located} accounted for")

    # ------------------------------------------------------------------ run

    def run(self) -> SimReport:
        self.engine.run_until(self.horizon_ms)
        self._final_check()
        lifetimes = [(i.start_time, i.terminated_at, i.gpus) for i in self.cluster.instances.values()]
        return SimReport(
            records=[latency_record(r, self.slo) for r in self.requests],
            policy=self.settings.policy_name,
            seed=self.seed,
            trace=self.trace_name,
            horizon_ms=self.horizon_ms,
            avg_gpus=avg_gpu_usage(lifetimes, self.horizon_ms) if self.horizon_ms > 0 else 0.0,
            ticks=list(self.ticks),
            decisions=list(self.decisions),
            convertible_count=self.n_convertibles,
            burst_ratio=self.burst_ratio,
        )

    def _final_check(self) -> None:
        if self.settings.debug_invariants:
            self.check_invariants()
        if len(self.requests) != sum(1 for r in self.records if r.arrival_ms <= self.horizon_ms):
            raise InvariantViolation("arrivals within the horizon were not all admitted to the simulation")


def simulate(settings: SimSettings, records: Sequence[TraceRecord], seed: int, trace_name: str = "") -> SimReport:
    return Simulation(settings, records, seed, trace_name).run()


# ---------------------------------------------------------------------- provisioned vs required


def overprovisioned_settings(settings: SimSettings, records: Sequence[TraceRecord], headroom: float = 1.5) -> SimSettings:
    """A static cluster sized above the trace's peak one-second demand."""
    prof = settings.profile
    if records:
        _, toks = binned_rates(records)
        peak_p = float(toks.max()) / min(prof.v_p, prof.v_n)
        peak_d = peak_decoder_demand(records, prof.v_d_per_bucket, window_ms=1000)
    else:
        peak_p = peak_d = 0.0
    n_p = max(settings.min_prefillers, math.ceil(peak_p * headroom) + 1)
    n_d = max(settings.min_regular_decoders, math.ceil(peak_d * headroom) + 1)
    return replace(
        settings,
        prefill_policy=StagePolicy("prefill", "static"),
        decode_policy=StagePolicy("decode", "static"),
        convertibles=0,
        initial_prefillers=n_p,
        initial_regular_decoders=n_d,
        debug_invariants=False,
        name="overprovisioned",
    )


def attach_correlation(report: SimReport, companion: SimReport) -> None:
    """Correlate provisioned instance counts against a companion run's required counts."""
    n = min(len(report.ticks), len(companion.ticks))
    if n < 2:
        return
    main, comp = report.ticks[:n], companion.ticks[:n]
    req_p = required_instances_series([t.prefill_utilization for t in comp], [t.prefillers for t in comp])
    req_d = required_instances_series([t.decoder_mem_utilization for t in comp], [t.decoders for t in comp])
    report.pearson_prefill = pearson_or_none([t.prefillers for t in main], req_p)
    report.pearson_decode = pearson_or_none([t.decoders for t in main], req_d)


def simulate_with_correlation(
    settings: SimSettings, records: Sequence[TraceRecord], seed: int, trace_name: str = ""
) -> SimReport:
    report = simulate(settings, records, seed, trace_name)
    companion = simulate(overprovisioned_settings(settings, records), records, seed, trace_name)
    attach_correlation(report, companion)
    return report
