"""Simulated prefillers, decoders and convertible decoders.

Memory is accounted in token-slots: one slot holds the KV state of one
token. Decoder admission commits a request's full footprint (input plus
output tokens) before its KV cache is transferred, so ``kvc_used`` can
never overflow; ``committed`` tracks that promise separately from the
slots actually filled.
"""

from __future__ import annotations

import enum
import heapq
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

from .engine import Engine, EventKind


class Role(enum.Enum):
    PREFILLER = "prefiller"
    REGULAR_DECODER = "regular_decoder"
    CONVERTIBLE_DECODER = "convertible_decoder"

    @property
    def tag(self) -> str:
        return {"prefiller": "P", "regular_decoder": "D", "convertible_decoder": "C"}[self.value]


class State(enum.Enum):
    STARTING = "starting"
    READY = "ready"
    DRAINING = "draining"
    TERMINATED = "terminated"


class ClusterError(RuntimeError):
    """Work was routed somewhere it cannot run."""


def round_ms(value: float) -> int:
    """Round half up to integral milliseconds."""
    return int(math.floor(value + 0.5))


@dataclass
class PerfModel:
    v_p: float  # prefill tokens/s
    v_n: float = math.inf  # KV transfer tokens/s; inf disables network modelling
    c0_ms: float = 20.0
    c1_ms: float = 0.1
    kvc_capacity_tokens: int = 100_000
    max_decode_batch: int = 512
    gpus_per_instance: int = 1
    # prefill tokens that cost as much as one decode sequence in a mixed iteration
    prefill_seq_equiv: float = 8.0

    def __post_init__(self) -> None:
        if self.v_p <= 0 or self.v_n <= 0:
            raise ValueError("velocities must be positive")
        if self.c0_ms < 0 or self.c1_ms < 0:
            raise ValueError("iteration coefficients must be non-negative")
        if self.prefill_seq_equiv <= 0:
            raise ValueError("prefill_seq_equiv must be positive")

    def prefill_ms(self, tokens: int) -> int:
        return math.ceil(1000 * tokens / self.v_p)

    def transfer_ms(self, tokens: int) -> int:
        if math.isinf(self.v_n):
            return 0
        return math.ceil(1000 * tokens / self.v_n)

    def iteration_time(self, decode_batch: int, prefill_tokens: int = 0) -> float:
        """Exact (fractional) duration of one iteration in ms."""
        return (
            self.c0_ms
            + self.c1_ms * decode_batch
            + self.c1_ms * prefill_tokens / self.prefill_seq_equiv
        )

    def iteration_ms(self, decode_batch: int, prefill_tokens: int = 0) -> int:
        return max(1, round_ms(self.iteration_time(decode_batch, prefill_tokens)))


@dataclass
class ConvertibleConfig:
    chunk_size: int
    expected_batch_size: int
    reserved_tokens: int

    def __post_init__(self) -> None:
        if self.chunk_size <= self.expected_batch_size:
            raise ValueError(
                f"chunk_size {self.chunk_size} leaves no prefill headroom over "
                f"expected batch {self.expected_batch_size}"
            )
        if self.reserved_tokens < 0:
            raise ValueError("reserved_tokens must be non-negative")


@dataclass(eq=False)
class Request:
    id: int
    arrival_time: int
    input_tokens: int
    output_tokens: int
    true_bucket: str = ""
    predicted_bucket: str = ""
    prefill_start: int | None = None
    prefill_end: int | None = None
    first_token_time: int | None = None
    completion_time: int | None = None
    placement: list[str] = field(default_factory=list)

    # run-time bookkeeping
    prefilled_tokens: int = 0  # KV slots materialized by chunked prefill on a convertible
    kv_resident: bool = False  # input KV present on the decode instance
    decoder: "Instance | None" = None
    _start_iter: int = -1
    _done_tokens: int = 0

    def __post_init__(self) -> None:
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError(f"request {self.id}: token counts must be >= 1")

    @property
    def footprint(self) -> int:
        return self.input_tokens + self.output_tokens

    @property
    def tokens_generated(self) -> int:
        if self.completion_time is not None:
            return self._done_tokens
        if self._start_iter < 0 or self.decoder is None:
            return 0
        return min(self.output_tokens, self.decoder.iteration - self._start_iter)

    @property
    def completed(self) -> bool:
        return self.completion_time is not None


class Instance:
    """One serving instance and its execution state."""

    def __init__(
        self,
        id: int,
        role: Role,
        perf: PerfModel,
        start_time: int,
        ready_at: int,
        convertible: ConvertibleConfig | None = None,
    ) -> None:
        self.id = id
        self.role = role
        self.perf = perf
        self.gpus = perf.gpus_per_instance
        self.start_time = start_time
        self.ready_at = ready_at
        self.terminated_at: int | None = None
        self.state = State.STARTING
        self.kvc_capacity = perf.kvc_capacity_tokens
        self.convertible = convertible
        self.reserved_tokens = convertible.reserved_tokens if convertible else 0

        self.kvc_used = 0
        self.committed = 0
        self.inflight_prefill_tokens = 0
        self.prefill_queue: deque[Request] = deque()
        self.active_prefill: Request | None = None
        self.prefill_remaining = 0
        self.prefilled_total = 0  # tokens of prefill finished on this instance

        self.decode_batch: dict[int, Request] = {}
        self.joining: list[Request] = []
        self.admission_queue: deque[Request] = deque()
        self.transfers_inflight = 0
        self.per_bucket_inflight: Counter[str] = Counter()
        self.iteration = 0
        self.iterating = False
        self.busy = False  # prefiller executing
        self.tokens_generated_total = 0
        self.tokens_released_total = 0
        self._finish_heap: list[tuple[int, int, Request]] = []
        self._iter_batch = 0
        self._iter_prefill = 0
        self._iter_started_at = 0
        self._iter_new: list[Request] = []

    def __repr__(self) -> str:
        return f"<{self.name} {self.state.value}>"

    @property
    def name(self) -> str:
        return f"{self.role.tag}{self.id}"

    @property
    def is_decoder(self) -> bool:
        return self.role is not Role.PREFILLER

    @property
    def accepting(self) -> bool:
        return self.state is State.READY

    @property
    def alive(self) -> bool:
        return self.state is not State.TERMINATED

    @property
    def decode_capacity(self) -> int:
        return self.kvc_capacity - self.reserved_tokens

    @property
    def memory_utilization(self) -> float:
        return self.kvc_used / self.kvc_capacity if self.kvc_capacity else 0.0

    @property
    def decode_utilization(self) -> float:
        """Occupancy of the region open to routed decode work."""
        cap = self.decode_capacity
        return self.kvc_used / cap if cap > 0 else 1.0

    @property
    def decode_load(self) -> int:
        return len(self.decode_batch) + len(self.joining) + len(self.admission_queue) + self.transfers_inflight

    def idle(self) -> bool:
        if self.role is Role.PREFILLER:
            return not self.busy and not self.prefill_queue
        return (
            self.committed == 0
            and not self.prefill_queue
            and self.active_prefill is None
            and not self.admission_queue
            and self.transfers_inflight == 0
        )


class Cluster:
    """Owns instances and runs their prefill, transfer and decode mechanics.

    Routing decisions are delegated back to the owner through hooks:
    ``on_prefill_done(req)`` when a prefiller finishes a request,
    ``on_capacity(inst)`` when an instance frees prefill or decode capacity,
    ``on_first_token(req)`` and ``on_complete(req)`` as a request emits its
    first and last tokens.
    """

    def __init__(self, engine: Engine, perf: PerfModel, startup_delay_ms: int = 5000) -> None:
        if not 0 <= startup_delay_ms <= 10_000:
            raise ValueError("startup_delay_ms must lie in [0, 10000]")
        self.engine = engine
        self.perf = perf
        self.startup_delay_ms = startup_delay_ms
        self.instances: dict[int, Instance] = {}
        self._next_id = 0
        self.on_prefill_done: Callable[[Request], None] = lambda req: None
        self.on_capacity: Callable[[Instance], None] = lambda inst: None
        self.on_complete: Callable[[Request], None] = lambda req: None
        self.on_first_token: Callable[[Request], None] = lambda req: None
        self.on_ready: Callable[[Instance], None] = lambda inst: None
        self.on_terminated: Callable[[Instance], None] = lambda inst: None
        engine.on(EventKind.INSTANCE_READY, self._handle_ready)
        engine.on(EventKind.PREFILL_COMPLETE, self._handle_prefill_complete)
        engine.on(EventKind.TRANSFER_COMPLETE, self._handle_transfer_complete)
        engine.on(EventKind.DECODE_ITERATION, self._handle_iteration)
        engine.on(EventKind.INSTANCE_TERMINATED, self._handle_terminated)

    # ------------------------------------------------------------------ lifecycle

    def start_instance(
        self,
        role: Role,
        now: int,
        convertible: ConvertibleConfig | None = None,
        warm: bool = False,
    ) -> Instance:
        """Boot an instance; ``warm`` instances are Ready immediately."""
        if (role is Role.CONVERTIBLE_DECODER) != (convertible is not None):
            raise ValueError("convertible config is required exactly for convertible decoders")
        delay = 0 if warm else self.startup_delay_ms
        inst = Instance(self._next_id, role, self.perf, now, now + delay, convertible)
        self._next_id += 1
        self.instances[inst.id] = inst
        if warm:
            inst.state = State.READY
        else:
            self.engine.schedule(inst.ready_at, EventKind.INSTANCE_READY, inst)
        return inst

    def _handle_ready(self, event) -> None:
        inst: Instance = event.payload
        if inst.state is not State.STARTING:
            return
        inst.state = State.READY
        self.on_ready(inst)

    def drain(self, inst: Instance) -> list[Request]:
        """Stop routing to ``inst``; return decode work that must be re-routed."""
        if inst.state is State.STARTING:
            inst.state = State.TERMINATED
            inst.terminated_at = self.engine.now
            self.engine.schedule(self.engine.now, EventKind.INSTANCE_TERMINATED, inst)
            return []
        inst.state = State.DRAINING
        evicted = list(inst.admission_queue)
        inst.admission_queue.clear()
        for req in evicted:
            inst.per_bucket_inflight[req.predicted_bucket] -= 1
            req.decoder = None
        self._maybe_terminate(inst)
        return evicted

    def revive(self, inst: Instance) -> None:
        if inst.state is not State.DRAINING:
            raise ClusterError(f"{inst.name} is not draining")
        inst.state = State.READY

    def _maybe_terminate(self, inst: Instance) -> None:
        if inst.state is State.DRAINING and inst.idle():
            inst.state = State.TERMINATED
            inst.terminated_at = self.engine.now
            self.engine.schedule(self.engine.now, EventKind.INSTANCE_TERMINATED, inst)

    def _handle_terminated(self, event) -> None:
        self.on_terminated(event.payload)

    def alive(self, *roles: Role) -> list[Instance]:
        return [i for i in self.instances.values() if i.alive and (not roles or i.role in roles)]

    def ready(self, *roles: Role) -> list[Instance]:
        return [i for i in self.instances.values() if i.state is State.READY and (not roles or i.role in roles)]

    # ------------------------------------------------------------------ prefill

    def assign_prefill(self, inst: Instance, req: Request) -> None:
        """Queue a prefill on a prefiller or convertible decoder."""
        if inst.state is not State.READY:
            raise ClusterError(f"request {req.id} routed to non-ready {inst.name}")
        if inst.role is Role.REGULAR_DECODER:
            raise ClusterError(f"request {req.id} routed for prefill to regular decoder {inst.name}")
        req.placement.append(inst.name)
        inst.inflight_prefill_tokens += req.input_tokens
        inst.prefill_queue.append(req)
        if inst.role is Role.PREFILLER:
            if not inst.busy:
                self._start_prefill(inst)
        else:
            self._try_activate_convertible_prefill(inst)

    def _start_prefill(self, inst: Instance) -> None:
        if inst.busy:
            raise ClusterError(f"{inst.name} would run two prefills at once")
        req = inst.prefill_queue.popleft()
        inst.busy = True
        now = self.engine.now
        req.prefill_start = now
        self.engine.schedule(now + self.perf.prefill_ms(req.input_tokens), EventKind.PREFILL_COMPLETE, (inst, req))

    def _handle_prefill_complete(self, event) -> None:
        inst, req = event.payload
        now = self.engine.now
        req.prefill_end = now
        inst.busy = False
        inst.inflight_prefill_tokens -= req.input_tokens
        inst.prefilled_total += req.input_tokens
        if inst.prefill_queue:
            self._start_prefill(inst)
        self.on_prefill_done(req)
        if inst.state is State.DRAINING:
            self._maybe_terminate(inst)
        self.on_capacity(inst)

    # ------------------------------------------------------------------ transfer and admission

    def can_admit(self, inst: Instance, req: Request) -> bool:
        return (
            inst.committed + req.footprint <= inst.decode_capacity
            and len(inst.decode_batch) + len(inst.joining) + inst.transfers_inflight < self.perf.max_decode_batch
        )

    def assign_decode(self, inst: Instance, req: Request) -> None:
        """Route a prefilled request to a decoder; transfer starts once memory allows."""
        if inst.state is not State.READY:
            raise ClusterError(f"request {req.id} routed for decode to non-ready {inst.name}")
        if req.footprint > inst.decode_capacity:
            raise ClusterError(
                f"request {req.id} needs {req.footprint} token-slots; {inst.name} offers {inst.decode_capacity}"
            )
        req.decoder = inst
        req.placement.append(inst.name)
        inst.per_bucket_inflight[req.predicted_bucket] += 1
        inst.admission_queue.append(req)
        self._admit(inst)

    def _admit(self, inst: Instance) -> None:
        while inst.admission_queue and self.can_admit(inst, inst.admission_queue[0]):
            req = inst.admission_queue.popleft()
            inst.committed += req.footprint
            inst.transfers_inflight += 1
            self.engine.schedule(
                self.engine.now + self.perf.transfer_ms(req.input_tokens),
                EventKind.TRANSFER_COMPLETE,
                (inst, req),
            )

    def _handle_transfer_complete(self, event) -> None:
        inst, req = event.payload
        inst.transfers_inflight -= 1
        inst.kvc_used += req.input_tokens
        req.kv_resident = True
        assert inst.kvc_used <= inst.kvc_capacity, f"{inst.name} KV overflow"
        inst.joining.append(req)
        self._kick(inst)

    # ------------------------------------------------------------------ decode and chunked prefill

    def _try_activate_convertible_prefill(self, inst: Instance) -> None:
        if inst.active_prefill is not None or not inst.prefill_queue:
            return
        head = inst.prefill_queue[0]
        if inst.committed + head.footprint > inst.kvc_capacity:
            return
        inst.prefill_queue.popleft()
        inst.active_prefill = head
        inst.prefill_remaining = head.input_tokens
        inst.committed += head.footprint
        head.decoder = inst
        head.prefill_start = self.engine.now
        self._kick(inst)

    def _kick(self, inst: Instance) -> None:
        if not inst.iterating:
            self._start_iteration(inst)

    def _start_iteration(self, inst: Instance) -> None:
        inst._iter_new = inst.joining
        for req in inst.joining:
            req._start_iter = inst.iteration
            inst.decode_batch[req.id] = req
            heapq.heappush(inst._finish_heap, (inst.iteration + req.output_tokens, req.id, req))
        inst.joining = []
        batch = len(inst.decode_batch)
        prefill = 0
        if inst.active_prefill is not None:
            headroom = max(0, inst.convertible.chunk_size - batch)
            prefill = min(headroom, inst.prefill_remaining)
        if batch == 0 and prefill == 0:
            inst.iterating = False
            return
        inst.iterating = True
        inst._iter_batch = batch
        inst._iter_prefill = prefill
        inst._iter_started_at = self.engine.now
        duration = self.perf.iteration_ms(batch, prefill)
        self.engine.schedule(self.engine.now + duration, EventKind.DECODE_ITERATION, inst)

    def _handle_iteration(self, event) -> None:
        inst: Instance = event.payload
        now = self.engine.now
        batch = inst._iter_batch
        inst.iteration += 1
        inst.kvc_used += batch
        inst.tokens_generated_total += batch

        if inst._iter_prefill:
            req = inst.active_prefill
            inst.kvc_used += inst._iter_prefill
            req.prefilled_tokens += inst._iter_prefill
            inst.prefill_remaining -= inst._iter_prefill
            inst.inflight_prefill_tokens -= inst._iter_prefill
            if inst.prefill_remaining == 0:
                req.prefill_end = now
                req.kv_resident = True
                inst.prefilled_total += req.input_tokens
                inst.active_prefill = None
                inst.per_bucket_inflight[req.predicted_bucket] += 1
                inst.joining.append(req)
                self._try_activate_convertible_prefill(inst)
        assert inst.kvc_used <= inst.kvc_capacity, f"{inst.name} KV overflow"

        for req in inst._iter_new:
            req.first_token_time = now
            self.on_first_token(req)
        inst._iter_new = []
        released = False
        heap = inst._finish_heap
        while heap and heap[0][0] <= inst.iteration:
            _, _, req = heapq.heappop(heap)
            del inst.decode_batch[req.id]
            req._done_tokens = req.output_tokens
            req.completion_time = now
            inst.kvc_used -= req.footprint
            inst.committed -= req.footprint
            inst.tokens_released_total += req.footprint
            inst.per_bucket_inflight[req.predicted_bucket] -= 1
            released = True
            self.on_complete(req)

        if released:
            self._admit(inst)
            if inst.role is Role.CONVERTIBLE_DECODER:
                self._try_activate_convertible_prefill(inst)
        self._start_iteration(inst)
        if inst.state is State.DRAINING:
            self._maybe_terminate(inst)
        if released or inst._iter_prefill:
            self.on_capacity(inst)
