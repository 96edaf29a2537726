"""Gateway and load balancing.

The gateway records traffic and predicts output buckets; the router places
prefill work with a two-round SLO feasibility scan (prefillers first, then
convertible decoders, else the pending queue) and balances decode work by
per-bucket in-flight counts.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .cluster import Instance, Request, Role, State
from .scaler import TrafficSnapshot
from .velocity import BUCKETS_BY_ID, BUCKET_IDS, same_input_class


@dataclass(frozen=True)
class SloPolicy:
    ttft_short_ms: float = 250.0
    ttft_medium_ms: float = 400.0
    ttft_long_ms: float = 2000.0
    tpot_ms: float = 100.0
    short_max_tokens: int = 256
    medium_max_tokens: int = 1024

    def ttft_slo(self, input_tokens: int) -> float:
        if input_tokens <= self.short_max_tokens:
            return self.ttft_short_ms
        if input_tokens <= self.medium_max_tokens:
            return self.ttft_medium_ms
        return self.ttft_long_ms

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.ttft_short_ms <= self.ttft_medium_ms <= self.ttft_long_ms:
            out.append("TTFT SLOs must be positive and nondecreasing short <= medium <= long")
        if self.tpot_ms <= 0:
            out.append("TPOT SLO must be positive")
        return out


class OutputPredictor:
    """Accuracy-parameterised stand-in for a content-based length classifier.

    Input length is observable at the gateway, so a miss only swaps the
    output class within the request's true input class.
    """

    def __init__(self, accuracy: float, rng: np.random.Generator) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
        self.accuracy = accuracy
        self.rng = rng

    def predict(self, true_bucket: str) -> str:
        hit = self.rng.random() < self.accuracy
        if hit:
            return true_bucket
        others = [b for b in same_input_class(true_bucket) if b != true_bucket]
        return others[int(self.rng.integers(len(others)))]


def route_prefill(
    req: Request,
    prefillers: Iterable[Instance],
    convertibles: Iterable[Instance],
    v_p: float,
    v_dp: float,
    ttft_slo_ms: float,
    count_own_prefill: bool = False,
) -> Instance | None:
    """First instance whose queued prefill clears within the request's TTFT SLO.

    Candidates are scanned in ascending id order; ``None`` means enqueue.
    By default the estimate counts only work already in flight; with
    ``count_own_prefill`` the request's own input is added (stricter).
    """
    slo_s = ttft_slo_ms / 1000.0
    own = req.input_tokens if count_own_prefill else 0
    for p in sorted(prefillers, key=lambda i: i.id):
        if p.state is State.READY and (p.inflight_prefill_tokens + own) / v_p <= slo_s:
            return p
    if v_dp > 0:
        for d in sorted(convertibles, key=lambda i: i.id):
            if d.state is State.READY and (d.inflight_prefill_tokens + own) / v_dp <= slo_s:
                return d
    return None


def route_decode(req: Request, decoders: Iterable[Instance], convertible_threshold: float = 0.9) -> Instance | None:
    """Decoder with the fewest in-flight requests of the request's predicted bucket.

    Convertible decoders above ``convertible_threshold`` occupancy of their
    non-reserved memory are skipped. Ties go to the lowest id.
    """
    best = None
    best_key = None
    for d in decoders:
        if d.state is not State.READY or not d.is_decoder:
            continue
        if d.role is Role.CONVERTIBLE_DECODER and d.decode_utilization > convertible_threshold:
            continue
        key = (d.per_bucket_inflight[req.predicted_bucket], d.id)
        if best_key is None or key < best_key:
            best, best_key = d, key
    return best


def prefill_headroom(chunk_size: int, decode_batch: int, remaining_prefill: int) -> int:
    """Prefill tokens a convertible may add to an iteration; decode is never displaced."""
    return min(max(0, chunk_size - decode_batch), remaining_prefill)


class PendingQueue:
    """FIFO of requests no prefiller or convertible could take within SLO.

    Requests are bucketed by TTFT SLO so a re-evaluation pass can stop once
    every class has failed: if a request misses with SLO ``s``, every later
    request with SLO ``<= s`` misses too, since placement only adds load.
    """

    def __init__(self) -> None:
        self._by_slo: dict[float, deque[tuple[int, Request]]] = {}
        self._seq = 0
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def __iter__(self):
        merged = sorted(item for dq in self._by_slo.values() for item in dq)
        return iter(req for _, req in merged)

    def push(self, req: Request, slo_ms: float) -> None:
        self._by_slo.setdefault(slo_ms, deque()).append((self._seq, req))
        self._seq += 1
        self._len += 1

    def reevaluate(self, place) -> list[Request]:
        """Offer queued requests to ``place(req) -> bool`` in arrival order.

        Placed requests leave the queue; the rest keep their order.
        """
        placed: list[Request] = []
        failed = -math.inf
        while True:
            heads = [(dq[0][0], slo) for slo, dq in self._by_slo.items() if dq and slo > failed]
            if not heads:
                return placed
            _, slo = min(heads)
            dq = self._by_slo[slo]
            req = dq[0][1]
            if place(req):
                dq.popleft()
                self._len -= 1
                placed.append(req)
            else:
                failed = slo


class TrafficRecorder:
    """Windowed traffic accounting feeding the scaler's snapshots."""

    def __init__(self, rate_window_ms: int = 1000, slow_window_ms: int = 5000) -> None:
        self.rate_window_ms = rate_window_ms
        self.slow_window_ms = slow_window_ms
        self._arrivals: deque[tuple[int, int, str, int]] = deque()
        self._samples: deque[tuple[int, float, float, float, float]] = deque()
        self._ttft: deque[tuple[int, float, float]] = deque()
        self._tpot: deque[tuple[int, float]] = deque()

    def record_arrival(self, req: Request, now: int) -> None:
        rep_out = BUCKETS_BY_ID[req.predicted_bucket].representative_output
        self._arrivals.append((now, req.input_tokens, req.predicted_bucket, req.input_tokens + rep_out))

    def record_first_token(self, ttft_ms: float, slo_ms: float, now: int) -> None:
        self._ttft.append((now, ttft_ms, ttft_ms / slo_ms))

    def record_completion(self, tpot_ms: float, now: int) -> None:
        self._tpot.append((now, tpot_ms))

    def record_sample(self, now: int, prefill_conc: float, decode_conc: float, mem_util: float, prefill_util: float) -> None:
        self._samples.append((now, prefill_conc, decode_conc, mem_util, prefill_util))

    @staticmethod
    def _trim(dq: deque, since: int) -> None:
        while dq and dq[0][0] < since:
            dq.popleft()

    def snapshot(self, now: int) -> TrafficSnapshot:
        start = now - self.rate_window_ms
        slow = now - self.slow_window_ms
        horizon = min(start, slow)
        self._trim(self._arrivals, horizon)
        self._trim(self._samples, slow)
        self._trim(self._ttft, slow)
        self._trim(self._tpot, slow)

        secs = self.rate_window_ms / 1000.0
        lam = 0.0
        count = 0
        per_bucket = {b: 0.0 for b in BUCKET_IDS}
        for t, inp, bucket, prime in self._arrivals:
            if start <= t < now:
                lam += inp
                count += 1
                per_bucket[bucket] += prime
        snap = TrafficSnapshot(
            window_start=start,
            window_end=now,
            lambda_input=lam / secs,
            lambda_prime_per_bucket={b: v / secs for b, v in per_bucket.items()},
            request_rate=count / secs,
        )
        if self._samples:
            arr = np.array([s[1:] for s in self._samples])
            snap.prefill_concurrency, snap.decode_concurrency, snap.decoder_mem_utilization, snap.prefill_utilization = (
                float(x) for x in arr.mean(axis=0)
            )
        if self._ttft:
            snap.ttft_p99 = float(np.percentile([x[1] for x in self._ttft], 99))
            snap.ttft_slo_ratio_p99 = float(np.percentile([x[2] for x in self._ttft], 99))
        if self._tpot:
            snap.tpot_p99 = float(np.percentile([x[1] for x in self._tpot], 99))
        return snap
