import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdscale.trace import (
    RateSegment,
    SynthesisSpec,
    TraceError,
    TraceRecord,
    burstiness,
    format_trace,
    parse_trace,
    peak_decoder_demand,
    rescale,
    synthesize,
    write_trace,
)
from pdscale.trace import running_average


def test_parse_well_formed(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("arrival_ms,input_tokens,output_tokens\n0,10,5\n5,20,6\n9,30,7\n")
    assert parse_trace(path) == [TraceRecord(0, 10, 5), TraceRecord(5, 20, 6), TraceRecord(9, 30, 7)]


def test_parse_sorts_out_of_order(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("arrival_ms,input_tokens,output_tokens\n50,10,5\n5,20,6\n")
    assert [r.arrival_ms for r in parse_trace(path)] == [5, 50]


def test_parse_names_bad_line(tmp_path):
    rows = ["arrival_ms,input_tokens,output_tokens"] + [f"{k},10,5" for k in range(5)] + ["9,-3,5"]
    path = tmp_path / "t.csv"
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(TraceError) as err:
        parse_trace(path)
    assert [n for n, _ in err.value.problems] == [7]
    assert "line 7" in str(err.value)


def test_parse_reports_every_bad_line(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("arrival_ms,input_tokens,output_tokens\nx,1,1\n1,2\n2,0,1\n")
    with pytest.raises(TraceError) as err:
        parse_trace(path)
    assert [n for n, _ in err.value.problems] == [2, 3, 4]


def test_parse_rejects_wrong_header(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("t,in,out\n0,1,1\n")
    with pytest.raises(TraceError):
        parse_trace(path)


def test_write_then_parse_round_trip(tmp_path):
    recs = synthesize(SynthesisSpec([RateSegment(0, 5000, 4)], length_mode="uniform"), 3)
    write_trace(recs, tmp_path / "t.csv")
    assert parse_trace(tmp_path / "t.csv") == recs
    assert format_trace(recs).startswith("arrival_ms,input_tokens,output_tokens\n")


# ---------------------------------------------------------------------- synthesis


def test_segment_counts_match_poisson_means():
    spec = SynthesisSpec([RateSegment(0, 4000, 8), RateSegment(4000, 8000, 16), RateSegment(8000, 20000, 8)])
    totals = np.zeros(3)
    seeds = 50
    for seed in range(seeds):
        recs = synthesize(spec, seed)
        t = np.array([r.arrival_ms for r in recs])
        totals += [np.sum(t < 4000), np.sum((t >= 4000) & (t < 8000)), np.sum(t >= 8000)]
    means = totals / seeds
    for got, expected in zip(means, (32, 64, 96)):
        # mean of 50 Poisson draws: sd = sqrt(expected / 50)
        assert abs(got - expected) < 4 * math.sqrt(expected / seeds)


def test_zero_rate_segment_is_empty():
    assert synthesize(SynthesisSpec([RateSegment(0, 10_000, 0)]), 0) == []


def test_synthesis_is_deterministic():
    spec = SynthesisSpec([RateSegment(0, 10_000, 5)], length_mode="uniform")
    assert synthesize(spec, 11) == synthesize(spec, 11)
    assert synthesize(spec, 11) != synthesize(spec, 12)


def test_uniform_lengths_stay_in_their_bucket():
    spec = SynthesisSpec([RateSegment(0, 60_000, 20)], bucket_weights={"M-L": 1.0}, length_mode="uniform")
    recs = synthesize(spec, 0)
    assert recs and all(r.bucket == "M-L" for r in recs)


def test_bad_spec_is_rejected():
    with pytest.raises(ValueError):
        synthesize(SynthesisSpec([RateSegment(0, 10, 1), RateSegment(20, 30, 1)]), 0)
    with pytest.raises(ValueError):
        synthesize(SynthesisSpec([RateSegment(0, 10, 1)], bucket_weights={"X-Y": 1}), 0)


# ---------------------------------------------------------------------- thinning


def test_rescale_halves():
    recs = synthesize(SynthesisSpec([RateSegment(0, 100_000, 44)]), 1)
    span = 100_000
    kept = rescale(recs, 22, seed=0, span_ms=span)
    assert len(kept) == round(22 * span / 1000)
    assert set(kept) <= set(recs)


def test_rescale_identity_at_source_rate():
    recs = [TraceRecord(t, 10, 5) for t in range(0, 10_000, 100)]
    kept = rescale(recs, 10.0, seed=0, span_ms=10_000)
    assert kept == recs


def test_rescale_refuses_to_upsample():
    recs = [TraceRecord(t, 10, 5) for t in range(0, 10_000, 100)]
    with pytest.raises(ValueError):
        rescale(recs, 20.0, seed=0, span_ms=10_000)


# ---------------------------------------------------------------------- burstiness


def trailing_mean(values, width):
    out = []
    for k in range(len(values)):
        window = values[max(0, k - width + 1): k + 1]
        out.append(sum(window) / len(window))
    return out


def test_running_average_matches_loop():
    vals = [float(x) for x in (5, 1, 9, 3, 3, 7, 0, 2)]
    assert np.allclose(running_average(np.array(vals), 3), trailing_mean(vals, 3))


def test_constant_trace_has_no_bursts():
    recs = [TraceRecord(t, 100, 10) for t in range(0, 600_000, 250)]
    rep = burstiness(recs)
    assert rep.burst_time_fraction < 0.02
    assert all(v == 0 for x, v in rep.excess_fraction_requests.items() if x > 1)


def test_planted_bursts_match_loop_oracle():
    counts = [20] * 300
    for k in range(9, 300, 10):
        counts[k] = 220
    recs = [TraceRecord(sec * 1000 + j * (1000 // n), 100, 10) for sec, n in enumerate(counts) for j in range(n)]
    avg = trailing_mean([float(c) for c in counts], 60)
    oracle = sum(max(0.0, c - 3 * a) for c, a in zip(counts, avg)) / sum(counts)
    rep = burstiness(recs, window_ms=60_000)
    assert rep.excess_fraction_requests[3.0] == pytest.approx(oracle, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=120))
def test_excess_fraction_is_monotone(counts):
    recs = [TraceRecord(sec * 1000 + j, 10 + j, 5) for sec, n in enumerate(counts) for j in range(n)]
    if not recs:
        return
    rep = burstiness(recs, window_ms=10_000)
    for series in (rep.excess_fraction_requests, rep.excess_fraction_tokens):
        vals = [series[x] for x in sorted(series)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
        assert all(0 <= v <= 1 for v in vals)


def test_empty_trace_burstiness_is_an_error():
    with pytest.raises(ValueError):
        burstiness([])


def test_peak_decoder_demand_constant_load():
    # one S-S request (256 + 100 tokens) per second against 356 tok/s -> one decoder
    recs = [TraceRecord(t, 256, 100) for t in range(0, 100_000, 1000)]
    v = {b: 356.0 for b in ("S-S", "S-M", "S-L", "M-S", "M-M", "M-L", "L-S", "L-M", "L-L")}
    assert peak_decoder_demand(recs, v) == pytest.approx(1.0)
