import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from pdscale.cluster import ConvertibleConfig, PerfModel
from pdscale.profiler import (
    analytic_decode_velocity,
    profile_decode_velocity,
    profile_prefill_velocity,
    reference_mean_tokens,
)
from pdscale.velocity import (
    BUCKET_IDS,
    BUCKETS_BY_ID,
    ConfigurationError,
    MeasurementError,
    VelocityProfile,
    classify,
    convertible_prefill_velocity,
    derive_convertible,
    expected_batch_size,
    load_profile,
    measured_decode_velocity,
    reserved_memory,
    select_chunk_size,
)


# ---------------------------------------------------------------------- buckets


@pytest.mark.parametrize(
    "inp,out,bucket",
    [(256, 100, "S-S"), (8192, 610, "L-L"), (9000, 700, "L-L"), (257, 101, "M-M"), (1, 611, "S-L"), (1024, 350, "M-M")],
)
def test_classify(inp, out, bucket):
    assert classify(inp, out) == bucket


def test_nine_buckets_with_representatives():
    assert len(BUCKET_IDS) == 9
    assert (BUCKETS_BY_ID["M-L"].representative_input, BUCKETS_BY_ID["M-L"].representative_output) == (1024, 610)


# ---------------------------------------------------------------------- measured velocity


def test_measured_velocity():
    assert measured_decode_velocity([100, 350], 0.1) == pytest.approx(4500)
    assert measured_decode_velocity([100], 0.1) == pytest.approx(1000)


def test_measured_velocity_rejects_empty_and_nonpositive_tpot():
    with pytest.raises(MeasurementError):
        measured_decode_velocity([], 0.1)
    with pytest.raises(MeasurementError):
        measured_decode_velocity([100], 0.0)


# ---------------------------------------------------------------------- chunk size


def chunk_oracle(c0, c1, kappa, batch, tpot):
    """Largest n with c0 + c1*batch + c1*(n - batch)/kappa <= tpot, in exact arithmetic."""
    c0, c1, kappa, tpot = map(Fraction, (c0, c1, kappa, tpot))
    slack = tpot - c0 - c1 * batch
    return batch + math.floor(slack * kappa / c1)


def test_chunk_size_matches_closed_form():
    perf = PerfModel(v_p=14000, c0_ms=20, c1_ms=0.1, prefill_seq_equiv=8)
    expected = chunk_oracle("20", "0.1", 8, 112, 100)
    assert expected == 5616
    assert select_chunk_size(perf, 100, 112) == expected


def test_no_headroom_is_rejected():
    perf = PerfModel(v_p=14000, c0_ms=20, c1_ms=0.1, prefill_seq_equiv=8)
    tpot = 20 + 0.1 * 112 + 0.001  # just above a pure decode iteration
    chunk = select_chunk_size(perf, tpot, 112)
    assert chunk == 112
    with pytest.raises(ValueError):
        ConvertibleConfig(chunk, 112, 0)
    roomy = PerfModel(v_p=14000, c0_ms=20, c1_ms=0.1, prefill_seq_equiv=8, kvc_capacity_tokens=112_000)
    with pytest.raises(ConfigurationError):
        derive_convertible(roomy, tpot, 2000, 1000)  # expected batch 112


def test_tpot_at_floor_rejected():
    with pytest.raises(ConfigurationError):
        select_chunk_size(PerfModel(v_p=1, c0_ms=20), 20, 1)


@settings(max_examples=60, deadline=None)
@given(
    tpot=st.floats(40, 400),
    batch=st.integers(1, 200),
    c1=st.floats(0.01, 0.2),
    kappa=st.floats(0.5, 16),
)
def test_chunk_size_monotone_in_tpot(tpot, batch, c1, kappa):
    perf = PerfModel(v_p=1, c0_ms=20, c1_ms=c1, prefill_seq_equiv=kappa)
    if perf.iteration_time(batch) > tpot / 2:
        return
    assert select_chunk_size(perf, tpot / 2, batch) <= select_chunk_size(perf, tpot, batch)


# ---------------------------------------------------------------------- convertible sizing


def test_convertible_prefill_velocity_examples():
    assert convertible_prefill_velocity(512, 112, 0.1) == pytest.approx(4000)
    assert convertible_prefill_velocity(113, 112, 1.0) == pytest.approx(1)
    assert convertible_prefill_velocity(1024, 224, 0.1) == pytest.approx(2 * convertible_prefill_velocity(512, 112, 0.1))
    with pytest.raises(ValueError):
        convertible_prefill_velocity(112, 112, 0.1)


def test_reserved_memory_examples():
    assert reserved_memory(4000, 1, 0.25) == 1000
    assert reserved_memory(4000, 1, 0) == 0
    assert reserved_memory(4000, 1, 2.0) == 8000
    assert reserved_memory(1.5, 1, 1) == 2  # half rounds up


def test_expected_batch_uses_free_memory():
    assert expected_batch_size(144_000, 3510, 18_140) == (144_000 - 18_140) // 3510
    with pytest.raises(ValueError):
        expected_batch_size(100, 0)


def test_fixed_point_sizing_is_self_consistent(llama):
    conv = derive_convertible(llama.perf_model(), 100, 2000, reference_mean_tokens())
    assert (conv.chunk_size, conv.expected_batch_size, conv.reserved_tokens) == (
        llama.chunk_size, llama.expected_batch_size, llama.reserved_tokens)
    v = (conv.chunk_size - conv.expected_batch_size) / 0.1
    assert conv.reserved_tokens == math.floor(v * 2.0 + 0.5)


def test_reference_mean_tokens():
    oracle = sum(i + o for i in (256, 1024, 8192) for o in (100, 350, 610)) / 9
    assert reference_mean_tokens() == pytest.approx(oracle)


# ---------------------------------------------------------------------- profiles


def test_profile_round_trip(tmp_path, llama):
    path = tmp_path / "p.json"
    llama.save(path)
    again = VelocityProfile.load(path)
    assert again == llama
    again.save(tmp_path / "q.json")
    assert path.read_bytes() == (tmp_path / "q.json").read_bytes()


def test_profile_validation_collects_problems(llama):
    d = llama.to_dict()
    d["v_d_per_bucket"] = {"S-S": 1.0}
    d["reserved_tokens"] = 1
    with pytest.raises(ConfigurationError) as err:
        VelocityProfile.from_dict(d)
    assert "lacks buckets" in str(err.value) and "reserved_tokens" in str(err.value)


def test_unknown_profile_key_rejected(llama):
    d = llama.to_dict()
    d["surprise"] = 1
    with pytest.raises(ConfigurationError):
        VelocityProfile.from_dict(d)


def test_builtin_profiles_carry_gpu_counts(llama, qwen):
    assert llama.gpus_per_instance == 1 and qwen.gpus_per_instance == 4
    assert load_profile("llama-3.1-8b") == llama


# ---------------------------------------------------------------------- profiler


def test_prefill_profiler_recovers_configured_velocity():
    assert profile_prefill_velocity(PerfModel(v_p=14000)) == pytest.approx(14000, rel=0.05)


def test_prefill_profiler_ceiling_losses():
    # 1-token prefills take ceil(1000/v_p) ms each
    for v_p in (1000, 3000):
        oracle = 1000.0 / math.ceil(1000 / v_p)
        got = profile_prefill_velocity(PerfModel(v_p=v_p), tokens=1, duration_ms=4000)
        assert got == pytest.approx(oracle, rel=0.01)
        assert got <= v_p


def test_prefill_profiler_is_linear():
    one = profile_prefill_velocity(PerfModel(v_p=7000))
    two = profile_prefill_velocity(PerfModel(v_p=14000))
    assert two / one == pytest.approx(2, rel=0.05)


def test_decode_profiler_tracks_analytic_bound(llama):
    perf = llama.perf_model()
    for bucket in ("S-S", "M-M"):
        got = profile_decode_velocity(bucket, perf)
        assert got == pytest.approx(analytic_decode_velocity(perf, BUCKETS_BY_ID[bucket]), rel=0.05)


def test_llama_mm_within_ten_percent(llama):
    assert profile_decode_velocity("M-M", llama.perf_model()) == pytest.approx(9794, rel=0.10)


def test_qwen_ll_within_ten_percent(qwen):
    assert profile_decode_velocity("L-L", qwen.perf_model()) == pytest.approx(9128, rel=0.10)


def test_qwen_row_monotone(qwen):
    for i in "SML":
        v = [qwen.v_d_per_bucket[f"{i}-{o}"] for o in "SML"]
        assert v[0] > v[1] > v[2]
