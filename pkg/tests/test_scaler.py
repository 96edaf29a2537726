import math

import pytest
from hypothesis import given, strategies as st

from pdscale.scaler import (
    DEFAULT_THRESHOLDS,
    ScalingDecision,
    StagePolicy,
    TrafficSnapshot,
    baseline_concurrency,
    baseline_rps,
    baseline_slo_reactive,
    baseline_utilization,
    convertible_count,
    parse_threshold,
    tv_decoder_target,
    tv_prefiller_target,
)
from pdscale.velocity import BUCKET_IDS, ConfigurationError


def snap(**kw):
    return TrafficSnapshot(window_start=0, window_end=1000, **kw)


def profile_with(base, **changes):
    d = base.to_dict()
    d.update(changes)
    return type(base).from_dict(d)


# ---------------------------------------------------------------------- token velocity


def test_prefiller_target_examples(llama):
    fast_net = profile_with(llama, v_n=1e6)
    assert tv_prefiller_target(snap(lambda_input=14000), fast_net) == 1
    assert tv_prefiller_target(snap(lambda_input=0), llama) == 1
    assert tv_prefiller_target(snap(lambda_input=0), llama, min_prefillers=2) == 2
    toy = profile_with(llama, v_p=8.0, v_n=100.0)
    assert tv_prefiller_target(snap(lambda_input=10), toy) == 2


def test_network_bounds_prefiller_target(llama):
    slow_net = profile_with(llama, v_n=7000.0)
    assert tv_prefiller_target(snap(lambda_input=14000), slow_net) == 2


def test_decoder_target_examples(llama):
    s = snap(lambda_prime_per_bucket={"S-S": llama.v_d_per_bucket["S-S"]})
    assert tv_decoder_target(s, llama) == (1, 1)
    assert tv_decoder_target(s, llama, convertibles=2) == (1, 0)


def test_uniform_demand_of_three_point_two_needs_four(llama):
    per_request = sum(
        (int(b[0] == "S") * 256 + int(b[0] == "M") * 1024 + int(b[0] == "L") * 8192
         + {"S": 100, "M": 350, "L": 610}[b[2]]) / llama.v_d_per_bucket[b]
        for b in BUCKET_IDS
    ) / 9
    rate = 3.2 / per_request
    lam = {}
    for b in BUCKET_IDS:
        tokens = {"S": 256, "M": 1024, "L": 8192}[b[0]] + {"S": 100, "M": 350, "L": 610}[b[2]]
        lam[b] = rate / 9 * tokens
    assert tv_decoder_target(snap(lambda_prime_per_bucket=lam), llama) == (4, 4)


def test_decoder_target_needs_every_velocity(llama):
    broken = profile_with(llama)
    del broken.v_d_per_bucket["L-L"]
    with pytest.raises(ConfigurationError):
        tv_decoder_target(snap(lambda_prime_per_bucket={"L-L": 1.0}), broken)


@given(
    rates=st.lists(st.floats(0, 1e5), min_size=9, max_size=9),
    convertibles=st.integers(0, 10),
)
def test_regular_decoder_clamp(rates, convertibles, llama):
    s = snap(lambda_prime_per_bucket=dict(zip(BUCKET_IDS, rates)))
    total, regular = tv_decoder_target(s, llama, convertibles)
    assert regular >= 0
    assert regular + convertibles >= total
    assert regular == max(total - convertibles, 0)
    oracle = sum(r / llama.v_d_per_bucket[b] for b, r in zip(BUCKET_IDS, rates))
    assert total == math.ceil(oracle - 1e-9)


def test_convertible_count_examples():
    assert convertible_count(10, 0.12) == 2
    assert convertible_count(10, 0.0) == 0
    assert convertible_count(10, 1.0) == 10
    with pytest.raises(ValueError):
        convertible_count(10, 1.5)


# ---------------------------------------------------------------------- baselines


def test_concurrency_examples():
    assert baseline_concurrency(7, 7) == 1
    assert baseline_concurrency(0, 7) == 1
    assert baseline_concurrency(15, 7) == 3


def test_rps_examples():
    assert baseline_rps(14, 14) == 1
    assert baseline_rps(28, 28) == 1
    # two 5-token requests in a second against a 4 req/s threshold: no scale-up
    assert baseline_rps(2, 4) == 1


def test_utilization_hysteresis():
    assert baseline_utilization(3, 0.71, 0.70) == 4
    assert baseline_utilization(3, 0.30, 0.70) == 2
    assert baseline_utilization(1, 0.30, 0.70) == 1
    assert baseline_utilization(3, 0.70, 0.70) == 3


def test_slo_reactive():
    violated = snap(ttft_slo_ratio_p99=300 / 250, tpot_p99=120.0)
    assert baseline_slo_reactive(violated, 100, 2, 3) == (3, 4)
    fine = snap(ttft_slo_ratio_p99=0.9, tpot_p99=80.0)
    assert baseline_slo_reactive(fine, 100, 2, 3) == (2, 3)
    prefill_only = snap(ttft_slo_ratio_p99=300 / 250, tpot_p99=80.0)
    assert baseline_slo_reactive(prefill_only, 100, 2, 3) == (3, 3)


def test_stage_policy_subtracts_convertibles_for_decoders(llama):
    s = snap(request_rate=56.0)
    assert StagePolicy("decode", "rps", 28).target(s, llama, current=1, floor=1, convertibles=1) == 1
    assert StagePolicy("decode", "rps", 28).target(s, llama, current=1, floor=0, convertibles=1) == 1
    assert StagePolicy("prefill", "rps", 14).target(s, llama, current=1, floor=1) == 4


def test_static_policy_holds(llama):
    assert StagePolicy("prefill", "static").target(snap(lambda_input=1e9), llama, current=3, floor=1) == 3


def test_decision_rejects_negative_targets():
    with pytest.raises(ValueError):
        ScalingDecision(0, "x", -1, 0, 0, 0)


# ---------------------------------------------------------------------- thresholds


@pytest.mark.parametrize(
    "text,kind,value",
    [("14 req/s", "rate", 14.0), ("28rps", "rate", 28.0), ("7 req", "count", 7.0), ("70%", "fraction", 0.7)],
)
def test_parse_threshold(text, kind, value):
    assert parse_threshold(text) == (kind, pytest.approx(value))


@pytest.mark.parametrize("text", [7, "7", "fast", "-3 req", "0%"])
def test_parse_threshold_rejects(text):
    with pytest.raises(ConfigurationError):
        parse_threshold(text)


def test_default_thresholds_parse():
    kinds = {k: parse_threshold(v)[0] for k, v in DEFAULT_THRESHOLDS.items()}
    assert kinds[("prefill", "rps")] == "rate" and kinds[("decode", "concurrency")] == "count"
