import csv
import json
import shutil
from pathlib import Path

import pytest
import yaml

from pdscale.cli import EXIT_FAULT, EXIT_INVALID, EXIT_OK, main
from pdscale.config import ConfigError, dump_config, load_config, parse_config

ROOT = Path(__file__).resolve().parent.parent
EXPERIMENTS = ROOT / "configs" / "experiments"
TRACES = ROOT / "configs" / "traces"


def write_yaml(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


def minimal(trace="trace.csv", policy="token_velocity", **extra):
    if isinstance(policy, str):
        policy = {"prefill": policy, "decode": policy}
    data = {"seed": 1, "profile": "llama-3.1-8b", "trace": {"file": trace}, "policy": policy}
    data.update(extra)
    return data


@pytest.fixture
def workdir(tmp_path):
    shutil.copy(TRACES / "small_burst.csv", tmp_path / "trace.csv")
    (tmp_path / "empty.csv").write_text("arrival_ms,input_tokens,output_tokens\n")
    return tmp_path


# ---------------------------------------------------------------------- config parsing


def test_validation_lists_every_problem(tmp_path):
    bad = {"seed": -1, "profile": "no-such-model", "trace": {}, "policy": {"prefill": "fastest"},
           "predictor_accuracy": 3, "startup_delay_ms": 20_000, "colour": "blue"}
    with pytest.raises(ConfigError) as err:
        parse_config(bad, tmp_path, "bad.yaml")
    text = " ".join(err.value.problems)
    for word in ("seed", "profile", "trace", "fastest", "predictor_accuracy", "startup_delay_ms", "colour"):
        assert word in text
    assert len(err.value.problems) >= 7


def test_threshold_unit_must_fit_the_policy(workdir):
    data = minimal(policy={"prefill": {"policy": "utilization", "threshold": "14 req/s"}, "decode": "token_velocity"})
    with pytest.raises(ConfigError) as err:
        parse_config(data, workdir, "x.yaml")
    assert any("utilization" in p for p in err.value.problems)


def test_missing_threshold_falls_back_to_default(workdir):
    cfg = parse_config(minimal(policy="rps"), workdir, "x.yaml")
    assert cfg.prefill.threshold == pytest.approx(14.0) and cfg.decode.threshold == pytest.approx(28.0)


def test_trace_file_and_synth_are_exclusive(workdir):
    data = minimal(trace=None)
    data["trace"] = {"file": "trace.csv", "synth": {"segments": [[0, 1000, 1]]}}
    with pytest.raises(ConfigError):
        parse_config(data, workdir, "x.yaml")


@pytest.mark.parametrize("name", sorted(p.name for p in EXPERIMENTS.glob("*.yaml")))
def test_example_configs_round_trip(name, tmp_path):
    cfg = load_config(EXPERIMENTS / name)
    again = parse_config(yaml.safe_load(dump_config(cfg)), EXPERIMENTS, name)
    assert again.to_dict() == cfg.to_dict()
    assert again.settings().problems() == []


# ---------------------------------------------------------------------- CLI


def test_run_writes_reports(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal())
    assert main(["run", "--config", str(cfg), "--out", str(workdir / "out"), "--no-correlation"]) == EXIT_OK
    summary = json.loads((workdir / "out" / "summary.json").read_text())
    assert summary["requests"] == 103 and summary["seed"] == 1


def test_run_with_correlation_fills_pearson(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal())
    assert main(["run", "--config", str(cfg), "--out", str(workdir / "out")]) == EXIT_OK
    summary = json.loads((workdir / "out" / "summary.json").read_text())
    assert "pearson_prefill" in summary


def test_empty_trace_runs(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal(trace="empty.csv", horizon_ms=5000))
    assert main(["run", "--config", str(cfg), "--out", str(workdir / "out"), "--no-correlation"]) == EXIT_OK
    summary = json.loads((workdir / "out" / "summary.json").read_text())
    assert summary["requests"] == 0 and summary["slo_attainment_overall"] == 1.0


def test_same_config_twice_is_byte_identical(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal(convertibles=1))
    for out in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(workdir / out)]) == EXIT_OK
    for name in ("summary.json", "requests.csv", "timeseries.csv", "decisions.csv"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_invalid_config_exits_one(workdir, capsys):
    cfg = write_yaml(workdir / "c.yaml", minimal(policy="fastest", seed=-3))
    assert main(["run", "--config", str(cfg)]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "fastest" in err and "seed" in err


def test_missing_trace_override_exits_one(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal())
    assert main(["run", "--config", str(cfg), "--trace", str(workdir / "nope.csv")]) == EXIT_INVALID


def test_malformed_trace_exits_one(workdir):
    (workdir / "bad.csv").write_text("arrival_ms,input_tokens,output_tokens\n0,-1,5\n")
    cfg = write_yaml(workdir / "c.yaml", minimal(trace="bad.csv"))
    assert main(["run", "--config", str(cfg), "--out", str(workdir / "out")]) == EXIT_INVALID


def test_fault_during_run_exits_two(workdir):
    # a single prompt larger than any decoder's KV cache cannot be placed
    (workdir / "huge.csv").write_text("arrival_ms,input_tokens,output_tokens\n0,200000,5\n")
    cfg = write_yaml(workdir / "c.yaml", minimal(trace="huge.csv", horizon_ms=60_000))
    assert main(["run", "--config", str(cfg), "--out", str(workdir / "out"), "--no-correlation"]) == EXIT_FAULT


def test_compare_four_policies(tmp_path):
    args = ["compare", "--out", str(tmp_path), "--no-correlation", "--jobs", "2"]
    for p in sorted(EXPERIMENTS.glob("*.yaml")):
        args += ["--config", str(p)]
    assert main(args) == EXIT_OK
    with (tmp_path / "matrix.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    by_policy = {r["policy"]: float(r["slo_attainment_overall"]) for r in rows}
    assert by_policy["token_velocity"] > by_policy["rps"]
    assert len(list(tmp_path.glob("0?-*/summary.json"))) == 4


def test_compare_rejects_mismatched_traces(workdir):
    a = write_yaml(workdir / "a.yaml", minimal())
    b = write_yaml(workdir / "b.yaml", minimal(trace="empty.csv"))
    assert main(["compare", "--config", str(a), "--config", str(b)]) == EXIT_INVALID


def test_compare_rejects_mismatched_seeds(workdir):
    a = write_yaml(workdir / "a.yaml", minimal())
    b = write_yaml(workdir / "b.yaml", minimal(seed=2))
    assert main(["compare", "--config", str(a), "--config", str(b)]) == EXIT_INVALID


def test_ablate_produces_four_steps(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal(policy="rps"))
    assert main(["ablate", "--config", str(cfg), "--out", str(workdir / "abl")]) == EXIT_OK
    with (workdir / "abl" / "ablation.csv").open() as f:
        assert [r["policy"] for r in csv.DictReader(f)] == ["B", "B+P", "B+P+D", "Full"]
    assert sorted(p.name for p in (workdir / "abl").iterdir() if p.is_dir()) == ["B", "B_P", "B_P_D", "Full"]


def test_ablate_needs_an_rps_base(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal())
    assert main(["ablate", "--config", str(cfg)]) == EXIT_INVALID


def test_analyze_constant_and_planted(tmp_path):
    const = tmp_path / "const.csv"
    const.write_text("arrival_ms,input_tokens,output_tokens\n"
                     + "".join(f"{t},100,10\n" for t in range(0, 300_000, 250)))
    assert main(["analyze", "--trace", str(const), "--out", str(tmp_path / "c")]) == EXIT_OK
    flat = json.loads((tmp_path / "c" / "burstiness.json").read_text())
    assert flat["burst_time_fraction"] < 0.02

    lines = ["arrival_ms,input_tokens,output_tokens"]
    for sec in range(300):
        n = 220 if sec % 10 == 9 else 20
        lines += [f"{sec * 1000 + j * (1000 // n)},100,10" for j in range(n)]
    planted = tmp_path / "planted.csv"
    planted.write_text("\n".join(lines) + "\n")
    assert main(["analyze", "--trace", str(planted), "--out", str(tmp_path / "p")]) == EXIT_OK
    bursty = json.loads((tmp_path / "p" / "burstiness.json").read_text())
    assert bursty["burst_time_fraction"] > flat["burst_time_fraction"]


def test_analyze_without_trace_exits_one():
    assert main(["analyze"]) == EXIT_INVALID


def test_profile_writes_json(tmp_path, capsys):
    perf = ROOT / "configs" / "perf" / "llama-3.1-8b_a100_tp1.yaml"
    assert main(["profile", "--config", str(perf), "--out", str(tmp_path)]) == EXIT_OK
    written = list(tmp_path.glob("*.json"))
    assert len(written) == 1
    data = json.loads(written[0].read_text())
    assert set(data["v_d_per_bucket"]) >= {"S-S", "L-L"}
    assert "vs reference" in capsys.readouterr().out


def test_seed_out_of_range_exits_one(workdir):
    cfg = write_yaml(workdir / "c.yaml", minimal())
    assert main(["run", "--config", str(cfg), "--seed", str(2**64)]) == EXIT_INVALID
