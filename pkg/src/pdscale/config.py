"""Experiment configuration: YAML files validated into simulation settings.

Validation never stops at the first problem; :class:`ConfigError` carries
the full list so one edit cycle can fix every mistake.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .cluster import PerfModel
from .router import SloPolicy
from .scaler import DEFAULT_THRESHOLDS, POLICIES, POLICY_THRESHOLD_KIND, StagePolicy, parse_threshold
from .simulation import SimSettings
from .trace import RateSegment, SynthesisSpec, TraceRecord, parse_trace, synthesize
from .velocity import BUCKET_IDS, BUILTIN_PROFILES, ConfigurationError, VelocityProfile, load_profile


_NO_PROFILE: Any = object()


class ConfigError(ValueError):
    def __init__(self, source: str, problems: list[str]):
        self.source = source
        self.problems = problems
        super().__init__(f"{source}: " + "; ".join(problems))


TOP_KEYS = {
    "seed", "horizon_ms", "profile", "trace", "policy", "slo", "predictor_accuracy",
    "convertibles", "startup_delay_ms", "scaler_tick_ms", "output_dir", "advanced", "name",
}
# SimSettings knobs reachable through the ``advanced`` table
ADVANCED_KEYS = {
    "metrics_tick_ms", "rate_window_ms", "slow_window_ms", "initial_prefillers",
    "initial_regular_decoders", "min_prefillers", "min_regular_decoders", "scale_down_ticks",
    "convertible_mem_threshold", "count_own_prefill", "burst_window_ms", "drain_ms", "debug_invariants",
}
SLO_KEYS = {f.name for f in fields(SloPolicy)}


@dataclass
class ExperimentConfig:
    profile_ref: str
    prefill: StagePolicy
    decode: StagePolicy
    seed: int = 0
    horizon_ms: int | None = None
    trace_file: Path | None = None
    synthesis: SynthesisSpec | None = None
    slo: SloPolicy = field(default_factory=SloPolicy)
    predictor_accuracy: float = 0.85
    convertibles: int | str = 0
    startup_delay_ms: int = 5000
    scaler_tick_ms: int = 1000
    output_dir: Path = Path("out")
    advanced: dict[str, Any] = field(default_factory=dict)
    name: str = ""
    source: str = "<config>"

    @property
    def trace_name(self) -> str:
        if self.trace_file is not None:
            return self.trace_file.name
        return f"synthetic-seed{self.seed}"

    def load_profile(self) -> VelocityProfile:
        return load_profile(self.profile_ref)

    def load_trace(self) -> list[TraceRecord]:
        if self.trace_file is not None:
            return parse_trace(self.trace_file)
        return synthesize(self.synthesis, self.seed)

    def settings(self, profile: VelocityProfile | None = None) -> SimSettings:
        return SimSettings(
            profile=self.load_profile() if profile is None else profile,
            prefill_policy=self.prefill,
            decode_policy=self.decode,
            slo=self.slo,
            predictor_accuracy=self.predictor_accuracy,
            convertibles=self.convertibles,
            startup_delay_ms=self.startup_delay_ms,
            scaler_tick_ms=self.scaler_tick_ms,
            horizon_ms=self.horizon_ms,
            name=self.name,
            **self.advanced,
        )

    def to_dict(self) -> dict:
        """Plain-data form that :func:`parse_config` accepts back unchanged."""

        def stage(p: StagePolicy) -> dict:
            out = {"policy": p.policy}
            if p.threshold is not None:
                kind = POLICY_THRESHOLD_KIND[p.policy]
                out["threshold"] = _format_threshold(kind, p.threshold)
            return out

        if self.trace_file is not None:
            trace: dict = {"file": str(self.trace_file)}
        else:
            s = self.synthesis
            trace = {"synth": {
                "segments": [[g.start_ms, g.end_ms, g.rps] for g in s.segments],
                "bucket_weights": dict(s.bucket_weights),
                "length_mode": s.length_mode,
            }}
        d = {
            "seed": self.seed,
            "horizon_ms": self.horizon_ms,
            "profile": self.profile_ref,
            "trace": trace,
            "policy": {"prefill": stage(self.prefill), "decode": stage(self.decode)},
            "slo": {f.name: getattr(self.slo, f.name) for f in fields(SloPolicy)},
            "predictor_accuracy": self.predictor_accuracy,
            "convertibles": self.convertibles,
            "startup_delay_ms": self.startup_delay_ms,
            "scaler_tick_ms": self.scaler_tick_ms,
            "output_dir": str(self.output_dir),
            "name": self.name,
        }
        if self.advanced:
            d["advanced"] = dict(self.advanced)
        return d


def _format_threshold(kind: str, value: float) -> str:
    if kind == "fraction":
        return f"{value * 100:g}%"
    return f"{value:g} {'req/s' if kind == 'rate' else 'req'}"


# ---------------------------------------------------------------------- parsing


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _stage(raw, stage: str, problems: list[str]) -> StagePolicy | None:
    where = f"policy.{stage}"
    if isinstance(raw, str):
        raw = {"policy": raw}
    if not isinstance(raw, dict):
        problems.append(f"{where} must be a policy name or a table with 'policy' and 'threshold'")
        return None
    unknown = sorted(set(raw) - {"policy", "threshold"})
    if unknown:
        problems.append(f"{where}: unknown keys {unknown}")
    name = raw.get("policy")
    if name not in POLICIES:
        problems.append(f"{where}.policy must be one of {', '.join(POLICIES)}; got {name!r}")
        return None
    text = raw.get("threshold")
    expected = POLICY_THRESHOLD_KIND.get(name)
    if expected is None:
        if text is not None:
            problems.append(f"{where}: policy {name} takes no threshold")
        return StagePolicy(stage, name)
    if text is None:
        text = DEFAULT_THRESHOLDS[(stage, name)]
    try:
        kind, value = parse_threshold(text)
    except ConfigurationError as exc:
        problems.append(f"{where}.threshold: {exc}")
        return None
    if kind != expected:
        problems.append(f"{where}: {name} needs a {expected} threshold, got {kind} ({text!r})")
        return None
    if kind == "fraction" and value > 1:
        problems.append(f"{where}.threshold must not exceed 100%")
        return None
    return StagePolicy(stage, name, value)


def _segments(raw, problems: list[str]) -> list[RateSegment]:
    out = []
    if not isinstance(raw, list) or not raw:
        problems.append("trace.synth.segments must be a non-empty list of [start_ms, end_ms, rps]")
        return out
    for k, seg in enumerate(raw):
        if isinstance(seg, dict):
            seg = [seg.get("start_ms"), seg.get("end_ms"), seg.get("rps")]
        if not (isinstance(seg, list) and len(seg) == 3 and _is_int(seg[0]) and _is_int(seg[1]) and _is_number(seg[2])):
            problems.append(f"trace.synth.segments[{k}] must be [start_ms, end_ms, rps] with integer times")
            continue
        out.append(RateSegment(seg[0], seg[1], float(seg[2])))
    return out


def _trace(raw, base: Path, problems: list[str]) -> tuple[Path | None, SynthesisSpec | None]:
    if not isinstance(raw, dict) or len(set(raw) & {"file", "synth"}) != 1 or set(raw) - {"file", "synth"}:
        problems.append("trace must hold exactly one of 'file' or 'synth'")
        return None, None
    if "file" in raw:
        path = Path(str(raw["file"]))
        path = path if path.is_absolute() else base / path
        if not path.is_file():
            problems.append(f"trace.file {path} does not exist")
        return path, None
    synth = raw["synth"]
    if not isinstance(synth, dict):
        problems.append("trace.synth must be a table")
        return None, None
    unknown = sorted(set(synth) - {"segments", "bucket_weights", "length_mode"})
    if unknown:
        problems.append(f"trace.synth: unknown keys {unknown}")
    segs = _segments(synth.get("segments"), problems)
    spec = SynthesisSpec(segs, length_mode=synth.get("length_mode", "representative"))
    if "bucket_weights" in synth:
        weights = synth["bucket_weights"]
        if not isinstance(weights, dict) or not all(_is_number(v) for v in weights.values()):
            problems.append("trace.synth.bucket_weights must map bucket ids to numbers")
        else:
            spec.bucket_weights = {str(k): float(v) for k, v in weights.items()}
    if segs:
        problems.extend(f"trace.synth: {p}" for p in spec.problems())
    return None, spec


def _profile(raw, base: Path, problems: list[str]) -> str | None:
    if not isinstance(raw, str) or not raw:
        problems.append(f"profile must be a builtin name ({', '.join(BUILTIN_PROFILES)}) or a file path")
        return None
    if raw in BUILTIN_PROFILES:
        return raw
    path = Path(raw)
    path = path if path.is_absolute() else base / path
    if not path.is_file():
        problems.append(f"profile file {path} does not exist")
        return None
    try:
        VelocityProfile.load(path)
    except (ValueError, TypeError) as exc:
        problems.append(f"profile {path}: {exc}")
    return str(path)


def parse_config(data: Any, base_dir: str | Path = ".", source: str = "<config>") -> ExperimentConfig:
    """Validate a parsed YAML document; raise :class:`ConfigError` listing every problem."""
    base = Path(base_dir)
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError(source, ["top level must be a table"])
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        problems.append(f"unknown keys {unknown}")

    profile_ref = _profile(data.get("profile"), base, problems)
    trace_file, synthesis = _trace(data.get("trace"), base, problems)

    policy = data.get("policy", {})
    prefill = decode = None
    if not isinstance(policy, dict) or set(policy) - {"prefill", "decode"}:
        problems.append("policy must be a table with 'prefill' and/or 'decode'")
    else:
        prefill = _stage(policy.get("prefill", "token_velocity"), "prefill", problems)
        decode = _stage(policy.get("decode", "token_velocity"), "decode", problems)

    slo_raw = data.get("slo", {})
    slo = SloPolicy()
    if not isinstance(slo_raw, dict) or set(slo_raw) - SLO_KEYS:
        problems.append(f"slo must be a table with keys from {sorted(SLO_KEYS)}")
    elif not all(_is_number(v) for v in slo_raw.values()):
        problems.append("slo values must be numbers")
    else:
        slo = SloPolicy(**slo_raw)
        problems.extend(f"slo: {p}" for p in slo.problems())

    seed = data.get("seed", 0)
    if not _is_int(seed) or not 0 <= seed < 2**64:
        problems.append("seed must be an unsigned 64-bit integer")
    horizon = data.get("horizon_ms")
    if horizon is not None and (not _is_int(horizon) or horizon <= 0):
        problems.append("horizon_ms must be a positive integer or null")
    accuracy = data.get("predictor_accuracy", 0.85)
    if not _is_number(accuracy) or not 0 <= accuracy <= 1:
        problems.append("predictor_accuracy must lie in [0, 1]")
    conv = data.get("convertibles", 0)
    if not (conv == "auto" or (_is_int(conv) and conv >= 0)):
        problems.append("convertibles must be a non-negative integer or 'auto'")
    startup = data.get("startup_delay_ms", 5000)
    if not _is_int(startup) or not 0 <= startup <= 10_000:
        problems.append("startup_delay_ms must be an integer in [0, 10000]")
    tick = data.get("scaler_tick_ms", 1000)
    if not _is_int(tick) or tick <= 0:
        problems.append("scaler_tick_ms must be a positive integer")
    name = data.get("name", "")
    if not isinstance(name, str):
        problems.append("name must be a string")

    advanced = data.get("advanced", {}) or {}
    if not isinstance(advanced, dict):
        problems.append("advanced must be a table")
        advanced = {}
    bad = sorted(set(advanced) - ADVANCED_KEYS)
    if bad:
        problems.append(f"advanced: unknown keys {bad}")

    if problems:
        raise ConfigError(source, problems)

    out_dir = Path(str(data.get("output_dir", "out")))
    cfg = ExperimentConfig(
        profile_ref=profile_ref,
        prefill=prefill,
        decode=decode,
        seed=seed,
        horizon_ms=horizon,
        trace_file=trace_file,
        synthesis=synthesis,
        slo=slo,
        predictor_accuracy=float(accuracy),
        convertibles=conv,
        startup_delay_ms=startup,
        scaler_tick_ms=tick,
        output_dir=out_dir if out_dir.is_absolute() else base / out_dir,
        advanced=dict(advanced),
        name=name,
        source=source,
    )
    # cross-field checks owned by the simulator; the profile is not needed for them
    try:
        sim_problems = cfg.settings(profile=_NO_PROFILE).problems()
    except TypeError as exc:
        sim_problems = [f"advanced: {exc}"]
    if sim_problems:
        raise ConfigError(source, sim_problems)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(_read_yaml(path), base_dir=path.parent, source=str(path))


# ---------------------------------------------------------------------- profiling inputs


@dataclass
class PerfConfig:
    perf: PerfModel
    name: str = ""
    tpot_slo_ms: float = 100.0
    ttft_slo_ms: float = 2000.0
    mean_request_tokens: float | None = None
    reference_v_d: dict[str, float] = field(default_factory=dict)


PERF_REQUIRED = ("v_p", "c0_ms", "c1_ms", "kvc_capacity_tokens")
PERF_OPTIONAL = ("v_n", "max_decode_batch", "gpus_per_instance", "prefill_seq_equiv")
PERF_META = ("name", "tpot_slo_ms", "ttft_slo_ms", "mean_request_tokens", "reference_v_d")


def parse_perf_config(data: Any, source: str = "<perf>") -> PerfConfig:
    if not isinstance(data, dict):
        raise ConfigError(source, ["top level must be a table"])
    problems = []
    unknown = sorted(set(data) - set(PERF_REQUIRED) - set(PERF_OPTIONAL) - set(PERF_META))
    if unknown:
        problems.append(f"unknown keys {unknown}")
    for key in PERF_REQUIRED:
        if not _is_number(data.get(key)) or data[key] < 0:
            problems.append(f"{key} is required and must be a non-negative number")
    for key in PERF_OPTIONAL + ("tpot_slo_ms", "ttft_slo_ms", "mean_request_tokens"):
        if data.get(key) is not None and (not _is_number(data[key]) or data[key] <= 0):
            problems.append(f"{key} must be a positive number")
    for key in ("kvc_capacity_tokens", "max_decode_batch", "gpus_per_instance"):
        if key in data and data[key] is not None and not _is_int(data[key]):
            problems.append(f"{key} must be an integer")
    ref = data.get("reference_v_d") or {}
    if not isinstance(ref, dict) or set(ref) - set(BUCKET_IDS) or not all(_is_number(v) and v > 0 for v in ref.values()):
        problems.append(f"reference_v_d must map bucket ids ({', '.join(BUCKET_IDS)}) to positive numbers")
    if problems:
        raise ConfigError(source, problems)
    perf_args = {k: data[k] for k in PERF_REQUIRED}
    perf_args.update({k: data[k] for k in PERF_OPTIONAL if data.get(k) is not None})
    try:
        perf = PerfModel(**perf_args)
    except ValueError as exc:
        raise ConfigError(source, [str(exc)]) from None
    return PerfConfig(
        perf=perf,
        name=str(data.get("name", "")),
        tpot_slo_ms=float(data.get("tpot_slo_ms") or 100.0),
        ttft_slo_ms=float(data.get("ttft_slo_ms") or 2000.0),
        mean_request_tokens=data.get("mean_request_tokens"),
        reference_v_d={k: float(v) for k, v in ref.items()},
    )


def _read_yaml(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), [f"cannot read config: {exc.strerror}"]) from None
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), [f"invalid YAML: {exc}"]) from None


def load_perf_config(path: str | Path) -> PerfConfig:
    path = Path(path)
    return parse_perf_config(_read_yaml(path), source=str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PerfConfig",
    "dump_config",
    "load_config",
    "load_perf_config",
    "parse_config",
    "parse_perf_config",
]
