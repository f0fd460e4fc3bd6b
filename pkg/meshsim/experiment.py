"""Experiment config files: defaults, `--set` overrides, exhaustive validation.

A config is one JSON document with the sections of `ExperimentConfig`. Any key
not listed here is rejected with its dotted path, so a typo never silently
falls back to a default.
"""

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence

from .config import (
    CPU_NODE_CAPACITY,
    DEFAULT_CPU_NODES,
    DEFAULT_GPU_NODES,
    DEFAULT_OUT_DIR,
    DEFAULT_SEED,
    GPU_NODE_CAPACITY,
    GiB,
    HW_CLASSES,
    KEEP_ALIVE_SECONDS,
    LOAD_BANDWIDTH,
    MAX_BATCH,
    MODEL_PRESETS,
    OVERESTIMATE_FACTOR,
    POLICIES,
    SCALE_DOWN_RATE,
    SCALE_UP_RATE,
    TPOT_SECONDS,
    TRACE_WINDOW_SECONDS,
    TTFT_BASE_SECONDS,
    TTFT_TOKENS_PER_SECOND,
    WATERMARK_PERCENT,
    normalize_model_id,
)


class ConfigError(ValueError):
    pass


@dataclass
class ClusterConfig:
    cpu_nodes: int = DEFAULT_CPU_NODES
    gpu_nodes: int = DEFAULT_GPU_NODES
    cpu_capacity_gib: float = CPU_NODE_CAPACITY / GiB
    gpu_capacity_gib: float = GPU_NODE_CAPACITY / GiB


@dataclass
class ModelOverride:
    param_gib: Optional[float] = None
    kv_kib_per_token: Optional[float] = None
    max_seq_len: Optional[int] = None
    min_total_len: Optional[int] = None


@dataclass
class TableRef:
    preset: str = ""
    hardware: str = ""
    path: str = ""


@dataclass
class PerfConfig:
    l_max: int = 4096
    b_max: int = MAX_BATCH
    tables: List[TableRef] = field(default_factory=list)


@dataclass
class TraceConfig:
    path: Optional[str] = None
    window_s: float = TRACE_WINDOW_SECONDS
    sample_count: int = 32
    model_mix: Dict[str, float] = field(default_factory=lambda: {"llama-7b": 1.0})
    synthetic_rate: float = 0.5
    synthetic_bursts: int = 0


@dataclass
class LengthsConfig:
    path: Optional[str] = None
    synthetic_count: int = 1000


@dataclass
class SloConfig:
    ttft_base_s: float = TTFT_BASE_SECONDS
    ttft_tokens_per_s: float = TTFT_TOKENS_PER_SECOND
    tpot_s: float = TPOT_SECONDS


@dataclass
class PolicyConfig:
    kind: str = "mesh"
    disable_sharing: bool = False
    disable_cpu: bool = False
    disable_defrag: bool = False
    disable_validation: bool = False


@dataclass
class MemoryConfig:
    watermark_percent: float = WATERMARK_PERCENT
    keep_alive_s: float = KEEP_ALIVE_SECONDS
    scale_up_gib_per_s: float = SCALE_UP_RATE / GiB
    scale_down_gib_per_s: float = SCALE_DOWN_RATE / GiB
    load_gib_per_s: float = LOAD_BANDWIDTH / GiB


@dataclass
class ComputeConfig:
    overestimate_factor: float = OVERESTIMATE_FACTOR
    jitter: float = 0.0


@dataclass
class RunConfig:
    end_s: Optional[float] = None
    policies: List[str] = field(default_factory=lambda: list(POLICIES))
    jobs: int = 1


@dataclass
class OutputConfig:
    dir: str = DEFAULT_OUT_DIR
    event_log: bool = False


@dataclass
class ExperimentConfig:
    seed: int = DEFAULT_SEED
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    models: Dict[str, ModelOverride] = field(default_factory=dict)
    perf: PerfConfig = field(default_factory=PerfConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    lengths: LengthsConfig = field(default_factory=LengthsConfig)
    slo: SloConfig = field(default_factory=SloConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    compute: ComputeConfig = field(default_factory=ComputeConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def presets(self) -> List[str]:
        return sorted(set(self.trace.model_mix) | set(self.models))


# -------------------- parsing --------------------


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, path)
    if is_dataclass(hint):
        return _build(hint, value, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return {str(k): _coerce(v, args[1], f"{path}.{k}") for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint!r}")


def _build(cls: Any, raw: Any, path: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], f"{path + '.' if path else ''}{f.name}")
    return cls(**kwargs)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` assignments to a raw config document, in order."""
    doc = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, text = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"--set {item!r}: empty key")
        node = doc
        for i, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{'.'.join(parts[: i + 1])}: cannot set a key inside a non-object")
            node = child
        node[parts[-1]] = _parse_value(text.strip())
    return doc


def _resolve(path: Optional[str], base_dir: str) -> Optional[str]:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.abspath(os.path.join(base_dir, path))


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(ok: bool, where: str, msg: str) -> None:
        if not ok:
            raise ConfigError(f"{where}: {msg}")

    c = cfg.cluster
    need(c.cpu_nodes >= 0, "cluster.cpu_nodes", "must be >= 0")
    need(c.gpu_nodes >= 0, "cluster.gpu_nodes", "must be >= 0")
    need(c.cpu_nodes + c.gpu_nodes > 0, "cluster", "needs at least one node")
    need(c.cpu_capacity_gib > 0, "cluster.cpu_capacity_gib", "must be > 0")
    need(c.gpu_capacity_gib > 0, "cluster.gpu_capacity_gib", "must be > 0")

    for name, override in cfg.models.items():
        need(normalize_model_id(name) in MODEL_PRESETS, f"models.{name}", "unknown model preset")
        for attr in ("param_gib", "kv_kib_per_token", "max_seq_len", "min_total_len"):
            value = getattr(override, attr)
            need(value is None or value > 0, f"models.{name}.{attr}", "must be > 0")

    p = cfg.perf
    need(p.l_max >= 1, "perf.l_max", "must be >= 1")
    need(p.b_max >= 1, "perf.b_max", "must be >= 1")
    for i, ref in enumerate(p.tables):
        need(normalize_model_id(ref.preset) in MODEL_PRESETS, f"perf.tables[{i}].preset", f"unknown preset {ref.preset!r}")
        need(ref.hardware in HW_CLASSES, f"perf.tables[{i}].hardware", f"must be one of {list(HW_CLASSES)}")
        need(os.path.isfile(ref.path), f"perf.tables[{i}].path", f"file not found: {ref.path}")

    t = cfg.trace
    need(t.path is None or os.path.isfile(t.path), "trace.path", f"file not found: {t.path}")
    need(t.window_s > 0, "trace.window_s", "must be > 0")
    need(t.sample_count >= 1, "trace.sample_count", "must be >= 1")
    need(bool(t.model_mix), "trace.model_mix", "needs at least one preset")
    for name, weight in t.model_mix.items():
        need(normalize_model_id(name) in MODEL_PRESETS, f"trace.model_mix.{name}", "unknown model preset")
        need(weight >= 0, f"trace.model_mix.{name}", "weight must be >= 0")
    need(sum(t.model_mix.values()) > 0, "trace.model_mix", "needs a positive weight")
    need(t.synthetic_rate >= 0, "trace.synthetic_rate", "must be >= 0")
    need(t.synthetic_bursts >= 0, "trace.synthetic_bursts", "must be >= 0")

    need(cfg.lengths.path is None or os.path.isfile(cfg.lengths.path), "lengths.path", f"file not found: {cfg.lengths.path}")
    need(cfg.lengths.synthetic_count >= 1, "lengths.synthetic_count", "must be >= 1")

    s = cfg.slo
    need(s.ttft_base_s > 0, "slo.ttft_base_s", "must be > 0")
    need(s.ttft_tokens_per_s > 0, "slo.ttft_tokens_per_s", "must be > 0")
    need(s.tpot_s > 0, "slo.tpot_s", "must be > 0")

    need(cfg.policy.kind in POLICIES, "policy.kind", f"must be one of {list(POLICIES)}")

    m = cfg.memory
    need(m.watermark_percent >= 0, "memory.watermark_percent", "must be >= 0")
    need(m.keep_alive_s >= 0, "memory.keep_alive_s", "must be >= 0")
    need(m.scale_up_gib_per_s > 0, "memory.scale_up_gib_per_s", "must be > 0")
    need(m.scale_down_gib_per_s > 0, "memory.scale_down_gib_per_s", "must be > 0")
    need(m.load_gib_per_s > 0, "memory.load_gib_per_s", "must be > 0")

    need(cfg.compute.overestimate_factor >= 1.0, "compute.overestimate_factor", "must be >= 1")
    need(0.0 <= cfg.compute.jitter < 1.0, "compute.jitter", "must be in [0, 1)")

    r = cfg.run
    need(r.end_s is None or r.end_s > 0, "run.end_s", "must be > 0")
    need(bool(r.policies), "run.policies", "needs at least one policy")
    for i, kind in enumerate(r.policies):
        need(kind in POLICIES, f"run.policies[{i}]", f"must be one of {list(POLICIES)}")
    need(r.jobs >= 1, "run.jobs", "must be >= 1")
    need(bool(cfg.output.dir.strip()), "output.dir", "must not be empty")
    return cfg


def from_dict(raw: Mapping[str, Any], base_dir: str = ".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, dict(raw), "")
    cfg.trace.path = _resolve(cfg.trace.path, base_dir)
    cfg.lengths.path = _resolve(cfg.lengths.path, base_dir)
    for ref in cfg.perf.tables:
        ref.path = _resolve(ref.path, base_dir)
    cfg.output.dir = _resolve(cfg.output.dir, base_dir)
    return validate(cfg)


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw: Dict[str, Any] = {}
    base_dir = os.getcwd()
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base_dir = os.path.dirname(os.path.abspath(path))
    return from_dict(apply_overrides(raw, overrides), base_dir)


def write_effective(cfg: ExperimentConfig, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
