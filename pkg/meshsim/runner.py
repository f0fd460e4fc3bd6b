"""Builds one simulation from an ExperimentConfig, runs it and writes its outputs."""

from __future__ import annotations

import copy
import logging
import math
import os
from contextlib import ExitStack
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .cluster import Cluster, Node, Policy
from .config import GiB, HW_CLASSES, HW_CPU, HW_GPU, KiB, get_model_preset, normalize_model_id, preset_of
from .experiment import ConfigError, ExperimentConfig, write_effective
from .fake_trace import generate_invocations, generate_lengths
from .memory import ModelSpec, NodeMemory
from .metrics import (
    Recorder,
    RequestRecord,
    SummaryReport,
    UsageSample,
    build_records,
    finalize,
    write_cdf_csv,
    write_requests_csv,
    write_summary,
    write_usage_csv,
)
from .perfmodel import CostParams, PerfBook, load_table_csv, synthetic_table
from .simcore import Engine
from .workload import (
    LengthDataset,
    Request,
    SloSpec,
    TraceSpec,
    assign_models,
    load_lengths,
    load_trace,
    make_lengths,
    synthesize_requests,
)

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"
REQUESTS_FILE = "requests.csv"
CDF_FILE = "ttft_cdf.csv"
USAGE_FILE = "usage_timeline.csv"
EVENTS_FILE = "events.jsonl"
EFFECTIVE_CONFIG_FILE = "effective_config.json"


@dataclass
class RunResult:
    policy: str
    report: SummaryReport
    records: List[RequestRecord]
    samples: List[UsageSample]
    events: int


def slo_of(cfg: ExperimentConfig) -> SloSpec:
    return SloSpec(cfg.slo.ttft_base_s, cfg.slo.ttft_tokens_per_s, cfg.slo.tpot_s)


def cost_params(cfg: ExperimentConfig) -> CostParams:
    return CostParams(
        scale_up_rate=cfg.memory.scale_up_gib_per_s * GiB,
        scale_down_rate=cfg.memory.scale_down_gib_per_s * GiB,
        load_bandwidth=cfg.memory.load_gib_per_s * GiB,
        overestimate_factor=cfg.compute.overestimate_factor,
    )


def preset_limits(cfg: ExperimentConfig, preset: str) -> Tuple[int, int, int, int]:
    """(param bytes, kv bytes per token, max_seq_len, min_total_len) after overrides."""
    base = get_model_preset(preset)
    override = next((o for name, o in cfg.models.items() if normalize_model_id(name) == preset), None)
    param = int(base["param_bytes"])
    kv = int(base["kv_bytes_per_token"])
    max_len = int(base["max_seq_len"])
    min_len: Optional[int] = None
    if override is not None:
        if override.param_gib is not None:
            param = int(override.param_gib * GiB)
        if override.kv_kib_per_token is not None:
            kv = int(override.kv_kib_per_token * KiB)
        if override.max_seq_len is not None:
            max_len = override.max_seq_len
        min_len = override.min_total_len
    return param, kv, max_len, min_len if min_len is not None else max_len


def build_perf(cfg: ExperimentConfig) -> PerfBook:
    book = PerfBook()
    for preset in sorted({normalize_model_id(p) for p in cfg.presets()}):
        _param, _kv, max_len, _min = preset_limits(cfg, preset)
        if max_len > cfg.perf.l_max:
            raise ConfigError(f"perf.l_max: {cfg.perf.l_max} is below max_seq_len {max_len} of {preset}")
        for hw in HW_CLASSES:
            book.add(preset, synthetic_table(preset, hw, l_max=cfg.perf.l_max, b_max=cfg.perf.b_max))
    for ref in cfg.perf.tables:
        preset = normalize_model_id(ref.preset)
        table = load_table_csv(ref.path, ref.hardware, preset)
        _param, _kv, max_len, _min = preset_limits(cfg, preset)
        if table.l_max < max_len:
            raise ConfigError(f"perf.tables: {ref.path} covers lengths up to {table.l_max}, {preset} needs {max_len}")
        book.add(preset, table)
    return book


def build_trace(cfg: ExperimentConfig) -> TraceSpec:
    t = cfg.trace
    if t.path:
        return load_trace(t.path, t.window_s, t.sample_count, cfg.seed, t.model_mix)
    rows = generate_invocations(t.sample_count, t.window_s, t.synthetic_rate, t.synthetic_bursts, seed=cfg.seed)
    functions = sorted({fn for _ts, fn in rows})
    return TraceSpec(invocations=rows, model_map=assign_models(functions, t.model_mix))


def build_lengths(cfg: ExperimentConfig, max_seq_len: int) -> LengthDataset:
    if cfg.lengths.path:
        return load_lengths(cfg.lengths.path, max_seq_len)
    return make_lengths(generate_lengths(cfg.lengths.synthetic_count, max_seq_len, seed=cfg.seed), max_seq_len)


def build_workload(cfg: ExperimentConfig) -> Tuple[List[Request], Dict[str, ModelSpec]]:
    trace = build_trace(cfg)
    model_ids = sorted(set(trace.model_map.values()))
    limits = {mid: preset_limits(cfg, preset_of(mid)) for mid in model_ids}
    longest = max((lim[2] for lim in limits.values()), default=get_model_preset("llama-7b")["max_seq_len"])
    dataset = build_lengths(cfg, int(longest))
    models: Dict[str, ModelSpec] = {}
    for mid in model_ids:
        param, kv, max_len, min_len = limits[mid]
        models[mid] = ModelSpec(
            model_id=mid,
            param_bytes=param,
            kv_bytes_per_token=kv,
            max_seq_len=max_len,
            avg_output_len=dataset.mean_output,
            min_total_len=min_len,
            size_class=str(get_model_preset(preset_of(mid))["size_class"]),
        )
    requests = synthesize_requests(trace, dataset, cfg.seed, {mid: m.max_seq_len for mid, m in models.items()})
    return requests, models


def build_nodes(cfg: ExperimentConfig) -> List[Node]:
    nodes = []
    for i in range(cfg.cluster.cpu_nodes):
        nodes.append(Node(f"cpu-{i}", HW_CPU, NodeMemory(int(cfg.cluster.cpu_capacity_gib * GiB))))
    for i in range(cfg.cluster.gpu_nodes):
        nodes.append(Node(f"gpu-{i}", HW_GPU, NodeMemory(int(cfg.cluster.gpu_capacity_gib * GiB))))
    return nodes


def run_simulation(cfg: ExperimentConfig, policy_kind: Optional[str] = None, event_log_path: Optional[str] = None) -> RunResult:
    kind = policy_kind or cfg.policy.kind
    requests, models = build_workload(cfg)
    perf = build_perf(cfg)
    recorder = Recorder()
    policy = Policy(
        kind=kind,
        disable_sharing=cfg.policy.disable_sharing,
        disable_cpu=cfg.policy.disable_cpu,
        disable_defrag=cfg.policy.disable_defrag,
        disable_validation=cfg.policy.disable_validation,
    )
    with ExitStack() as stack:
        log_fh = None
        if event_log_path:
            log_fh = stack.enter_context(open(event_log_path, "w", encoding="utf-8"))
        engine = Engine(event_log=log_fh, keep_log=False)
        cluster = Cluster(
            build_nodes(cfg),
            models,
            perf,
            engine,
            slo=slo_of(cfg),
            params=cost_params(cfg),
            policy=policy,
            watermark=cfg.memory.watermark_percent,
            keep_alive=cfg.memory.keep_alive_s,
            jitter=cfg.compute.jitter,
            seed=cfg.seed,
            recorder=recorder,
        )
        cluster.submit(requests)
        logger.info("run start policy=%s requests=%d models=%d", kind, len(requests), len(models))
        outcome = engine.run_until(cfg.run.end_s if cfg.run.end_s is not None else math.inf)
        cluster.finish(engine.now)

    records = build_records(recorder.requests.values(), cluster.slo)
    report = finalize(records, recorder.samples, engine.now, recorder.decode_by_class, recorder.counters)
    logger.info(
        "run done policy=%s events=%d compliant=%d dropped=%d gpu_nodes=%.3f",
        kind, outcome.processed, report.compliant, report.dropped, report.avg_gpu_nodes,
    )
    return RunResult(kind, report, records, list(recorder.samples), outcome.processed)


def write_outputs(result: RunResult, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, name) for name in (SUMMARY_FILE, REQUESTS_FILE, CDF_FILE, USAGE_FILE)]
    write_summary(result.report, paths[0])
    write_requests_csv(result.records, paths[1])
    write_cdf_csv(result.report, paths[2])
    write_usage_csv(result.samples, paths[3])
    return paths


def run_to_dir(cfg: ExperimentConfig, out_dir: str, policy_kind: Optional[str] = None) -> RunResult:
    if policy_kind is not None and policy_kind != cfg.policy.kind:
        cfg = copy.deepcopy(cfg)
        cfg.policy.kind = policy_kind
    os.makedirs(out_dir, exist_ok=True)
    write_effective(cfg, os.path.join(out_dir, EFFECTIVE_CONFIG_FILE))
    log_path = os.path.join(out_dir, EVENTS_FILE) if cfg.output.event_log else None
    result = run_simulation(cfg, None, log_path)
    write_outputs(result, out_dir)
    return result
