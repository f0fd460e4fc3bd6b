"""SLO accounting, node usage and TTFT distribution for one simulation run."""

from __future__ import annotations

import csv
import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import HW_CPU, HW_GPU
from .workload import Request, RequestState, SloSpec

CDF_PERCENTILES = tuple(range(1, 100))
COMPLIANCE_TOLERANCE = 1e-9


class Outcome(str, Enum):
    COMPLIANT = "compliant"
    VIOLATED = "violated"
    DROPPED = "dropped"


@dataclass(frozen=True)
class RequestRecord:
    id: int
    model_id: str
    arrival: float
    ttft: Optional[float]
    intervals: Tuple[float, ...]
    outcome: Outcome
    evictions: int = 0


@dataclass(frozen=True)
class UsageSample:
    time: float
    cpu_nodes: int
    gpu_nodes: int


@dataclass
class SummaryReport:
    total_requests: int
    compliant: int
    violated: int
    dropped: int
    compliance_rate: float
    run_length_s: float
    avg_cpu_nodes: float
    avg_gpu_nodes: float
    cpu_decode_throughput: float
    gpu_decode_throughput: float
    ttft_cdf: List[Tuple[int, float]] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["ttft_cdf"] = [{"percentile": p, "ttft_s": t} for p, t in self.ttft_cdf]
        return out


class Recorder:
    """Append-only sink fed by the cluster's event handlers."""

    def __init__(self) -> None:
        self.requests: Dict[int, Request] = {}
        self.drop_times: Dict[int, float] = {}
        self.node_hw: Dict[str, str] = {}
        self._in_use: Dict[str, bool] = {}
        self.samples: List[UsageSample] = [UsageSample(0.0, 0, 0)]
        self.decode_by_class: Counter = Counter()
        self.counters: Counter = Counter()

    def register_node(self, node_id: str, hardware_class: str) -> None:
        self.node_hw[node_id] = hardware_class
        self._in_use.setdefault(node_id, False)

    def arrival(self, req: Request) -> None:
        self.requests.setdefault(req.id, req)

    def admitted(self, req: Request, hardware_class: str) -> None:
        self.counters[f"admitted_{hardware_class}"] += 1

    def dropped(self, req: Request, now: float) -> None:
        self.requests.setdefault(req.id, req)
        self.drop_times[req.id] = now

    def completed(self, req: Request, now: float) -> None:
        self.counters["completed"] += 1

    def evicted(self, req: Request) -> None:
        self.counters["evictions"] += 1

    def preemption(self, victims: int, displaced: int) -> None:
        self.counters["preemptions"] += 1
        self.counters["preempted_instances"] += victims
        self.counters["displaced_requests"] += displaced

    def cold_start(self, model_id: str, hardware_class: str) -> None:
        self.counters[f"cold_starts_{hardware_class}"] += 1

    def scale_op(self, kind: str) -> None:
        self.counters[f"ops_{kind}"] += 1

    def decode_tokens(self, node_id: str, tokens: int) -> None:
        if tokens:
            self.decode_by_class[self.node_hw[node_id]] += tokens

    def node_in_use(self, node_id: str, in_use: bool, now: float) -> None:
        if self._in_use.get(node_id) == in_use:
            return
        self._in_use[node_id] = in_use
        cpu = sum(1 for n, used in self._in_use.items() if used and self.node_hw[n] == HW_CPU)
        gpu = sum(1 for n, used in self._in_use.items() if used and self.node_hw[n] == HW_GPU)
        sample = UsageSample(now, cpu, gpu)
        if self.samples and self.samples[-1].time == now:
            self.samples[-1] = sample
        else:
            self.samples.append(sample)


def classify(req: Request, slo: SloSpec) -> Outcome:
    if req.state == RequestState.DROPPED:
        return Outcome.DROPPED
    if req.state != RequestState.COMPLETE:
        return Outcome.VIOLATED
    deadline = req.arrival_time + slo.ttft(req.input_len)
    for k, t in enumerate(req.emission_times):
        if t > deadline + slo.tpot * k + COMPLIANCE_TOLERANCE:
            return Outcome.VIOLATED
    return Outcome.COMPLIANT


def build_records(requests: Iterable[Request], slo: SloSpec) -> List[RequestRecord]:
    out = []
    for req in sorted(requests, key=lambda r: r.id):
        times = req.emission_times
        ttft = times[0] - req.arrival_time if times else None
        out.append(
            RequestRecord(
                id=req.id,
                model_id=req.model_id,
                arrival=req.arrival_time,
                ttft=ttft,
                intervals=tuple(float(b - a) for a, b in zip(times, times[1:])),
                outcome=classify(req, slo),
                evictions=req.evictions,
            )
        )
    return out


def node_seconds(samples: Sequence[UsageSample], run_end: float) -> Tuple[float, float]:
    """Integral of in-use node counts per class over [0, run_end]."""
    cpu = gpu = 0.0
    ordered = sorted(samples, key=lambda s: s.time)
    for cur, nxt in zip(ordered, ordered[1:] + [None]):
        start = min(cur.time, run_end)
        end = run_end if nxt is None else min(nxt.time, run_end)
        if end > start:
            cpu += cur.cpu_nodes * (end - start)
            gpu += cur.gpu_nodes * (end - start)
    return cpu, gpu


def ttft_cdf(ttfts: Sequence[float]) -> List[Tuple[int, float]]:
    if not ttfts:
        return []
    values = np.percentile(np.asarray(ttfts, dtype=float), CDF_PERCENTILES, method="lower")
    return [(p, float(v)) for p, v in zip(CDF_PERCENTILES, values)]


def finalize(
    records: Sequence[RequestRecord],
    samples: Sequence[UsageSample],
    run_end: float,
    decode_tokens: Optional[Mapping[str, int]] = None,
    counters: Optional[Mapping[str, int]] = None,
) -> SummaryReport:
    decode_tokens = decode_tokens or {}
    outcomes = Counter(r.outcome for r in records)
    total = len(records)
    cpu_s, gpu_s = node_seconds(samples, run_end)
    return SummaryReport(
        total_requests=total,
        compliant=outcomes[Outcome.COMPLIANT],
        violated=outcomes[Outcome.VIOLATED],
        dropped=outcomes[Outcome.DROPPED],
        compliance_rate=outcomes[Outcome.COMPLIANT] / total if total else 0.0,
        run_length_s=float(run_end),
        avg_cpu_nodes=cpu_s / run_end if run_end > 0 else 0.0,
        avg_gpu_nodes=gpu_s / run_end if run_end > 0 else 0.0,
        cpu_decode_throughput=decode_tokens.get(HW_CPU, 0) / cpu_s if cpu_s > 0 else 0.0,
        gpu_decode_throughput=decode_tokens.get(HW_GPU, 0) / gpu_s if gpu_s > 0 else 0.0,
        ttft_cdf=ttft_cdf([r.ttft for r in records if r.ttft is not None]),
        counters=dict(sorted((counters or {}).items())),
    )


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_summary(report: SummaryReport, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_requests_csv(records: Sequence[RequestRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "model_id", "arrival_s", "ttft_s", "outcome"])
        for r in records:
            w.writerow([r.id, r.model_id, _fmt(r.arrival), _fmt(r.ttft), r.outcome.value])


def write_cdf_csv(report: SummaryReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["percentile", "ttft_s"])
        for p, t in report.ttft_cdf:
            w.writerow([p, _fmt(t)])


def write_usage_csv(samples: Sequence[UsageSample], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["time_s", "cpu_nodes", "gpu_nodes"])
        for s in samples:
            w.writerow([_fmt(s.time), s.cpu_nodes, s.gpu_nodes])
