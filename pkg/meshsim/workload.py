"""Request stream construction: invocation traces, length datasets, SLOs."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import TPOT_SECONDS, TTFT_BASE_SECONDS, TTFT_TOKENS_PER_SECOND

logger = logging.getLogger(__name__)


class TraceFormatError(ValueError):
    pass


class LengthDatasetError(ValueError):
    pass


class RequestState(str, Enum):
    PENDING = "pending"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    COMPLETE = "complete"
    DROPPED = "dropped"
    EVICTED = "evicted"


@dataclass
class Request:
    id: int
    model_id: str
    arrival_time: float
    input_len: int
    true_output_len: int
    emission_times: List[float] = field(default_factory=list)
    state: RequestState = RequestState.PENDING
    instance_id: Optional[int] = None
    needs_prefill: bool = True
    evictions: int = 0

    @property
    def tokens_generated(self) -> int:
        return len(self.emission_times)

    @property
    def context_len(self) -> int:
        return self.input_len + len(self.emission_times)

    @property
    def finished(self) -> bool:
        return self.state in (RequestState.COMPLETE, RequestState.DROPPED)


@dataclass(frozen=True)
class SloSpec:
    ttft_base: float = TTFT_BASE_SECONDS
    ttft_per_token_divisor: float = TTFT_TOKENS_PER_SECOND
    tpot: float = TPOT_SECONDS

    def __post_init__(self) -> None:
        if min(self.ttft_base, self.ttft_per_token_divisor, self.tpot) <= 0:
            raise ValueError("SLO values must be strictly positive")

    def ttft(self, input_len: int) -> float:
        return ttft_slo(self, input_len)


def ttft_slo(slo: SloSpec, input_len: int) -> float:
    if input_len < 1:
        raise ValueError("input_len must be >= 1")
    return max(slo.ttft_base, input_len / slo.ttft_per_token_divisor)


@dataclass
class TraceSpec:
    invocations: List[Tuple[float, str]]
    model_map: Dict[str, str]

    @property
    def functions(self) -> List[str]:
        return sorted(self.model_map)


@dataclass(frozen=True)
class LengthDataset:
    inputs: np.ndarray
    outputs: np.ndarray
    clamped: int = 0

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def mean_output(self) -> float:
        return float(self.outputs.mean()) if len(self) else 1.0


def _parse_float(raw: str, line_no: int, what: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError) as exc:
        raise TraceFormatError(f"line {line_no}: bad {what} '{raw}'") from exc


def read_invocations(path: str) -> List[Tuple[float, str]]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"trace file not found: {path}")
    out: List[Tuple[float, str]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp_s", "function_id"]:
            raise TraceFormatError("line 1: header must be 'timestamp_s,function_id'")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise TraceFormatError(f"line {line_no}: expected 2 columns, got {len(row)}")
            ts = _parse_float(row[0].strip(), line_no, "timestamp")
            if ts < 0:
                raise TraceFormatError(f"line {line_no}: negative timestamp {ts}")
            fn = row[1].strip()
            if not fn:
                raise TraceFormatError(f"line {line_no}: empty function_id")
            out.append((ts, fn))
    return out


def assign_models(functions: Sequence[str], model_mix: Optional[Mapping[str, float]] = None) -> Dict[str, str]:
    """Map each function to its own replica `<preset>/<function>`.

    Presets are handed out in proportion to `model_mix` weights, largest
    remaining deficit first, so the split is deterministic.
    """
    mix = dict(model_mix or {"llama-7b": 1.0})
    if not mix or any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
        raise ValueError("model_mix needs at least one positive weight")
    names = sorted(mix)
    total = float(sum(mix.values()))
    given = {n: 0 for n in names}
    out: Dict[str, str] = {}
    for i, fn in enumerate(functions):
        target = {n: (i + 1) * mix[n] / total for n in names}
        pick = max(names, key=lambda n: (target[n] - given[n], -names.index(n)))
        given[pick] += 1
        out[fn] = f"{pick}/{fn}"
    return out


def load_trace(
    path: str,
    window: float,
    sample_count: int,
    seed: int,
    model_mix: Optional[Mapping[str, float]] = None,
) -> TraceSpec:
    rows = read_invocations(path)
    available = sorted({fn for _ts, fn in rows})
    if sample_count > len(available):
        raise TraceFormatError(f"sample_count={sample_count} exceeds available functions ({len(available)})")
    rng = np.random.default_rng(seed)
    chosen_idx = rng.choice(len(available), size=sample_count, replace=False) if sample_count else []
    chosen = sorted(available[int(i)] for i in chosen_idx)
    keep = set(chosen)
    invocations = sorted(
        ((ts, fn) for ts, fn in rows if fn in keep and ts < window),
        key=lambda item: item[0],
    )
    logger.debug("trace loaded path=%s functions=%d invocations=%d", path, len(chosen), len(invocations))
    return TraceSpec(invocations=invocations, model_map=assign_models(chosen, model_mix))


def _clamp_pair(inp: int, out: int, max_seq_len: int) -> Tuple[int, int]:
    inp = min(inp, max_seq_len - 1)
    out = min(out, max_seq_len - inp)
    return inp, out


def make_lengths(pairs: Iterable[Tuple[int, int]], max_seq_len: int) -> LengthDataset:
    inputs: List[int] = []
    outputs: List[int] = []
    clamped = 0
    for inp, out in pairs:
        if inp < 1 or out < 1:
            raise LengthDatasetError(f"lengths must be >= 1, got ({inp}, {out})")
        if inp + out > max_seq_len:
            inp, out = _clamp_pair(inp, out, max_seq_len)
            clamped += 1
        inputs.append(inp)
        outputs.append(out)
    if not inputs:
        raise LengthDatasetError("length dataset is empty")
    if clamped:
        logger.warning("length dataset clamped rows=%d max_seq_len=%d", clamped, max_seq_len)
    return LengthDataset(np.asarray(inputs, dtype=np.int64), np.asarray(outputs, dtype=np.int64), clamped)


def load_lengths(path: str, max_seq_len: int) -> LengthDataset:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"length dataset not found: {path}")
    pairs: List[Tuple[int, int]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["input_tokens", "output_tokens"]:
            raise LengthDatasetError("line 1: header must be 'input_tokens,output_tokens'")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                inp, out = int(row[0]), int(row[1])
            except (IndexError, ValueError) as exc:
                raise LengthDatasetError(f"line {line_no}: expected two integers") from exc
            if inp < 1 or out < 1:
                raise LengthDatasetError(f"line {line_no}: lengths must be positive, got ({inp}, {out})")
            pairs.append((inp, out))
    return make_lengths(pairs, max_seq_len)


def sample_lengths(dataset: LengthDataset, rng: np.random.Generator) -> Tuple[int, int]:
    if len(dataset) == 0:
        raise LengthDatasetError("length dataset is empty")
    i = int(rng.integers(len(dataset)))
    return int(dataset.inputs[i]), int(dataset.outputs[i])


def synthesize_requests(
    trace: TraceSpec,
    dataset: LengthDataset,
    seed: int,
    max_seq_len: Optional[Mapping[str, int]] = None,
) -> List[Request]:
    rng = np.random.default_rng(seed)
    ordered = sorted(enumerate(trace.invocations), key=lambda item: (item[1][0], item[0]))
    requests: List[Request] = []
    for rid, (_idx, (ts, fn)) in enumerate(ordered):
        if fn not in trace.model_map:
            raise TraceFormatError(f"function '{fn}' has no model mapping")
        model_id = trace.model_map[fn]
        inp, out = sample_lengths(dataset, rng)
        limit = (max_seq_len or {}).get(model_id)
        if limit is not None and inp + out > limit:
            inp, out = _clamp_pair(inp, out, limit)
        requests.append(Request(id=rid, model_id=model_id, arrival_time=float(ts), input_len=inp, true_output_len=out))
    return requests
