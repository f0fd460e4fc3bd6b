"""Per-iteration latency tables and the scaling / cold-start cost models.

Tables hold sampled prefill and decode latencies on power-of-two grids and are
queried by linear (prefill) and bilinear (decode) interpolation. Queries below
the first sample clamp to it; queries above the last sample are errors.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .config import (
    DECODE_COEFFS,
    HW_CLASSES,
    LOAD_BANDWIDTH,
    MAX_BATCH,
    OVERESTIMATE_FACTOR,
    PREFILL_COEFFS,
    SCALE_DOWN_RATE,
    SCALE_FLOOR_SECONDS,
    SCALE_UP_RATE,
    UNLOAD_SECONDS,
    preset_of,
)


class PerfTableError(ValueError):
    pass


def sample_grid(max_value: int) -> List[int]:
    """Powers of two from 1 up to `max_value`, with `max_value` itself included."""
    if max_value < 1:
        raise PerfTableError("grid maximum must be >= 1")
    out = [1]
    while out[-1] * 2 < max_value:
        out.append(out[-1] * 2)
    if out[-1] != max_value:
        out.append(max_value)
    return out


@dataclass(frozen=True)
class Prefill:
    length: int


@dataclass(frozen=True)
class Decode:
    batch: int
    avg_len: float


IterKind = Union[Prefill, Decode]


@dataclass(frozen=True)
class CostParams:
    scale_up_rate: float = SCALE_UP_RATE
    scale_down_rate: float = SCALE_DOWN_RATE
    load_bandwidth: float = LOAD_BANDWIDTH
    overestimate_factor: float = OVERESTIMATE_FACTOR
    scale_floor: float = SCALE_FLOOR_SECONDS
    unload_latency: float = UNLOAD_SECONDS

    def __post_init__(self) -> None:
        if min(self.scale_up_rate, self.scale_down_rate, self.load_bandwidth) <= 0:
            raise ValueError("cost rates must be strictly positive")
        if self.overestimate_factor < 1:
            raise ValueError("overestimate_factor must be >= 1")


class PerfTable:
    def __init__(
        self,
        hardware_class: str,
        model_id: str,
        prefill_lens: Iterable[int],
        prefill_secs: Iterable[float],
        decode_batches: Iterable[int],
        decode_lens: Iterable[int],
        decode_secs: Iterable[Iterable[float]],
    ) -> None:
        if hardware_class not in HW_CLASSES:
            raise PerfTableError(f"unknown hardware class '{hardware_class}'")
        self.hardware_class = hardware_class
        self.model_id = model_id
        self.prefill_lens = np.asarray(list(prefill_lens), dtype=float)
        self.prefill_secs = np.asarray(list(prefill_secs), dtype=float)
        self.decode_batches = np.asarray(list(decode_batches), dtype=float)
        self.decode_lens = np.asarray(list(decode_lens), dtype=float)
        self.decode_secs = np.asarray([list(r) for r in decode_secs], dtype=float)
        self._check()

    def _check(self) -> None:
        if self.prefill_lens.size == 0 or self.prefill_lens.shape != self.prefill_secs.shape:
            raise PerfTableError(f"{self.model_id}/{self.hardware_class}: prefill samples malformed")
        if self.decode_secs.shape != (self.decode_batches.size, self.decode_lens.size) or self.decode_secs.size == 0:
            raise PerfTableError(f"{self.model_id}/{self.hardware_class}: decode grid malformed")
        for axis in (self.prefill_lens, self.decode_batches, self.decode_lens):
            if np.any(np.diff(axis) <= 0):
                raise PerfTableError(f"{self.model_id}/{self.hardware_class}: sample coordinates must increase")
        if np.any(np.diff(self.prefill_secs) < 0):
            raise PerfTableError(f"{self.model_id}/{self.hardware_class}: prefill samples must be non-decreasing")
        if np.any(np.diff(self.decode_secs, axis=0) < 0) or np.any(np.diff(self.decode_secs, axis=1) < 0):
            raise PerfTableError(f"{self.model_id}/{self.hardware_class}: decode samples must be non-decreasing")

    @property
    def l_max(self) -> int:
        return int(max(self.prefill_lens[-1], self.decode_lens[-1]))

    @property
    def b_max(self) -> int:
        return int(self.decode_batches[-1])

    @property
    def sample_count(self) -> int:
        return int(self.prefill_lens.size + self.decode_secs.size)

    def prefill_time(self, input_len: float) -> float:
        if input_len > self.prefill_lens[-1]:
            raise PerfTableError(f"prefill length {input_len} exceeds L_max {int(self.prefill_lens[-1])}")
        return float(np.interp(input_len, self.prefill_lens, self.prefill_secs))

    def decode_time(self, batch: float, avg_len: float) -> float:
        if batch > self.decode_batches[-1] or avg_len > self.decode_lens[-1]:
            raise PerfTableError(
                f"decode query ({batch}, {avg_len}) outside grid "
                f"({int(self.decode_batches[-1])}, {int(self.decode_lens[-1])})"
            )
        i0, i1, tb = _bracket(self.decode_batches, batch)
        j0, j1, tl = _bracket(self.decode_lens, avg_len)
        g = self.decode_secs
        low = g[i0, j0] + (g[i0, j1] - g[i0, j0]) * tl
        high = g[i1, j0] + (g[i1, j1] - g[i1, j0]) * tl
        return float(low + (high - low) * tb)

    def iter_time(self, kind: IterKind) -> float:
        if isinstance(kind, Prefill):
            return self.prefill_time(kind.length)
        return self.decode_time(kind.batch, kind.avg_len)


def _bracket(axis: np.ndarray, x: float) -> Tuple[int, int, float]:
    if x <= axis[0]:
        return 0, 0, 0.0
    i1 = int(np.searchsorted(axis, x, side="left"))
    if axis[i1] == x:
        return i1, i1, 0.0
    i0 = i1 - 1
    return i0, i1, float((x - axis[i0]) / (axis[i1] - axis[i0]))


def prefill_time(table: PerfTable, input_len: float) -> float:
    return table.prefill_time(input_len)


def decode_time(table: PerfTable, batch: float, avg_len: float) -> float:
    return table.decode_time(batch, avg_len)


def pessimistic_iter_time(table: PerfTable, kind: IterKind, params: CostParams) -> float:
    return table.iter_time(kind) * params.overestimate_factor


def scale_latency(params: CostParams, from_bytes: int, to_bytes: int) -> float:
    if from_bytes == to_bytes:
        raise ValueError("no-op scale must not be issued")
    if from_bytes < 0 or to_bytes < 0:
        raise ValueError("scale sizes must be non-negative")
    copied = min(from_bytes, to_bytes)
    if copied == 0:
        return params.scale_floor
    rate = params.scale_up_rate if to_bytes > from_bytes else params.scale_down_rate
    return max(params.scale_floor, copied / rate)


def cold_start_time(model, params: CostParams) -> float:
    if math.isinf(params.load_bandwidth):
        return 0.0
    return model.param_bytes / params.load_bandwidth


def synthetic_table(
    preset: str,
    hardware_class: str,
    model_id: Optional[str] = None,
    l_max: int = 4096,
    b_max: int = MAX_BATCH,
    decode_coeffs: Optional[Tuple[float, float, float]] = None,
    prefill_coeffs: Optional[Tuple[float, float]] = None,
) -> PerfTable:
    key = (preset, hardware_class)
    a, b, c = decode_coeffs or DECODE_COEFFS[key]
    p, q = prefill_coeffs or PREFILL_COEFFS[key]
    lens = sample_grid(l_max)
    batches = sample_grid(b_max)
    return PerfTable(
        hardware_class=hardware_class,
        model_id=model_id or preset,
        prefill_lens=lens,
        prefill_secs=[p * n + q for n in lens],
        decode_batches=batches,
        decode_lens=lens,
        decode_secs=[[a * bs * n + b * bs + c for n in lens] for bs in batches],
    )


def load_table_csv(path: str, hardware_class: str, model_id: str) -> PerfTable:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"perf table not found: {path}")
    prefill: Dict[int, float] = {}
    decode: Dict[Tuple[int, int], float] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["kind", "batch", "len", "seconds"]:
            raise PerfTableError(f"{path} line 1: header must be 'kind,batch,len,seconds'")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                kind, batch, length, secs = row[0].strip(), int(row[1]), int(row[2]), float(row[3])
            except (IndexError, ValueError) as exc:
                raise PerfTableError(f"{path} line {line_no}: malformed row") from exc
            if kind == "prefill":
                if batch != 1:
                    raise PerfTableError(f"{path} line {line_no}: prefill rows use batch=1")
                prefill[length] = secs
            elif kind == "decode":
                decode[(batch, length)] = secs
            else:
                raise PerfTableError(f"{path} line {line_no}: unknown kind '{kind}'")
    batches = sorted({bl[0] for bl in decode})
    lens = sorted({bl[1] for bl in decode})
    missing = [(bs, n) for bs in batches for n in lens if (bs, n) not in decode]
    if missing:
        raise PerfTableError(f"{path}: decode grid incomplete, missing {missing[:3]}")
    plens = sorted(prefill)
    return PerfTable(
        hardware_class=hardware_class,
        model_id=model_id,
        prefill_lens=plens,
        prefill_secs=[prefill[n] for n in plens],
        decode_batches=batches,
        decode_lens=lens,
        decode_secs=[[decode[(bs, n)] for n in lens] for bs in batches],
    )


def save_table_csv(table: PerfTable, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["kind", "batch", "len", "seconds"])
        for n, secs in zip(table.prefill_lens, table.prefill_secs):
            writer.writerow(["prefill", 1, int(n), repr(float(secs))])
        for i, bs in enumerate(table.decode_batches):
            for j, n in enumerate(table.decode_lens):
                writer.writerow(["decode", int(bs), int(n), repr(float(table.decode_secs[i, j]))])


class PerfBook:
    """Tables keyed by (preset, hardware class); replicas share their preset's table."""

    def __init__(self) -> None:
        self._tables: Dict[Tuple[str, str], PerfTable] = {}

    def add(self, preset: str, table: PerfTable) -> None:
        self._tables[(preset, table.hardware_class)] = table

    def table_for(self, model_id: str, hardware_class: str) -> PerfTable:
        key = (preset_of(model_id), hardware_class)
        if key not in self._tables:
            raise PerfTableError(f"no perf table for model={model_id} hardware={hardware_class}")
        return self._tables[key]

    def has(self, model_id: str, hardware_class: str) -> bool:
        return (preset_of(model_id), hardware_class) in self._tables

    def items(self):
        return sorted(self._tables.items())

    @classmethod
    def synthetic(cls, presets: Iterable[str], l_max: int = 4096, b_max: int = MAX_BATCH) -> "PerfBook":
        book = cls()
        for preset in presets:
            for hw in HW_CLASSES:
                book.add(preset, synthetic_table(preset, hw, l_max=l_max, b_max=b_max))
        return book
