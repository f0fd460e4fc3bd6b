"""KV-cache demand, watermark scaling and the per-node memory orchestrator.

The orchestrator keeps two views of node memory:

- the optimistic budget applies every issued operation's final size at issue
  time and decides whether new work may be promised;
- the pessimistic view charges an executing operation at max(from, to) and
  decides whether a scale-up may start now, otherwise it waits in the
  reservation station until enough scale-downs have completed.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .compute import Instance, headroom
from .config import OUTPUT_LEN_WINDOW
from .workload import Request, RequestState, SloSpec

logger = logging.getLogger(__name__)

SLOT_PARAMS = "params"
SLOT_KV = "kv"

_op_ids = itertools.count(1)


@dataclass
class ModelSpec:
    model_id: str
    param_bytes: int
    kv_bytes_per_token: int
    max_seq_len: int
    avg_output_len: float = 1.0
    min_total_len: Optional[int] = None
    size_class: str = ""
    _recent: Deque[int] = field(default_factory=lambda: deque(maxlen=OUTPUT_LEN_WINDOW), repr=False)

    def __post_init__(self) -> None:
        if self.min_total_len is None:
            self.min_total_len = self.max_seq_len
        if self.kv_bytes_per_token <= 0:
            raise ValueError(f"{self.model_id}: kv_bytes_per_token must be > 0")
        if self.param_bytes <= 0:
            raise ValueError(f"{self.model_id}: param_bytes must be > 0")
        if self.min_total_len < 1:
            raise ValueError(f"{self.model_id}: min_total_len must be >= 1")
        self.avg_output_len = max(1.0, float(self.avg_output_len))

    def record_completion(self, output_len: int) -> None:
        self._recent.append(int(output_len))
        self.avg_output_len = max(1.0, sum(self._recent) / len(self._recent))


class ScaleOpKind(str, Enum):
    KV_UP = "kv_up"
    KV_DOWN = "kv_down"
    MODEL_LOAD = "model_load"
    MODEL_UNLOAD = "model_unload"


class ScaleOpState(str, Enum):
    ISSUED = "issued"
    RESERVED = "reserved"
    EXECUTING = "executing"
    DONE = "done"


_GROWS = (ScaleOpKind.KV_UP, ScaleOpKind.MODEL_LOAD)


@dataclass(eq=False)
class ScaleOp:
    instance_id: int
    kind: ScaleOpKind
    from_bytes: int
    to_bytes: int
    op_id: int = field(default_factory=lambda: next(_op_ids))
    state: ScaleOpState = ScaleOpState.ISSUED
    compromised: bool = False

    def __post_init__(self) -> None:
        if self.from_bytes < 0 or self.to_bytes < 0:
            raise ValueError(f"op {self.op_id}: sizes must be non-negative")
        if self.grows and self.to_bytes <= self.from_bytes:
            raise ValueError(f"op {self.op_id}: {self.kind.value} needs to > from")
        if not self.grows and self.to_bytes >= self.from_bytes:
            raise ValueError(f"op {self.op_id}: {self.kind.value} needs to < from")

    @property
    def grows(self) -> bool:
        return self.kind in _GROWS

    @property
    def slot(self) -> Tuple[int, str]:
        kind = SLOT_PARAMS if self.kind in (ScaleOpKind.MODEL_LOAD, ScaleOpKind.MODEL_UNLOAD) else SLOT_KV
        return (self.instance_id, kind)

    @property
    def delta(self) -> int:
        return self.to_bytes - self.from_bytes

    @property
    def peak(self) -> int:
        return max(self.from_bytes, self.to_bytes)


class IssueResult(str, Enum):
    ISSUED = "issued"
    DENIED = "denied"


class DispatchResult(str, Enum):
    EXECUTING = "executing"
    RESERVED = "reserved"


class NodeMemory:
    def __init__(self, capacity: int) -> None:
        if capacity <= 0:
            raise ValueError("node capacity must be > 0")
        self.capacity = int(capacity)
        self.optimistic_budget = 0
        self.reservation_station: Deque[ScaleOp] = deque()
        self._committed: Dict[Tuple[int, str], int] = {}
        self._targets: Dict[Tuple[int, str], int] = {}
        self._chains: Dict[Tuple[int, str], List[ScaleOp]] = {}
        self._executing: Dict[int, ScaleOp] = {}

    # -- views --

    @property
    def pessimistic_view(self) -> int:
        extra = sum(op.peak - op.from_bytes for op in self._executing.values())
        return sum(self._committed.values()) + extra

    @property
    def allocated(self) -> int:
        """Bytes physically held: completed sizes plus in-flight copies at their peak."""
        return self.pessimistic_view

    @property
    def free_budget(self) -> int:
        return self.capacity - self.optimistic_budget

    def committed(self, instance_id: int, slot: str = SLOT_KV) -> int:
        return self._committed.get((instance_id, slot), 0)

    def target(self, instance_id: int, slot: str = SLOT_KV) -> int:
        key = (instance_id, slot)
        return self._targets.get(key, self._committed.get(key, 0))

    def instance_target(self, instance_id: int) -> int:
        return self.target(instance_id, SLOT_PARAMS) + self.target(instance_id, SLOT_KV)

    def target_total(self) -> int:
        keys = set(self._targets) | set(self._committed)
        return sum(self.target(iid, slot) for iid, slot in keys)

    def executing(self) -> List[ScaleOp]:
        return list(self._executing.values())

    def pending_ops(self, instance_id: int) -> List[ScaleOp]:
        out: List[ScaleOp] = []
        for (iid, _slot), chain in self._chains.items():
            if iid == instance_id:
                out.extend(chain)
        return out

    def can_issue(self, delta: int) -> bool:
        return self.optimistic_budget + delta <= self.capacity

    # -- operations --

    def issue(self, op: ScaleOp) -> IssueResult:
        if op.state != ScaleOpState.ISSUED:
            raise ValueError(f"op {op.op_id} already {op.state.value}")
        if self.target(*op.slot) != op.from_bytes:
            raise ValueError(
                f"op {op.op_id} starts from {op.from_bytes} but slot {op.slot} is heading to {self.target(*op.slot)}"
            )
        if op.grows and not self.can_issue(op.delta):
            logger.debug(
                "issue denied op=%s kind=%s delta=%d budget=%d capacity=%d",
                op.op_id, op.kind.value, op.delta, self.optimistic_budget, self.capacity,
            )
            return IssueResult.DENIED
        self.optimistic_budget += op.delta
        self._targets[op.slot] = op.to_bytes
        self._chains.setdefault(op.slot, []).append(op)
        return IssueResult.ISSUED

    def _head_of_slot(self, op: ScaleOp) -> bool:
        chain = self._chains.get(op.slot, [])
        return bool(chain) and chain[0] is op

    def _fits_now(self, op: ScaleOp) -> bool:
        return not op.grows or self.pessimistic_view + op.delta <= self.capacity

    def _start(self, op: ScaleOp) -> None:
        op.state = ScaleOpState.EXECUTING
        self._executing[op.op_id] = op

    def dispatch(self, op: ScaleOp) -> DispatchResult:
        if op.state != ScaleOpState.ISSUED:
            raise ValueError(f"op {op.op_id} must be issued before dispatch, is {op.state.value}")
        if self._head_of_slot(op) and self._fits_now(op):
            self._start(op)
            return DispatchResult.EXECUTING
        op.state = ScaleOpState.RESERVED
        self.reservation_station.append(op)
        logger.debug("op reserved op=%s kind=%s delta=%d view=%d", op.op_id, op.kind.value, op.delta, self.pessimistic_view)
        return DispatchResult.RESERVED

    def on_complete(self, op: ScaleOp) -> List[ScaleOp]:
        if op.state != ScaleOpState.EXECUTING:
            raise ValueError(f"op {op.op_id} is not executing")
        del self._executing[op.op_id]
        op.state = ScaleOpState.DONE
        self._committed[op.slot] = op.to_bytes
        chain = self._chains.get(op.slot, [])
        if chain and chain[0] is op:
            chain.pop(0)
        if not chain:
            self._chains.pop(op.slot, None)
            self._targets.pop(op.slot, None)
            if op.to_bytes == 0:
                self._committed.pop(op.slot, None)

        started: List[ScaleOp] = []
        for queued in list(self.reservation_station):
            if self._head_of_slot(queued) and self._fits_now(queued):
                self.reservation_station.remove(queued)
                self._start(queued)
                started.append(queued)
        return started


# -------------------- Demand estimation --------------------


def kv_demand(requests: Iterable[Request], model: ModelSpec) -> int:
    total = sum(r.input_len + max(r.tokens_generated, model.avg_output_len) for r in requests)
    return int(math.ceil(model.kv_bytes_per_token * max(total, model.min_total_len)))


def m_require(instance: Instance, model: ModelSpec) -> int:
    return kv_demand(instance.batch.values(), model)


class WatermarkAction(str, Enum):
    SCALE_UP = "scale_up"
    SCALE_DOWN = "scale_down"
    HOLD = "hold"


@dataclass(frozen=True)
class WatermarkDecision:
    action: WatermarkAction
    target: int = 0


def recommend(m_required: int, w: float) -> int:
    return int(math.ceil(m_required * (1 + w / 100.0)))


def watermark_decide(m_cur: int, m_required: int, w: float) -> WatermarkDecision:
    if w < 0:
        raise ValueError("watermark must be >= 0")
    m_recommend = recommend(m_required, w)
    if m_cur < m_required:
        return WatermarkDecision(WatermarkAction.SCALE_UP, m_recommend)
    if m_recommend * (1 + w / 100.0) < m_cur:
        return WatermarkDecision(WatermarkAction.SCALE_DOWN, m_recommend)
    return WatermarkDecision(WatermarkAction.HOLD, m_cur)


class MemStatus(str, Enum):
    OK = "ok"
    OK_COMPROMISED = "ok_compromised"
    FAIL = "fail"


@dataclass(frozen=True)
class MemCheck:
    status: MemStatus
    current: int = 0
    target: int = 0

    @property
    def ok(self) -> bool:
        return self.status != MemStatus.FAIL

    @property
    def delta(self) -> int:
        return self.target - self.current

    @property
    def needs_op(self) -> bool:
        return self.ok and self.target > self.current


def shadow_mem_check(
    node_mem: NodeMemory,
    instance: Instance,
    new_req: Request,
    model: ModelSpec,
    w: float,
    extra_requests: Sequence[Request] = (),
    reserved_bytes: int = 0,
    freed_bytes: int = 0,
) -> MemCheck:
    """Whether `instance` can grow its KV cache to take `new_req`. Pure.

    `reserved_bytes` is budget already promised elsewhere on this node and
    `freed_bytes` budget that a pending plan will release first.
    """
    current = max(node_mem.target(instance.instance_id, SLOT_KV), instance.kv_target)
    required = kv_demand(list(instance.batch.values()) + list(extra_requests) + [new_req], model)
    if required <= current:
        return MemCheck(MemStatus.OK, current, current)
    offset = reserved_bytes - freed_bytes
    wanted = recommend(required, w)
    if node_mem.can_issue(wanted - current + offset):
        return MemCheck(MemStatus.OK, current, wanted)
    if node_mem.can_issue(required - current + offset):
        return MemCheck(MemStatus.OK_COMPROMISED, current, required)
    return MemCheck(MemStatus.FAIL, current, required)


class UnderestimateKind(str, Enum):
    RESCALED = "rescaled"
    EVICTED = "evicted"


@dataclass
class UnderestimateOutcome:
    kind: UnderestimateKind
    op: Optional[ScaleOp] = None
    request: Optional[Request] = None


def handle_underestimate(
    node_mem: NodeMemory,
    instance: Instance,
    slo: SloSpec,
    now: float,
    w: float,
    op_ids: Optional[Iterator[int]] = None,
) -> UnderestimateOutcome:
    """The batch outgrew its KV cache: grow it, or give up the least urgent request."""
    model = instance.model
    current = node_mem.target(instance.instance_id, SLOT_KV)
    need = max(m_require(instance, model), instance.kv_live_need())
    for target in (recommend(need, w), need):
        if target <= current:
            continue
        op = ScaleOp(
            instance.instance_id, ScaleOpKind.KV_UP, current, target,
            op_id=next(op_ids or _op_ids), compromised=target == need,
        )
        if node_mem.issue(op) == IssueResult.ISSUED:
            return UnderestimateOutcome(UnderestimateKind.RESCALED, op=op)
    victim = max(instance.batch.values(), key=lambda r: (headroom(r, slo, now), -r.id))
    del instance.batch[victim.id]
    victim.state = RequestState.EVICTED
    victim.needs_prefill = True
    victim.instance_id = None
    victim.evictions += 1
    logger.debug("evicted request=%s instance=%s headroom=%.3f", victim.id, instance.instance_id, headroom(victim, slo, now))
    return UnderestimateOutcome(UnderestimateKind.EVICTED, request=victim)
