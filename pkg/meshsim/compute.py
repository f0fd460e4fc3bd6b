"""Token-level compute scheduling inside one node and shadow validation.

A node runs one iteration at a time. Each cycle picks the instance holding the
request with the least headroom; that instance either prefills one waiting
request or decodes its whole batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .perfmodel import CostParams, Decode, PerfTable, Prefill, pessimistic_iter_time
from .workload import Request, RequestState, SloSpec

if TYPE_CHECKING:
    from .memory import ModelSpec

MAX_SHADOW_STEPS = 100_000


class InstanceState(str, Enum):
    LOADING = "loading"
    IDLE = "idle"
    ACTIVE = "active"
    DRAINING = "draining"


class PlanKind(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(eq=False)
class Instance:
    instance_id: int
    model: "ModelSpec"
    node_id: str
    table: PerfTable
    batch: Dict[int, Request] = field(default_factory=dict)
    state: InstanceState = InstanceState.LOADING
    idle_since: Optional[float] = None
    kv_alloc: int = 0
    kv_target: int = 0
    ready_at: float = 0.0
    scaling_until: Optional[float] = None
    kv_ready_at: Optional[float] = None
    max_batch: int = 0

    def __post_init__(self) -> None:
        if not self.max_batch:
            self.max_batch = self.table.b_max

    @property
    def batch_size(self) -> int:
        return len(self.batch)

    @property
    def model_id(self) -> str:
        return self.model.model_id

    @property
    def scaling(self) -> bool:
        return self.scaling_until is not None

    def requests(self) -> List[Request]:
        return sorted(self.batch.values(), key=lambda r: r.id)

    def decoding(self) -> List[Request]:
        return [r for r in self.requests() if not r.needs_prefill]

    def waiting_prefill(self) -> List[Request]:
        return [r for r in self.requests() if r.needs_prefill]

    def kv_live_need(self) -> int:
        """KV bytes the next iteration writes into, counting every batched request."""
        tokens = sum(r.context_len + 1 for r in self.batch.values())
        return self.model.kv_bytes_per_token * tokens

    def kv_fits(self) -> bool:
        return self.kv_live_need() <= self.kv_alloc

    def runnable(self) -> bool:
        return self.state == InstanceState.ACTIVE and not self.scaling and bool(self.batch) and self.kv_fits()


@dataclass(frozen=True)
class IterationPlan:
    instance_id: int
    kind: PlanKind
    request_ids: Tuple[int, ...]
    predicted_duration: float

    @property
    def prefill_request(self) -> Optional[int]:
        return self.request_ids[0] if self.kind == PlanKind.PREFILL else None


@dataclass
class IterationResult:
    emissions: List[Tuple[Request, float]] = field(default_factory=list)
    completed: List[Request] = field(default_factory=list)
    decode_tokens: int = 0


class ValidationCase(int, Enum):
    ACCEPT = 0
    NEW_REQUEST_LATE = 1
    EXISTING_REQUEST_LATE = 2
    DECODE_ROUND_OVER_TPOT = 3


@dataclass(frozen=True)
class Validation:
    case: ValidationCase
    detail: str = ""

    @property
    def accepted(self) -> bool:
        return self.case == ValidationCase.ACCEPT


ACCEPT = Validation(ValidationCase.ACCEPT)


def headroom(req: Request, slo: SloSpec, now: float) -> float:
    return req.arrival_time + slo.ttft(req.input_len) + slo.tpot * req.tokens_generated - now


def instance_headroom(inst: Instance, slo: SloSpec, now: float) -> float:
    return min(headroom(r, slo, now) for r in inst.batch.values())


def avg_context(requests: Sequence[Request]) -> float:
    return sum(r.context_len for r in requests) / len(requests)


def plan_for(inst: Instance, slo: SloSpec, now: float) -> IterationPlan:
    waiting = inst.waiting_prefill()
    if waiting:
        req = min(waiting, key=lambda r: (headroom(r, slo, now), r.id))
        return IterationPlan(
            instance_id=inst.instance_id,
            kind=PlanKind.PREFILL,
            request_ids=(req.id,),
            predicted_duration=inst.table.prefill_time(req.context_len),
        )
    batch = inst.decoding()
    return IterationPlan(
        instance_id=inst.instance_id,
        kind=PlanKind.DECODE,
        request_ids=tuple(r.id for r in batch),
        predicted_duration=inst.table.decode_time(len(batch), avg_context(batch)),
    )


def select_next(node, now: float, slo: SloSpec) -> Optional[IterationPlan]:
    runnable = [inst for inst in node.instances.values() if inst.runnable()]
    if not runnable:
        return None
    best = min(runnable, key=lambda inst: (instance_headroom(inst, slo, now), inst.instance_id))
    return plan_for(best, slo, now)


def complete_iteration(node, plan: IterationPlan, now: float) -> IterationResult:
    result = IterationResult()
    inst = node.instances.get(plan.instance_id)
    if inst is None:
        return result
    for rid in plan.request_ids:
        req = inst.batch.get(rid)
        if req is None:
            continue
        req.emission_times.append(now)
        result.emissions.append((req, now))
        if plan.kind == PlanKind.PREFILL:
            req.needs_prefill = False
        else:
            result.decode_tokens += 1
        req.state = RequestState.DECODING
        if req.tokens_generated >= req.true_output_len:
            req.state = RequestState.COMPLETE
            del inst.batch[rid]
            result.completed.append(req)
    return result


# -------------------- Shadow validation --------------------


@dataclass
class _VReq:
    rid: int
    deadline0: float
    tpot: float
    emitted: int
    ctx: int
    total: int
    prefilled: bool
    is_new: bool

    def headroom(self, t: float) -> float:
        return self.deadline0 + self.tpot * self.emitted - t

    @property
    def final_ctx(self) -> int:
        return self.ctx + self.total - self.emitted - 1


@dataclass
class _VInst:
    iid: int
    table: PerfTable
    ready_at: float
    reqs: List[_VReq]

    def waiting(self) -> List[_VReq]:
        return [r for r in self.reqs if not r.prefilled]

    def decoding(self) -> List[_VReq]:
        return [r for r in self.reqs if r.prefilled]


def assumed_total(req: Request, avg_output_len: float, max_seq_len: Optional[int] = None) -> int:
    """Tokens a request is assumed to produce: the running average, at least one more."""
    total = int(math.ceil(avg_output_len))
    if max_seq_len is not None:
        total = min(total, max_seq_len - req.input_len)
    return max(req.tokens_generated + 1, total)


def _vreq(req: Request, slo: SloSpec, model: "ModelSpec", is_new: bool, moving: bool = False) -> _VReq:
    """`moving` requests are about to be admitted somewhere and start with a prefill."""
    return _VReq(
        rid=req.id,
        deadline0=req.arrival_time + slo.ttft(req.input_len),
        tpot=slo.tpot,
        emitted=req.tokens_generated,
        ctx=req.context_len,
        total=assumed_total(req, model.avg_output_len, model.max_seq_len),
        prefilled=not (moving or is_new or req.needs_prefill),
        is_new=is_new,
    )


def _emit(r: _VReq) -> None:
    r.emitted += 1
    r.ctx += 1
    r.prefilled = True


def _late(r: _VReq, what: str, t: float) -> Validation:
    case = ValidationCase.NEW_REQUEST_LATE if r.is_new else ValidationCase.EXISTING_REQUEST_LATE
    return Validation(case, f"request={r.rid} {what} at t={t:.4f}")


def _decode_round(vinsts: Iterable[_VInst], params: CostParams, final: bool = False) -> float:
    """One decode iteration of every instance, back to back.

    With `final` each batch is costed at the longest context any of its
    requests reaches before finishing.
    """
    total = 0.0
    for vi in vinsts:
        dec = vi.decoding()
        if not dec:
            continue
        if final:
            length = float(min(max(r.final_ctx for r in dec), vi.table.l_max))
        else:
            length = sum(r.ctx for r in dec) / len(dec)
        total += pessimistic_iter_time(vi.table, Decode(len(dec), length), params)
    return total


def _settled(active: Sequence[_VInst], t: float, slo: SloSpec, params: CostParams) -> bool:
    """No prefill left, and the worst round fits every request's headroom.

    From such a state least-headroom scheduling emits every token on time, so
    the replay can stop.
    """
    if any(vi.ready_at > t or vi.waiting() for vi in active):
        return False
    worst = _decode_round(active, params, final=True)
    if worst > slo.tpot:
        return False
    return all(r.headroom(t) >= worst for vi in active for r in vi.reqs)


def _replay(
    vinsts: Dict[int, _VInst], start: float, slo: SloSpec, params: CostParams, new_pending: bool
) -> Validation:
    t = start
    owed_decode: Set[int] = set()
    for _ in range(MAX_SHADOW_STEPS):
        active = [vi for vi in vinsts.values() if vi.reqs]
        if not active:
            return ACCEPT
        if not new_pending and not owed_decode and _settled(active, t, slo, params):
            return ACCEPT
        ready = [vi for vi in active if vi.ready_at <= t]
        if not ready:
            t = min(vi.ready_at for vi in active)
            continue
        vi = min(ready, key=lambda v: (min(r.headroom(t) for r in v.reqs), v.iid))
        waiting = vi.waiting()
        if waiting:
            r = min(waiting, key=lambda x: (x.headroom(t), x.rid))
            t += pessimistic_iter_time(vi.table, Prefill(r.ctx), params)
            if r.headroom(t) < 0:
                return _late(r, "prefill ends", t)
            _emit(r)
            if r.is_new:
                new_pending = False
            # checked after every prefill, not only the new request's
            round_time = _decode_round(vinsts.values(), params)
            if round_time > slo.tpot:
                return Validation(
                    ValidationCase.DECODE_ROUND_OVER_TPOT,
                    f"decode round {round_time:.4f}s after request={r.rid} exceeds tpot {slo.tpot}s",
                )
            owed_decode = {v.iid for v in vinsts.values() if v.decoding()}
        else:
            dec = vi.decoding()
            avg_len = sum(x.ctx for x in dec) / len(dec)
            t += pessimistic_iter_time(vi.table, Decode(len(dec), avg_len), params)
            for r in dec:
                if r.headroom(t) < 0:
                    return _late(r, "decode ends", t)
                _emit(r)
            owed_decode.discard(vi.iid)
        vi.reqs = [r for r in vi.reqs if r.emitted < r.total]
        owed_decode = {iid for iid in owed_decode if vinsts[iid].reqs}
    return Validation(ValidationCase.DECODE_ROUND_OVER_TPOT, f"replay did not settle within {MAX_SHADOW_STEPS} steps")


def _shadow_view(
    node,
    now: float,
    slo: SloSpec,
    insts: Mapping[int, Instance],
    planned: Mapping[int, Sequence[Request]],
    stalls: Mapping[int, float],
    target: Optional[Instance] = None,
    new_req: Optional[Request] = None,
) -> Dict[int, _VInst]:
    vinsts: Dict[int, _VInst] = {}
    for iid in sorted(insts):
        inst = insts[iid]
        if inst.state == InstanceState.DRAINING:
            continue
        reqs = [_vreq(r, slo, inst.model, False) for r in inst.requests()]
        reqs += [_vreq(r, slo, inst.model, False, moving=True) for r in planned.get(iid, ())]
        ready = max(now, inst.ready_at if inst.state == InstanceState.LOADING else now)
        kv_ready = max(now, inst.scaling_until or now, inst.kv_ready_at or now)
        ready = max(ready, kv_ready)
        if iid in stalls:
            ready = max(ready, kv_ready + stalls[iid])
        if target is not None and new_req is not None and iid == target.instance_id:
            reqs.append(_vreq(new_req, slo, inst.model, True))
        vinsts[iid] = _VInst(iid=iid, table=inst.table, ready_at=ready, reqs=reqs)

    inflight = getattr(node, "current_plan", None)
    if inflight is not None and inflight.instance_id in vinsts:
        vi = vinsts[inflight.instance_id]
        for r in vi.reqs:
            if r.rid in inflight.request_ids and not r.is_new:
                _emit(r)
        vi.reqs = [r for r in vi.reqs if r.emitted < r.total]
    return vinsts


def shadow_validate(
    node,
    target: Instance,
    new_req: Request,
    now: float,
    slo: SloSpec,
    params: CostParams,
    planned: Optional[Mapping[int, Sequence[Request]]] = None,
    excluded: Iterable[int] = (),
    extra_instances: Sequence[Instance] = (),
    target_stall: float = 0.0,
    stalls: Optional[Mapping[int, float]] = None,
) -> Validation:
    """Replay the node's future iterations with `new_req` added to `target`.

    Nothing on the node is modified. `planned` holds requests already promised to
    instances by the caller's current plan, `excluded` hides instances that the
    plan removes, and `extra_instances` adds instances not yet on the node.
    `target_stall` delays the target by a memory scaling operation issued now;
    `stalls` does the same for instances the plan already grows.
    """
    excluded = set(excluded)
    insts: Dict[int, Instance] = {iid: i for iid, i in node.instances.items() if iid not in excluded}
    for extra in extra_instances:
        insts[extra.instance_id] = extra
    if target.instance_id not in insts:
        insts[target.instance_id] = target

    delays = {iid: s for iid, s in (stalls or {}).items() if s > 0}
    if target_stall > 0:
        delays[target.instance_id] = max(target_stall, delays.get(target.instance_id, 0.0))
    vinsts = _shadow_view(node, now, slo, insts, planned or {}, delays, target, new_req)
    start = max(now, getattr(node, "busy_until", now) or now)
    return _replay(vinsts, start, slo, params, new_pending=True)


def validate_stall(node, inst: Instance, stall: float, now: float, slo: SloSpec, params: CostParams) -> Validation:
    """Check that pausing `inst` for `stall` seconds keeps every request on the node on time."""
    vinsts = _shadow_view(node, now, slo, dict(node.instances), {}, {inst.instance_id: stall})
    start = max(now, getattr(node, "busy_until", now) or now)
    return _replay(vinsts, start, slo, params, new_pending=False)
