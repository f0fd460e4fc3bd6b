"""Cluster control plane: request routing, instance lifecycle and event handlers.

All state changes happen inside engine event handlers, so one simulation is a
single-threaded, deterministic sequence of events.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .compute import (
    Instance,
    InstanceState,
    IterationPlan,
    complete_iteration,
    select_next,
    shadow_validate,
    validate_stall,
)
from .config import (
    BASELINE_THRESHOLDS,
    HW_CPU,
    HW_GPU,
    KEEP_ALIVE_SECONDS,
    POLICIES,
    POLICY_MESH,
    WATERMARK_PERCENT,
)
from .defrag import Placement, PreemptionPlan, Tentative, pick_instance, plan_preemption
from .memory import (
    SLOT_KV,
    SLOT_PARAMS,
    DispatchResult,
    IssueResult,
    MemCheck,
    MemStatus,
    ModelSpec,
    NodeMemory,
    ScaleOp,
    ScaleOpKind,
    UnderestimateKind,
    WatermarkAction,
    handle_underestimate,
    m_require,
    shadow_mem_check,
    watermark_decide,
)
from .metrics import Recorder
from .perfmodel import CostParams, PerfBook, cold_start_time, scale_latency
from .simcore import Engine, Event, EventKind, SimulationError
from .workload import Request, RequestState, SloSpec

logger = logging.getLogger(__name__)


@dataclass
class Policy:
    kind: str = POLICY_MESH
    disable_sharing: bool = False
    disable_cpu: bool = False
    disable_defrag: bool = False
    disable_validation: bool = False
    thresholds: Dict[Tuple[str, str], int] = field(default_factory=lambda: dict(BASELINE_THRESHOLDS))

    def __post_init__(self) -> None:
        if self.kind not in POLICIES:
            raise ValueError(f"unknown policy '{self.kind}'")
        if any(v < 1 for v in self.thresholds.values()):
            raise ValueError("concurrency thresholds must be >= 1")


@dataclass(eq=False)
class Node:
    node_id: str
    hardware_class: str
    mem: NodeMemory
    instances: Dict[int, Instance] = field(default_factory=dict)
    current_plan: Optional[IterationPlan] = None
    busy_until: float = 0.0
    kicking: bool = False

    @property
    def in_use(self) -> bool:
        return bool(self.instances)


class RouteKind(str, Enum):
    ADMITTED = "admitted"
    PREEMPTED = "preempted"
    COLD_START = "cold_start"
    QUEUED = "queued"
    DROPPED = "dropped"


@dataclass(frozen=True)
class RouteOutcome:
    kind: RouteKind
    node_id: str = ""
    instance_id: Optional[int] = None


DROPPED = RouteOutcome(RouteKind.DROPPED)


class Cluster:
    def __init__(
        self,
        nodes: Iterable[Node],
        models: Dict[str, ModelSpec],
        perf: PerfBook,
        engine: Engine,
        slo: Optional[SloSpec] = None,
        params: Optional[CostParams] = None,
        policy: Optional[Policy] = None,
        watermark: float = WATERMARK_PERCENT,
        keep_alive: float = KEEP_ALIVE_SECONDS,
        jitter: float = 0.0,
        seed: int = 0,
        recorder: Optional[Recorder] = None,
    ) -> None:
        self.nodes: Dict[str, Node] = {n.node_id: n for n in nodes}
        self.models = models
        self.perf = perf
        self.engine = engine
        self.slo = slo or SloSpec()
        self.params = params or CostParams()
        self.policy = policy or Policy()
        self.watermark = float(watermark)
        self.keep_alive = float(keep_alive)
        self.jitter = float(jitter)
        self.rng = np.random.default_rng(seed)
        self.recorder = recorder or Recorder()
        self._instance_ids: Iterator[int] = itertools.count(1)
        self._op_ids: Iterator[int] = itertools.count(1)
        self._instance_node: Dict[int, str] = {}
        for node in self.nodes.values():
            self.recorder.register_node(node.node_id, node.hardware_class)

        self.baseline = None
        if self.policy.kind != POLICY_MESH:
            from .baselines import ExclusiveRouter

            self.baseline = ExclusiveRouter(self)

        engine.on(EventKind.REQUEST_ARRIVAL, self._on_arrival)
        engine.on(EventKind.ITERATION_COMPLETE, self._on_iteration_complete)
        engine.on(EventKind.SCALE_OP_COMPLETE, self._on_scale_op_complete)
        engine.on(EventKind.COLD_START_COMPLETE, self._on_cold_start_complete)
        engine.on(EventKind.KEEP_ALIVE_CHECK, self._on_keep_alive)

    # -------------------- lookups --------------------

    @property
    def now(self) -> float:
        return self.engine.now

    def node_order(self) -> List[Node]:
        cpu = [] if self.policy.disable_cpu else sorted(
            (n for n in self.nodes.values() if n.hardware_class == HW_CPU), key=lambda n: n.node_id
        )
        gpu = sorted((n for n in self.nodes.values() if n.hardware_class == HW_GPU), key=lambda n: n.node_id)
        return cpu + gpu

    def instances_of(self, model_id: str) -> List[Tuple[Node, Instance]]:
        out = []
        for node in self.node_order():
            for inst in node.instances.values():
                if inst.model_id == model_id and inst.state != InstanceState.DRAINING:
                    out.append((node, inst))
        return out

    def node_of(self, instance_id: int) -> Optional[Node]:
        node_id = self._instance_node.get(instance_id)
        return self.nodes.get(node_id) if node_id else None

    def next_op_id(self) -> int:
        return next(self._op_ids)

    def new_instance(self, node: Node, model: ModelSpec, now: float) -> Instance:
        table = self.perf.table_for(model.model_id, node.hardware_class)
        return Instance(
            instance_id=next(self._instance_ids),
            model=model,
            node_id=node.node_id,
            table=table,
            state=InstanceState.LOADING,
            ready_at=now + cold_start_time(model, self.params),
        )

    def kv_stall(self, node: Node, inst: Instance, mem: MemCheck, freed: int = 0, tentative: Optional[Tentative] = None) -> float:
        """Seconds the KV grow behind `mem` pauses `inst`, after its queued grows.

        The grow is chained after whatever `tentative` already promised the
        instance. Infinite when the grow would wait on memory held by others.
        """
        base = tentative.kv_stall.get(inst.instance_id, 0.0) if tentative else 0.0
        if not mem.needs_op:
            return base
        start = max(mem.current, tentative.kv_target.get(inst.instance_id, 0) if tentative else 0)
        stall = base
        if mem.target > start:
            stall += scale_latency(self.params, start, mem.target)
        if freed > 0:
            stall += max(self.params.unload_latency, self.params.scale_floor)
        if node.mem.reservation_station:
            return math.inf
        if node.mem.pessimistic_view - freed + mem.delta > node.mem.capacity:
            return math.inf
        return stall

    # -------------------- workload --------------------

    def submit(self, requests: Iterable[Request]) -> int:
        count = 0
        for req in requests:
            self.engine.post(req.arrival_time, EventKind.REQUEST_ARRIVAL, req, f"req-{req.id}")
            count += 1
        return count

    def _on_arrival(self, event: Event) -> None:
        req: Request = event.payload
        self.recorder.arrival(req)
        self.route(req, event.time)

    def route(self, req: Request, now: float, skip_instance: Optional[int] = None) -> RouteOutcome:
        if self.baseline is not None:
            return self.baseline.route(req, now, skip_instance)
        return self.route_request(req, now, skip_instance)

    def drop(self, req: Request, now: float, reason: str) -> RouteOutcome:
        req.state = RequestState.DROPPED
        req.instance_id = None
        self.recorder.dropped(req, now)
        logger.debug("drop request=%s model=%s reason=%s", req.id, req.model_id, reason)
        return DROPPED

    # -------------------- mesh routing --------------------

    def _candidates(self, model_id: str, tentative: Tentative) -> List[Tuple[Node, Instance]]:
        out: List[Tuple[Node, Instance]] = []
        for hw in (HW_CPU, HW_GPU):
            group = [
                (node, inst)
                for node, inst in self.instances_of(model_id)
                if node.hardware_class == hw
                and node.node_id not in tentative.avoid_nodes
                and inst.instance_id not in tentative.excluded
            ]
            ordered = pick_instance(model_id, [inst for _n, inst in group], spread=self.policy.disable_defrag)
            out.extend((self.nodes[inst.node_id], inst) for inst in ordered)
            for node_id in sorted(tentative.new_instances):
                node = self.nodes[node_id]
                if node.hardware_class != hw:
                    continue
                out.extend((node, inst) for inst in tentative.new_instances[node_id] if inst.model_id == model_id)
        return out

    def _try_instance(self, node: Node, inst: Instance, req: Request, now: float, tentative: Tentative) -> Tuple[Optional[Placement], MemCheck]:
        planned = tentative.planned.get(inst.instance_id, [])
        mem = shadow_mem_check(
            node.mem, inst, req, inst.model, self.watermark,
            extra_requests=planned, reserved_bytes=tentative.reserved.get(node.node_id, 0),
        )
        if inst.batch_size + len(planned) >= inst.max_batch or not mem.ok:
            return None, mem
        stall = self.kv_stall(node, inst, mem, tentative=tentative)
        if not self.policy.disable_validation:
            verdict = shadow_validate(
                node, inst, req, now, self.slo, self.params,
                planned=tentative.planned,
                excluded=tentative.excluded,
                extra_instances=tentative.new_instances.get(node.node_id, ()),
                target_stall=stall,
                stalls=tentative.kv_stall,
            )
            if not verdict.accepted:
                logger.debug("validation rejected request=%s instance=%s case=%d", req.id, inst.instance_id, verdict.case)
                return None, mem
        return Placement(node.node_id, inst, mem, stall=stall), mem

    def _cold_start_nodes(self, model: ModelSpec, tentative: Tentative) -> List[Node]:
        out: List[Node] = []
        for hw in (HW_CPU, HW_GPU):
            group = []
            for node in self.node_order():
                if node.hardware_class != hw or node.node_id in tentative.avoid_nodes:
                    continue
                if not self.perf.has(model.model_id, hw):
                    continue
                pending = tentative.new_instances.get(node.node_id, [])
                if self.policy.disable_sharing and (node.instances or pending):
                    continue
                free = node.mem.free_budget - tentative.reserved.get(node.node_id, 0)
                if free < model.param_bytes + model.kv_bytes_per_token * model.min_total_len:
                    continue
                group.append((free, node))
            if self.policy.disable_defrag:
                group.sort(key=lambda item: (-item[0], item[1].node_id))
            else:
                # pack: nodes already hosting instances first, fullest first
                group.sort(key=lambda item: (not item[1].in_use, item[0], item[1].node_id))
            out.extend(node for _free, node in group)
        return out

    def _try_cold_start(self, node: Node, req: Request, now: float, tentative: Tentative) -> Optional[Placement]:
        model = self.models[req.model_id]
        inst = self.new_instance(node, model, now)
        mem = shadow_mem_check(
            node.mem, inst, req, model, self.watermark,
            reserved_bytes=tentative.reserved.get(node.node_id, 0) + model.param_bytes,
        )
        if not mem.ok:
            return None
        if not self.policy.disable_validation:
            extras = list(tentative.new_instances.get(node.node_id, ())) + [inst]
            verdict = shadow_validate(
                node, inst, req, now, self.slo, self.params,
                planned=tentative.planned,
                excluded=tentative.excluded,
                extra_instances=extras,
                stalls=tentative.kv_stall,
            )
            if not verdict.accepted:
                return None
        return Placement(node.node_id, inst, mem, cold_start=True)

    def find_placement(self, req: Request, now: float, tentative: Optional[Tentative] = None) -> Optional[Placement]:
        """First existing instance, else first cold start, that validates. Pure."""
        tentative = tentative or Tentative()
        for node, inst in self._candidates(req.model_id, tentative):
            placement, _mem = self._try_instance(node, inst, req, now, tentative)
            if placement is not None:
                return placement
        for node in self._cold_start_nodes(self.models[req.model_id], tentative):
            placement = self._try_cold_start(node, req, now, tentative)
            if placement is not None:
                return placement
        return None

    def route_request(self, req: Request, now: float, skip_instance: Optional[int] = None) -> RouteOutcome:
        if req.model_id not in self.models:
            return self.drop(req, now, "unknown model")
        tentative = Tentative()
        blocked: List[Tuple[Node, Instance]] = []
        for node, inst in self._candidates(req.model_id, tentative):
            if inst.instance_id == skip_instance:
                continue
            placement, mem = self._try_instance(node, inst, req, now, tentative)
            if placement is not None:
                self.admit(placement, req, now)
                return RouteOutcome(RouteKind.ADMITTED, node.node_id, inst.instance_id)
            if inst.batch_size < inst.max_batch:
                blocked.append((node, inst))

        if not self.policy.disable_defrag:
            for node, inst in blocked:
                plan = plan_preemption(self, node, inst, req, now)
                if plan is not None:
                    self.commit_preemption(node, plan, req, now)
                    return RouteOutcome(RouteKind.PREEMPTED, node.node_id, inst.instance_id)

        for node in self._cold_start_nodes(self.models[req.model_id], tentative):
            placement = self._try_cold_start(node, req, now, tentative)
            if placement is not None:
                self.admit(placement, req, now)
                return RouteOutcome(RouteKind.COLD_START, node.node_id, placement.instance.instance_id)
        return self.drop(req, now, "no instance validates")

    def commit_preemption(self, node: Node, plan: PreemptionPlan, req: Request, now: float) -> None:
        grower = node.instances[plan.grower]
        for vid in plan.victims:
            victim = node.instances[vid]
            for moved in victim.requests():
                del victim.batch[moved.id]
                moved.state = RequestState.EVICTED
                moved.needs_prefill = True
                moved.instance_id = None
                moved.evictions += 1
            self.unload(node, victim, now)
        for moved, placement in plan.displaced:
            self.admit(placement, moved, now)
        logger.debug(
            "preemption grower=%s victims=%s displaced=%d freed=%d",
            grower.instance_id, plan.victims, len(plan.displaced), plan.freed_bytes,
        )
        self.recorder.preemption(len(plan.victims), len(plan.displaced))
        self.admit(Placement(node.node_id, grower, plan.mem), req, now)

    # -------------------- lifecycle --------------------

    def admit(self, placement: Placement, req: Request, now: float) -> None:
        node = self.nodes[placement.node_id]
        inst = placement.instance
        if placement.cold_start:
            self.start_instance(node, inst, now)
        inst.batch[req.id] = req
        req.instance_id = inst.instance_id
        req.state = RequestState.PENDING
        req.needs_prefill = True
        if inst.state == InstanceState.IDLE:
            inst.state = InstanceState.ACTIVE
            inst.idle_since = None
        mem = placement.mem
        current = node.mem.target(inst.instance_id, SLOT_KV)
        if mem.ok and mem.target > current:
            op = ScaleOp(
                inst.instance_id, ScaleOpKind.KV_UP, current, mem.target,
                op_id=self.next_op_id(), compromised=mem.status == MemStatus.OK_COMPROMISED,
            )
            if not self.issue(node, op, now):
                logger.warning("admit kv grow denied request=%s instance=%s", req.id, inst.instance_id)
        self.recorder.admitted(req, node.hardware_class)
        self.kick(node, now)

    def start_instance(self, node: Node, inst: Instance, now: float, kv_bytes: int = 0) -> None:
        node.instances[inst.instance_id] = inst
        self._instance_node[inst.instance_id] = node.node_id
        inst.state = InstanceState.LOADING
        self.recorder.node_in_use(node.node_id, True, now)
        self.recorder.cold_start(inst.model_id, node.hardware_class)
        load = ScaleOp(inst.instance_id, ScaleOpKind.MODEL_LOAD, 0, inst.model.param_bytes, op_id=self.next_op_id())
        if not self.issue(node, load, now):
            raise SimulationError(f"model load denied instance={inst.instance_id} node={node.node_id}")
        if kv_bytes > 0:
            kv = ScaleOp(inst.instance_id, ScaleOpKind.KV_UP, 0, kv_bytes, op_id=self.next_op_id())
            if not self.issue(node, kv, now):
                raise SimulationError(f"kv allocation denied instance={inst.instance_id} node={node.node_id}")
        logger.debug("cold start instance=%s model=%s node=%s", inst.instance_id, inst.model_id, node.node_id)

    def unload(self, node: Node, inst: Instance, now: float) -> None:
        if inst.state == InstanceState.DRAINING:
            return
        inst.state = InstanceState.DRAINING
        inst.idle_since = None
        kv = node.mem.target(inst.instance_id, SLOT_KV)
        if kv > 0:
            self.issue(node, ScaleOp(inst.instance_id, ScaleOpKind.KV_DOWN, kv, 0, op_id=self.next_op_id()), now)
        params = node.mem.target(inst.instance_id, SLOT_PARAMS)
        if params > 0:
            self.issue(node, ScaleOp(inst.instance_id, ScaleOpKind.MODEL_UNLOAD, params, 0, op_id=self.next_op_id()), now)
        self._maybe_remove(node, inst, now)

    def _maybe_remove(self, node: Node, inst: Instance, now: float) -> None:
        if inst.state != InstanceState.DRAINING or node.mem.pending_ops(inst.instance_id):
            return
        if node.mem.committed(inst.instance_id, SLOT_KV) or node.mem.committed(inst.instance_id, SLOT_PARAMS):
            return
        node.instances.pop(inst.instance_id, None)
        self._instance_node.pop(inst.instance_id, None)
        self.recorder.node_in_use(node.node_id, node.in_use, now)
        logger.debug("instance removed instance=%s node=%s", inst.instance_id, node.node_id)
        if self.baseline is not None and not node.in_use:
            self.baseline.on_node_free(node, now)

    def _mark_idle(self, inst: Instance, now: float) -> None:
        inst.state = InstanceState.IDLE
        inst.idle_since = now
        self.engine.post(now + self.keep_alive, EventKind.KEEP_ALIVE_CHECK, inst.instance_id, f"inst-{inst.instance_id}")

    def keep_alive_reap(self, now: float) -> List[int]:
        reaped: List[int] = []
        for node in sorted(self.nodes.values(), key=lambda n: n.node_id):
            for inst in list(node.instances.values()):
                if inst.state != InstanceState.IDLE or inst.idle_since is None:
                    continue
                if now - inst.idle_since >= self.keep_alive - 1e-12:
                    self.unload(node, inst, now)
                    reaped.append(inst.instance_id)
        return reaped

    # -------------------- memory ops --------------------

    def issue(self, node: Node, op: ScaleOp, now: float) -> bool:
        if node.mem.issue(op) == IssueResult.DENIED:
            return False
        inst = node.instances.get(op.instance_id)
        if inst is not None and op.slot[1] == SLOT_KV:
            inst.kv_target = op.to_bytes
            chain_start = max(now, inst.scaling_until or now, inst.kv_ready_at or now)
            inst.kv_ready_at = chain_start + scale_latency(self.params, op.from_bytes, op.to_bytes)
        self.recorder.scale_op(op.kind.value)
        if node.mem.dispatch(op) == DispatchResult.EXECUTING:
            self._begin(node, op, now)
        return True

    def _begin(self, node: Node, op: ScaleOp, now: float) -> None:
        inst = node.instances.get(op.instance_id)
        if op.kind == ScaleOpKind.MODEL_LOAD:
            latency = cold_start_time(inst.model, self.params) if inst else 0.0
            if inst is not None:
                inst.ready_at = now + latency
            self.engine.post(now + latency, EventKind.COLD_START_COMPLETE, (node.node_id, op), f"op-{op.op_id}")
            return
        if op.kind == ScaleOpKind.MODEL_UNLOAD:
            latency = self.params.unload_latency
        else:
            latency = scale_latency(self.params, op.from_bytes, op.to_bytes)
            if inst is not None:
                inst.scaling_until = now + latency
        self.engine.post(now + latency, EventKind.SCALE_OP_COMPLETE, (node.node_id, op), f"op-{op.op_id}")

    def _finish_op(self, node: Node, op: ScaleOp, now: float) -> Optional[Instance]:
        started = node.mem.on_complete(op)
        inst = node.instances.get(op.instance_id)
        if inst is not None and op.slot[1] == SLOT_KV:
            inst.kv_alloc = op.to_bytes
            if not any(o.slot == op.slot for o in node.mem.executing()):
                inst.scaling_until = None
            if not any(o.slot == op.slot for o in node.mem.pending_ops(inst.instance_id)):
                inst.kv_ready_at = None
        for nxt in started:
            self._begin(node, nxt, now)
        if inst is not None:
            self._maybe_remove(node, inst, now)
        return inst

    def _on_scale_op_complete(self, event: Event) -> None:
        node_id, op = event.payload
        node = self.nodes[node_id]
        self._finish_op(node, op, event.time)
        self.kick_all(event.time)

    def _on_cold_start_complete(self, event: Event) -> None:
        node_id, op = event.payload
        node = self.nodes[node_id]
        inst = self._finish_op(node, op, event.time)
        if inst is not None and inst.state == InstanceState.LOADING:
            if inst.batch:
                inst.state = InstanceState.ACTIVE
            else:
                self._mark_idle(inst, event.time)
        self.kick_all(event.time)

    def _on_keep_alive(self, event: Event) -> None:
        self.keep_alive_reap(event.time)

    # -------------------- compute loop --------------------

    def kick_all(self, now: float) -> None:
        for node in sorted(self.nodes.values(), key=lambda n: n.node_id):
            self.kick(node, now)

    def kick(self, node: Node, now: float) -> None:
        if node.current_plan is not None or node.kicking:
            return
        node.kicking = True
        evicted: List[Tuple[Request, int]] = []
        try:
            evicted = self._relieve_memory(node, now)
            plan = select_next(node, now, self.slo)
            if plan is not None:
                duration = plan.predicted_duration
                if self.jitter > 0:
                    duration *= 1.0 + self.jitter * float(self.rng.uniform(-1.0, 1.0))
                node.current_plan = plan
                node.busy_until = now + duration
                self.engine.post(now + duration, EventKind.ITERATION_COMPLETE, node.node_id, node.node_id)
        finally:
            node.kicking = False
        for req, source in evicted:
            self.recorder.evicted(req)
            self.route(req, now, skip_instance=source)

    def _relieve_memory(self, node: Node, now: float) -> List[Tuple[Request, int]]:
        evicted: List[Tuple[Request, int]] = []
        for inst in sorted(node.instances.values(), key=lambda i: i.instance_id):
            if inst.state != InstanceState.ACTIVE or not inst.batch or inst.kv_fits():
                continue
            if any(o.slot[1] == SLOT_KV for o in node.mem.pending_ops(inst.instance_id)):
                continue
            outcome = handle_underestimate(node.mem, inst, self.slo, now, self.watermark, op_ids=self._op_ids)
            if outcome.kind == UnderestimateKind.RESCALED:
                inst.kv_target = outcome.op.to_bytes
                self.recorder.scale_op(outcome.op.kind.value)
                if node.mem.dispatch(outcome.op) == DispatchResult.EXECUTING:
                    self._begin(node, outcome.op, now)
            else:
                evicted.append((outcome.request, inst.instance_id))
                if not inst.batch:
                    self._mark_idle(inst, now)
        return evicted

    def _on_iteration_complete(self, event: Event) -> None:
        now = event.time
        node = self.nodes[event.payload]
        plan = node.current_plan
        node.current_plan = None
        if plan is None:
            raise SimulationError(f"iteration completed on idle node {node.node_id}")
        result = complete_iteration(node, plan, now)
        self.recorder.decode_tokens(node.node_id, result.decode_tokens)
        inst = node.instances.get(plan.instance_id)
        for req in result.completed:
            req.instance_id = None
            req.needs_prefill = False
            if inst is not None:
                inst.model.record_completion(req.tokens_generated)
            self.recorder.completed(req, now)
        if inst is not None and result.completed:
            self._after_completion(node, inst, now)
        if self.baseline is not None and inst is not None:
            self.baseline.on_capacity(inst, now)
        self.kick(node, now)

    def _after_completion(self, node: Node, inst: Instance, now: float) -> None:
        if not inst.batch and inst.state == InstanceState.ACTIVE:
            self._mark_idle(inst, now)
        if self.baseline is not None or inst.state == InstanceState.DRAINING:
            return
        if node.mem.pending_ops(inst.instance_id):
            return
        current = node.mem.target(inst.instance_id, SLOT_KV)
        decision = watermark_decide(current, m_require(inst, inst.model), self.watermark)
        if decision.action != WatermarkAction.SCALE_DOWN:
            return
        target = max(decision.target, inst.kv_live_need())
        if target >= current:
            return
        if inst.batch and not self.policy.disable_validation:
            stall = scale_latency(self.params, current, target)
            verdict = validate_stall(node, inst, stall, now, self.slo, self.params)
            if not verdict.accepted:
                logger.debug("scale down deferred instance=%s case=%d", inst.instance_id, verdict.case)
                return
        self.issue(node, ScaleOp(inst.instance_id, ScaleOpKind.KV_DOWN, current, target, op_id=self.next_op_id()), now)

    # -------------------- end of run --------------------

    def finish(self, now: float) -> None:
        if self.baseline is not None:
            self.baseline.drain_queues(now)
