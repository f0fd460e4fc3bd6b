"""Exclusive-node baselines: one instance owns a whole node.

`exclusive` serves from GPU nodes only; `exclusive_cpu` also uses CPU nodes,
trying them first. A model scales out to a free node once its instances
reach their concurrency threshold; otherwise requests wait in a per-model
queue and are dropped once their first-token deadline has passed.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import TYPE_CHECKING, Deque, Dict, List, Optional, Tuple

from .compute import Instance, InstanceState
from .config import HW_CPU, HW_GPU, POLICY_EXCLUSIVE_CPU
from .defrag import Placement
from .memory import MemCheck, MemStatus, ModelSpec
from .workload import Request

if TYPE_CHECKING:
    from .cluster import Cluster, Node, RouteOutcome

logger = logging.getLogger(__name__)

_NO_GROWTH = MemCheck(MemStatus.OK, 0, 0)


class ExclusiveRouter:
    def __init__(self, cluster: "Cluster") -> None:
        self.cluster = cluster
        policy = cluster.policy
        use_cpu = policy.kind == POLICY_EXCLUSIVE_CPU and not policy.disable_cpu
        self.classes: Tuple[str, ...] = (HW_CPU, HW_GPU) if use_cpu else (HW_GPU,)
        self.queues: Dict[str, Deque[Request]] = {}

    def kv_bytes(self, node: "Node", model: ModelSpec) -> int:
        return node.mem.capacity - model.param_bytes

    def threshold(self, node: "Node", model: ModelSpec) -> int:
        """Concurrency cap, never larger than the node's KV memory can hold at full length."""
        configured = self.cluster.policy.thresholds.get((model.size_class, node.hardware_class), 1)
        table = self.cluster.perf.table_for(model.model_id, node.hardware_class)
        by_memory = self.kv_bytes(node, model) // (model.kv_bytes_per_token * model.max_seq_len)
        return max(1, min(configured, table.b_max, int(by_memory)))

    def _open_instances(self, model_id: str, skip: Optional[int] = None) -> List[Tuple["Node", Instance]]:
        found = [
            (node, inst)
            for node, inst in self.cluster.instances_of(model_id)
            if node.hardware_class in self.classes
            and inst.batch_size < inst.max_batch
            and inst.instance_id != skip
        ]
        return sorted(found, key=lambda item: (item[1].batch_size, item[1].instance_id))

    def _free_node(self, model: ModelSpec) -> Optional["Node"]:
        for hw in self.classes:
            if not self.cluster.perf.has(model.model_id, hw):
                continue
            for node in sorted(self.cluster.nodes.values(), key=lambda n: n.node_id):
                if node.hardware_class != hw or node.in_use:
                    continue
                if node.mem.capacity <= model.param_bytes:
                    continue
                return node
        return None

    def _launch(self, node: "Node", model: ModelSpec, now: float) -> Instance:
        inst = self.cluster.new_instance(node, model, now)
        inst.max_batch = self.threshold(node, model)
        self.cluster.start_instance(node, inst, now, kv_bytes=self.kv_bytes(node, model))
        logger.debug("scale out model=%s node=%s threshold=%d", model.model_id, node.node_id, inst.max_batch)
        return inst

    def _attach(self, node: "Node", inst: Instance, req: Request, now: float) -> None:
        self.cluster.admit(Placement(node.node_id, inst, _NO_GROWTH), req, now)

    def _expired(self, req: Request, now: float) -> bool:
        return now > req.arrival_time + self.cluster.slo.ttft(req.input_len)

    def route(self, req: Request, now: float, skip_instance: Optional[int] = None) -> "RouteOutcome":
        from .cluster import RouteKind, RouteOutcome

        model = self.cluster.models.get(req.model_id)
        if model is None:
            return self.cluster.drop(req, now, "unknown model")
        open_insts = self._open_instances(req.model_id, skip_instance)
        if open_insts:
            node, inst = open_insts[0]
            self._attach(node, inst, req, now)
            return RouteOutcome(RouteKind.ADMITTED, node.node_id, inst.instance_id)
        node = self._free_node(model)
        if node is not None:
            inst = self._launch(node, model, now)
            self._attach(node, inst, req, now)
            return RouteOutcome(RouteKind.COLD_START, node.node_id, inst.instance_id)
        self.queues.setdefault(req.model_id, deque()).append(req)
        return RouteOutcome(RouteKind.QUEUED)

    def _drain(self, model_id: str, now: float) -> None:
        queue = self.queues.get(model_id)
        while queue:
            req = queue[0]
            if self._expired(req, now):
                queue.popleft()
                self.cluster.drop(req, now, "queued past ttft deadline")
                continue
            open_insts = self._open_instances(model_id)
            if not open_insts:
                break
            queue.popleft()
            node, inst = open_insts[0]
            self._attach(node, inst, req, now)
        if queue is not None and not queue:
            self.queues.pop(model_id, None)

    def on_capacity(self, inst: Instance, now: float) -> None:
        if inst.state != InstanceState.DRAINING:
            self._drain(inst.model_id, now)

    def on_node_free(self, node: "Node", now: float) -> None:
        for model_id in list(self.queues):
            self._drain(model_id, now)
        if node.in_use or node.hardware_class not in self.classes:
            return
        waiting = sorted(
            (q[0].arrival_time, model_id) for model_id, q in self.queues.items() if q
        )
        for _arrival, model_id in waiting:
            model = self.cluster.models[model_id]
            if not self.cluster.perf.has(model_id, node.hardware_class) or node.mem.capacity <= model.param_bytes:
                continue
            self._launch(node, model, now)
            self._drain(model_id, now)
            return

    def drain_queues(self, now: float) -> int:
        dropped = 0
        for model_id in sorted(self.queues):
            for req in self.queues[model_id]:
                self.cluster.drop(req, now, "still queued at end of run")
                dropped += 1
        self.queues.clear()
        return dropped
