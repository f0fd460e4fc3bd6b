"""Defragmentation: preempting small neighbours, and bin-packing instance order."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Set, Tuple

from .compute import Instance, InstanceState, shadow_validate
from .memory import MemCheck, shadow_mem_check
from .workload import Request

if TYPE_CHECKING:
    from .cluster import Cluster, Node

logger = logging.getLogger(__name__)


@dataclass
class Placement:
    node_id: str
    instance: Instance
    mem: MemCheck
    cold_start: bool = False
    stall: float = 0.0


@dataclass
class Tentative:
    """Promises made while building a plan, so later checks see earlier ones."""

    excluded: Set[int] = field(default_factory=set)
    avoid_nodes: Set[str] = field(default_factory=set)
    planned: Dict[int, List[Request]] = field(default_factory=dict)
    reserved: Dict[str, int] = field(default_factory=dict)
    new_instances: Dict[str, List[Instance]] = field(default_factory=dict)
    kv_stall: Dict[int, float] = field(default_factory=dict)
    kv_target: Dict[int, int] = field(default_factory=dict)

    def promise(self, placement: Placement, req: Request) -> None:
        iid = placement.instance.instance_id
        self.planned.setdefault(iid, []).append(req)
        extra = placement.mem.delta
        if placement.cold_start:
            extra += placement.instance.model.param_bytes
            self.new_instances.setdefault(placement.node_id, []).append(placement.instance)
        self.reserved[placement.node_id] = self.reserved.get(placement.node_id, 0) + extra
        if placement.mem.needs_op:
            self.kv_stall[iid] = placement.stall
            self.kv_target[iid] = max(self.kv_target.get(iid, 0), placement.mem.target)


@dataclass
class PreemptionPlan:
    grower: int
    new_request: int
    victims: List[int]
    displaced: List[Tuple[Request, Placement]]
    mem: MemCheck
    freed_bytes: int


def pick_instance(model_id: str, candidates: Sequence[Instance], spread: bool = False) -> List[Instance]:
    """Highest batch first so small instances drain; `spread` reverses that."""
    for inst in candidates:
        if inst.model_id != model_id:
            raise ValueError(f"instance {inst.instance_id} serves {inst.model_id}, not {model_id}")
    if spread:
        return sorted(candidates, key=lambda i: (i.batch_size, i.instance_id))
    return sorted(candidates, key=lambda i: (-i.batch_size, i.instance_id))


def preemption_victims(node: "Node", grower: Instance) -> List[Instance]:
    return sorted(
        (
            inst
            for inst in node.instances.values()
            if inst is not grower
            and inst.state in (InstanceState.ACTIVE, InstanceState.IDLE)
            and inst.batch_size < grower.batch_size
        ),
        key=lambda i: (i.batch_size, i.instance_id),
    )


def plan_preemption(cluster: "Cluster", node: "Node", grower: Instance, new_req: Request, now: float) -> Optional[PreemptionPlan]:
    model = grower.model
    victims: List[Instance] = []
    freed = 0
    check: Optional[MemCheck] = None
    for victim in preemption_victims(node, grower):
        victims.append(victim)
        freed += node.mem.instance_target(victim.instance_id)
        attempt = shadow_mem_check(node.mem, grower, new_req, model, cluster.watermark, freed_bytes=freed)
        if not attempt.ok:
            continue
        if not cluster.policy.disable_validation:
            verdict = shadow_validate(
                node, grower, new_req, now, cluster.slo, cluster.params,
                excluded={v.instance_id for v in victims},
                target_stall=cluster.kv_stall(node, grower, attempt, freed),
            )
            if not verdict.accepted:
                continue
        check = attempt
        break
    if check is None:
        return None

    tentative = Tentative(excluded={v.instance_id for v in victims}, avoid_nodes={node.node_id})
    displaced: List[Tuple[Request, Placement]] = []
    for victim in victims:
        for req in victim.requests():
            placement = cluster.find_placement(req, now, tentative)
            if placement is None:
                logger.debug(
                    "preemption rejected grower=%s victim=%s request=%s has nowhere to go",
                    grower.instance_id, victim.instance_id, req.id,
                )
                return None
            tentative.promise(placement, req)
            displaced.append((req, placement))

    if not cluster.policy.disable_validation:
        stall = cluster.kv_stall(node, grower, check, freed)
        verdict = shadow_validate(
            node, grower, new_req, now, cluster.slo, cluster.params,
            excluded=tentative.excluded, target_stall=stall,
        )
        if not verdict.accepted:
            return None
    return PreemptionPlan(
        grower=grower.instance_id,
        new_request=new_req.id,
        victims=[v.instance_id for v in victims],
        displaced=displaced,
        mem=check,
        freed_bytes=freed,
    )
