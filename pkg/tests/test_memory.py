import numpy as np
import pytest

from builders import commit, instance, model_spec, request
from oracles import replay_allocator

from meshsim.compute import headroom
from meshsim.config import GiB, KiB, MiB
from meshsim.memory import (
    SLOT_KV,
    DispatchResult,
    IssueResult,
    MemStatus,
    ModelSpec,
    NodeMemory,
    ScaleOp,
    ScaleOpKind,
    ScaleOpState,
    UnderestimateKind,
    WatermarkAction,
    handle_underestimate,
    m_require,
    shadow_mem_check,
    watermark_decide,
)
from meshsim.workload import RequestState


# -------------------- demand --------------------


def test_m_require_floors_at_min_total_len():
    model = model_spec(avg_output_len=120.0)
    inst = instance(1, model, requests=[
        request(1, input_len=100, emitted=[0.0] * 50),
        request(2, input_len=200, emitted=[0.0] * 10),
    ])
    assert m_require(inst, model) == 2 * GiB


def test_m_require_uses_generated_tokens_beyond_average():
    model = model_spec(avg_output_len=64.0, min_total_len=1)
    inst = instance(1, model, requests=[request(1, input_len=3000, emitted=[0.0] * 2000)])
    assert m_require(inst, model) == 512 * KiB * 5000


def test_m_require_of_empty_batch():
    model = model_spec()
    assert m_require(instance(1, model), model) == 512 * KiB * 4096


def test_model_spec_tracks_recent_outputs():
    model = model_spec(avg_output_len=100.0)
    for n in (10, 20, 30):
        model.record_completion(n)
    assert model.avg_output_len == pytest.approx(20.0)
    with pytest.raises(ValueError):
        ModelSpec("m", param_bytes=1, kv_bytes_per_token=0, max_seq_len=8)


# -------------------- watermark --------------------


def test_watermark_scales_up_to_recommended():
    d = watermark_decide(10 * GiB, 11 * GiB, 20)
    assert d.action == WatermarkAction.SCALE_UP
    assert d.target == pytest.approx(13.2 * GiB, abs=1)


def test_watermark_scales_down_past_double_margin():
    d = watermark_decide(16 * GiB, 10 * GiB, 20)
    assert d.action == WatermarkAction.SCALE_DOWN
    assert d.target == pytest.approx(12 * GiB, abs=1)


def test_watermark_holds_inside_band():
    assert watermark_decide(13 * GiB, 10 * GiB, 20).action == WatermarkAction.HOLD
    assert watermark_decide(10 * GiB, 10 * GiB, 0).action == WatermarkAction.HOLD
    with pytest.raises(ValueError):
        watermark_decide(1, 1, -1)


def _ops_for(series, w):
    current = 0
    ops = 0
    for demand in series:
        d = watermark_decide(current, demand, w)
        if d.action != WatermarkAction.HOLD:
            ops += 1
            current = d.target
    return ops


def test_watermark_damps_small_oscillations():
    mean = 100 * MiB
    swing = [mean] + [int(mean * f) for f in (0.85, 1.15)] * 50
    assert _ops_for(swing, 20) == 1
    assert _ops_for(swing, 0) == len(swing)


def test_watermark_damps_a_slow_drift_inside_the_band():
    ramp = list(range(100, 116)) + list(range(114, 84, -1)) + list(range(86, 116))
    series = [m * MiB for m in ramp] * 3
    assert _ops_for(series, 20) == 1
    assert _ops_for(series, 0) == len(series)


def test_watermark_band_is_anchored_at_the_last_scale_point():
    # sized at the trough, 1.2 x 85 MiB does not cover the 115 MiB peak
    swing = [int(100 * MiB * f) for f in (0.85, 1.15)] * 50
    assert _ops_for(swing, 20) == len(swing)


# -------------------- orchestrator --------------------


def _loaded(capacity=80 * GiB, budget=70 * GiB):
    mem = NodeMemory(capacity)
    commit(mem, 1, ScaleOpKind.MODEL_LOAD, budget)
    return mem


def test_issue_within_capacity():
    mem = _loaded()
    op = ScaleOp(2, ScaleOpKind.KV_UP, 0, 8 * GiB)
    assert mem.issue(op) == IssueResult.ISSUED
    assert mem.optimistic_budget == 78 * GiB
    assert mem.target(2) == 8 * GiB
    assert mem.committed(2) == 0


def test_issue_denied_when_budget_would_overflow():
    mem = _loaded(budget=75 * GiB)
    op = ScaleOp(2, ScaleOpKind.KV_UP, 0, 8 * GiB)
    assert mem.issue(op) == IssueResult.DENIED
    assert mem.optimistic_budget == 75 * GiB
    assert mem.pending_ops(2) == []


def test_scale_down_releases_budget_at_issue():
    mem = _loaded(budget=70 * GiB)
    commit(mem, 2, ScaleOpKind.KV_UP, 8 * GiB)
    assert mem.optimistic_budget == 78 * GiB
    down = ScaleOp(2, ScaleOpKind.KV_DOWN, 8 * GiB, 0)
    assert mem.issue(down) == IssueResult.ISSUED
    assert mem.optimistic_budget == 70 * GiB
    assert mem.dispatch(down) == DispatchResult.EXECUTING
    assert mem.pessimistic_view == 78 * GiB


def test_issue_requires_matching_from_size():
    mem = _loaded()
    with pytest.raises(ValueError):
        mem.issue(ScaleOp(1, ScaleOpKind.MODEL_UNLOAD, 10 * GiB, 0))


def test_op_direction_is_checked():
    with pytest.raises(ValueError):
        ScaleOp(1, ScaleOpKind.KV_UP, 8, 4)
    with pytest.raises(ValueError):
        ScaleOp(1, ScaleOpKind.KV_DOWN, 4, 8)


def test_scale_up_waits_for_overlapping_scale_down():
    mem = NodeMemory(80 * GiB)
    commit(mem, 1, ScaleOpKind.KV_UP, 20 * GiB)
    commit(mem, 2, ScaleOpKind.KV_UP, 50 * GiB)
    down = ScaleOp(1, ScaleOpKind.KV_DOWN, 20 * GiB, 5 * GiB)
    up = ScaleOp(2, ScaleOpKind.KV_UP, 50 * GiB, 70 * GiB)
    assert mem.issue(down) == IssueResult.ISSUED
    assert mem.issue(up) == IssueResult.ISSUED
    assert mem.optimistic_budget == 75 * GiB

    assert mem.dispatch(down) == DispatchResult.EXECUTING
    assert mem.dispatch(up) == DispatchResult.RESERVED
    assert up.state == ScaleOpState.RESERVED
    assert mem.allocated <= mem.capacity

    assert mem.on_complete(down) == [up]
    assert up.state == ScaleOpState.EXECUTING
    assert mem.pessimistic_view == 75 * GiB
    assert mem.on_complete(up) == []
    assert mem.committed(2) == 70 * GiB


def test_station_starts_only_what_fits():
    mem = NodeMemory(100 * GiB)
    commit(mem, 1, ScaleOpKind.KV_UP, 50 * GiB)
    commit(mem, 2, ScaleOpKind.KV_UP, 30 * GiB)
    commit(mem, 4, ScaleOpKind.KV_UP, 20 * GiB)
    down_a = ScaleOp(1, ScaleOpKind.KV_DOWN, 50 * GiB, 40 * GiB)
    down_d = ScaleOp(4, ScaleOpKind.KV_DOWN, 20 * GiB, 10 * GiB)
    up_b = ScaleOp(2, ScaleOpKind.KV_UP, 30 * GiB, 40 * GiB)
    up_e = ScaleOp(5, ScaleOpKind.KV_UP, 0, 10 * GiB)
    for op in (down_a, down_d, up_b, up_e):
        assert mem.issue(op) == IssueResult.ISSUED
        mem.dispatch(op)
    assert [op.state for op in (up_b, up_e)] == [ScaleOpState.RESERVED] * 2

    assert mem.on_complete(down_a) == [up_b]
    assert up_e.state == ScaleOpState.RESERVED
    assert mem.on_complete(down_d) == [up_e]
    assert list(mem.reservation_station) == []


def test_ops_on_one_slot_run_in_issue_order():
    mem = NodeMemory(10 * GiB)
    commit(mem, 1, ScaleOpKind.KV_UP, 2 * GiB)
    up = ScaleOp(1, ScaleOpKind.KV_UP, 2 * GiB, 4 * GiB)
    down = ScaleOp(1, ScaleOpKind.KV_DOWN, 4 * GiB, 3 * GiB)
    mem.issue(up)
    mem.issue(down)
    assert mem.dispatch(up) == DispatchResult.EXECUTING
    assert mem.dispatch(down) == DispatchResult.RESERVED
    assert mem.target(1) == 3 * GiB
    assert mem.on_complete(up) == [down]
    mem.on_complete(down)
    assert mem.committed(1) == 3 * GiB
    assert mem.pending_ops(1) == []


def test_on_complete_with_empty_station():
    mem = NodeMemory(GiB)
    op = ScaleOp(1, ScaleOpKind.KV_UP, 0, MiB)
    mem.issue(op)
    mem.dispatch(op)
    assert mem.on_complete(op) == []
    with pytest.raises(ValueError):
        mem.on_complete(op)


def _soup(seed, steps, capacity=64 * GiB, slots=6):
    rng = np.random.default_rng(seed)
    mem = NodeMemory(capacity)
    events = []

    def start(op):
        events.append(("start", op.slot, op.from_bytes, op.to_bytes))

    for _ in range(steps):
        roll = rng.random()
        executing = mem.executing()
        if roll < 0.35 and executing:
            op = executing[int(rng.integers(len(executing)))]
            events.append(("complete", op.slot, op.from_bytes, op.to_bytes))
            for started in mem.on_complete(op):
                start(started)
        else:
            iid = int(rng.integers(slots))
            current = mem.target(iid)
            idle = not mem.pending_ops(iid)
            if roll < 0.6 and current > 0 and idle:
                op = ScaleOp(iid, ScaleOpKind.KV_DOWN, current, int(current * rng.uniform(0.0, 0.9)))
            else:
                op = ScaleOp(iid, ScaleOpKind.KV_UP, current, current + int(rng.integers(1, 8)) * GiB)
            if mem.issue(op) == IssueResult.ISSUED and mem.dispatch(op) == DispatchResult.EXECUTING:
                start(op)
        assert mem.optimistic_budget <= mem.capacity
        assert mem.optimistic_budget == mem.target_total()
        assert mem.allocated <= mem.capacity

    while mem.executing():
        op = mem.executing()[0]
        events.append(("complete", op.slot, op.from_bytes, op.to_bytes))
        for started in mem.on_complete(op):
            start(started)
    return mem, events


@pytest.mark.parametrize("seed", range(5))
def test_random_ops_never_overcommit(seed):
    mem, events = _soup(seed, steps=2000)
    trace, final = replay_allocator(events)
    assert max(trace) <= mem.capacity
    assert not mem.reservation_station
    assert {slot: size for slot, size in final.items()} == {
        slot: mem.committed(*slot) for slot in final
    }
    assert sum(final.values()) == mem.optimistic_budget


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_random_ops_never_overcommit_long(seed):
    mem, events = _soup(100 + seed, steps=10_000)
    trace, final = replay_allocator(events)
    assert max(trace) <= mem.capacity
    assert sum(final.values()) == mem.optimistic_budget


# -------------------- admission check --------------------


def _tiny_model():
    return ModelSpec("llama-7b/t", param_bytes=10, kv_bytes_per_token=1, max_seq_len=200,
                     avg_output_len=10.0, min_total_len=100)


def test_mem_check_recommends_when_room():
    model = _tiny_model()
    mem = NodeMemory(1000)
    check = shadow_mem_check(mem, instance(1, model, kv_alloc=0), request(1, input_len=50), model, 20)
    assert check.status == MemStatus.OK
    assert (check.current, check.target) == (0, 120)
    assert check.needs_op


def test_mem_check_compromises_when_tight():
    model = _tiny_model()
    mem = NodeMemory(1000)
    commit(mem, 9, ScaleOpKind.MODEL_LOAD, 890)
    check = shadow_mem_check(mem, instance(1, model, kv_alloc=0), request(1, input_len=50), model, 20)
    assert check.status == MemStatus.OK_COMPROMISED
    assert check.target == 100


def test_mem_check_fails_when_full():
    model = _tiny_model()
    mem = NodeMemory(1000)
    commit(mem, 9, ScaleOpKind.MODEL_LOAD, 950)
    check = shadow_mem_check(mem, instance(1, model, kv_alloc=0), request(1, input_len=50), model, 20)
    assert check.status == MemStatus.FAIL
    assert not check.ok
    freed = shadow_mem_check(mem, instance(1, model, kv_alloc=0), request(1, input_len=50), model, 20, freed_bytes=100)
    assert freed.ok


def test_mem_check_without_growth():
    model = _tiny_model()
    mem = NodeMemory(1000)
    commit(mem, 1, ScaleOpKind.KV_UP, 500)
    check = shadow_mem_check(mem, instance(1, model, kv_alloc=500), request(1, input_len=50), model, 20)
    assert check.status == MemStatus.OK
    assert not check.needs_op


# -------------------- underestimation --------------------


def _overflowing(slo, capacity):
    model = _tiny_model()
    now = 2.25
    reqs = [
        request(1, "llama-7b/t", arrival=0.5, input_len=60, emitted=[0.1]),
        request(2, "llama-7b/t", arrival=2.1, input_len=60, emitted=[0.1]),
        request(3, "llama-7b/t", arrival=1.0, input_len=60, emitted=[0.1]),
    ]
    mem = NodeMemory(capacity)
    commit(mem, 1, ScaleOpKind.KV_UP, 150)
    inst = instance(1, model, requests=reqs, kv_alloc=150)
    assert [round(headroom(r, slo, now), 6) for r in reqs] == [0.5, 2.1, 1.0]
    assert not inst.kv_fits()
    return mem, inst, reqs, now


def test_underestimate_grows_the_cache_when_possible(slo):
    mem, inst, _reqs, now = _overflowing(slo, capacity=1000)
    outcome = handle_underestimate(mem, inst, slo, now, 20)
    assert outcome.kind == UnderestimateKind.RESCALED
    assert outcome.op.kind == ScaleOpKind.KV_UP
    assert outcome.op.to_bytes >= inst.kv_live_need()
    assert mem.target(1, SLOT_KV) == outcome.op.to_bytes
    assert inst.batch_size == 3


def test_underestimate_evicts_most_headroom(slo):
    mem, inst, reqs, now = _overflowing(slo, capacity=150)
    outcome = handle_underestimate(mem, inst, slo, now, 20)
    assert outcome.kind == UnderestimateKind.EVICTED
    assert outcome.request is reqs[1]
    assert reqs[1].state == RequestState.EVICTED
    assert reqs[1].needs_prefill
    assert reqs[1].evictions == 1
    assert reqs[1].emission_times == [0.1]
    assert sorted(inst.batch) == [1, 3]
    assert mem.optimistic_budget == 150
