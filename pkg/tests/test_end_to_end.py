import pytest

from meshsim.experiment import from_dict
from meshsim.metrics import Outcome
from meshsim.runner import run_simulation

# 32 single-function 7B models, overloaded; totals are summed over a few seeds
OVERLOAD_SEEDS = (1, 2, 3)


def _overload(tmp_path, seed, gpu_nodes=2, **policy):
    return from_dict(
        {
            "seed": seed,
            "cluster": {"cpu_nodes": 2, "gpu_nodes": gpu_nodes},
            "trace": {"window_s": 300.0, "sample_count": 32, "synthetic_rate": 0.03, "synthetic_bursts": 2},
            "lengths": {"synthetic_count": 1000},
            "policy": policy,
            "output": {"dir": str(tmp_path)},
        }
    )


def _totals(tmp_path, kind="mesh", gpu_nodes=2, **policy):
    compliant, gpu = 0, 0.0
    for seed in OVERLOAD_SEEDS:
        report = run_simulation(_overload(tmp_path, seed, gpu_nodes, **policy), kind).report
        assert report.compliant + report.violated + report.dropped == report.total_requests
        compliant += report.compliant
        gpu += report.avg_gpu_nodes
    return compliant, gpu


@pytest.mark.slow
def test_sharing_serves_more_than_exclusive_nodes(tmp_path):
    mesh, _ = _totals(tmp_path)
    exclusive, _ = _totals(tmp_path, "exclusive")
    exclusive_cpu, _ = _totals(tmp_path, "exclusive_cpu")
    assert mesh >= 1.4 * exclusive
    assert mesh > exclusive_cpu


@pytest.mark.slow
def test_each_mechanism_saves_gpu_nodes_or_compliance(tmp_path):
    mesh, mesh_gpu = _totals(tmp_path)
    no_sharing, _ = _totals(tmp_path, disable_sharing=True)
    _, no_cpu_gpu = _totals(tmp_path, disable_cpu=True)
    assert no_sharing < mesh
    assert no_cpu_gpu > mesh_gpu

    # with GPU nodes to spare, usage is no longer pinned at the cluster size
    _, roomy_gpu = _totals(tmp_path, gpu_nodes=4)
    for flag in ("disable_sharing", "disable_cpu", "disable_defrag"):
        _, gpu = _totals(tmp_path, gpu_nodes=4, **{flag: True})
        assert gpu > roomy_gpu, flag


@pytest.mark.slow
def test_defrag_changes_the_outcome(tmp_path):
    with_defrag = run_simulation(_overload(tmp_path, 1, gpu_nodes=4)).report
    without = run_simulation(_overload(tmp_path, 1, gpu_nodes=4, disable_defrag=True)).report
    assert (with_defrag.avg_gpu_nodes, with_defrag.compliant) != (without.avg_gpu_nodes, without.compliant)


@pytest.mark.slow
def test_admitted_requests_keep_their_deadlines(tmp_path):
    # exact predictions and equal output lengths: every estimate the router uses is right
    lengths = tmp_path / "lengths.csv"
    lengths.write_text("input_tokens,output_tokens\n" + "300,24\n" * 10 + "900,24\n" * 10, encoding="utf-8")
    admitted = 0
    for seed in range(200):
        cfg = from_dict(
            {
                "seed": seed,
                "cluster": {"cpu_nodes": 2, "gpu_nodes": 2},
                "trace": {"window_s": 60.0, "sample_count": 8, "synthetic_rate": 0.3, "synthetic_bursts": 2},
                "lengths": {"path": str(lengths)},
                "compute": {"overestimate_factor": 1.0, "jitter": 0.0},
                "output": {"dir": str(tmp_path)},
            }
        )
        records = run_simulation(cfg, "mesh").records
        kept = [r for r in records if r.outcome != Outcome.DROPPED and r.evictions == 0]
        late = [r.id for r in kept if r.outcome != Outcome.COMPLIANT]
        assert not late, (seed, late[:5])
        admitted += len(kept)
    assert admitted > 10_000


@pytest.mark.slow
def test_runs_without_validation(tmp_path):
    result = run_simulation(_overload(tmp_path, 1, disable_validation=True))
    report = result.report
    assert report.total_requests > 0
    assert report.compliant + report.violated + report.dropped == report.total_requests
    assert result.events > 0
