import json

import pytest

from meshsim.config import HW_GPU
from meshsim.perfmodel import CostParams, synthetic_table
from meshsim.workload import SloSpec


@pytest.fixture
def slo():
    return SloSpec()


@pytest.fixture
def exact():
    """Cost parameters with no pessimism margin."""
    return CostParams(overestimate_factor=1.0)


@pytest.fixture
def gpu_7b():
    return synthetic_table("llama-7b", HW_GPU)


@pytest.fixture
def tiny_config(tmp_path):
    """A small synthetic experiment that finishes in well under a second."""
    doc = {
        "seed": 7,
        "cluster": {"cpu_nodes": 1, "gpu_nodes": 1},
        "trace": {"window_s": 30.0, "sample_count": 3, "synthetic_rate": 0.2},
        "lengths": {"synthetic_count": 200},
        "run": {"policies": ["mesh", "exclusive"]},
        "output": {"dir": str(tmp_path / "out")},
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path
