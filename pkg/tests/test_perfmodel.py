import numpy as np
import pytest

from builders import model_spec
from oracles import naive_bilinear, naive_interp

from meshsim.config import GiB, HW_CPU, HW_GPU
from meshsim.perfmodel import (
    CostParams,
    Decode,
    PerfBook,
    PerfTable,
    PerfTableError,
    Prefill,
    cold_start_time,
    load_table_csv,
    pessimistic_iter_time,
    sample_grid,
    save_table_csv,
    scale_latency,
    synthetic_table,
)


def test_sample_grid():
    assert sample_grid(1) == [1]
    assert sample_grid(8) == [1, 2, 4, 8]
    assert sample_grid(100) == [1, 2, 4, 8, 16, 32, 64, 100]
    assert len(sample_grid(4096)) == 13
    with pytest.raises(PerfTableError):
        sample_grid(0)


@pytest.mark.parametrize("preset,hw", [("llama-7b", HW_CPU), ("llama-13b", HW_GPU), ("llama-3b", HW_CPU)])
def test_interpolation_matches_reference(preset, hw):
    table = synthetic_table(preset, hw)
    rng = np.random.default_rng(5)
    lens = list(table.decode_lens)
    batches = list(table.decode_batches)
    for _ in range(200):
        n = float(rng.uniform(1, 4096))
        bs = float(rng.uniform(1, 256))
        assert table.prefill_time(n) == pytest.approx(naive_interp(list(table.prefill_lens), list(table.prefill_secs), n))
        assert table.decode_time(bs, n) == pytest.approx(naive_bilinear(batches, lens, table.decode_secs.tolist(), bs, n))


def test_queries_below_the_grid_clamp():
    table = synthetic_table("llama-7b", HW_GPU)
    assert table.prefill_time(0.5) == table.prefill_secs[0]
    assert table.decode_time(1, 0.5) == table.decode_secs[0, 0]


def test_queries_above_the_grid_fail():
    table = synthetic_table("llama-7b", HW_GPU)
    with pytest.raises(PerfTableError):
        table.prefill_time(4097)
    with pytest.raises(PerfTableError):
        table.decode_time(257, 10)


def test_cpu_7b_batching_anchor():
    table = synthetic_table("llama-7b", HW_CPU)
    assert table.decode_time(16, 1024) / table.decode_time(1, 1024) == pytest.approx(1.69)


def test_cpu_13b_context_anchor():
    table = synthetic_table("llama-13b", HW_CPU)
    assert table.decode_time(32, 2048) / table.decode_time(32, 512) == pytest.approx(2.0)


def test_pessimistic_time_scales_the_prediction(gpu_7b):
    params = CostParams()
    assert pessimistic_iter_time(gpu_7b, Prefill(512), params) == pytest.approx(1.1 * gpu_7b.prefill_time(512))
    assert pessimistic_iter_time(gpu_7b, Decode(4, 300.0), params) == pytest.approx(1.1 * gpu_7b.decode_time(4, 300.0))


def test_scale_latency_matches_measured_points():
    params = CostParams()
    assert scale_latency(params, 32 * GiB, 16 * GiB) == pytest.approx(0.3)
    assert scale_latency(params, 32 * GiB, 64 * GiB) == pytest.approx(1.9)
    assert scale_latency(params, 0, 8 * GiB) == params.scale_floor
    assert scale_latency(params, 8 * GiB, 0) == params.scale_floor
    with pytest.raises(ValueError):
        scale_latency(params, GiB, GiB)


def test_cold_start_time():
    assert cold_start_time(model_spec("llama-7b/x"), CostParams()) == pytest.approx(1.4)
    assert cold_start_time(model_spec("llama-7b/x"), CostParams(load_bandwidth=float("inf"))) == 0.0


def test_cost_params_validation():
    with pytest.raises(ValueError):
        CostParams(overestimate_factor=0.9)
    with pytest.raises(ValueError):
        CostParams(scale_up_rate=0)


def test_non_monotone_samples_are_rejected():
    with pytest.raises(PerfTableError):
        PerfTable(HW_GPU, "m", [1, 2], [0.2, 0.1], [1], [1], [[0.1]])
    with pytest.raises(PerfTableError):
        PerfTable(HW_GPU, "m", [1], [0.1], [1, 2], [1], [[0.2], [0.1]])
    with pytest.raises(PerfTableError):
        PerfTable("tpu", "m", [1], [0.1], [1], [1], [[0.1]])


def test_table_csv_round_trip(tmp_path):
    table = synthetic_table("llama-3b", HW_GPU, l_max=64, b_max=8)
    path = str(tmp_path / "t.csv")
    save_table_csv(table, path)
    back = load_table_csv(path, HW_GPU, "llama-3b")
    np.testing.assert_array_equal(back.prefill_lens, table.prefill_lens)
    np.testing.assert_array_equal(back.decode_secs, table.decode_secs)
    assert back.l_max == 64 and back.b_max == 8


def test_table_csv_errors(tmp_path):
    bad_header = tmp_path / "a.csv"
    bad_header.write_text("kind,len,seconds\n", encoding="utf-8")
    with pytest.raises(PerfTableError, match="line 1"):
        load_table_csv(str(bad_header), HW_GPU, "m")

    bad_kind = tmp_path / "b.csv"
    bad_kind.write_text("kind,batch,len,seconds\nencode,1,1,0.1\n", encoding="utf-8")
    with pytest.raises(PerfTableError, match="line 2"):
        load_table_csv(str(bad_kind), HW_GPU, "m")

    holes = tmp_path / "c.csv"
    holes.write_text(
        "kind,batch,len,seconds\nprefill,1,1,0.1\ndecode,1,1,0.1\ndecode,2,2,0.2\n", encoding="utf-8"
    )
    with pytest.raises(PerfTableError, match="incomplete"):
        load_table_csv(str(holes), HW_GPU, "m")


def test_perf_book_shares_tables_between_replicas():
    book = PerfBook.synthetic(["llama-7b"], l_max=128, b_max=16)
    assert book.table_for("llama-7b/fn-1", HW_CPU) is book.table_for("llama-7b/fn-2", HW_CPU)
    assert book.has("llama-7b/fn-1", HW_GPU)
    assert not book.has("llama-13b/fn-1", HW_GPU)
    with pytest.raises(PerfTableError):
        book.table_for("llama-13b/fn-1", HW_GPU)
