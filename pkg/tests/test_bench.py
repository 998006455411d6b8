import math

import pytest

from crfgan import bench
from crfgan.netspec import NetGraph, count_params, model_graphs
from crfgan.trainer import TrainConfig


@pytest.fixture(scope="module")
def default():
    return TrainConfig()


class TestParams:
    def test_single_source_of_truth(self, default):
        rep = bench.param_report(default)
        for name, g in model_graphs(default.model_config()).items():
            assert rep.per_module[name] == count_params(g)

    def test_totals_grow_with_resolution(self, default):
        rows = bench.param_table(default)
        totals = [r["crf_gan"] for r in rows]
        assert [r["resolution"] for r in rows] == [64, 128, 256]
        assert totals == sorted(totals) and len(set(totals)) == 3

    def test_surrogate_reduction_and_crf_share(self, default):
        for row in bench.param_table(default):
            assert row["reduction_pct"] >= 15.0
            cfg = TrainConfig(resolution=row["resolution"])
            rep = bench.param_report(cfg)
            assert rep.per_module["CRF-head"] / rep.total < 0.05


class TestMemory:
    def test_batch_linearity(self, default):
        m2 = bench.estimate_activation_memory(default, "sub-volume", 2)
        m4 = bench.estimate_activation_memory(default, "sub-volume", 4)
        assert m4.activation_bytes == 2 * m2.activation_bytes
        assert m4.param_bytes == m2.param_bytes and m4.moment_bytes == m2.moment_bytes

    def test_sub_volume_bound(self, default):
        sub = bench.estimate_activation_memory(default, "sub-volume")
        full = bench.estimate_activation_memory(default, "full-volume")
        mc = default.model_config()
        geom = mc.geometry()
        shared = model_graphs(mc)
        overhead = sum(bench.activation_elements(shared[k]) for k in ("G1", "CRF-head"))
        overhead_bytes = bench.ELEM_BYTES * 2 * 2 * overhead
        ratio = geom.extent / geom.embed_shape[0]
        assert sub.activation_bytes <= ratio * full.activation_bytes + overhead_bytes
        assert sub.activation_bytes <= 0.5 * full.activation_bytes

    def test_empty_graph(self):
        g = NetGraph("G1", (), (4,))
        m = bench.memory_for([g], [g], batch=3)
        assert m.activation_bytes == 0 and m.total_bytes == 0

    def test_formula_by_hand(self):
        from crfgan.netspec import LayerSpec

        g = NetGraph("D", (LayerSpec("conv3d", 1, 2, 3, 1, 1), LayerSpec("nonlinearity", variant="relu")), (1, 2, 2, 2))
        m = bench.memory_for([g], [g], batch=5)
        assert m.activation_bytes == 4 * 5 * 2 * (16 + 16)
        assert m.param_bytes == 4 * 56 and m.moment_bytes == 8 * 56

    def test_pure(self, default):
        assert bench.memory_table(default) == bench.memory_table(default)

    def test_bad_mode(self, default):
        with pytest.raises(ValueError):
            bench.estimate_activation_memory(default, "half")


class TestSpeed:
    def test_sane(self, tiny_config):
        r = bench.measure_speed(tiny_config, steps=10, warmup=2)
        assert r.iters_per_sec > 0 and math.isfinite(r.iters_per_sec)
        assert r.environment["crf_kernels"] in ("cython", "python")
        with pytest.raises(ValueError):
            bench.measure_speed(tiny_config, steps=3)

    @pytest.mark.slow
    def test_batch_monotone_and_repeatable(self):
        from conftest import TINY

        def speed(b):
            return bench.measure_speed(TrainConfig(**{**TINY, "batch_size": b}), steps=10).iters_per_sec

        s2, s6 = speed(2), speed(6)
        assert s2 >= s6
        again = speed(2)
        assert abs(again - s2) <= 0.2 * s2


def test_table_and_csv(default, tmp_path):
    rows = bench.param_table(default)
    text = bench.format_table(rows)
    assert text.splitlines()[0].split() == ["resolution", "crf_gan", "with_lowres_branch", "reduction_pct"]
    bench.write_csv(rows, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().startswith("resolution,crf_gan")
