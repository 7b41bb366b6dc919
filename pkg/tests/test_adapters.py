import numpy as np
import pytest

from promptgrid import engine as en
from promptgrid.adapters import (
    AdapterConfig,
    adapter_apply,
    build_report,
    init_adapter,
    select_preferred,
)


class TestAdapterApply:
    def test_identity_at_init(self):
        adapter = init_adapter(AdapterConfig(embed_dim=16), "a1",
                               np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(3, 6, 16))
        out = adapter_apply(x, adapter)
        assert np.array_equal(out.data, x)

    def test_parameter_count(self):
        adapter = init_adapter(AdapterConfig(embed_dim=64, hidden=16), "a1",
                               np.random.default_rng(0))
        assert adapter.param_count() == 64 * 16 + 16 + 16 * 64 + 64  # 2128

    def test_default_hidden_is_quarter(self):
        cfg = AdapterConfig(embed_dim=64)
        assert cfg.hidden_width == 16

    def test_gradcheck(self):
        adapter = init_adapter(AdapterConfig(embed_dim=8, hidden=4), "a3",
                               np.random.default_rng(2))
        # Zero output weights have zero-gradient inputs; randomize all.
        rng = np.random.default_rng(3)
        for p in adapter.parameters():
            p.data = rng.normal(0.0, 0.3, p.shape)
        x = rng.normal(size=(5, 8))
        probe = rng.normal(size=(5, 8))

        def loss_fn():
            return (adapter_apply(x, adapter) * probe).sum()

        worst = en.check_gradients(loss_fn, adapter.parameters(),
                                   np.random.default_rng(4), samples_per_param=5)
        assert worst < 1e-3

    def test_formula(self):
        adapter = init_adapter(AdapterConfig(embed_dim=4, hidden=2), "a2",
                               np.random.default_rng(5))
        rng = np.random.default_rng(6)
        for p in adapter.parameters():
            p.data = rng.normal(size=p.shape)
        x = rng.normal(size=(3, 4))
        p = {k: t.data for k, t in adapter.params.items()}
        inner = x @ p["w1"] + p["b1"]
        g = en.gelu(inner).data
        expected = x + g @ p["w2"] + p["b2"]
        assert np.allclose(adapter_apply(x, adapter).data, expected, atol=1e-12)

    def test_residual_off_variant(self):
        adapter = init_adapter(AdapterConfig(embed_dim=8, residual=False), "a1",
                               np.random.default_rng(7))
        x = np.random.default_rng(8).normal(size=(2, 8))
        # Zero-init output weights without the residual collapse to zero.
        assert np.array_equal(adapter_apply(x, adapter).data, np.zeros((2, 8)))

    def test_single_layer_variant(self):
        adapter = init_adapter(AdapterConfig(embed_dim=8, single_layer=True), "a1",
                               np.random.default_rng(9))
        assert adapter.param_count() == 8 * 8 + 8
        x = np.random.default_rng(10).normal(size=(2, 8))
        assert np.array_equal(adapter_apply(x, adapter).data, x)  # zero init

    def test_width_mismatch(self):
        adapter = init_adapter(AdapterConfig(embed_dim=8), "a1",
                               np.random.default_rng(11))
        with pytest.raises(en.ShapeError):
            adapter_apply(np.zeros((2, 9)), adapter)


class TestSelection:
    def metrics(self, values):
        return {f"a{i + 1}": v for i, v in enumerate(values)}

    def test_strictly_decreasing_picks_first(self):
        report = build_report(self.metrics([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2]),
                              "miou", True)
        assert select_preferred(report, 4) == ["a1", "a2", "a3", "a4"]
        assert report.selected_ids() == ["a1", "a2", "a3", "a4"]

    def test_all_equal_ties_by_id(self):
        report = build_report(self.metrics([0.5] * 8), "miou", True)
        assert select_preferred(report, 4) == ["a1", "a2", "a3", "a4"]

    def test_random_vector_matches_sort_oracle(self):
        rng = np.random.default_rng(12)
        values = list(rng.random(8))
        report = build_report(self.metrics(values), "miou", True)
        oracle = sorted(self.metrics(values).items(), key=lambda kv: (-kv[1], kv[0]))
        assert select_preferred(report, 4) == [k for k, _ in oracle[:4]]

    def test_lower_is_better_direction(self):
        report = build_report(self.metrics([0.9, 0.1, 0.5, 0.3, 0.8, 0.2, 0.7, 0.6]),
                              "mse", False)
        assert select_preferred(report, 2) == ["a2", "a6"]

    def test_ranks_are_permutation(self):
        rng = np.random.default_rng(13)
        report = build_report(self.metrics(list(rng.random(8))), "miou", True)
        assert sorted(s.rank for s in report.scores) == list(range(1, 9))
        assert sum(s.selected for s in report.scores) == 4

    def test_selecting_too_many(self):
        report = build_report(self.metrics([0.5] * 8), "miou", True)
        with pytest.raises(ValueError):
            select_preferred(report, 9)

    def test_csv_emission(self, tmp_path):
        report = build_report(self.metrics([0.8, 0.1, 0.7, 0.2, 0.6, 0.3, 0.5, 0.4]),
                              "miou", True)
        path = tmp_path / "arrangements.csv"
        report.to_csv(path)
        import csv
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["arrangement", "metric", "rank", "selected"]
        assert len(rows) == 9
        by_id = {r[0]: r for r in rows[1:]}
        assert float(by_id["a1"][1]) == 0.8
        assert by_id["a1"][3] == "1"
        assert by_id["a2"][3] == "0"
