import numpy as np
import pytest

from promptgrid.report import ablation_table, compare_table, fold_table, render_table


class TestRendering:
    def test_render_alignment(self):
        out = render_table(["a", "bb"], [["1", "2"], ["333", "4"]])
        lines = out.splitlines()
        assert lines[0].startswith("a")
        assert len(lines) == 4
        assert all(len(line) <= len(max(lines, key=len)) for line in lines)


class TestFoldTable:
    def test_none_without_results(self, tmp_path):
        assert fold_table(tmp_path) is None

    def test_multiple_folds_and_modes(self, tmp_path):
        import json
        for mode, fold, mean in (("single", 0, 0.5), ("single", 2, 0.7),
                                 ("ensemble", 0, 0.6)):
            (tmp_path / f"eval_{mode}_fold{fold}.json").write_text(
                json.dumps({"mean": mean}))
        text, rows = fold_table(tmp_path)
        assert "fold-0" in text and "fold-2" in text
        header = rows[0]
        by_mode = {r[0]: r for r in rows[1:]}
        # single: folds 0 and 2 -> mean 0.6
        assert by_mode["single"][header.index("mean")] == "0.6000"
        assert by_mode["ensemble"][header.index("fold-2")] == "-"


class TestAblationTable:
    def test_pivot_across_folds(self, tmp_path):
        (tmp_path / "ablation.csv").write_text(
            "setting,fold,metric,mean\n"
            "w/o Fusion,0,miou,0.4\n"
            "Full Model,0,miou,0.5\n"
            "w/o Fusion,1,miou,0.6\n"
            "Full Model,1,miou,0.7\n")
        text = ablation_table(tmp_path)
        lines = text.splitlines()
        assert lines[0].split()[:3] == ["setting", "fold-0", "fold-1"]
        full = [l for l in lines if l.startswith("Full Model")][0]
        assert "0.6000" in full  # mean of 0.5 and 0.7

    def test_none_when_missing(self, tmp_path):
        assert ablation_table(tmp_path) is None


class TestCompareTable:
    def test_renders_grid(self, tmp_path):
        header = "setting," + ",".join(f"a{i}" for i in range(1, 9)) + ",mean"
        row = "base," + ",".join(str(0.1 * i) for i in range(1, 10))
        (tmp_path / "compare.csv").write_text(header + "\n" + row + "\n")
        text = compare_table(tmp_path)
        assert text.splitlines()[0].split()[:2] == ["setting", "a1"]
        assert "0.9000" in text

    def test_none_when_missing(self, tmp_path):
        assert compare_table(tmp_path) is None
