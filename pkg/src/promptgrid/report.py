"""Report emission: fold tables, comparison grids, and qualitative sheets.

Reads whatever metric files the run directory holds and renders them as
CSV plus aligned text tables. Optional tables whose inputs are missing
are named explicitly in the report instead of failing the run; a run
with no evaluation results at all is an error.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .backbone import pooled_feature
from .fusion import fuse
from .grid import Role, arrangement_by_id, compose, extract, save_png
from .inference import predict_example
from .prompts import retrieve_topk
from .tasks import generate, metric_for_kind


class ReportError(RuntimeError):
    pass


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def render_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(c)) for c in col)
              for col in zip(*([header] + rows))]
    def line(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in rows])


def fold_table(metrics_dir: Path) -> tuple[str, list[list[str]]] | None:
    """Per-fold mean table from eval_<mode>_fold<k>.json files."""
    results = {}
    for path in sorted(metrics_dir.glob("eval_*_fold*.json")):
        payload = json.loads(path.read_text())
        stem = path.stem  # eval_<mode>_fold<k>
        mode = stem.split("_")[1]
        fold = int(stem.rsplit("fold", 1)[1])
        results.setdefault(mode, {})[fold] = payload["mean"]
    if not results:
        return None
    folds = sorted({f for per_mode in results.values() for f in per_mode})
    header = ["mode"] + [f"fold-{f}" for f in folds] + ["mean"]
    rows = []
    for mode in sorted(results):
        values = [results[mode].get(f) for f in folds]
        cells = [mode] + [(_fmt(v) if v is not None else "-") for v in values]
        present = [v for v in values if v is not None]
        cells.append(_fmt(float(np.mean(present))))
        rows.append(cells)
    return render_table(header, rows), [header] + rows


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open() as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def ablation_table(metrics_dir: Path) -> str | None:
    path = metrics_dir / "ablation.csv"
    if not path.exists():
        return None
    header, raw = _read_csv(path)
    by_setting: dict[str, dict[int, float]] = {}
    order: list[str] = []
    for setting, fold, _metric, mean in raw:
        if setting not in by_setting:
            order.append(setting)
        by_setting.setdefault(setting, {})[int(fold)] = float(mean)
    folds = sorted({f for row in by_setting.values() for f in row})
    out_header = ["setting"] + [f"fold-{f}" for f in folds] + ["mean"]
    rows = []
    for setting in order:
        values = [by_setting[setting].get(f) for f in folds]
        cells = [setting] + [(_fmt(v) if v is not None else "-") for v in values]
        present = [v for v in values if v is not None]
        cells.append(_fmt(float(np.mean(present))))
        rows.append(cells)
    return render_table(out_header, rows)


def compare_table(metrics_dir: Path) -> str | None:
    path = metrics_dir / "compare.csv"
    if not path.exists():
        return None
    header, raw = _read_csv(path)
    rows = [[r[0]] + [_fmt(float(v)) for v in r[1:]] for r in raw]
    return render_table(header, rows)


def qualitative_sheet(cfg, paths, bundle, pool, count: int = 6) -> Path:
    """Strips of [query | fused image | fused label | prediction | truth]."""
    from .pipeline import eval_spec

    spec = eval_spec(cfg, count=count)
    member = bundle.members[0]
    arrangement = arrangement_by_id(member.arrangement_id)
    pool.ensure_features(bundle.retrieval_backbone)
    strips = []
    for image, label in generate(spec):
        feature = pooled_feature(image, bundle.retrieval_backbone)
        hits = retrieve_topk(feature, pool, bundle.k)
        fused = fuse(image, [h.pair for h in hits], bundle.retrieval_backbone,
                     member.fusion, mean_fusion=bundle.mean_fusion,
                     reuse=bundle.reuse)
        pred = predict_example(bundle, member, image, pool, query_feature=feature)
        gap = np.ones((image.shape[0], 2, 3))
        strip = [image, gap, fused.fused_image, gap, fused.fused_label,
                 gap, pred, gap, label]
        strips.append(np.concatenate(strip, axis=1))
        strips.append(np.ones((2, strips[-1].shape[1], 3)))
    sheet = np.concatenate(strips[:-1], axis=0)
    out = paths.figures / "qualitative.png"
    save_png(sheet, out)
    return out


def write_reports(cfg, paths, ledger) -> None:
    from .pipeline import build_pool, final_bundle

    metrics_dir = paths.metrics
    sections: list[str] = []
    missing: list[str] = []

    fold = fold_table(metrics_dir)
    if fold is None:
        raise ReportError(
            f"no evaluation results in {metrics_dir} "
            f"(expected eval_<mode>_fold<k>.json; run 'eval' first)")
    text, csv_rows = fold
    sections.append("Per-fold results\n" + text)
    with (metrics_dir / "fold_table.csv").open("w", newline="") as fh:
        csv.writer(fh).writerows(csv_rows)

    comparison = compare_table(metrics_dir)
    if comparison is None:
        missing.append(str(metrics_dir / "compare.csv") +
                       " (run 'compare' for the per-arrangement grid)")
    else:
        sections.append("Per-arrangement grid\n" + comparison)

    ablation = ablation_table(metrics_dir)
    if ablation is None:
        missing.append(str(metrics_dir / "ablation.csv") +
                       " (run 'ablation' for the component table)")
    else:
        sections.append("Component ablations\n" + ablation)

    arrangements = metrics_dir / "arrangements.csv"
    if arrangements.exists():
        header, raw = _read_csv(arrangements)
        rows = [[r[0], _fmt(float(r[1])), r[2], r[3]] for r in raw]
        sections.append("Arrangement ranking\n" + render_table(header, rows))

    counts = param_count_section(paths)
    if counts:
        sections.append(counts)

    if missing:
        sections.append("Missing inputs\n" + "\n".join(f"- {m}" for m in missing))

    (metrics_dir / "report.txt").write_text("\n\n".join(sections) + "\n")

    bundle = final_bundle(cfg, paths, ledger)
    qualitative_sheet(cfg, paths, bundle, build_pool(cfg))


def param_count_section(paths) -> str | None:
    """Trainable-parameter table from the saved checkpoints."""
    from .checkpoint import load_adapter, load_fusion

    fusion_path = paths.fusion()
    if not fusion_path.exists():
        return None
    fusion = load_fusion(fusion_path)
    rows = [["fusion", str(fusion.param_count()), "-"]]
    adapter_path = paths.adapter("a1")
    if adapter_path.exists():
        adapter = load_adapter(adapter_path)
        ratio = adapter.param_count() / fusion.param_count()
        rows.append(["adapter (each)", str(adapter.param_count()), f"{ratio:.2%}"])
    return "Parameter counts\n" + render_table(
        ["component", "parameters", "fraction of fusion"], rows)
