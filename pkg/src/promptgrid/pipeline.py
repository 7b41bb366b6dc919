"""Stage orchestration, persistence, and the run ledger.

Each subcommand reads its prerequisites from the run directory, executes
deterministically under the configured seed, and writes checkpoints,
metrics, and a ledger entry. ``all`` chains pretrain through report.

Run directory layout::

    <out>/
      config_resolved.cfg
      checkpoints/ backbone.json fusion.json adapter_a*.json final_a*.json
      metrics/     *.csv *.json
      figures/     *.png
      ledger.json
"""

from __future__ import annotations

import json
import resource
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import select_preferred
from .backbone import pretrain
from .checkpoint import (
    load_adapter,
    load_backbone,
    load_bundle,
    load_fusion,
    save_adapter,
    save_backbone,
    save_bundle,
    save_fusion,
)
from .config import RunConfig, resolve_text
from .finetune import FinetunePlan
from .fusion import init_fusion
from .grid import arrangement_catalog
from .inference import BundleMember, ModelBundle
from .prompts import SupportPool, ingest
from .tasks import TaskSpec, evaluate, metric_for_kind
from .training import (
    Stage1Config,
    Stage2Config,
    Stage3Config,
    split_pool_ids,
    train_stage1,
    train_stage2,
    train_stage3,
    train_stage3_member,
)

STAGES = ("pretrain", "stage1", "stage2", "stage3", "eval", "report")


class PipelineError(RuntimeError):
    pass


class PrerequisiteError(PipelineError):
    pass


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def figures(self) -> Path:
        return self.root / "figures"

    @property
    def ledger(self) -> Path:
        return self.root / "ledger.json"

    def ensure(self) -> "RunPaths":
        for d in (self.root, self.checkpoints, self.metrics, self.figures):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def backbone(self) -> Path:
        return self.checkpoints / "backbone.json"

    def fusion(self) -> Path:
        return self.checkpoints / "fusion.json"

    def adapter(self, arrangement_id: str) -> Path:
        return self.checkpoints / f"adapter_{arrangement_id}.json"

    def final(self, arrangement_id: str) -> Path:
        return self.checkpoints / f"final_{arrangement_id}.json"


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(
            f"missing {path.name} (run '{produced_by}' first): {path}")
    return path


class RunLedger:
    """Stage statuses, artifact paths, metric history, and resource use."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.data = {"stages": {}, "metrics": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def stage_done(self, name: str) -> bool:
        return self.data["stages"].get(name, {}).get("status") == "done"

    def record_stage(self, name: str, *, seconds: float, artifacts: list[str],
                     extra: dict | None = None) -> None:
        entry = {
            "status": "done",
            "wall_time_s": round(seconds, 3),
            "peak_mem_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
            "artifacts": artifacts,
        }
        if extra:
            entry.update(extra)
        self.data["stages"][name] = entry
        self.save()

    def record_metric(self, name: str, value) -> None:
        self.data["metrics"][name] = value
        self.save()

    def save(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _timed(fn):
    start = time.perf_counter()
    result = fn()
    return result, time.perf_counter() - start


# -- data assembly -----------------------------------------------------------

def train_spec(cfg: RunConfig) -> TaskSpec:
    return TaskSpec(kind=cfg.task_kind, seed=cfg.task_seed, count=cfg.train_count,
                    extent=cfg.extent, fold=cfg.task_fold)


def eval_spec(cfg: RunConfig, count: int | None = None) -> TaskSpec:
    return TaskSpec(kind=cfg.task_kind, seed=cfg.resolved_eval_seed,
                    count=count or cfg.eval_count, extent=cfg.extent,
                    fold=cfg.task_fold)


def build_pool(cfg: RunConfig) -> SupportPool:
    return ingest(train_spec(cfg))


def pretrain_pool(cfg: RunConfig) -> SupportPool:
    """The backbone's pretraining corpus.

    By default this spans all four folds (cfg.pretrain_all_folds), so the
    fold-specific stages and final evaluation still have something to
    specialize; pretraining on the target fold alone leaves the later
    fine-tuning stages nothing to add.
    """
    if not cfg.pretrain_all_folds:
        return build_pool(cfg)
    from .tasks import FOLDS
    per_fold = int(np.ceil(cfg.train_count / FOLDS))
    pairs = []
    next_id = 0
    for fold in range(FOLDS):
        spec = TaskSpec(kind=cfg.task_kind, seed=cfg.task_seed, count=per_fold,
                        extent=cfg.extent, fold=fold)
        for pair in ingest(spec).pairs:
            pair.id = next_id
            next_id += 1
            pairs.append(pair)
    from .prompts import SupportPool as Pool
    return Pool(pairs=pairs)


def pretrain_triples(pool: SupportPool, neighbor_count: int,
                     rng: np.random.Generator):
    """Pair every pool item with one of its pixel-similar neighbors.

    Pixel-space cosine similarity stands in for feature retrieval before
    a backbone exists; near neighbors share texture style, so composed
    training canvases demonstrate a consistent labeling convention.
    """
    images = np.stack([p.image.reshape(-1) for p in pool.pairs])
    norms = np.linalg.norm(images, axis=1, keepdims=True)
    sims = (images / norms) @ (images / norms).T
    np.fill_diagonal(sims, -np.inf)
    m = min(neighbor_count, len(pool) - 1)
    triples = []
    for i, pair in enumerate(pool.pairs):
        candidates = np.argsort(-sims[i])[:m]
        j = int(candidates[rng.integers(m)])
        other = pool.pairs[j]
        triples.append(((other.image, other.label), pair.image, pair.label))
    return triples


# -- stage commands -----------------------------------------------------------

def cmd_pretrain(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> None:
    pool = pretrain_pool(cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    triples = pretrain_triples(pool, cfg.pretrain_neighbors, rng)

    def run():
        return pretrain(triples, cfg.backbone_config(),
                        np.random.default_rng([cfg.seed, 1]),
                        epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                        batch_size=cfg.batch_size)

    result, seconds = _timed(run)
    save_backbone(paths.backbone(), result.params, result.codebook)
    _write_loss_csv(paths.metrics / "pretrain_losses.csv", result.losses)
    ledger.record_stage("pretrain", seconds=seconds,
                        artifacts=[str(paths.backbone())],
                        extra={"final_loss": result.losses[-1]})


def cmd_stage1(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> None:
    backbone, codebook = load_backbone(_require(paths.backbone(), "pretrain"))
    pool = build_pool(cfg)
    stage_cfg = Stage1Config(
        k=cfg.k, balance=cfg.balance, epochs=cfg.stage1_epochs,
        lr=cfg.stage1_lr, batch_size=cfg.batch_size,
        mean_fusion=cfg.mean_fusion, reuse=cfg.reuse,
        fusion=cfg.fusion_config(), seed=cfg.seed)

    result, seconds = _timed(lambda: train_stage1(pool, backbone, codebook, stage_cfg))
    save_fusion(paths.fusion(), result.fusion)
    _write_loss_csv(paths.metrics / "stage1_losses.csv", result.losses)
    ledger.record_stage("stage1", seconds=seconds,
                        artifacts=[str(paths.fusion())],
                        extra={"final_loss": result.losses[-1],
                               "alpha_min": min(result.alpha_min),
                               "alpha_sum_err": max(result.alpha_sum_err)})


def cmd_stage2(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> None:
    backbone, codebook = load_backbone(_require(paths.backbone(), "pretrain"))
    fusion = load_fusion(_require(paths.fusion(), "stage1"))
    pool = build_pool(cfg)
    stage_cfg = Stage2Config(
        task_kind=cfg.task_kind, k=cfg.k, epochs=cfg.stage2_epochs,
        lr=cfg.stage2_lr, batch_size=cfg.batch_size,
        hidden=cfg.adapter_hidden_width, residual=cfg.adapter_residual,
        single_layer=cfg.adapter_single_layer,
        holdout_fraction=cfg.stage2_holdout, select_count=cfg.stage2_select,
        mean_fusion=cfg.mean_fusion, reuse=cfg.reuse, seed=cfg.seed)

    result, seconds = _timed(lambda: train_stage2(pool, backbone, codebook,
                                                  fusion, stage_cfg))
    artifacts = []
    for arrangement_id, adapter in result.adapters.items():
        path = paths.adapter(arrangement_id)
        save_adapter(path, adapter)
        artifacts.append(str(path))
    result.report.to_csv(paths.metrics / "arrangements.csv")
    ledger.record_stage(
        "stage2", seconds=seconds, artifacts=artifacts,
        extra={"preferred": result.report.selected_ids(),
               "metrics": {s.arrangement_id: s.metric for s in result.report.scores},
               "train_ids": result.train_ids, "rank_ids": result.rank_ids})


def cmd_stage3(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> None:
    backbone, codebook = load_backbone(_require(paths.backbone(), "pretrain"))
    fusion = load_fusion(_require(paths.fusion(), "stage1"))
    adapters = {}
    for arrangement in arrangement_catalog():
        adapters[arrangement.id] = load_adapter(
            _require(paths.adapter(arrangement.id), "stage2"))
    stage2_entry = ledger.data["stages"].get("stage2")
    if not stage2_entry:
        raise PrerequisiteError("missing stage2 ledger entry (run 'stage2' first)")
    preferred = stage2_entry["preferred"]
    train_ids, rank_ids = stage2_entry["train_ids"], stage2_entry["rank_ids"]

    pool = build_pool(cfg)
    stage_cfg = Stage3Config(
        task_kind=cfg.task_kind, k=cfg.k, swap_count=cfg.swap_count,
        epochs=cfg.stage3_epochs, lr=cfg.stage3_lr, batch_size=cfg.batch_size,
        mean_fusion=cfg.mean_fusion, reuse=cfg.reuse, seed=cfg.seed)

    result, seconds = _timed(lambda: train_stage3(
        pool, backbone, codebook, fusion, adapters, preferred, stage_cfg,
        train_ids=train_ids, rank_ids=rank_ids))

    artifacts = []
    for arrangement_id, member_result in result.members.items():
        path = paths.final(arrangement_id)
        save_bundle(path, member_result.member, codebook, backbone,
                    k=cfg.k, mean_fusion=cfg.mean_fusion, reuse=cfg.reuse,
                    extra_meta={"designation_metric":
                                result.designation_metrics[arrangement_id]})
        artifacts.append(str(path))
    _write_designation_csv(paths.metrics / "stage3_designation.csv",
                           result.designation_metrics, result.best_arrangement)
    ledger.record_stage(
        "stage3", seconds=seconds, artifacts=artifacts,
        extra={"best_arrangement": result.best_arrangement,
               "designation_metrics": result.designation_metrics})


def final_bundle(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> ModelBundle:
    stage3_entry = ledger.data["stages"].get("stage3")
    if not stage3_entry:
        raise PrerequisiteError("missing stage3 ledger entry (run 'stage3' first)")
    best = stage3_entry["best_arrangement"]
    if cfg.mode == "ensemble":
        members = sorted(stage3_entry["designation_metrics"])
        files = [_require(paths.final(a), "stage3") for a in members]
    else:
        files = [_require(paths.final(best), "stage3")]
    return load_bundle(files)


def cmd_eval(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> dict:
    bundle = final_bundle(cfg, paths, ledger)
    pool = build_pool(cfg)
    spec = eval_spec(cfg)

    def run():
        return evaluate(bundle, spec, pool, mode=cfg.mode)

    result, seconds = _timed(run)
    name = f"eval_{cfg.mode}_fold{cfg.task_fold}"
    _write_eval_files(paths.metrics, name, result)
    ledger.record_stage("eval", seconds=seconds,
                        artifacts=[str(paths.metrics / f"{name}.csv")],
                        extra={"mean": result.mean, "stderr": result.stderr,
                               "metric": result.metric})
    ledger.record_metric(name, {"mean": result.mean, "stderr": result.stderr,
                                "metric": result.metric})
    return result.to_dict()


def cmd_report(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> None:
    from .report import write_reports
    _, seconds = _timed(lambda: write_reports(cfg, paths, ledger))
    ledger.record_stage("report", seconds=seconds,
                        artifacts=[str(paths.metrics), str(paths.figures)])


def cmd_all(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> None:
    cmd_pretrain(cfg, paths, ledger)
    cmd_stage1(cfg, paths, ledger)
    cmd_stage2(cfg, paths, ledger)
    cmd_stage3(cfg, paths, ledger)
    cmd_eval(cfg, paths, ledger)
    cmd_report(cfg, paths, ledger)


# -- comparison harnesses ------------------------------------------------------

ABLATION_VARIANTS = ("fusion=mean", "reuse=off", "residual=off", "layers=1", "none")
ABLATION_LABELS = {
    "fusion=mean": "w/o Fusion",
    "reuse=off": "w/o Reuse",
    "residual=off": "w/o Residual",
    "layers=1": "1-layer MLP",
    "none": "Full Model",
}


def cmd_ablation(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> dict:
    """Train and evaluate the four ablated variants plus the full model.

    All variants share the pretrained backbone; stages 1-3 rerun per
    variant under identical seeds. Emits the five-row ablation table.
    """
    import dataclasses as dc

    _require(paths.backbone(), "pretrain")
    start = time.perf_counter()
    means: dict[str, float] = {}
    for variant in ABLATION_VARIANTS:
        sub_cfg = dc.replace(cfg, ablation=variant,
                             out=str(paths.root / "ablation" / variant.replace("=", "-")))
        sub_cfg.validate()
        sub_paths = RunPaths(sub_cfg.out).ensure()
        sub_ledger = RunLedger(sub_paths.ledger)
        # Reuse the shared backbone checkpoint.
        if not sub_paths.backbone().exists():
            sub_paths.backbone().write_bytes(paths.backbone().read_bytes())
            sub_ledger.record_stage("pretrain", seconds=0.0,
                                    artifacts=[str(sub_paths.backbone())],
                                    extra={"shared_from": str(paths.backbone())})
        cmd_stage1(sub_cfg, sub_paths, sub_ledger)
        cmd_stage2(sub_cfg, sub_paths, sub_ledger)
        cmd_stage3(sub_cfg, sub_paths, sub_ledger)
        result = cmd_eval(sub_cfg, sub_paths, sub_ledger)
        means[variant] = result["mean"]

    metric, _ = metric_for_kind(cfg.task_kind)
    rows = [(ABLATION_LABELS[v], cfg.task_fold, metric, means[v])
            for v in ABLATION_VARIANTS]
    _write_table_csv(paths.metrics / "ablation.csv",
                     ["setting", "fold", "metric", "mean"], rows)
    ledger.record_stage("ablation", seconds=time.perf_counter() - start,
                        artifacts=[str(paths.metrics / "ablation.csv")],
                        extra={"means": means})
    return means


COMPARE_SETTINGS = ("base", "base-ft", "fuse", "fuse-ft", "mlp", "mlp-ft")


def cmd_compare(cfg: RunConfig, paths: RunPaths, ledger: RunLedger) -> dict:
    """Per-arrangement grid: top-1 baseline, fusion, and adapter models,
    each with and without joint fine-tuning, across all eight layouts."""
    backbone, codebook = load_backbone(_require(paths.backbone(), "pretrain"))
    fusion = load_fusion(_require(paths.fusion(), "stage1"))
    adapters = {a.id: load_adapter(_require(paths.adapter(a.id), "stage2"))
                for a in arrangement_catalog()}
    pool = build_pool(cfg)
    pool.ensure_features(backbone)
    train_ids, rank_ids = split_pool_ids(pool, cfg.stage2_holdout, cfg.seed)
    train_pool = pool.subset(train_ids)
    spec = eval_spec(cfg, count=cfg.compare_eval_count)
    start = time.perf_counter()

    degenerate_fusion = init_fusion(cfg.fusion_config(),
                                    np.random.default_rng([cfg.seed, 77]))

    def member_for(setting: str, arrangement_id: str) -> tuple[BundleMember, int]:
        """Returns (member, k) for one grid cell, fine-tuning if needed."""
        plan_kwargs = dict(epochs=cfg.compare_epochs, lr=cfg.stage3_lr,
                           batch_size=cfg.batch_size)
        if setting == "base":
            return BundleMember(arrangement_id, backbone, degenerate_fusion, None), 1
        if setting == "base-ft":
            plan = FinetunePlan(arrangement_id, swap_count=min(cfg.swap_count, 1),
                                unfreeze_fusion=False, unfreeze_adapter=False,
                                unfreeze_backbone=True, **plan_kwargs)
            result = train_stage3_member(
                train_pool, plan, backbone, degenerate_fusion, None, codebook,
                backbone, k=1, task_kind=cfg.task_kind, seed=cfg.seed)
            return result.member, 1
        if setting == "fuse":
            plan = FinetunePlan(arrangement_id, swap_count=0,
                                unfreeze_fusion=True, unfreeze_adapter=False,
                                unfreeze_backbone=False, **plan_kwargs)
            result = train_stage3_member(
                train_pool, plan, backbone, fusion, None, codebook, backbone,
                k=cfg.k, task_kind=cfg.task_kind,
                mean_fusion=cfg.mean_fusion, reuse=cfg.reuse, seed=cfg.seed)
            return result.member, cfg.k
        if setting == "fuse-ft":
            plan = FinetunePlan(arrangement_id, swap_count=cfg.swap_count,
                                unfreeze_fusion=True, unfreeze_adapter=False,
                                unfreeze_backbone=True, **plan_kwargs)
            result = train_stage3_member(
                train_pool, plan, backbone, fusion, None, codebook, backbone,
                k=cfg.k, task_kind=cfg.task_kind,
                mean_fusion=cfg.mean_fusion, reuse=cfg.reuse, seed=cfg.seed)
            return result.member, cfg.k
        if setting == "mlp":
            return BundleMember(arrangement_id, backbone, fusion,
                                adapters[arrangement_id]), cfg.k
        if setting == "mlp-ft":
            plan = FinetunePlan(arrangement_id, swap_count=cfg.swap_count,
                                **plan_kwargs)
            result = train_stage3_member(
                train_pool, plan, backbone, fusion, adapters[arrangement_id],
                codebook, backbone, k=cfg.k, task_kind=cfg.task_kind,
                mean_fusion=cfg.mean_fusion, reuse=cfg.reuse, seed=cfg.seed)
            return result.member, cfg.k
        raise ValueError(f"unknown compare setting {setting!r}")

    grid: dict[str, dict[str, float]] = {}
    for setting in COMPARE_SETTINGS:
        grid[setting] = {}
        for arrangement in arrangement_catalog():
            member, k = member_for(setting, arrangement.id)
            bundle = ModelBundle(members=[member], codebook=codebook,
                                 retrieval_backbone=backbone, k=k,
                                 mean_fusion=cfg.mean_fusion, reuse=cfg.reuse)
            result = evaluate(bundle, spec, pool)
            grid[setting][arrangement.id] = result.mean

    arrangement_ids = [a.id for a in arrangement_catalog()]
    rows = []
    for setting in COMPARE_SETTINGS:
        values = [grid[setting][a] for a in arrangement_ids]
        rows.append([setting] + values + [float(np.mean(values))])
    _write_table_csv(paths.metrics / "compare.csv",
                     ["setting"] + arrangement_ids + ["mean"], rows)
    ledger.record_stage("compare", seconds=time.perf_counter() - start,
                        artifacts=[str(paths.metrics / "compare.csv")],
                        extra={"grid": grid})
    return grid


# -- file helpers --------------------------------------------------------------

def _write_loss_csv(path: Path, losses: list[float]) -> None:
    lines = ["step,loss"]
    lines += [f"{i},{repr(v)}" for i, v in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n")


def _write_designation_csv(path: Path, metrics: dict[str, float], best: str) -> None:
    lines = ["arrangement,metric,best"]
    for arrangement_id in sorted(metrics):
        lines.append(f"{arrangement_id},{repr(metrics[arrangement_id])},"
                     f"{int(arrangement_id == best)}")
    path.write_text("\n".join(lines) + "\n")


def _write_table_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_eval_files(metrics_dir: Path, name: str, result) -> None:
    payload = result.to_dict()
    (metrics_dir / f"{name}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True))
    lines = ["index,value"]
    lines += [f"{i},{repr(v)}" for i, v in enumerate(result.values)]
    (metrics_dir / f"{name}.csv").write_text("\n".join(lines) + "\n")


# -- entry point ----------------------------------------------------------------

def run(subcommand: str, cfg: RunConfig) -> int:
    """Execute one subcommand; returns a process exit status."""
    cfg.validate()
    paths = RunPaths(cfg.out).ensure()
    (paths.root / "config_resolved.cfg").write_text(resolve_text(cfg))
    ledger = RunLedger(paths.ledger)
    commands = {
        "pretrain": cmd_pretrain,
        "stage1": cmd_stage1,
        "stage2": cmd_stage2,
        "stage3": cmd_stage3,
        "eval": cmd_eval,
        "report": cmd_report,
        "all": cmd_all,
        "ablation": cmd_ablation,
        "compare": cmd_compare,
    }
    if subcommand not in commands:
        raise PipelineError(f"unknown subcommand {subcommand!r}")
    commands[subcommand](cfg, paths, ledger)
    return 0
