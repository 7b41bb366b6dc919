"""Run configuration: flat dotted-key text files over typed defaults.

Example file::

    task.kind = segmentation
    retrieval.k = 4
    stage1.lr = 0.03      # trailing comments allowed

Unknown keys fail loudly with the offending name. ``resolve_text``
re-emits every field (defaults included) so a run can be reproduced from
its echoed config alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .fusion import FusionConfig

MODES = ("single", "ensemble")
ABLATIONS = ("none", "fusion=mean", "reuse=off", "residual=off", "layers=1")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # task
    task_kind: str = "segmentation"
    task_seed: int = 0
    task_fold: int = 0
    train_count: int = 500
    eval_count: int = 100
    extent: int = 32                  # panel size; the canvas is twice this
    eval_seed: int = -1               # -1: derived from task_seed

    # backbone dimensions
    patch_size: int = 8
    embed_dim: int = 64
    blocks: int = 4
    heads: int = 4
    ff_hidden: int = 128
    vocab_size: int = 64

    # fusion module
    fusion_depth: int = 2
    fusion_heads: int = 4
    fusion_refine_hidden: int = -1    # -1: 2 * embed_dim

    # adapters
    adapter_hidden: int = -1          # -1: embed_dim // 4

    # shared training knobs
    k: int = 4
    swap_count: int = 2               # N
    balance: float = 0.6              # alignment weight in the fused objective
    batch_size: int = 16

    # per-stage schedules
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.03
    pretrain_neighbors: int = 8       # pixel-similar candidates for pairing
    pretrain_all_folds_flag: int = 1  # pretrain corpus spans all folds
    stage1_epochs: int = 4
    stage1_lr: float = 0.03
    stage2_epochs: int = 2
    stage2_lr: float = 0.03
    stage2_holdout: float = 0.2
    stage2_select: int = 4
    stage3_epochs: int = 1
    stage3_lr: float = 0.01

    # harness scale overrides (compare / ablation subcommands)
    compare_epochs: int = 1
    compare_eval_count: int = 32

    # run control
    seed: int = 0
    mode: str = "single"
    ablation: str = "none"
    out: str = "runs/default"

    def validate(self) -> None:
        if self.task_kind not in ("segmentation", "detection", "colorization"):
            raise ConfigError(f"task.kind: unknown kind {self.task_kind!r}")
        if self.k < 1:
            raise ConfigError("retrieval.k must be >= 1")
        if not 0 <= self.swap_count <= self.k:
            raise ConfigError(
                f"stage3.swap_count must lie in 0..K (K={self.k}), "
                f"got {self.swap_count}")
        if not 0.0 <= self.balance <= 1.0:
            raise ConfigError("stage1.balance must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(
                f"run.ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.train_count < 1 or self.eval_count < 1:
            raise ConfigError("task.train_count and task.eval_count must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0.0 < self.stage2_holdout < 1.0:
            raise ConfigError("stage2.holdout must lie in (0, 1)")
        # Constructing the derived configs validates the dimension math.
        self.backbone_config()
        self.fusion_config()

    # -- derived values ----------------------------------------------------
    @property
    def canvas_size(self) -> int:
        return 2 * self.extent

    @property
    def resolved_eval_seed(self) -> int:
        return self.eval_seed if self.eval_seed >= 0 else self.task_seed + 500009

    @property
    def adapter_hidden_width(self) -> int:
        return self.adapter_hidden if self.adapter_hidden > 0 else max(1, self.embed_dim // 4)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            canvas_size=self.canvas_size, patch_size=self.patch_size,
            embed_dim=self.embed_dim, blocks=self.blocks, heads=self.heads,
            ff_hidden=self.ff_hidden, vocab_size=self.vocab_size)

    def fusion_config(self) -> FusionConfig:
        hidden = self.fusion_refine_hidden if self.fusion_refine_hidden > 0 else None
        return FusionConfig(embed_dim=self.embed_dim, heads=self.fusion_heads,
                            depth=self.fusion_depth, refine_hidden=hidden)

    @property
    def pretrain_all_folds(self) -> bool:
        return bool(self.pretrain_all_folds_flag)

    @property
    def mean_fusion(self) -> bool:
        return self.ablation == "fusion=mean"

    @property
    def reuse(self) -> bool:
        return self.ablation != "reuse=off"

    @property
    def adapter_residual(self) -> bool:
        return self.ablation != "residual=off"

    @property
    def adapter_single_layer(self) -> bool:
        return self.ablation == "layers=1"


# Dotted config key -> dataclass field.
KEYMAP = {
    "task.kind": "task_kind",
    "task.seed": "task_seed",
    "task.fold": "task_fold",
    "task.train_count": "train_count",
    "task.eval_count": "eval_count",
    "task.extent": "extent",
    "task.eval_seed": "eval_seed",
    "model.patch_size": "patch_size",
    "model.embed_dim": "embed_dim",
    "model.blocks": "blocks",
    "model.heads": "heads",
    "model.ff_hidden": "ff_hidden",
    "model.vocab_size": "vocab_size",
    "fusion.depth": "fusion_depth",
    "fusion.heads": "fusion_heads",
    "fusion.refine_hidden": "fusion_refine_hidden",
    "adapter.hidden": "adapter_hidden",
    "retrieval.k": "k",
    "stage3.swap_count": "swap_count",
    "stage1.balance": "balance",
    "train.batch_size": "batch_size",
    "pretrain.epochs": "pretrain_epochs",
    "pretrain.lr": "pretrain_lr",
    "pretrain.neighbors": "pretrain_neighbors",
    "pretrain.all_folds": "pretrain_all_folds_flag",
    "stage1.epochs": "stage1_epochs",
    "stage1.lr": "stage1_lr",
    "stage2.epochs": "stage2_epochs",
    "stage2.lr": "stage2_lr",
    "stage2.holdout": "stage2_holdout",
    "stage2.select": "stage2_select",
    "stage3.epochs": "stage3_epochs",
    "stage3.lr": "stage3_lr",
    "compare.epochs": "compare_epochs",
    "compare.eval_count": "compare_eval_count",
    "run.seed": "seed",
    "run.mode": "mode",
    "run.ablation": "ablation",
    "run.out": "out",
}
FIELD_TO_KEY = {v: k for k, v in KEYMAP.items()}


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        # maxsplit keeps values like 'fusion=mean' intact
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


def _convert(field_name: str, value: str):
    ftype = {f.name: f.type for f in fields(RunConfig)}[field_name]
    if ftype == "int":
        return int(value)
    if ftype == "float":
        return float(value)
    return value


def config_from_entries(entries: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    for key, value in entries.items():
        if key not in KEYMAP:
            raise ConfigError(f"unknown config field {key!r}")
        try:
            setattr(cfg, KEYMAP[key], _convert(KEYMAP[key], value))
        except ValueError as exc:
            raise ConfigError(f"config field {key!r}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    entries: dict[str, str] = {}
    if path is not None:
        entries.update(parse_config_text(Path(path).read_text()))
    if overrides:
        entries.update({k: str(v) for k, v in overrides.items()})
    return config_from_entries(entries)


def resolve_text(cfg: RunConfig) -> str:
    """Echo every field (defaults included) as a reloadable config file."""
    lines = []
    for f in fields(RunConfig):
        key = FIELD_TO_KEY[f.name]
        lines.append(f"{key} = {getattr(cfg, f.name)}")
    return "\n".join(sorted(lines)) + "\n"
