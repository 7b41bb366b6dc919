"""Arrangement-specific bottleneck adapters and arrangement selection.

Each of the eight layouts gets its own tiny residual feed-forward module
acting on patch-token embeddings, trained with everything else frozen.
Zero-initialized output weights make every adapter the identity at
initialization, so attaching them never changes behavior until trained.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as en
from .engine import Tensor
from .params import ParamContainer


@dataclass(frozen=True)
class AdapterConfig:
    embed_dim: int
    hidden: int | None = None      # default: embed_dim // 4 (bottleneck)
    residual: bool = True          # ablation: residual=off
    single_layer: bool = False     # ablation: layers=1 (plain d x d map)

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else max(1, self.embed_dim // 4)


class AdapterParams(ParamContainer):
    def __init__(self, config: AdapterConfig, arrangement_id: str,
                 params: dict[str, Tensor]):
        super().__init__(params)
        self.config = config
        self.arrangement_id = arrangement_id


def init_adapter(config: AdapterConfig, arrangement_id: str,
                 rng: np.random.Generator) -> AdapterParams:
    d = config.embed_dim
    params: dict[str, Tensor] = {}
    if config.single_layer:
        params["w"] = en.parameter(np.zeros((d, d)), name="w")
        params["b"] = en.parameter(np.zeros(d), name="b")
    else:
        h = config.hidden_width
        params["w1"] = en.parameter(rng.normal(0.0, 0.02, (d, h)), name="w1")
        params["b1"] = en.parameter(np.zeros(h), name="b1")
        # Zero output projection: the adapter starts as the identity.
        params["w2"] = en.parameter(np.zeros((h, d)), name="w2")
        params["b2"] = en.parameter(np.zeros(d), name="b2")
    return AdapterParams(config, arrangement_id, params)


def adapter_apply(tokens, adapter: AdapterParams) -> Tensor:
    """Z = X + W2 gelu(W1 X + b1) + b2 per token (variants per config)."""
    x = en.as_tensor(tokens)
    if x.shape[-1] != adapter.config.embed_dim:
        raise en.ShapeError(
            f"token width {x.shape[-1]} != adapter embed_dim "
            f"{adapter.config.embed_dim}")
    p = adapter.params
    if adapter.config.single_layer:
        delta = en.linear(x, p["w"], p["b"])
    else:
        delta = en.linear(en.gelu(en.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])
    if not adapter.config.residual:
        return delta
    return x + delta


@dataclass
class ArrangementScore:
    arrangement_id: str
    metric: float
    rank: int
    selected: bool


@dataclass
class ArrangementReport:
    scores: list[ArrangementScore]
    metric_name: str
    higher_is_better: bool

    def __post_init__(self):
        ranks = sorted(s.rank for s in self.scores)
        if ranks != list(range(1, len(self.scores) + 1)):
            raise ValueError(f"ranks must be a permutation of 1..{len(self.scores)}")

    def selected_ids(self) -> list[str]:
        chosen = [s for s in self.scores if s.selected]
        return [s.arrangement_id for s in sorted(chosen, key=lambda s: s.rank)]

    def by_id(self, arrangement_id: str) -> ArrangementScore:
        for s in self.scores:
            if s.arrangement_id == arrangement_id:
                return s
        raise KeyError(arrangement_id)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arrangement", "metric", "rank", "selected"])
            for s in sorted(self.scores, key=lambda s: s.arrangement_id):
                writer.writerow([s.arrangement_id, repr(s.metric), s.rank,
                                 int(s.selected)])


def _sorted_ids(metrics: dict[str, float], higher_is_better: bool) -> list[str]:
    direction = -1.0 if higher_is_better else 1.0
    return sorted(metrics, key=lambda a: (direction * metrics[a], a))


def build_report(metrics: dict[str, float], metric_name: str,
                 higher_is_better: bool, select_count: int = 4) -> ArrangementReport:
    """Rank all arrangements by held-out metric and flag the preferred set."""
    order = _sorted_ids(metrics, higher_is_better)
    scores = [ArrangementScore(arrangement_id=a, metric=float(metrics[a]),
                               rank=i + 1, selected=i < select_count)
              for i, a in enumerate(order)]
    scores.sort(key=lambda s: s.arrangement_id)
    return ArrangementReport(scores=scores, metric_name=metric_name,
                             higher_is_better=higher_is_better)


def select_preferred(report: ArrangementReport, count: int = 4) -> list[str]:
    """The ``count`` best arrangement ids (ties break by id order)."""
    if count > len(report.scores):
        raise ValueError(f"cannot select {count} of {len(report.scores)} arrangements")
    metrics = {s.arrangement_id: s.metric for s in report.scores}
    return _sorted_ids(metrics, report.higher_is_better)[:count]
