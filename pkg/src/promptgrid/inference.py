"""Shared prediction path: retrieve, fuse, compose, adapt, inpaint, extract."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterParams, adapter_apply
from .backbone import BackboneParams, Codebook, inpaint, pooled_feature
from .fusion import FusionParams, fuse_tensors
from .grid import DEFAULT_MASK_FILL, Role, arrangement_by_id, compose, extract
from .params import frozen
from .prompts import PromptCache, PromptPair, SupportPool, retrieve_topk


@dataclass
class BundleMember:
    """One arrangement-specific model: its layout, components, and adapter."""

    arrangement_id: str
    backbone: BackboneParams
    fusion: FusionParams
    adapter: AdapterParams | None = None


@dataclass
class ModelBundle:
    """Everything needed to predict: members plus the shared pieces.

    ``retrieval_backbone`` stays the pretrained encoder; pool features
    and attention token inputs live in its frozen feature space even
    after members are fine-tuned.
    """

    members: list[BundleMember]
    codebook: Codebook
    retrieval_backbone: BackboneParams
    k: int = 4
    mean_fusion: bool = False
    reuse: bool = True
    mask_fill: float = DEFAULT_MASK_FILL

    def member_by_arrangement(self, arrangement_id: str) -> BundleMember:
        for m in self.members:
            if m.arrangement_id == arrangement_id:
                return m
        raise KeyError(f"no member for arrangement {arrangement_id}")


def _adapter_hook(member: BundleMember):
    if member.adapter is None:
        return None
    return lambda tokens: adapter_apply(tokens, member.adapter)


def predict_example(bundle: ModelBundle, member: BundleMember,
                    query: np.ndarray, pool: SupportPool, *,
                    selection: str = "fused",
                    rng: np.random.Generator | None = None,
                    exclude_ids=(),
                    cache: PromptCache | None = None,
                    query_feature: np.ndarray | None = None) -> np.ndarray:
    """Predicted label panel for one query image.

    ``selection`` picks the support policy: "fused" (retrieve Top-K and
    fuse), "top1" (best single prompt, no fusion), or "random" (one
    uniformly chosen prompt, no fusion). A ``cache`` bound to the
    retrieval backbone skips re-encoding known pool panels.
    """
    if selection not in ("fused", "top1", "random"):
        raise ValueError(f"unknown selection policy {selection!r}")
    arrangement = arrangement_by_id(member.arrangement_id)
    if cache is None:
        cache = PromptCache(bundle.retrieval_backbone)

    with frozen(member.backbone, member.fusion, member.adapter,
                bundle.retrieval_backbone):
        if selection == "random":
            if rng is None:
                raise ValueError("random selection needs an rng")
            candidates = [p for p in pool.pairs if p.id not in set(exclude_ids)]
            chosen = candidates[int(rng.integers(len(candidates)))]
            support_pair = (chosen.image, chosen.label)
        else:
            if query_feature is None:
                query_feature = pooled_feature(query, bundle.retrieval_backbone)
            k = 1 if selection == "top1" else bundle.k
            hits = retrieve_topk(query_feature, pool, k, exclude_ids=exclude_ids)
            if selection == "top1":
                support_pair = (hits[0].pair.image, hits[0].pair.label)
            else:
                supports = [h.pair for h in hits]
                parts = fuse_tensors(
                    cache.tokens_for_panel(query), supports,
                    [cache.tokens_for(p) for p in supports],
                    [cache.feature_for(p) for p in supports],
                    member.fusion, mean_fusion=bundle.mean_fusion,
                    reuse=bundle.reuse)
                support_pair = (np.clip(parts["image"].data, 0.0, 1.0),
                                np.clip(parts["label"].data, 0.0, 1.0))

        canvas = compose(support_pair, query, arrangement, mask_fill=bundle.mask_fill)
        completed = inpaint(canvas, member.backbone, bundle.codebook,
                            token_hook=_adapter_hook(member))
    return extract(completed, Role.MASK)


def predict_ensemble(bundle: ModelBundle, query: np.ndarray, pool: SupportPool, *,
                     selection: str = "fused",
                     rng: np.random.Generator | None = None,
                     exclude_ids=(), cache: PromptCache | None = None,
                     query_feature: np.ndarray | None = None) -> np.ndarray:
    """Average the decoded predictions of every member."""
    preds = [predict_example(bundle, m, query, pool, selection=selection,
                             rng=rng, exclude_ids=exclude_ids, cache=cache,
                             query_feature=query_feature)
             for m in bundle.members]
    return np.mean(preds, axis=0)
