"""Learnable cross-attention fusion of retrieved support prompts.

The module scores every query patch token against every support patch
token through learned projections, softmaxes over all support tokens
jointly, and averages each support's attention mass over heads and query
positions. That yields one non-negative weight per support, summing to
one; the same weights fuse the support images, labels, and pooled
features into a single synthetic support pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as en
from .engine import Tensor
from .backbone import BackboneParams, panel_tokens, pooled_feature
from .params import ParamContainer
from .prompts import PromptPair


@dataclass(frozen=True)
class FusionConfig:
    embed_dim: int = 64
    heads: int = 4
    depth: int = 2
    refine_hidden: int | None = None  # default: 2 * embed_dim

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def hidden(self) -> int:
        return self.refine_hidden if self.refine_hidden is not None else 2 * self.embed_dim


class FusionParams(ParamContainer):
    def __init__(self, config: FusionConfig, params: dict[str, Tensor]):
        super().__init__(params)
        self.config = config


def init_fusion(config: FusionConfig, rng: np.random.Generator) -> FusionParams:
    d, scale = config.embed_dim, 0.02
    params: dict[str, Tensor] = {}

    def p(name, array):
        params[name] = en.parameter(array, name=name)

    for i in range(config.depth - 1):
        p(f"refine{i}.w1", rng.normal(0.0, scale, (d, config.hidden)))
        p(f"refine{i}.b1", np.zeros(config.hidden))
        p(f"refine{i}.w2", rng.normal(0.0, scale, (config.hidden, d)))
        p(f"refine{i}.b2", np.zeros(d))
    # Score projections start an order of magnitude hotter than the
    # refine stack: with unit-scale tokens this puts initial logits at
    # O(1), so the softmax can actually tell supports apart and pass
    # usable gradients instead of sitting on the uniform plateau.
    score_scale = 1.0 / np.sqrt(d)
    p("score.wq", rng.normal(0.0, score_scale, (d, d)))
    p("score.bq", np.zeros(d))
    p("score.wk", rng.normal(0.0, score_scale, (d, d)))
    p("score.bk", np.zeros(d))
    p("head_merge", np.zeros(config.heads))
    return FusionParams(config, params)


def _refine(tokens: Tensor, fusion: FusionParams) -> Tensor:
    p = fusion.params
    for i in range(fusion.config.depth - 1):
        inner = en.gelu(en.linear(tokens, p[f"refine{i}.w1"], p[f"refine{i}.b1"]))
        tokens = tokens + en.linear(inner, p[f"refine{i}.w2"], p[f"refine{i}.b2"])
    return tokens


def attention_weights(query_tokens, support_token_sets, fusion: FusionParams) -> Tensor:
    """Per-support weights alpha, shape (K,), on the probability simplex.

    ``query_tokens`` is (Tq, d); ``support_token_sets`` is a sequence of K
    (Ts, d) token matrices. Differentiable w.r.t. the fusion parameters
    and the token inputs.
    """
    k = len(support_token_sets)
    if k == 0:
        raise ValueError("attention over an empty support set")
    if k == 1:
        # Softmax mass over a single support is identically one, with
        # zero gradient; short-circuit keeps it exact.
        return en.as_tensor(np.array([1.0]))

    cfg = fusion.config
    p = fusion.params
    q_tokens = en.as_tensor(query_tokens)
    tq, d = q_tokens.shape
    supports = en.concat([en.reshape(en.as_tensor(s), (1, -1, d))
                          for s in support_token_sets], axis=0)  # (K, Ts, d)
    ts = supports.shape[1]
    h, dh = cfg.heads, d // cfg.heads

    q = en.linear(_refine(q_tokens, fusion), p["score.wq"], p["score.bq"])
    keys = en.linear(_refine(supports, fusion), p["score.wk"], p["score.bk"])

    q_heads = en.transpose(en.reshape(q, (tq, h, dh)), (1, 0, 2))              # (h, Tq, dh)
    k_heads = en.reshape(en.transpose(en.reshape(keys, (k, ts, h, dh)),
                                      (2, 0, 1, 3)), (h, k * ts, dh))          # (h, K*Ts, dh)
    scores = en.matmul(q_heads, en.transpose(k_heads, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    attn = en.softmax(scores, axis=-1)                                         # (h, Tq, K*Ts)
    mass = en.reshape(attn, (h, tq, k, ts)).sum(axis=3)                        # (h, Tq, K)
    per_head = mass.mean(axis=1)                                               # (h, K)
    head_w = en.reshape(en.softmax(p["head_merge"], axis=-1), (h, 1))
    return (per_head * head_w).sum(axis=0)                                     # (K,)


@dataclass
class FusedPair:
    """A convex combination of K support pairs under shared weights."""

    fused_image: np.ndarray
    fused_label: np.ndarray
    weights: np.ndarray
    fused_feature: np.ndarray

    def __post_init__(self):
        if np.any(self.weights < -1e-9) or abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError(f"fusion weights off the simplex: {self.weights}")


def fuse_tensors(query_tokens, supports: list[PromptPair], token_sets,
                 features, fusion: FusionParams, *, mean_fusion: bool = False,
                 reuse: bool = True) -> dict:
    """Differentiable fusion given precomputed token/feature inputs.

    Returns a dict with tensors ``alpha`` (K,), ``image`` and ``label``
    (panel-shaped), and ``feature`` (embed_dim,). ``mean_fusion`` replaces
    attention by uniform weights; ``reuse=False`` keeps attention weights
    for the image and feature but fuses labels uniformly.
    """
    k = len(supports)
    if k == 0:
        raise ValueError("fusing an empty support set")
    if mean_fusion:
        alpha = en.as_tensor(np.full(k, 1.0 / k))
    else:
        alpha = attention_weights(query_tokens, token_sets, fusion)

    h, w, _ = supports[0].image.shape
    images = en.concat([en.reshape(en.as_tensor(p.image), (1, h, w, 3))
                        for p in supports], axis=0)
    labels = en.concat([en.reshape(en.as_tensor(p.label), (1, h, w, 3))
                        for p in supports], axis=0)
    feats = en.concat([en.reshape(en.as_tensor(f), (1, -1)) for f in features], axis=0)

    pixel_w = en.reshape(alpha, (k, 1, 1, 1))
    label_w = pixel_w if reuse else en.as_tensor(np.full((k, 1, 1, 1), 1.0 / k))
    fused_image = (images * pixel_w).sum(axis=0)
    fused_label = (labels * label_w).sum(axis=0)
    fused_feature = (feats * en.reshape(alpha, (k, 1))).sum(axis=0)
    return {"alpha": alpha, "image": fused_image, "label": fused_label,
            "feature": fused_feature}


def fuse(query: np.ndarray, supports: list[PromptPair], backbone: BackboneParams,
         fusion: FusionParams, *, mean_fusion: bool = False,
         reuse: bool = True) -> FusedPair:
    """Fuse retrieved supports for one query panel (detached values)."""
    if not supports:
        raise ValueError("fusing an empty support set")
    token_sets = [panel_tokens(p.image, backbone) for p in supports]
    features = [p.feature if p.feature is not None
                else pooled_feature(p.image, backbone) for p in supports]
    query_tokens = panel_tokens(query, backbone)
    parts = fuse_tensors(query_tokens, supports, token_sets, features, fusion,
                         mean_fusion=mean_fusion, reuse=reuse)
    return FusedPair(
        fused_image=np.clip(parts["image"].data, 0.0, 1.0),
        fused_label=np.clip(parts["label"].data, 0.0, 1.0),
        weights=parts["alpha"].data.copy(),
        fused_feature=parts["feature"].data.copy())


def alignment_loss(query_feature, fused_feature) -> Tensor:
    """Squared Euclidean distance between query and fused features."""
    return en.squared_distance(query_feature, fused_feature)


def fusion_objective(ce, align, balance: float) -> Tensor:
    """balance * align + (1 - balance) * ce, with balance in [0, 1]."""
    if not 0.0 <= balance <= 1.0:
        raise ValueError(f"balance weight must lie in [0, 1], got {balance}")
    return balance * en.as_tensor(align) + (1.0 - balance) * en.as_tensor(ce)
