"""The three training stages.

Stage I trains the fusion module against a frozen backbone; Stage II
trains one adapter per arrangement with everything else frozen, then
ranks arrangements on a held-out split; Stage III jointly fine-tunes
per-arrangement copies of the fusion module, adapter, and backbone with
the query-support swapping augmentation.

Retrieval features and attention token inputs always come from the
pretrained backbone, so they are cached once per stage and stay valid
while members fine-tune.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as en
from .adapters import (
    AdapterConfig,
    AdapterParams,
    ArrangementReport,
    adapter_apply,
    build_report,
    init_adapter,
)
from .backbone import (
    BackboneParams,
    Codebook,
    decode,
    init_backbone,
    logits_for_masked,
    mask_token_indices,
    quantize,
)
from .engine import Tensor
from .finetune import FinetunePlan, make_new_pair, swap_supports
from .fusion import (
    FusionConfig,
    FusionParams,
    alignment_loss,
    fuse_tensors,
    fusion_objective,
    init_fusion,
)
from .grid import Quadrant, Role, arrangement_by_id, arrangement_catalog
from .inference import BundleMember, ModelBundle, predict_example
from .params import frozen
from .prompts import (
    PromptCache,
    PromptPair,
    SupportPool,
    precompute_neighbors,
    retrieve_topk,
)
from .tasks import metric_for_kind, score


def fused_canvas_tensor(query: np.ndarray, fused_image: Tensor, fused_label: Tensor,
                        arrangement, mask_fill: float) -> Tensor:
    """Differentiable 2x2 canvas with the fused pair in its quadrants."""
    h, w, _ = query.shape
    by_role = {
        Role.SUPPORT_IMAGE: en.as_tensor(fused_image),
        Role.SUPPORT_LABEL: en.as_tensor(fused_label),
        Role.QUERY_IMAGE: en.as_tensor(query),
        Role.MASK: en.as_tensor(np.full((h, w, 3), float(mask_fill))),
    }
    tl = by_role[arrangement.role_of(Quadrant.TL)]
    tr = by_role[arrangement.role_of(Quadrant.TR)]
    bl = by_role[arrangement.role_of(Quadrant.BL)]
    br = by_role[arrangement.role_of(Quadrant.BR)]
    top = en.concat([tl, tr], axis=1)
    bottom = en.concat([bl, br], axis=1)
    return en.concat([top, bottom], axis=0)


def _batch_canvases(entries) -> Tensor:
    """Stack (H, W, 3) canvas tensors into (B, H, W, 3)."""
    h, w, c = entries[0].shape
    return en.concat([en.reshape(t, (1, h, w, c)) for t in entries], axis=0)


# ---------------------------------------------------------------------------
# Stage I
# ---------------------------------------------------------------------------

@dataclass
class Stage1Config:
    k: int = 4
    balance: float = 0.6          # weight of the alignment term
    epochs: int = 3
    lr: float = 0.03
    batch_size: int = 16
    mean_fusion: bool = False     # ablation: replace attention by 1/K
    reuse: bool = True            # ablation off: labels fused uniformly
    fusion: FusionConfig | None = None
    seed: int = 0


@dataclass
class Stage1Result:
    fusion: FusionParams
    losses: list[float]
    ce_losses: list[float]
    align_losses: list[float]
    alpha_min: list[float]
    alpha_sum_err: list[float]


def train_stage1(pool: SupportPool, backbone: BackboneParams, codebook: Codebook,
                 cfg: Stage1Config) -> Stage1Result:
    """Train the fusion module; the backbone and codebook stay frozen."""
    if len(pool) <= cfg.k:
        raise ValueError(f"pool of {len(pool)} cannot retrieve K={cfg.k} "
                         f"supports with the query excluded")
    if not 0.0 <= cfg.balance <= 1.0:
        raise ValueError("balance must lie in [0, 1]")
    rng = np.random.default_rng([cfg.seed, 101])
    pool.ensure_features(backbone)
    cache = PromptCache(backbone, pool)
    neighbors = precompute_neighbors(pool, cfg.k)

    fusion_cfg = cfg.fusion or FusionConfig(embed_dim=backbone.config.embed_dim)
    fusion = init_fusion(fusion_cfg, rng)
    arrangement = arrangement_by_id("a1")
    mask_idx = mask_token_indices(arrangement, backbone.config)
    targets_by_id = {p.id: quantize(p.label, codebook) for p in pool.pairs}

    pairs = pool.pairs
    steps_per_epoch = max(1, int(np.ceil(len(pairs) / cfg.batch_size)))
    state = en.OptimizerState(en.CosineSchedule(cfg.lr, cfg.epochs * steps_per_epoch))
    trainable = fusion.parameters()
    result = Stage1Result(fusion, [], [], [], [], [])

    with frozen(backbone):
        for _ in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            for start in range(0, len(pairs), cfg.batch_size):
                chunk = [pairs[i] for i in order[start:start + cfg.batch_size]]
                canvases, targets, aligns, alphas = [], [], [], []
                for pair in chunk:
                    supports = [hit.pair for hit in neighbors[pair.id]]
                    parts = fuse_tensors(
                        cache.tokens_for(pair), supports,
                        [cache.tokens_for(s) for s in supports],
                        [cache.feature_for(s) for s in supports],
                        fusion, mean_fusion=cfg.mean_fusion, reuse=cfg.reuse)
                    canvases.append(fused_canvas_tensor(
                        pair.image, parts["image"], parts["label"], arrangement,
                        mask_fill=0.5))
                    targets.append(targets_by_id[pair.id])
                    aligns.append(alignment_loss(cache.feature_for(pair),
                                                 parts["feature"]))
                    alphas.append(parts["alpha"].data)
                logits = logits_for_masked(_batch_canvases(canvases), mask_idx, backbone)
                ce = en.cross_entropy(logits, np.stack(targets))
                align_term = aligns[0]
                for extra in aligns[1:]:
                    align_term = align_term + extra
                align_term = align_term * (1.0 / len(aligns))
                loss = fusion_objective(ce, align_term, cfg.balance)
                grads = en.backward(loss, leaves=trainable)
                en.sgd_step(trainable, [grads[p] for p in trainable], state)

                result.losses.append(loss.item())
                result.ce_losses.append(ce.item())
                result.align_losses.append(align_term.item())
                result.alpha_min.append(float(min(a.min() for a in alphas)))
                result.alpha_sum_err.append(
                    float(max(abs(a.sum() - 1.0) for a in alphas)))
    return result


# ---------------------------------------------------------------------------
# Stage II
# ---------------------------------------------------------------------------

@dataclass
class Stage2Config:
    task_kind: str = "segmentation"
    k: int = 4
    epochs: int = 2
    lr: float = 0.03
    batch_size: int = 16
    hidden: int | None = None
    residual: bool = True         # ablation: residual=off
    single_layer: bool = False    # ablation: layers=1
    holdout_fraction: float = 0.2
    select_count: int = 4
    mean_fusion: bool = False
    reuse: bool = True
    seed: int = 0


@dataclass
class Stage2Result:
    adapters: dict[str, AdapterParams]
    report: ArrangementReport
    losses: dict[str, list[float]]
    train_ids: list[int]
    rank_ids: list[int]
    # Fingerprint of each adapter taken right after its own training
    # loop; comparing against the final state proves isolation.
    post_training_fingerprints: dict[str, str] = field(default_factory=dict)


def split_pool_ids(pool: SupportPool, holdout_fraction: float,
                   seed: int) -> tuple[list[int], list[int]]:
    """Deterministic (train_ids, rank_ids) split, disjoint by id."""
    rng = np.random.default_rng([seed, 202])
    ids = np.array(sorted(p.id for p in pool.pairs))
    perm = rng.permutation(len(ids))
    n_rank = max(1, int(round(holdout_fraction * len(ids))))
    rank = sorted(int(ids[i]) for i in perm[:n_rank])
    train = sorted(int(ids[i]) for i in perm[n_rank:])
    return train, rank


def _train_one_adapter(arrangement, train_pool, neighbors, cache, backbone,
                       codebook, fusion, targets_by_id, cfg, rng) -> tuple[AdapterParams, list[float]]:
    adapter_cfg = AdapterConfig(embed_dim=backbone.config.embed_dim,
                                hidden=cfg.hidden, residual=cfg.residual,
                                single_layer=cfg.single_layer)
    adapter = init_adapter(adapter_cfg, arrangement.id, rng)
    mask_idx = mask_token_indices(arrangement, backbone.config)
    pairs = train_pool.pairs
    steps_per_epoch = max(1, int(np.ceil(len(pairs) / cfg.batch_size)))
    state = en.OptimizerState(en.CosineSchedule(cfg.lr, cfg.epochs * steps_per_epoch))
    trainable = adapter.parameters()
    losses: list[float] = []
    hook = lambda tokens: adapter_apply(tokens, adapter)

    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = [pairs[i] for i in order[start:start + cfg.batch_size]]
            canvases, targets = [], []
            for pair in chunk:
                supports = [hit.pair for hit in neighbors[pair.id]]
                parts = fuse_tensors(
                    cache.tokens_for(pair), supports,
                    [cache.tokens_for(s) for s in supports],
                    [cache.feature_for(s) for s in supports],
                    fusion, mean_fusion=cfg.mean_fusion, reuse=cfg.reuse)
                canvases.append(fused_canvas_tensor(
                    pair.image, parts["image"], parts["label"], arrangement,
                    mask_fill=0.5))
                targets.append(targets_by_id[pair.id])
            logits = logits_for_masked(_batch_canvases(canvases), mask_idx,
                                       backbone, token_hook=hook)
            loss = en.cross_entropy(logits, np.stack(targets))
            grads = en.backward(loss, leaves=trainable)
            en.sgd_step(trainable, [grads[p] for p in trainable], state)
            losses.append(loss.item())
    return adapter, losses


def rank_arrangement(member: BundleMember, bundle: ModelBundle,
                     rank_pairs: list[PromptPair], train_pool: SupportPool,
                     task_kind: str, cache: PromptCache) -> float:
    """Mean task metric of one arrangement on held-out pool pairs."""
    values = []
    for pair in rank_pairs:
        pred = predict_example(bundle, member, pair.image, train_pool,
                               cache=cache, query_feature=pair.feature)
        values.append(score(task_kind, pred, pair.label))
    return float(np.mean(values))


def train_stage2(pool: SupportPool, backbone: BackboneParams, codebook: Codebook,
                 fusion: FusionParams, cfg: Stage2Config) -> Stage2Result:
    """Train all eight adapters independently, then rank arrangements."""
    pool.ensure_features(backbone)
    train_ids, rank_ids = split_pool_ids(pool, cfg.holdout_fraction, cfg.seed)
    train_pool = pool.subset(train_ids)
    if len(train_pool) <= cfg.k:
        raise ValueError("training split too small for K supports")
    rank_pairs = [pool.by_id(i) for i in rank_ids]

    cache = PromptCache(backbone, pool)
    neighbors = precompute_neighbors(train_pool, cfg.k)
    targets_by_id = {p.id: quantize(p.label, codebook) for p in train_pool.pairs}

    adapters: dict[str, AdapterParams] = {}
    losses: dict[str, list[float]] = {}
    metrics: dict[str, float] = {}
    metric_name, higher = metric_for_kind(cfg.task_kind)

    post_fp: dict[str, str] = {}
    with frozen(backbone, fusion):
        for index, arrangement in enumerate(arrangement_catalog()):
            rng = np.random.default_rng([cfg.seed, 303, index])
            adapter, trace = _train_one_adapter(
                arrangement, train_pool, neighbors, cache, backbone, codebook,
                fusion, targets_by_id, cfg, rng)
            adapters[arrangement.id] = adapter
            losses[arrangement.id] = trace
            post_fp[arrangement.id] = adapter.fingerprint()

    bundle = ModelBundle(members=[], codebook=codebook,
                         retrieval_backbone=backbone, k=cfg.k,
                         mean_fusion=cfg.mean_fusion, reuse=cfg.reuse)
    for arrangement_id, adapter in adapters.items():
        member = BundleMember(arrangement_id=arrangement_id, backbone=backbone,
                              fusion=fusion, adapter=adapter)
        metrics[arrangement_id] = rank_arrangement(
            member, bundle, rank_pairs, train_pool, cfg.task_kind, cache)

    report = build_report(metrics, metric_name, higher,
                          select_count=cfg.select_count)
    return Stage2Result(adapters=adapters, report=report, losses=losses,
                        train_ids=train_ids, rank_ids=rank_ids,
                        post_training_fingerprints=post_fp)


# ---------------------------------------------------------------------------
# Stage III
# ---------------------------------------------------------------------------

def forward_finetune(query: PromptPair, supports: list[PromptPair],
                     fusion: FusionParams, adapter: AdapterParams | None,
                     backbone: BackboneParams, codebook: Codebook,
                     arrangement, *, cache: PromptCache | None = None,
                     mean_fusion: bool = False, reuse: bool = True,
                     mask_fill: float = 0.5) -> tuple[np.ndarray, Tensor]:
    """One end-to-end pass: fuse, compose, adapt, inpaint; CE loss on the
    masked tokens of the query's label. Returns (prediction, loss)."""
    if cache is None:
        cache = PromptCache(backbone)
    parts = fuse_tensors(
        cache.tokens_for(query), supports,
        [cache.tokens_for(s) for s in supports],
        [cache.feature_for(s) for s in supports],
        fusion, mean_fusion=mean_fusion, reuse=reuse)
    canvas = fused_canvas_tensor(query.image, parts["image"], parts["label"],
                                 arrangement, mask_fill)
    mask_idx = mask_token_indices(arrangement, backbone.config)
    hook = None if adapter is None else (lambda t: adapter_apply(t, adapter))
    h, w, c = canvas.shape
    logits = logits_for_masked(en.reshape(canvas, (1, h, w, c)), mask_idx,
                               backbone, token_hook=hook)
    targets = quantize(query.label, codebook)
    loss = en.cross_entropy(en.reshape(logits, (len(mask_idx), -1)), targets)
    tokens = np.argmax(logits.data[0], axis=-1)
    side = backbone.config.panel_size
    prediction = decode(tokens, codebook, (side, side))
    return prediction, loss


@dataclass
class Stage3Config:
    task_kind: str = "segmentation"
    k: int = 4
    swap_count: int = 2           # N
    epochs: int = 2
    lr: float = 0.01
    batch_size: int = 16
    mean_fusion: bool = False
    reuse: bool = True
    unfreeze_fusion: bool = True
    unfreeze_adapter: bool = True
    unfreeze_backbone: bool = True
    seed: int = 0


@dataclass
class Stage3MemberResult:
    member: BundleMember
    losses: list[float]
    sub_iteration_counts: list[int]


@dataclass
class Stage3Result:
    members: dict[str, Stage3MemberResult]
    designation_metrics: dict[str, float]
    best_arrangement: str


def _clone_backbone(src: BackboneParams) -> BackboneParams:
    copy = init_backbone(src.config, np.random.default_rng(0))
    copy.load_arrays(src.arrays())
    return copy


def _clone_fusion(src: FusionParams) -> FusionParams:
    copy = init_fusion(src.config, np.random.default_rng(0))
    copy.load_arrays(src.arrays())
    return copy


def _clone_adapter(src: AdapterParams | None) -> AdapterParams | None:
    if src is None:
        return None
    copy = init_adapter(src.config, src.arrangement_id, np.random.default_rng(0))
    copy.load_arrays(src.arrays())
    return copy


def train_stage3_member(train_pool: SupportPool, plan: FinetunePlan,
                        backbone: BackboneParams, fusion: FusionParams,
                        adapter: AdapterParams | None, codebook: Codebook,
                        retrieval_backbone: BackboneParams, *,
                        k: int, task_kind: str = "segmentation",
                        mean_fusion: bool = False, reuse: bool = True,
                        seed: int = 0) -> Stage3MemberResult:
    """Fine-tune fresh copies of (fusion, adapter, backbone) on one
    arrangement with the swap augmentation; sources stay untouched."""
    if plan.swap_count > k:
        raise ValueError(f"swap_count N={plan.swap_count} exceeds K={k}")
    arrangement = arrangement_by_id(plan.arrangement_id)
    rng = np.random.default_rng([seed, 404, int(plan.arrangement_id[1:])])

    bb = _clone_backbone(backbone)
    fu = _clone_fusion(fusion)
    ad = _clone_adapter(adapter)
    cache = PromptCache(retrieval_backbone, train_pool)
    neighbors = precompute_neighbors(train_pool, k)
    targets_by_id = {p.id: quantize(p.label, codebook) for p in train_pool.pairs}
    mask_idx = mask_token_indices(arrangement, bb.config)
    hook = None if ad is None else (lambda tokens: adapter_apply(tokens, ad))
    side = bb.config.panel_size
    pool_ids = [p.id for p in train_pool.pairs]

    frozen_parts = []
    trainable: list[Tensor] = []
    for part, unfrozen in ((fu, plan.unfreeze_fusion), (ad, plan.unfreeze_adapter),
                           (bb, plan.unfreeze_backbone)):
        if part is None:
            continue
        if unfrozen:
            trainable.extend(part.parameters())
        else:
            frozen_parts.append(part)

    pairs = train_pool.pairs
    steps_per_epoch = max(1, int(np.ceil(len(pairs) / plan.batch_size)))
    total_steps = plan.epochs * steps_per_epoch * plan.sub_iterations
    state = en.OptimizerState(en.CosineSchedule(plan.lr, total_steps))
    losses: list[float] = []
    sub_iteration_counts: list[int] = []

    def run_step(queries, support_sets, target_rows):
        canvases, targets = [], []
        for query, supports in zip(queries, support_sets):
            parts = fuse_tensors(
                cache.tokens_for(query), supports,
                [cache.tokens_for(s) for s in supports],
                [cache.feature_for(s) for s in supports],
                fu, mean_fusion=mean_fusion, reuse=reuse)
            canvases.append(fused_canvas_tensor(
                query.image, parts["image"], parts["label"], arrangement,
                mask_fill=0.5))
        logits = logits_for_masked(_batch_canvases(canvases), mask_idx, bb,
                                   token_hook=hook)
        loss = en.cross_entropy(logits, np.stack(target_rows))
        grads = en.backward(loss, leaves=trainable)
        en.sgd_step(trainable, [grads[p] for p in trainable], state)
        losses.append(loss.item())
        return logits.data

    with frozen(*frozen_parts):
        for _ in range(plan.epochs):
            order = rng.permutation(len(pairs))
            for start in range(0, len(pairs), plan.batch_size):
                chunk = [pairs[i] for i in order[start:start + plan.batch_size]]
                support_sets = [[hit.pair for hit in neighbors[p.id]] for p in chunk]

                # Sub-iteration 0: the original direction.
                logits = run_step(chunk, support_sets,
                                  [targets_by_id[p.id] for p in chunk])
                counts = [1] * len(chunk)

                if plan.swap_count > 0:
                    new_pairs = []
                    for row, pair in enumerate(chunk):
                        predicted = decode(np.argmax(logits[row], axis=-1),
                                           codebook, (side, side))
                        new_pairs.append(make_new_pair(
                            pair.image, predicted, pool_ids,
                            backbone=retrieval_backbone))
                    # Swapped sub-iterations: the displaced support becomes
                    # the query, supervised by its own ground-truth label.
                    for n in range(1, plan.swap_count + 1):
                        sub_queries, sub_supports, sub_targets = [], [], []
                        for row, pair in enumerate(chunk):
                            displaced = support_sets[row][n - 1]
                            swapped = swap_supports(support_sets[row],
                                                    new_pairs[row], n)
                            sub_queries.append(displaced)
                            sub_supports.append(swapped)
                            sub_targets.append(targets_by_id[displaced.id])
                        run_step(sub_queries, sub_supports, sub_targets)
                        counts = [c + 1 for c in counts]
                sub_iteration_counts.extend(counts)

    member = BundleMember(arrangement_id=plan.arrangement_id, backbone=bb,
                          fusion=fu, adapter=ad)
    return Stage3MemberResult(member=member, losses=losses,
                              sub_iteration_counts=sub_iteration_counts)


def train_stage3(pool: SupportPool, backbone: BackboneParams, codebook: Codebook,
                 fusion: FusionParams, adapters: dict[str, AdapterParams],
                 preferred: list[str], cfg: Stage3Config, *,
                 train_ids: list[int], rank_ids: list[int]) -> Stage3Result:
    """Fine-tune every preferred arrangement independently and designate
    the best by held-out metric."""
    pool.ensure_features(backbone)
    train_pool = pool.subset(train_ids)
    rank_pairs = [pool.by_id(i) for i in rank_ids]
    _, higher = metric_for_kind(cfg.task_kind)

    members: dict[str, Stage3MemberResult] = {}
    for arrangement_id in preferred:
        plan = FinetunePlan(
            arrangement_id=arrangement_id, swap_count=cfg.swap_count,
            epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
            unfreeze_fusion=cfg.unfreeze_fusion,
            unfreeze_adapter=cfg.unfreeze_adapter,
            unfreeze_backbone=cfg.unfreeze_backbone)
        members[arrangement_id] = train_stage3_member(
            train_pool, plan, backbone, fusion, adapters[arrangement_id],
            codebook, backbone, k=cfg.k, task_kind=cfg.task_kind,
            mean_fusion=cfg.mean_fusion, reuse=cfg.reuse, seed=cfg.seed)

    cache = PromptCache(backbone, pool)
    metrics: dict[str, float] = {}
    for arrangement_id, result in members.items():
        bundle = ModelBundle(members=[result.member], codebook=codebook,
                             retrieval_backbone=backbone, k=cfg.k,
                             mean_fusion=cfg.mean_fusion, reuse=cfg.reuse)
        metrics[arrangement_id] = rank_arrangement(
            result.member, bundle, rank_pairs, train_pool, cfg.task_kind, cache)

    direction = -1.0 if higher else 1.0
    best = sorted(metrics, key=lambda a: (direction * metrics[a], a))[0]
    return Stage3Result(members=members, designation_metrics=metrics,
                        best_arrangement=best)
