"""Synthetic desk-scale tasks plus the evaluation metrics and harness.

Three task kinds share one scene generator: a single bright shape on a
textured background. The texture family doubles as a labeling
convention: striped scenes use foreground-on-black masks, dotted scenes
the inverted convention. Reading the convention off the support label is
what makes prompt quality matter even for a model trained on the task.

Folds partition the eight shape classes into four disjoint pairs so
cross-fold tables can be emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import clamp01
from .params import fingerprint_arrays

KINDS = ("segmentation", "detection", "colorization")
SHAPE_CLASSES = ("circle", "square", "triangle", "diamond",
                 "ring", "cross", "hbar", "vbar")
FOLDS = 4


@dataclass(frozen=True)
class TaskSpec:
    """Pure description of a synthetic dataset; generation is a pure
    function of these fields."""

    kind: str
    seed: int = 0
    count: int = 100
    extent: int = 32
    fold: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {KINDS}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 <= self.fold < FOLDS:
            raise ValueError(f"fold must be in 0..{FOLDS - 1}")
        if self.extent < 16:
            raise ValueError("extent must be >= 16")


def fold_classes(fold: int) -> tuple[int, int]:
    return (2 * fold, 2 * fold + 1)


def _background(style: int, extent: int, color_a, color_b) -> np.ndarray:
    img = np.empty((extent, extent, 3))
    if style == 0:
        stripe = (np.arange(extent) // 4) % 2
        img[:] = np.where(stripe[:, None, None] == 0, color_a, color_b)
    else:
        img[:] = color_a
        yy, xx = np.mgrid[0:extent, 0:extent]
        centers = np.arange(4, extent, 8)
        dots = np.zeros((extent, extent), dtype=bool)
        for cy in centers:
            for cx in centers:
                dots |= (yy - cy) ** 2 + (xx - cx) ** 2 <= 4
        img[dots] = color_b
    return img


def _shape_mask(class_id: int, extent: int, cy: float, cx: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    name = SHAPE_CLASSES[class_id]
    if name == "circle":
        return dy ** 2 + dx ** 2 <= s ** 2
    if name == "square":
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if name == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= s
    if name == "ring":
        r2 = dy ** 2 + dx ** 2
        return (r2 <= s ** 2) & (r2 >= (0.5 * s) ** 2)
    if name == "cross":
        return ((np.abs(dy) <= s / 3.0) & (np.abs(dx) <= s)) | \
               ((np.abs(dx) <= s / 3.0) & (np.abs(dy) <= s))
    if name == "hbar":
        return (np.abs(dy) <= s / 3.0) & (np.abs(dx) <= s)
    if name == "vbar":
        return (np.abs(dx) <= s / 3.0) & (np.abs(dy) <= s)
    raise ValueError(f"unknown shape class {class_id}")


def _scene(spec: TaskSpec, index: int):
    """Scene ``index`` of the split: deterministic in (seed, fold, extent,
    index) and shared by all task kinds."""
    rng = np.random.default_rng([spec.seed, spec.fold, spec.extent, index])
    style = int(rng.integers(2))
    class_id = int(rng.integers(2)) + 2 * spec.fold
    color_a = rng.uniform(0.20, 0.50, size=3)
    color_b = rng.uniform(0.20, 0.50, size=3)
    foreground = rng.uniform(0.60, 0.95, size=3)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * spec.extent
    s = rng.uniform(0.17, 0.25) * spec.extent
    mask = _shape_mask(class_id, spec.extent, cy, cx, s)
    image = _background(style, spec.extent, color_a, color_b)
    image[mask] = foreground
    return clamp01(image), mask, style


def _box_mask(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    box = np.zeros_like(mask)
    box[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = True
    return box


def generate(spec: TaskSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """The dataset described by ``spec`` as (image, label) panel pairs."""
    out = []
    for i in range(spec.count):
        image, mask, style = _scene(spec, i)
        if spec.kind == "segmentation":
            flat = mask.astype(np.float64)
            if style == 1:
                flat = 1.0 - flat
            label = np.repeat(flat[:, :, None], 3, axis=2)
        elif spec.kind == "detection":
            label = np.repeat(_box_mask(mask).astype(np.float64)[:, :, None], 3, axis=2)
        else:  # colorization
            label = image
            gray = image @ np.array([0.299, 0.587, 0.114])
            image = np.repeat(gray[:, :, None], 3, axis=2)
        out.append((image, label))
    return out


def metric_for_kind(kind: str) -> tuple[str, bool]:
    """(metric name, higher_is_better) for a task kind."""
    if kind == "colorization":
        return "mse", False
    return "miou", True


# -- metrics ----------------------------------------------------------------

def binarize(panel: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground = channel mean >= threshold."""
    return np.asarray(panel, dtype=np.float64).mean(axis=2) >= threshold


def miou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection-over-union of binarized panels; 1.0 if both empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: {pred.shape} vs {gt.shape}")
    a, b = binarize(pred, threshold), binarize(gt, threshold)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mse(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared difference over all pixels and channels."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(diff * diff))


def score(kind: str, pred: np.ndarray, gt: np.ndarray) -> float:
    return mse(pred, gt) if kind == "colorization" else miou(pred, gt)


@dataclass
class EvalResult:
    kind: str
    metric: str
    values: list[float]
    split_fingerprint: str
    mode: str = "single"
    selection: str = "fused"

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def stderr(self) -> float:
        if len(self.values) < 2:
            return 0.0
        return float(np.std(self.values, ddof=1) / np.sqrt(len(self.values)))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "metric": self.metric,
            "mode": self.mode,
            "selection": self.selection,
            "mean": self.mean,
            "stderr": self.stderr,
            "count": len(self.values),
            "split_fingerprint": self.split_fingerprint,
            "values": list(self.values),
        }


def split_fingerprint(pairs) -> str:
    arrays = {}
    for i, (img, lab) in enumerate(pairs):
        arrays[f"{i}.image"] = img
        arrays[f"{i}.label"] = lab
    return fingerprint_arrays(arrays)


def evaluate(bundle, spec: TaskSpec, pool, *, mode: str = "single",
             selection: str = "fused", rng: np.random.Generator | None = None) -> EvalResult:
    """Score a model bundle on the held-out split described by ``spec``.

    Per example: retrieve supports from ``pool``, fuse, compose under the
    bundle's arrangement, adapt, inpaint, extract the MASK quadrant, and
    score it against the ground-truth label with the task's metric.
    ``selection`` switches the support policy: "fused" (the model's own),
    "top1" (best single prompt, no fusion), or "random" (one random
    prompt, no fusion; needs ``rng``).
    """
    from .inference import predict_ensemble, predict_example
    from .prompts import PromptCache

    examples = generate(spec)
    if not examples:
        raise ValueError("empty evaluation split")
    if mode not in ("single", "ensemble"):
        raise ValueError(f"unknown mode {mode!r}")
    if selection == "random" and rng is None:
        raise ValueError("random selection needs an rng")
    pool.ensure_features(bundle.retrieval_backbone)
    cache = PromptCache(bundle.retrieval_backbone, pool)
    metric, _ = metric_for_kind(spec.kind)
    values = []
    for image, label in examples:
        if mode == "ensemble":
            pred = predict_ensemble(bundle, image, pool, selection=selection,
                                    rng=rng, cache=cache)
        else:
            pred = predict_example(bundle, bundle.members[0], image, pool,
                                   selection=selection, rng=rng, cache=cache)
        values.append(score(spec.kind, pred, label))
    return EvalResult(kind=spec.kind, metric=metric, values=values,
                      split_fingerprint=split_fingerprint(examples),
                      mode=mode, selection=selection)
