"""Support pool management, ingestion, feature caching, and Top-K retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .backbone import BackboneParams, pooled_feature
from .grid import load_png, validate_panel
from .params import fingerprint_arrays


@dataclass
class PromptPair:
    """One (image, label) demonstration with a lazily cached pooled feature."""

    id: int
    image: np.ndarray
    label: np.ndarray
    feature: np.ndarray | None = None
    source: str | None = None

    def __post_init__(self):
        self.image = validate_panel(self.image, f"pair {self.id} image")
        self.label = validate_panel(self.label, f"pair {self.id} label")
        if self.image.shape != self.label.shape:
            raise ValueError(
                f"pair {self.id}: image {self.image.shape} and label "
                f"{self.label.shape} extents differ")


@dataclass
class SupportPool:
    pairs: list[PromptPair] = field(default_factory=list)
    backbone_fingerprint: str | None = None

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("support pool must hold at least one pair")
        ids = [p.id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("support pool ids must be unique")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def by_id(self, pair_id: int) -> PromptPair:
        for p in self.pairs:
            if p.id == pair_id:
                return p
        raise KeyError(f"no pair with id {pair_id}")

    def subset(self, ids: Sequence[int]) -> "SupportPool":
        wanted = set(ids)
        return SupportPool(
            pairs=[p for p in self.pairs if p.id in wanted],
            backbone_fingerprint=self.backbone_fingerprint)

    def fingerprint(self) -> str:
        arrays = {}
        for p in self.pairs:
            arrays[f"{p.id}.image"] = p.image
            arrays[f"{p.id}.label"] = p.label
        return fingerprint_arrays(arrays)

    def ensure_features(self, backbone: BackboneParams) -> None:
        """Fill missing feature caches; idempotent for a fixed backbone."""
        fp = backbone.fingerprint()
        if self.backbone_fingerprint is not None and self.backbone_fingerprint != fp:
            self.clear_features()
        self.backbone_fingerprint = fp
        for p in self.pairs:
            if p.feature is None:
                p.feature = pooled_feature(p.image, backbone)

    def clear_features(self) -> None:
        self.backbone_fingerprint = None
        for p in self.pairs:
            p.feature = None


def ingest(source, *, extent: int | None = None) -> SupportPool:
    """Build a pool from a synthetic task spec, a directory, or raw pairs.

    Directory layout: ``images/<id>.png`` and ``labels/<id>.png`` with
    integer stems; every image must have a matching label. Ordering is
    deterministic (ascending id / generation index).
    """
    if isinstance(source, (str, Path)):
        return _ingest_directory(Path(source), extent=extent)
    if hasattr(source, "kind") and hasattr(source, "count"):
        from .tasks import generate
        pairs = [PromptPair(id=i, image=img, label=lab, source="synthetic")
                 for i, (img, lab) in enumerate(generate(source))]
        return SupportPool(pairs=pairs)
    pairs = [PromptPair(id=i, image=img, label=lab)
             for i, (img, lab) in enumerate(source)]
    return SupportPool(pairs=pairs)


def _resize(panel: np.ndarray, extent: int, *, nearest: bool) -> np.ndarray:
    from PIL import Image
    if panel.shape[0] == extent and panel.shape[1] == extent:
        return panel
    mode = Image.NEAREST if nearest else Image.BILINEAR
    img = Image.fromarray(np.round(panel * 255.0).astype(np.uint8), mode="RGB")
    out = np.asarray(img.resize((extent, extent), mode), dtype=np.float64) / 255.0
    return out


def _ingest_directory(root: Path, *, extent: int | None) -> SupportPool:
    image_dir, label_dir = root / "images", root / "labels"
    if not image_dir.is_dir() or not label_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and labels/ directories")
    pairs = []
    for image_path in sorted(image_dir.glob("*.png"), key=lambda p: p.stem):
        try:
            pair_id = int(image_path.stem)
        except ValueError as exc:
            raise ValueError(f"image stem {image_path.name!r} is not an integer id") from exc
        label_path = label_dir / image_path.name
        if not label_path.exists():
            raise FileNotFoundError(f"missing label for {image_path.name}")
        image, label = load_png(image_path), load_png(label_path)
        if extent is not None:
            image = _resize(image, extent, nearest=False)
            label = _resize(label, extent, nearest=True)
        if image.shape != label.shape:
            raise ValueError(
                f"{image_path.name}: image {image.shape} and label "
                f"{label.shape} extents differ after resize")
        pairs.append(PromptPair(id=pair_id, image=image, label=label,
                                source=str(image_path)))
    if not pairs:
        raise ValueError(f"no .png images found under {image_dir}")
    pairs.sort(key=lambda p: p.id)
    return SupportPool(pairs=pairs)


def write_manifest(pool: SupportPool, path) -> None:
    manifest = {
        "format": "promptgrid-pool-manifest",
        "version": 1,
        "count": len(pool),
        "fingerprint": pool.fingerprint(),
        "pairs": [{"id": p.id, "source": p.source} for p in pool.pairs],
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


class PromptCache:
    """Detached panel tokens and pooled features under one fixed backbone.

    Pool pairs are precomputed and cached by id; unknown pairs (fresh
    swap-augmentation pairs, held-out queries) are computed on demand and
    never stored, so colliding fresh ids cannot poison the cache.
    """

    def __init__(self, backbone: BackboneParams, pool: SupportPool | None = None):
        self.backbone = backbone
        self._tokens: dict[int, np.ndarray] = {}
        self._features: dict[int, np.ndarray] = {}
        if pool is not None:
            from .backbone import panel_tokens
            for p in pool.pairs:
                self._tokens[p.id] = panel_tokens(p.image, backbone)
                self._features[p.id] = (p.feature if p.feature is not None
                                        else pooled_feature(p.image, backbone))

    def tokens_for(self, pair: PromptPair) -> np.ndarray:
        cached = self._tokens.get(pair.id)
        if cached is not None:
            return cached
        from .backbone import panel_tokens
        return panel_tokens(pair.image, self.backbone)

    def feature_for(self, pair: PromptPair) -> np.ndarray:
        cached = self._features.get(pair.id)
        if cached is not None:
            return cached
        if pair.feature is not None:
            return pair.feature
        return pooled_feature(pair.image, self.backbone)

    def tokens_for_panel(self, panel: np.ndarray) -> np.ndarray:
        from .backbone import panel_tokens
        return panel_tokens(panel, self.backbone)


class RetrievedPair(NamedTuple):
    pair: PromptPair
    score: float


def retrieve_topk(query_feature: np.ndarray, pool: SupportPool, k: int,
                  *, exclude_ids: Sequence[int] = ()) -> list[RetrievedPair]:
    """The K pool pairs most cosine-similar to the query feature.

    Sorted by descending similarity; exact ties break by ascending id.
    ``exclude_ids`` removes candidates (a query never supports itself).
    """
    query = np.asarray(query_feature, dtype=np.float64)
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise ValueError("query feature has zero norm")
    excluded = set(exclude_ids)
    candidates = [p for p in pool.pairs if p.id not in excluded]
    if not 1 <= k <= len(candidates):
        raise ValueError(f"k={k} out of range for {len(candidates)} candidates")
    missing = [p.id for p in candidates if p.feature is None]
    if missing:
        raise ValueError(f"features not cached for pair ids {missing[:5]}; "
                         f"call pool.ensure_features(backbone) first")
    feats = np.stack([p.feature for p in candidates])
    feat_norms = np.linalg.norm(feats, axis=1)
    if np.any(feat_norms == 0.0):
        raise ValueError("a cached pool feature has zero norm")
    scores = feats @ query / (feat_norms * norm)
    ids = np.array([p.id for p in candidates])
    order = np.lexsort((ids, -scores))[:k]
    return [RetrievedPair(candidates[i], float(scores[i])) for i in order]


def precompute_neighbors(pool: SupportPool, k: int) -> dict[int, list[RetrievedPair]]:
    """Top-K retrieval for every pool member as query, self excluded.

    Features are frozen during a training stage, so the ranking never
    changes; computing it once avoids per-step retrieval.
    """
    return {p.id: retrieve_topk(p.feature, pool, k, exclude_ids=[p.id])
            for p in pool.pairs}
