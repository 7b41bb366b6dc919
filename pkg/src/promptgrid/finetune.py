"""Query-support swapping mechanics for bidirectional fine-tuning.

One training example yields N+1 sub-iterations: the original forward
pass, then N passes in which the query paired with its own prediction
replaces one of the N most similar supports while the displaced support
becomes the query. Predictions are data here, never a gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .backbone import BackboneParams, pooled_feature
from .prompts import PromptPair


@dataclass
class FinetunePlan:
    arrangement_id: str
    swap_count: int = 2          # N
    epochs: int = 2
    lr: float = 0.03
    batch_size: int = 16
    unfreeze_fusion: bool = True
    unfreeze_adapter: bool = True
    unfreeze_backbone: bool = True

    def __post_init__(self):
        if self.swap_count < 0:
            raise ValueError("swap_count must be >= 0")
        if not (self.unfreeze_fusion or self.unfreeze_adapter or self.unfreeze_backbone):
            raise ValueError("at least one component must be unfrozen")

    @property
    def sub_iterations(self) -> int:
        return self.swap_count + 1


def make_new_pair(query: np.ndarray, prediction: np.ndarray,
                  used_ids: Iterable[int],
                  backbone: BackboneParams | None = None) -> PromptPair:
    """Pair the query image with its own prediction under a fresh id."""
    if query.shape != prediction.shape:
        raise ValueError(
            f"query {query.shape} and prediction {prediction.shape} extents differ")
    used = set(used_ids)
    fresh = (max(used) + 1) if used else 0
    feature = None if backbone is None else pooled_feature(query, backbone)
    return PromptPair(id=fresh, image=query.copy(), label=prediction.copy(),
                      feature=feature, source="swap-augmentation")


def swap_supports(supports: Sequence[PromptPair], new_pair: PromptPair,
                  n: int) -> list[PromptPair]:
    """Replace the n-th most similar support (1-based) with ``new_pair``.

    ``supports`` must be similarity-ordered, most similar first. The
    displaced pair is ``supports[n - 1]``; the caller uses it as the
    sub-iteration's query.
    """
    if not 1 <= n <= len(supports):
        raise ValueError(f"n={n} out of range for {len(supports)} supports")
    if any(p.id == new_pair.id for p in supports):
        raise ValueError(f"fresh pair id {new_pair.id} collides with a support id")
    swapped = list(supports)
    swapped[n - 1] = new_pair
    return swapped
