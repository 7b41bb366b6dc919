"""Panels, 2x2 canvases, and the eight-arrangement catalog.

A panel is a plain (h, w, 3) float64 array with values in [0, 1]. A
canvas composes a support image/label pair with a query image under one
of eight role layouts; the remaining quadrant is filled with a constant
and later inpainted.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from PIL import Image

DEFAULT_MASK_FILL = 0.5


class Role(enum.Enum):
    SUPPORT_IMAGE = "support_image"
    SUPPORT_LABEL = "support_label"
    QUERY_IMAGE = "query_image"
    MASK = "mask"


class Quadrant(enum.Enum):
    TL = "tl"
    TR = "tr"
    BL = "bl"
    BR = "br"


@dataclass(frozen=True)
class Arrangement:
    """A bijection from quadrants to roles; exactly one quadrant is MASK."""

    id: str
    tl: Role
    tr: Role
    bl: Role
    br: Role

    def role_of(self, quadrant: Quadrant) -> Role:
        return getattr(self, quadrant.value)

    def quadrant_of(self, role: Role) -> Quadrant:
        for q in Quadrant:
            if self.role_of(q) is role:
                return q
        raise KeyError(f"role {role} absent from arrangement {self.id}")

    @property
    def roles(self) -> dict[Quadrant, Role]:
        return {q: self.role_of(q) for q in Quadrant}


_CATALOG = (
    # Horizontal image->label pairing and its row/column swaps ...
    Arrangement("a1", Role.SUPPORT_IMAGE, Role.SUPPORT_LABEL, Role.QUERY_IMAGE, Role.MASK),
    Arrangement("a2", Role.SUPPORT_LABEL, Role.SUPPORT_IMAGE, Role.MASK, Role.QUERY_IMAGE),
    Arrangement("a3", Role.QUERY_IMAGE, Role.MASK, Role.SUPPORT_IMAGE, Role.SUPPORT_LABEL),
    Arrangement("a4", Role.MASK, Role.QUERY_IMAGE, Role.SUPPORT_LABEL, Role.SUPPORT_IMAGE),
    # ... and the transposed, vertically paired counterparts.
    Arrangement("a5", Role.SUPPORT_IMAGE, Role.QUERY_IMAGE, Role.SUPPORT_LABEL, Role.MASK),
    Arrangement("a6", Role.SUPPORT_LABEL, Role.MASK, Role.SUPPORT_IMAGE, Role.QUERY_IMAGE),
    Arrangement("a7", Role.QUERY_IMAGE, Role.SUPPORT_IMAGE, Role.MASK, Role.SUPPORT_LABEL),
    Arrangement("a8", Role.MASK, Role.SUPPORT_LABEL, Role.QUERY_IMAGE, Role.SUPPORT_IMAGE),
)


def arrangement_catalog() -> list[Arrangement]:
    """The eight supported layouts; a1 is the canonical one."""
    return list(_CATALOG)


def arrangement_by_id(arrangement_id: str) -> Arrangement:
    for arr in _CATALOG:
        if arr.id == arrangement_id:
            return arr
    raise KeyError(f"unknown arrangement id {arrangement_id!r}")


@dataclass
class Canvas:
    """A 2x2 composite of panels plus its layout descriptor."""

    pixels: np.ndarray            # (H, W, 3) in [0, 1]
    arrangement: Arrangement
    mask_fill: float = DEFAULT_MASK_FILL

    @property
    def panel_shape(self) -> tuple[int, int]:
        return self.pixels.shape[0] // 2, self.pixels.shape[1] // 2


def validate_panel(panel: np.ndarray, name: str = "panel") -> np.ndarray:
    arr = np.asarray(panel, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (h, w, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def clamp01(panel: np.ndarray) -> np.ndarray:
    return np.clip(panel, 0.0, 1.0)


def quadrant_slices(height: int, width: int) -> dict[Quadrant, tuple[slice, slice]]:
    h, w = height // 2, width // 2
    return {
        Quadrant.TL: (slice(0, h), slice(0, w)),
        Quadrant.TR: (slice(0, h), slice(w, width)),
        Quadrant.BL: (slice(h, height), slice(0, w)),
        Quadrant.BR: (slice(h, height), slice(w, width)),
    }


def compose(pair: tuple[np.ndarray, np.ndarray], query: np.ndarray,
            arrangement: Arrangement, mask_fill: float = DEFAULT_MASK_FILL) -> Canvas:
    """Place the support pair and query into the quadrants named by the
    arrangement; the MASK quadrant is a constant ``mask_fill``."""
    support_image = validate_panel(pair[0], "support image")
    support_label = validate_panel(pair[1], "support label")
    query = validate_panel(query, "query image")
    if support_image.shape != support_label.shape or support_image.shape != query.shape:
        raise ValueError(
            f"panel extents differ: {support_image.shape}, "
            f"{support_label.shape}, {query.shape}")
    h, w, _ = query.shape
    by_role = {
        Role.SUPPORT_IMAGE: support_image,
        Role.SUPPORT_LABEL: support_label,
        Role.QUERY_IMAGE: query,
        Role.MASK: np.full((h, w, 3), float(mask_fill)),
    }
    pixels = np.empty((2 * h, 2 * w, 3), dtype=np.float64)
    for quadrant, (rows, cols) in quadrant_slices(2 * h, 2 * w).items():
        pixels[rows, cols] = by_role[arrangement.role_of(quadrant)]
    return Canvas(pixels=pixels, arrangement=arrangement, mask_fill=float(mask_fill))


def extract(canvas: Canvas, role: Role) -> np.ndarray:
    """The quadrant currently holding ``role`` (a copy)."""
    quadrant = canvas.arrangement.quadrant_of(role)
    rows, cols = quadrant_slices(*canvas.pixels.shape[:2])[quadrant]
    return canvas.pixels[rows, cols].copy()


def save_png(pixels: np.ndarray, path) -> None:
    """Write a panel or canvas as 8-bit PNG (values x255, rounded)."""
    arr = np.asarray(pixels, dtype=np.float64)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0
