"""Masked-grid inpainting backbone over a discrete patch codebook.

A small patch-tokenizing transformer encoder reads a 2x2 canvas and
predicts, for every patch inside the masked quadrant, the index of the
nearest codebook entry of the panel that belongs there. Decoding pastes
codebook entries back into pixels. The codebook itself is built once by
k-means over training patches and stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as en
from .engine import Tensor
from .grid import Canvas, Quadrant, arrangement_by_id, clamp01, compose, quadrant_slices
from .params import ParamContainer


@dataclass(frozen=True)
class BackboneConfig:
    canvas_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    blocks: int = 4
    heads: int = 4
    ff_hidden: int = 128
    vocab_size: int = 64

    def __post_init__(self):
        if self.canvas_size % (2 * self.patch_size) != 0:
            raise ValueError("canvas_size must be divisible by 2 * patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def grid(self) -> int:
        """Patch-grid extent of the full canvas along one axis."""
        return self.canvas_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def panel_size(self) -> int:
        return self.canvas_size // 2


@dataclass
class Codebook:
    """Frozen vocabulary of flattened patches, each in [0, 1]."""

    entries: np.ndarray  # (V, patch_size**2 * 3)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or len(self.entries) < 2:
            raise ValueError("codebook needs a (V >= 2, patch_dim) entry matrix")
        if self.entries.min() < 0.0 or self.entries.max() > 1.0:
            raise ValueError("codebook entries must lie in [0, 1]")
        if len(np.unique(self.entries, axis=0)) != len(self.entries):
            raise ValueError("codebook entries must be pairwise distinct")

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def patch_size(self) -> int:
        side = int(round(np.sqrt(self.entries.shape[1] / 3)))
        if side * side * 3 != self.entries.shape[1]:
            raise ValueError(f"entry dim {self.entries.shape[1]} is not a square patch")
        return side

    def fingerprint(self) -> str:
        from .params import fingerprint_arrays
        return fingerprint_arrays({"entries": self.entries})


class BackboneParams(ParamContainer):
    """Trainable state of the inpainting encoder."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        super().__init__(params)
        self.config = config


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    d, scale = config.embed_dim, 0.02
    params: dict[str, Tensor] = {}

    def p(name, array):
        params[name] = en.parameter(array, name=name)

    p("patch_embed.w", rng.normal(0.0, scale, (config.patch_dim, d)))
    p("patch_embed.b", np.zeros(d))
    p("pos", rng.normal(0.0, scale, (config.tokens, d)))
    for i in range(config.blocks):
        pre = f"block{i}"
        p(f"{pre}.ln1.gain", np.ones(d))
        p(f"{pre}.ln1.bias", np.zeros(d))
        for proj in ("wq", "wk", "wv", "wo"):
            p(f"{pre}.attn.{proj}", rng.normal(0.0, scale, (d, d)))
        for bias in ("bq", "bk", "bv", "bo"):
            p(f"{pre}.attn.{bias}", np.zeros(d))
        p(f"{pre}.ln2.gain", np.ones(d))
        p(f"{pre}.ln2.bias", np.zeros(d))
        p(f"{pre}.ff.w1", rng.normal(0.0, scale, (d, config.ff_hidden)))
        p(f"{pre}.ff.b1", np.zeros(config.ff_hidden))
        p(f"{pre}.ff.w2", rng.normal(0.0, scale, (config.ff_hidden, d)))
        p(f"{pre}.ff.b2", np.zeros(d))
    p("final_ln.gain", np.ones(d))
    p("final_ln.bias", np.zeros(d))
    # Zero head: untrained logits are exactly uniform.
    p("head.w", np.zeros((d, config.vocab_size)))
    p("head.b", np.zeros(config.vocab_size))
    return BackboneParams(config, params)


# -- patch geometry -------------------------------------------------------

def patchify(pixels: Tensor, patch: int) -> Tensor:
    """(B, H, W, 3) -> (B, T, patch*patch*3), patches in raster order."""
    b, h, w, c = pixels.shape
    gh, gw = h // patch, w // patch
    x = en.reshape(pixels, (b, gh, patch, gw, patch, c))
    x = en.transpose(x, (0, 1, 3, 2, 4, 5))
    return en.reshape(x, (b, gh * gw, patch * patch * c))


def patchify_array(panel: np.ndarray, patch: int) -> np.ndarray:
    """Non-differentiable counterpart of :func:`patchify` for one panel."""
    h, w, c = panel.shape
    if h % patch or w % patch:
        raise ValueError(f"extent {(h, w)} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    return (panel.reshape(gh, patch, gw, patch, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch * patch * c))


def _grid_token_indices(config: BackboneConfig, gh: int, gw: int) -> np.ndarray:
    """Flat positions of the top-left (gh, gw) block of the canvas grid."""
    rows = np.arange(gh)[:, None] * config.grid + np.arange(gw)[None, :]
    return rows.reshape(-1)


def mask_token_indices(canvas_arrangement, config: BackboneConfig) -> np.ndarray:
    """Flat canvas-token indices of the MASK quadrant, raster order."""
    from .grid import Role
    quadrant = canvas_arrangement.quadrant_of(Role.MASK)
    g = config.grid
    half = g // 2
    r0 = 0 if quadrant in (Quadrant.TL, Quadrant.TR) else half
    c0 = 0 if quadrant in (Quadrant.TL, Quadrant.BL) else half
    rows = (r0 + np.arange(half))[:, None] * g + (c0 + np.arange(half))[None, :]
    return rows.reshape(-1)


# -- encoder forward ------------------------------------------------------

def _attention(x: Tensor, params: BackboneParams, prefix: str) -> Tensor:
    cfg = params.config
    b, t, d = x.shape
    h, dh = cfg.heads, d // cfg.heads
    p = params.params

    def split(m):
        return en.transpose(en.reshape(m, (b, t, h, dh)), (0, 2, 1, 3))

    q = split(en.linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = split(en.linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
    v = split(en.linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    scores = en.matmul(q, en.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    ctx = en.matmul(en.softmax(scores, axis=-1), v)
    merged = en.reshape(en.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return en.linear(merged, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def encode_tokens(pixels: Tensor, params: BackboneParams,
                  token_hook=None) -> Tensor:
    """Run the encoder stack on (B, H, W, 3) pixels -> (B, T', D) tokens.

    Works for full canvases and for single panels: positional embeddings
    for a smaller input come from the top-left block of the canvas grid.
    ``token_hook``, if given, transforms the embedded tokens before the
    first block (the adapter attachment point).
    """
    cfg = params.config
    p = params.params
    _, h, w, _ = pixels.shape
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ValueError(f"pixel extent {(h, w)} not divisible by patch size")
    gh, gw = h // cfg.patch_size, w // cfg.patch_size
    if gh > cfg.grid or gw > cfg.grid:
        raise ValueError(f"input grid {(gh, gw)} exceeds configured {cfg.grid}")
    tokens = en.linear(patchify(pixels, cfg.patch_size),
                       p["patch_embed.w"], p["patch_embed.b"])
    pos = en.gather_rows(p["pos"], _grid_token_indices(cfg, gh, gw))
    tokens = tokens + pos
    if token_hook is not None:
        tokens = token_hook(tokens)
    for i in range(cfg.blocks):
        normed = en.layer_norm(tokens, p[f"block{i}.ln1.gain"], p[f"block{i}.ln1.bias"])
        tokens = tokens + _attention(normed, params, f"block{i}.attn")
        normed = en.layer_norm(tokens, p[f"block{i}.ln2.gain"], p[f"block{i}.ln2.bias"])
        ff = en.gelu(en.linear(normed, p[f"block{i}.ff.w1"], p[f"block{i}.ff.b1"]))
        tokens = tokens + en.linear(ff, p[f"block{i}.ff.w2"], p[f"block{i}.ff.b2"])
    return en.layer_norm(tokens, p["final_ln.gain"], p["final_ln.bias"])


def logits_for_masked(pixels: Tensor, mask_idx: np.ndarray,
                      params: BackboneParams, token_hook=None) -> Tensor:
    """(B, H, W, 3) canvas pixels -> (B, T_masked, V) logits."""
    tokens = encode_tokens(pixels, params, token_hook=token_hook)
    masked = en.gather_rows(tokens, mask_idx)
    return en.linear(masked, params.params["head.w"], params.params["head.b"])


def forward_tokens(canvas: Canvas, params: BackboneParams,
                   token_hook=None) -> Tensor:
    """Logits for exactly the patches inside the MASK quadrant, raster order."""
    cfg = params.config
    if canvas.pixels.shape[0] != cfg.canvas_size or canvas.pixels.shape[1] != cfg.canvas_size:
        raise ValueError(
            f"canvas extent {canvas.pixels.shape[:2]} does not match "
            f"configured size {cfg.canvas_size}")
    idx = mask_token_indices(canvas.arrangement, cfg)
    pixels = en.as_tensor(canvas.pixels[None])
    logits = logits_for_masked(pixels, idx, params, token_hook=token_hook)
    return en.reshape(logits, (len(idx), cfg.vocab_size))


def panel_tokens(panel: np.ndarray, params: BackboneParams) -> np.ndarray:
    """Encoded token matrix (T_panel, D) of a single panel, detached."""
    tokens = encode_tokens(en.as_tensor(panel[None]), params)
    return tokens.data[0].copy()


def pooled_feature(panel: np.ndarray, params: BackboneParams) -> np.ndarray:
    """Mean over encoded patch tokens, shape (embed_dim,)."""
    return panel_tokens(panel, params).mean(axis=0)


# -- discrete codebook ----------------------------------------------------

def quantize(panel: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest codebook entry per patch (Euclidean, ties to lowest index)."""
    patches = patchify_array(np.asarray(panel, dtype=np.float64), codebook.patch_size)
    diff = patches[:, None, :] - codebook.entries[None, :, :]
    dist = np.sum(diff * diff, axis=-1)
    return np.argmin(dist, axis=1)


def decode(tokens: np.ndarray, codebook: Codebook,
           panel_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Paste codebook entries patchwise -> (h, w, 3) panel (square by default)."""
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= codebook.size:
        raise ValueError(f"token index out of range for codebook size {codebook.size}")
    patch_size = codebook.patch_size
    if panel_shape is None:
        side = int(round(np.sqrt(len(tokens))))
        panel_shape = (side * patch_size, side * patch_size)
    h, w = panel_shape
    gh, gw = h // patch_size, w // patch_size
    if len(tokens) != gh * gw:
        raise ValueError(f"{len(tokens)} tokens cannot tile a {gh}x{gw} patch grid")
    patches = codebook.entries[tokens].reshape(gh, gw, patch_size, patch_size, 3)
    return patches.transpose(0, 2, 1, 3, 4).reshape(h, w, 3)


def inpaint(canvas: Canvas, params: BackboneParams, codebook: Codebook,
            token_hook=None) -> Canvas:
    """Replace the MASK quadrant with the decoded argmax prediction."""
    logits = forward_tokens(canvas, params, token_hook=token_hook)
    tokens = np.argmax(logits.data, axis=-1)
    cfg = params.config
    patch = decode(tokens, codebook, (cfg.panel_size, cfg.panel_size))
    from .grid import Role
    pixels = canvas.pixels.copy()
    quadrant = canvas.arrangement.quadrant_of(Role.MASK)
    rows, cols = quadrant_slices(*pixels.shape[:2])[quadrant]
    pixels[rows, cols] = patch
    return Canvas(pixels=pixels, arrangement=canvas.arrangement,
                  mask_fill=canvas.mask_fill)


def kmeans_codebook(patches: np.ndarray, size: int, rng: np.random.Generator,
                    iterations: int = 20) -> Codebook:
    """Seeded k-means over flattened patches; centers clipped to [0, 1]."""
    patches = np.asarray(patches, dtype=np.float64)
    n = len(patches)
    if n < size:
        raise ValueError(f"need at least {size} patches, got {n}")
    centers = patches[rng.choice(n, size=size, replace=False)].copy()
    sq_patches = np.sum(patches * patches, axis=1)
    for _ in range(iterations):
        dist = (sq_patches[:, None]
                - 2.0 * patches @ centers.T
                + np.sum(centers * centers, axis=1)[None, :])
        assign = np.argmin(dist, axis=1)
        for v in range(size):
            members = patches[assign == v]
            if len(members):
                centers[v] = members.mean(axis=0)
            else:
                centers[v] = patches[rng.integers(n)]
    centers = np.clip(centers, 0.0, 1.0)
    # Pairwise-distinct entries are a codebook invariant; nudge any
    # duplicate toward a random patch until distinct.
    for _ in range(100):
        _, first = np.unique(centers, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(size), first)
        if not len(dup):
            break
        for v in dup:
            centers[v] = np.clip(
                0.5 * (centers[v] + patches[rng.integers(n)])
                + rng.normal(0.0, 1e-6, centers.shape[1]), 0.0, 1.0)
    return Codebook(entries=centers)


# -- pretraining ------------------------------------------------------------

@dataclass
class PretrainResult:
    params: BackboneParams
    codebook: Codebook
    losses: list[float] = field(default_factory=list)


def pretrain(triples, config: BackboneConfig, rng: np.random.Generator, *,
             epochs: int = 8, lr: float = 0.03, batch_size: int = 16,
             kmeans_iterations: int = 20) -> PretrainResult:
    """Train the backbone on canonical-layout canvases.

    ``triples`` is a sequence of ((support_image, support_label),
    query_image, query_label) panel triples. The codebook is built first
    by k-means over all panel patches (images and labels jointly), then
    the encoder is trained with cross-entropy on the masked-quadrant
    tokens of the query label.
    """
    triples = list(triples)
    if not triples:
        raise ValueError("pretraining dataset is empty")
    patch = config.patch_size

    panels = []
    for (s_img, s_lab), q_img, q_lab in triples:
        panels.extend((s_img, s_lab, q_img, q_lab))
    patches = np.concatenate([patchify_array(p, patch) for p in panels])
    codebook = kmeans_codebook(patches, config.vocab_size, rng,
                               iterations=kmeans_iterations)

    params = init_backbone(config, rng)
    a1 = arrangement_by_id("a1")
    mask_idx = mask_token_indices(a1, config)

    steps_per_epoch = max(1, int(np.ceil(len(triples) / batch_size)))
    state = en.OptimizerState(en.CosineSchedule(lr, epochs * steps_per_epoch))
    trainable = params.parameters()
    losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(triples))
        for start in range(0, len(triples), batch_size):
            chunk = order[start:start + batch_size]
            pixels = np.stack([
                compose(triples[i][0], triples[i][1], a1).pixels for i in chunk])
            targets = np.stack([
                quantize(triples[i][2], codebook) for i in chunk])
            logits = logits_for_masked(en.as_tensor(pixels), mask_idx, params)
            loss = en.cross_entropy(logits, targets)
            grads = en.backward(loss, leaves=trainable)
            en.sgd_step(trainable, [grads[p] for p in trainable], state)
            losses.append(loss.item())
    return PretrainResult(params=params, codebook=codebook, losses=losses)
