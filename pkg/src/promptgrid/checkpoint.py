"""Versioned JSON checkpoint containers with bit-exact round-trips.

Floats serialize via ``repr`` (the shortest string that parses back to
the same double), keys are sorted, and no timestamps are embedded, so
save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, AdapterParams, init_adapter
from .backbone import BackboneConfig, BackboneParams, Codebook, init_backbone
from .fusion import FusionConfig, FusionParams, init_fusion
from .inference import BundleMember, ModelBundle

FORMAT = "promptgrid-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_arrays(arrays: dict[str, np.ndarray]) -> dict:
    out = {}
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        out[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    return out


def _decode_arrays(payload: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in payload.items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        out[name] = arr.reshape(entry["shape"])
    return out


def save_container(path, kind: str, arrays: dict[str, np.ndarray],
                   meta: dict) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": _encode_arrays(arrays),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_container(path, expected_kind: str | None = None):
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    if expected_kind is not None and payload["kind"] != expected_kind:
        raise CheckpointError(
            f"{path}: expected kind {expected_kind!r}, found {payload['kind']!r}")
    return payload["kind"], _decode_arrays(payload["arrays"]), payload["meta"]


# -- component-level helpers -------------------------------------------------

def save_backbone(path, params: BackboneParams, codebook: Codebook) -> None:
    arrays = {f"backbone.{k}": v for k, v in params.arrays().items()}
    arrays["codebook.entries"] = codebook.entries
    save_container(path, "backbone", arrays, {"config": asdict(params.config)})


def load_backbone(path) -> tuple[BackboneParams, Codebook]:
    _, arrays, meta = load_container(path, "backbone")
    config = BackboneConfig(**meta["config"])
    params = init_backbone(config, np.random.default_rng(0))
    params.load_arrays({k[len("backbone."):]: v for k, v in arrays.items()
                        if k.startswith("backbone.")})
    codebook = Codebook(entries=arrays["codebook.entries"])
    return params, codebook


def save_fusion(path, fusion: FusionParams) -> None:
    save_container(path, "fusion", fusion.arrays(),
                   {"config": asdict(fusion.config)})


def load_fusion(path) -> FusionParams:
    _, arrays, meta = load_container(path, "fusion")
    fusion = init_fusion(FusionConfig(**meta["config"]), np.random.default_rng(0))
    fusion.load_arrays(arrays)
    return fusion


def save_adapter(path, adapter: AdapterParams) -> None:
    save_container(path, "adapter", adapter.arrays(),
                   {"config": asdict(adapter.config),
                    "arrangement_id": adapter.arrangement_id})


def load_adapter(path) -> AdapterParams:
    _, arrays, meta = load_container(path, "adapter")
    adapter = init_adapter(AdapterConfig(**meta["config"]),
                           meta["arrangement_id"], np.random.default_rng(0))
    adapter.load_arrays(arrays)
    return adapter


def save_bundle(path, member: BundleMember, codebook: Codebook,
                retrieval_backbone: BackboneParams, *, k: int,
                mean_fusion: bool = False, reuse: bool = True,
                mask_fill: float = 0.5, extra_meta: dict | None = None) -> None:
    """Single-container final model: components + codebook + settings."""
    arrays = {f"backbone.{n}": v for n, v in member.backbone.arrays().items()}
    arrays.update({f"fusion.{n}": v for n, v in member.fusion.arrays().items()})
    if member.adapter is not None:
        arrays.update({f"adapter.{n}": v for n, v in member.adapter.arrays().items()})
    arrays.update({f"retrieval.{n}": v
                   for n, v in retrieval_backbone.arrays().items()})
    arrays["codebook.entries"] = codebook.entries
    meta = {
        "arrangement_id": member.arrangement_id,
        "backbone_config": asdict(member.backbone.config),
        "fusion_config": asdict(member.fusion.config),
        "adapter_config": None if member.adapter is None
                          else asdict(member.adapter.config),
        "k": k,
        "mean_fusion": mean_fusion,
        "reuse": reuse,
        "mask_fill": mask_fill,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_container(path, "bundle", arrays, meta)


def load_bundle_member(path) -> tuple[BundleMember, Codebook, BackboneParams, dict]:
    _, arrays, meta = load_container(path, "bundle")

    def sub(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items()
                if k.startswith(prefix)}

    bb_config = BackboneConfig(**meta["backbone_config"])
    backbone = init_backbone(bb_config, np.random.default_rng(0))
    backbone.load_arrays(sub("backbone."))
    fusion = init_fusion(FusionConfig(**meta["fusion_config"]),
                         np.random.default_rng(0))
    fusion.load_arrays(sub("fusion."))
    adapter = None
    if meta["adapter_config"] is not None:
        adapter = init_adapter(AdapterConfig(**meta["adapter_config"]),
                               meta["arrangement_id"], np.random.default_rng(0))
        adapter.load_arrays(sub("adapter."))
    retrieval = init_backbone(bb_config, np.random.default_rng(0))
    retrieval.load_arrays(sub("retrieval."))
    codebook = Codebook(entries=arrays["codebook.entries"])
    member = BundleMember(arrangement_id=meta["arrangement_id"],
                          backbone=backbone, fusion=fusion, adapter=adapter)
    return member, codebook, retrieval, meta


def load_bundle(paths) -> ModelBundle:
    """Assemble a (possibly multi-member) bundle from container files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    members = []
    codebook = retrieval = meta = None
    for p in paths:
        member, codebook, retrieval, meta = load_bundle_member(p)
        members.append(member)
    return ModelBundle(members=members, codebook=codebook,
                       retrieval_backbone=retrieval, k=meta["k"],
                       mean_fusion=meta["mean_fusion"], reuse=meta["reuse"],
                       mask_fill=meta["mask_fill"])
