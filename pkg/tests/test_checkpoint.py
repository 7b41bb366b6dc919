import numpy as np
import pytest

from promptgrid.adapters import AdapterConfig, init_adapter
from promptgrid.backbone import BackboneConfig, Codebook, init_backbone
from promptgrid.checkpoint import (
    CheckpointError,
    load_adapter,
    load_backbone,
    load_bundle,
    load_container,
    load_fusion,
    save_adapter,
    save_backbone,
    save_bundle,
    save_container,
    save_fusion,
)
from promptgrid.fusion import FusionConfig, init_fusion
from promptgrid.inference import BundleMember


CFG = BackboneConfig(canvas_size=16, patch_size=4, embed_dim=16, blocks=1,
                     heads=2, ff_hidden=32, vocab_size=4)


def make_codebook(seed=0):
    return Codebook(entries=np.random.default_rng(seed).random((4, 48)))


class TestContainer:
    def test_save_load_save_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7)}
        p1, p2 = tmp_path / "one.json", tmp_path / "two.json"
        save_container(p1, "test", arrays, {"note": 1})
        kind, loaded, meta = load_container(p1)
        save_container(p2, kind, loaded, meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"x": rng.normal(scale=1e-7, size=(5, 5)) * np.pi}
        path = tmp_path / "x.json"
        save_container(path, "test", arrays, {})
        _, loaded, _ = load_container(path)
        assert np.array_equal(loaded["x"], arrays["x"])

    def test_kind_mismatch(self, tmp_path):
        path = tmp_path / "k.json"
        save_container(path, "alpha", {"a": np.zeros(2)}, {})
        with pytest.raises(CheckpointError):
            load_container(path, expected_kind="beta")

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "foreign.json"
        path.write_text('{"something": "else"}')
        with pytest.raises(CheckpointError):
            load_container(path)


class TestComponents:
    def test_backbone_roundtrip(self, tmp_path):
        params = init_backbone(CFG, np.random.default_rng(2))
        codebook = make_codebook(3)
        path = tmp_path / "bb.json"
        save_backbone(path, params, codebook)
        loaded, loaded_cb = load_backbone(path)
        assert loaded.fingerprint() == params.fingerprint()
        assert np.array_equal(loaded_cb.entries, codebook.entries)
        assert loaded.config == CFG

    def test_fusion_roundtrip(self, tmp_path):
        fusion = init_fusion(FusionConfig(embed_dim=16, heads=2), np.random.default_rng(4))
        path = tmp_path / "f.json"
        save_fusion(path, fusion)
        assert load_fusion(path).fingerprint() == fusion.fingerprint()

    def test_adapter_roundtrip(self, tmp_path):
        adapter = init_adapter(AdapterConfig(embed_dim=16, hidden=4), "a5",
                               np.random.default_rng(5))
        path = tmp_path / "a.json"
        save_adapter(path, adapter)
        loaded = load_adapter(path)
        assert loaded.fingerprint() == adapter.fingerprint()
        assert loaded.arrangement_id == "a5"

    def test_bundle_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        backbone = init_backbone(CFG, rng)
        fusion = init_fusion(FusionConfig(embed_dim=16, heads=2), rng)
        adapter = init_adapter(AdapterConfig(embed_dim=16), "a3", rng)
        member = BundleMember("a3", backbone, fusion, adapter)
        codebook = make_codebook(7)
        path = tmp_path / "bundle.json"
        save_bundle(path, member, codebook, backbone, k=4, mean_fusion=False,
                    reuse=True)
        bundle = load_bundle(path)
        assert bundle.k == 4
        assert bundle.members[0].arrangement_id == "a3"
        assert bundle.members[0].backbone.fingerprint() == backbone.fingerprint()
        assert bundle.members[0].fusion.fingerprint() == fusion.fingerprint()
        assert bundle.members[0].adapter.fingerprint() == adapter.fingerprint()
        assert bundle.retrieval_backbone.fingerprint() == backbone.fingerprint()
        assert np.array_equal(bundle.codebook.entries, codebook.entries)

    def test_bundle_save_load_save_identical(self, tmp_path):
        rng = np.random.default_rng(8)
        backbone = init_backbone(CFG, rng)
        fusion = init_fusion(FusionConfig(embed_dim=16, heads=2), rng)
        member = BundleMember("a1", backbone, fusion, None)
        codebook = make_codebook(9)
        p1, p2 = tmp_path / "b1.json", tmp_path / "b2.json"
        save_bundle(p1, member, codebook, backbone, k=2)
        loaded = load_bundle(p1)
        save_bundle(p2, loaded.members[0], loaded.codebook,
                    loaded.retrieval_backbone, k=loaded.k,
                    mean_fusion=loaded.mean_fusion, reuse=loaded.reuse,
                    mask_fill=loaded.mask_fill)
        assert p1.read_bytes() == p2.read_bytes()
