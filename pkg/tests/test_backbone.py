import numpy as np
import pytest

from promptgrid import engine as en
from promptgrid import backbone as bb
from promptgrid.grid import Role, arrangement_by_id, arrangement_catalog, compose, extract


TINY = bb.BackboneConfig(canvas_size=16, patch_size=4, embed_dim=16,
                         blocks=1, heads=2, ff_hidden=32, vocab_size=8)


@pytest.fixture(scope="module")
def tiny_params():
    return bb.init_backbone(TINY, np.random.default_rng(0))


@pytest.fixture(scope="module")
def tiny_codebook():
    rng = np.random.default_rng(1)
    return bb.Codebook(entries=rng.random((8, TINY.patch_dim)))


def tiled_panel(codebook, tokens, panel_shape):
    return bb.decode(np.asarray(tokens), codebook, panel_shape)


class TestQuantizeDecode:
    def test_tiled_panel_is_fixed_point(self, tiny_codebook):
        tokens = np.array([3, 0, 7, 5])
        panel = tiled_panel(tiny_codebook, tokens, (8, 8))
        assert np.array_equal(bb.quantize(panel, tiny_codebook), tokens)

    def test_idempotence(self, tiny_codebook):
        rng = np.random.default_rng(2)
        panel = rng.random((8, 8, 3))
        once = bb.quantize(panel, tiny_codebook)
        again = bb.quantize(bb.decode(once, tiny_codebook, (8, 8)), tiny_codebook)
        assert np.array_equal(once, again)

    def test_matches_brute_force_scan(self, tiny_codebook):
        rng = np.random.default_rng(3)
        panel = rng.random((8, 8, 3))
        got = bb.quantize(panel, tiny_codebook)
        patches = bb.patchify_array(panel, 4)
        for i, patch in enumerate(patches):
            dists = [np.sum((patch - entry) ** 2) for entry in tiny_codebook.entries]
            assert got[i] == int(np.argmin(dists))

    def test_decode_roundtrip_bit_exact(self, tiny_codebook):
        tokens = np.array([1, 1, 2, 6])
        panel = tiled_panel(tiny_codebook, tokens, (8, 8))
        assert np.array_equal(
            bb.decode(bb.quantize(panel, tiny_codebook), tiny_codebook, (8, 8)), panel)

    def test_all_zero_tokens(self, tiny_codebook):
        panel = bb.decode(np.zeros(4, dtype=int), tiny_codebook, (8, 8))
        entry = tiny_codebook.entries[0].reshape(4, 4, 3)
        for r in range(2):
            for c in range(2):
                assert np.array_equal(panel[4 * r:4 * r + 4, 4 * c:4 * c + 4], entry)

    def test_mixed_tokens_patchwise(self, tiny_codebook):
        tokens = np.array([5, 2, 0, 7])
        panel = bb.decode(tokens, tiny_codebook, (8, 8))
        grid = panel.reshape(2, 4, 2, 4, 3).transpose(0, 2, 1, 3, 4).reshape(4, -1)
        assert np.array_equal(grid, tiny_codebook.entries[tokens])

    def test_decode_rejects_out_of_range(self, tiny_codebook):
        with pytest.raises(ValueError):
            bb.decode(np.array([0, 8, 0, 0]), tiny_codebook, (8, 8))

    def test_quantize_rejects_indivisible_extent(self, tiny_codebook):
        with pytest.raises(ValueError):
            bb.quantize(np.zeros((6, 6, 3)), tiny_codebook)

    def test_consistency_invariant(self, tiny_codebook):
        rng = np.random.default_rng(4)
        tokens = rng.integers(0, 8, size=4)
        decoded = bb.decode(tokens, tiny_codebook, (8, 8))
        assert np.array_equal(
            bb.decode(bb.quantize(decoded, tiny_codebook), tiny_codebook, (8, 8)),
            decoded)


class TestCodebookInvariants:
    def test_rejects_duplicates(self):
        entries = np.zeros((3, 48))
        entries[1] = 1.0
        with pytest.raises(ValueError):
            bb.Codebook(entries=entries)

    def test_rejects_out_of_range(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError):
            bb.Codebook(entries=rng.random((4, 48)) + 1.0)

    def test_kmeans_produces_valid_distinct_codebook(self):
        rng = np.random.default_rng(6)
        patches = rng.random((200, 48))
        book = bb.kmeans_codebook(patches, 16, rng)
        assert book.size == 16
        assert book.entries.min() >= 0.0 and book.entries.max() <= 1.0

    def test_kmeans_deterministic(self):
        patches = np.random.default_rng(7).random((100, 48))
        a = bb.kmeans_codebook(patches, 8, np.random.default_rng(9))
        b = bb.kmeans_codebook(patches, 8, np.random.default_rng(9))
        assert np.array_equal(a.entries, b.entries)


class TestForwardTokens:
    def test_masked_count_per_arrangement(self, tiny_params):
        rng = np.random.default_rng(8)
        panels = [rng.random((8, 8, 3)) for _ in range(3)]
        expected = (TINY.panel_size // TINY.patch_size) ** 2
        for arr in arrangement_catalog():
            canvas = compose((panels[0], panels[1]), panels[2], arr)
            logits = bb.forward_tokens(canvas, tiny_params)
            assert logits.shape == (expected, TINY.vocab_size)

    def test_mask_position_changes_with_quadrant(self):
        idx = {a.id: tuple(bb.mask_token_indices(a, TINY)) for a in arrangement_catalog()}
        assert idx["a1"] != idx["a2"]
        assert len(set(len(v) for v in idx.values())) == 1

    def test_zero_head_gives_uniform_logits(self, tiny_params, tiny_codebook):
        rng = np.random.default_rng(9)
        panels = [rng.random((8, 8, 3)) for _ in range(3)]
        canvas = compose((panels[0], panels[1]), panels[2], arrangement_by_id("a1"))
        logits = bb.forward_tokens(canvas, tiny_params)
        assert np.allclose(logits.data, 0.0)
        targets = bb.quantize(panels[1], tiny_codebook)
        ce = en.cross_entropy(logits, targets)
        assert ce.item() == pytest.approx(np.log(TINY.vocab_size))

    def test_deterministic_for_fixed_params(self, tiny_params):
        rng = np.random.default_rng(10)
        panels = [rng.random((8, 8, 3)) for _ in range(3)]
        canvas = compose((panels[0], panels[1]), panels[2], arrangement_by_id("a4"))
        a = bb.forward_tokens(canvas, tiny_params).data
        b = bb.forward_tokens(canvas, tiny_params).data
        assert np.array_equal(a, b)

    def test_extent_mismatch(self, tiny_params):
        rng = np.random.default_rng(11)
        panels = [rng.random((16, 16, 3)) for _ in range(3)]
        canvas = compose((panels[0], panels[1]), panels[2], arrangement_by_id("a1"))
        with pytest.raises(ValueError):
            bb.forward_tokens(canvas, tiny_params)


class TestInpaint:
    def test_non_mask_quadrants_untouched(self, tiny_params, tiny_codebook):
        rng = np.random.default_rng(12)
        panels = [rng.random((8, 8, 3)) for _ in range(3)]
        for arr in arrangement_catalog():
            canvas = compose((panels[0], panels[1]), panels[2], arr)
            out = bb.inpaint(canvas, tiny_params, tiny_codebook)
            for role in (Role.SUPPORT_IMAGE, Role.SUPPORT_LABEL, Role.QUERY_IMAGE):
                assert np.array_equal(extract(out, role), extract(canvas, role))

    def test_oracle_logits_reproduce_quantized_label(self, tiny_params, tiny_codebook,
                                                     monkeypatch):
        rng = np.random.default_rng(13)
        panels = [rng.random((8, 8, 3)) for _ in range(3)]
        gt_label = rng.random((8, 8, 3))
        gt_tokens = bb.quantize(gt_label, tiny_codebook)

        def oracle(canvas, params, token_hook=None):
            logits = np.full((len(gt_tokens), tiny_codebook.size), -1e9)
            logits[np.arange(len(gt_tokens)), gt_tokens] = 1e9
            return en.as_tensor(logits)

        monkeypatch.setattr(bb, "forward_tokens", oracle)
        canvas = compose((panels[0], panels[1]), panels[2], arrangement_by_id("a1"))
        out = bb.inpaint(canvas, tiny_params, tiny_codebook)
        expected = bb.decode(gt_tokens, tiny_codebook, (8, 8))
        assert np.array_equal(extract(out, Role.MASK), expected)

    def test_output_in_unit_interval(self, tiny_params, tiny_codebook):
        rng = np.random.default_rng(14)
        panels = [rng.random((8, 8, 3)) for _ in range(3)]
        canvas = compose((panels[0], panels[1]), panels[2], arrangement_by_id("a6"))
        out = bb.inpaint(canvas, tiny_params, tiny_codebook)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


class TestPooledFeature:
    def test_identical_panels_identical_features(self, tiny_params):
        rng = np.random.default_rng(15)
        panel = rng.random((8, 8, 3))
        f1 = bb.pooled_feature(panel, tiny_params)
        f2 = bb.pooled_feature(panel.copy(), tiny_params)
        assert np.array_equal(f1, f2)
        assert en.cosine_similarity(f1, f2).item() == pytest.approx(1.0)

    def test_feature_length(self, tiny_params):
        rng = np.random.default_rng(16)
        assert bb.pooled_feature(rng.random((8, 8, 3)), tiny_params).shape == (16,)

    def test_mean_equals_scalar_accumulation(self, tiny_params):
        rng = np.random.default_rng(17)
        panel = rng.random((8, 8, 3))
        tokens = bb.panel_tokens(panel, tiny_params)
        acc = np.zeros(TINY.embed_dim)
        for row in tokens:
            acc = acc + row
        assert np.allclose(bb.pooled_feature(panel, tiny_params),
                           acc / len(tokens), atol=1e-12)


class TestGradientFlow:
    def test_head_gradcheck(self, tiny_params):
        """Backbone head gradients vs central finite differences."""
        rng = np.random.default_rng(18)
        panels = [rng.random((8, 8, 3)) for _ in range(3)]
        canvas = compose((panels[0], panels[1]), panels[2], arrangement_by_id("a1"))
        targets = rng.integers(0, TINY.vocab_size, size=4)
        head = [tiny_params.params["head.w"], tiny_params.params["head.b"]]
        # A zero head has symmetric (dead) directions; randomize first.
        old = [p.data.copy() for p in head]
        head[0].data = rng.normal(0.0, 0.1, head[0].shape)
        head[1].data = rng.normal(0.0, 0.1, head[1].shape)
        try:
            def loss_fn():
                return en.cross_entropy(bb.forward_tokens(canvas, tiny_params), targets)
            worst = en.check_gradients(loss_fn, head, rng, samples_per_param=6)
            assert worst < 1e-3
        finally:
            for p, data in zip(head, old):
                p.data = data

    def test_gradient_reaches_canvas_pixels(self, tiny_params):
        rng = np.random.default_rng(19)
        pixels = en.Tensor(rng.random((1, 16, 16, 3)), requires_grad=True)
        tokens = bb.encode_tokens(pixels, tiny_params)
        grads = en.backward((tokens * tokens).sum(), leaves=[pixels])
        assert grads[pixels].shape == pixels.shape
        assert np.any(grads[pixels] != 0.0)


class TestPretrain:
    def test_initial_loss_is_log_vocab_and_decreases(self):
        rng = np.random.default_rng(20)
        # Copy task: the label equals the image, so masked tokens are
        # predictable from the visible query quadrant.
        triples = []
        for _ in range(24):
            img = np.zeros((8, 8, 3))
            img[:, :, rng.integers(3)] = 1.0
            img[rng.integers(8), :, :] = 0.0
            triples.append(((img, img), img, img))
        result = bb.pretrain(triples, TINY, np.random.default_rng(21),
                             epochs=4, lr=0.05, batch_size=8)
        assert result.losses[0] == pytest.approx(np.log(TINY.vocab_size), rel=1e-6)
        assert all(np.isfinite(result.losses))
        assert result.losses[-1] < result.losses[0]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            bb.pretrain([], TINY, np.random.default_rng(0))
