# The two mechanisms on top of the backbone: cross-attention fusion of
# several retrieved prompts into one synthetic support pair, and the
# query-support swap that powers bidirectional fine-tuning.

from pathlib import Path

import numpy as np

from promptgrid.backbone import BackboneConfig, pretrain
from promptgrid.finetune import make_new_pair, swap_supports
from promptgrid.fusion import FusionConfig, fuse, init_fusion
from promptgrid.grid import save_png
from promptgrid.pipeline import pretrain_triples
from promptgrid.prompts import ingest, retrieve_topk
from promptgrid.tasks import TaskSpec

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

config = BackboneConfig(canvas_size=32, patch_size=4, embed_dim=48, blocks=2,
                        heads=4, ff_hidden=96, vocab_size=32)
pool = ingest(TaskSpec(kind="segmentation", seed=21, count=80, extent=16))
triples = pretrain_triples(pool, 8, np.random.default_rng(0))
backbone = pretrain(triples, config, np.random.default_rng(1),
                    epochs=3, lr=0.05, batch_size=16).params
pool.ensure_features(backbone)

fusion = init_fusion(FusionConfig(embed_dim=48, heads=4), np.random.default_rng(2))

query = pool.pairs[0]
hits = retrieve_topk(query.feature, pool, 4, exclude_ids=[query.id])
print("retrieved supports (id, cosine):",
      [(h.pair.id, round(h.score, 4)) for h in hits])

fused = fuse(query.image, [h.pair for h in hits], backbone, fusion)
print("fusion weights:", np.round(fused.weights, 4), "sum:", fused.weights.sum())

gap = np.ones((16, 2, 3))
row_imgs = sum(([h.pair.image, gap] for h in hits), [])
row_labs = sum(([h.pair.label, gap] for h in hits), [])
sheet = np.concatenate([
    np.concatenate(row_imgs + [fused.fused_image], axis=1),
    np.ones((2, 16 * 5 + 8, 3)),
    np.concatenate(row_labs + [fused.fused_label], axis=1),
], axis=0)
save_png(sheet, out_dir / "fusion.png")
print(f"wrote {out_dir / 'fusion.png'} (four supports, fused pair rightmost)")

# Swapping: pair the query with a (here: fake) prediction, push it into
# the support set, and let each displaced support take a turn as query.
fake_prediction = fused.fused_label
new_pair = make_new_pair(query.image, fake_prediction,
                         used_ids=[p.id for p in pool.pairs])
supports = [h.pair for h in hits]
for n in (1, 2):
    swapped = swap_supports(supports, new_pair, n)
    displaced = supports[n - 1]
    print(f"sub-iteration {n}: support ids "
          f"{[p.id for p in swapped]} (query is now pair {displaced.id})")
