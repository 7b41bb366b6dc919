# Pretrain a miniature backbone, then watch it fill in masked quadrants.
# The codebook is built by seeded k-means over training patches; the
# encoder learns to predict codebook indices for the hidden quadrant.

from pathlib import Path

import numpy as np

from promptgrid.backbone import BackboneConfig, inpaint, pretrain, quantize
from promptgrid.grid import Role, arrangement_by_id, compose, extract, save_png
from promptgrid.pipeline import pretrain_triples
from promptgrid.prompts import ingest
from promptgrid.tasks import TaskSpec, miou

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

config = BackboneConfig(canvas_size=32, patch_size=4, embed_dim=48, blocks=3,
                        heads=4, ff_hidden=96, vocab_size=32)
pool = ingest(TaskSpec(kind="segmentation", seed=11, count=120, extent=16))
triples = pretrain_triples(pool, 8, np.random.default_rng(0))

result = pretrain(triples, config, np.random.default_rng(1),
                  epochs=6, lr=0.05, batch_size=16)
print(f"pretraining: {len(result.losses)} steps, "
      f"loss {result.losses[0]:.3f} -> {result.losses[-1]:.3f} "
      f"(chance = ln {config.vocab_size} = {np.log(config.vocab_size):.3f})")

# Inpaint a few held-out queries with their nearest training example as
# the support prompt.
held = ingest(TaskSpec(kind="segmentation", seed=999, count=4, extent=16))
pool.ensure_features(result.params)
held.ensure_features(result.params)

strips = []
scores = []
for pair in held.pairs:
    from promptgrid.prompts import retrieve_topk
    hit = retrieve_topk(pair.feature, pool, 1)[0]
    canvas = compose((hit.pair.image, hit.pair.label), pair.image,
                     arrangement_by_id("a1"))
    completed = inpaint(canvas, result.params, result.codebook)
    prediction = extract(completed, Role.MASK)
    scores.append(miou(prediction, pair.label))
    gap = np.ones((16, 2, 3))
    strips.append(np.concatenate(
        [pair.image, gap, hit.pair.image, gap, hit.pair.label, gap,
         prediction, gap, pair.label], axis=1))
    strips.append(np.ones((2, strips[-1].shape[1], 3)))

save_png(np.concatenate(strips[:-1], axis=0), out_dir / "inpainting.png")
print(f"held-out mIoU with top-1 prompts: {np.mean(scores):.3f}")
print(f"wrote {out_dir / 'inpainting.png'} "
      f"(query | support | support label | prediction | truth)")
