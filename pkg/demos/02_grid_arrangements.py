# The geometry layer: one support pair and one query composed under all
# eight arrangements. Writes a contact sheet to demos/output/.

from pathlib import Path

import numpy as np

from promptgrid.grid import Role, arrangement_catalog, compose, extract, save_png
from promptgrid.tasks import TaskSpec, generate

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

pairs = generate(TaskSpec(kind="segmentation", seed=7, count=2, extent=32))
(support_img, support_lab), (query_img, query_lab) = pairs

rows = []
for arr in arrangement_catalog():
    canvas = compose((support_img, support_lab), query_img, arr)
    print(f"{arr.id}: tl={arr.tl.value:13s} tr={arr.tr.value:13s} "
          f"bl={arr.bl.value:13s} br={arr.br.value}")
    rows.append(canvas.pixels)
    # Extraction inverts composition for every non-mask role.
    assert np.array_equal(extract(canvas, Role.QUERY_IMAGE), query_img)

gap = np.ones((64, 4, 3))
top = np.concatenate(sum(([r, gap] for r in rows[:4]), [])[:-1], axis=1)
bottom = np.concatenate(sum(([r, gap] for r in rows[4:]), [])[:-1], axis=1)
sheet = np.concatenate([top, np.ones((4, top.shape[1], 3)), bottom], axis=0)
save_png(sheet, out_dir / "arrangements.png")
print(f"\nwrote {out_dir / 'arrangements.png'} "
      f"(a1..a4 on top, transposed a5..a8 below)")
