# The three synthetic tasks and their metrics. Segmentation and
# detection are scored by IoU of binarized masks, colorization by MSE.
# Note the two labeling conventions in segmentation: striped scenes mask
# the shape, dotted scenes mask the background — reading the convention
# off the support is exactly what makes prompt quality matter.

from pathlib import Path

import numpy as np

from promptgrid.grid import save_png
from promptgrid.tasks import TaskSpec, generate, miou, mse

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

for kind in ("segmentation", "detection", "colorization"):
    pairs = generate(TaskSpec(kind=kind, seed=3, count=6, extent=32, fold=1))
    gap = np.ones((32, 2, 3))
    strip = []
    for image, label in pairs:
        strip += [image, gap, label, np.ones((32, 6, 3))]
    sheet = np.concatenate(strip[:-1], axis=1)
    save_png(sheet, out_dir / f"task_{kind}.png")
    print(f"{kind}: wrote {out_dir / f'task_{kind}.png'}")

# Metric sanity on hand-countable masks.
a = np.zeros((5, 5, 3))
b = np.zeros((5, 5, 3))
a[0, 0] = a[0, 1] = 1.0
b[0, 1] = b[0, 2] = 1.0
print(f"\nIoU of 2-cell masks overlapping in 1 cell: {miou(a, b):.4f} (= 1/3)")
zeros, ones = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
print(f"MSE of all-zeros vs all-ones: {mse(zeros, ones):.1f}")
