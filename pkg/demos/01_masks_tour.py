"""Mask families tour.

Walks through the two training-mask families (random rectangle grids and
figure-silhouette masks), the training-time mixture, and the pixel->latent
downsampling rule. Writes PNGs under demos/out/masks/.
"""

from pathlib import Path

import numpy as np

from refcomplete.masks import (
    MaskSpec,
    body_shape_mask,
    downsample_mask,
    random_grid_mask,
    sample_training_mask,
)
from refcomplete.pngio import save_mask
from refcomplete.synth import FigureSpec, Pose, generate_figure

out = Path(__file__).parent / "out" / "masks"
out.mkdir(parents=True, exist_ok=True)

################################################################
# Random grid masks: unions of 1..30 random rectangles.

rng = np.random.default_rng(7)
for i in range(3):
    m = random_grid_mask(64, 64, rng, repeats_range=(1, 30), cell_fraction=0.15)
    print(f"grid mask {i}: coverage {m.mean():.2%}")
    save_mask(out / f"grid_{i}.png", m)

################################################################
# Body-shape masks need a silhouette; render one figure to get it.

spec = FigureSpec.random("demo", np.random.default_rng(0))
_, _, silhouette = generate_figure(spec, Pose.random(np.random.default_rng(1)), 2)
save_mask(out / "silhouette.png", silhouette)

full = body_shape_mask(silhouette, np.random.default_rng(2), subbox=False)
sub = body_shape_mask(silhouette, np.random.default_rng(3), subbox=True)
print(f"body mask: full {full.sum()} px, sub-box {sub.sum()} px "
      f"({sub.sum() / full.sum():.0%} of silhouette)")
save_mask(out / "body_full.png", full)
save_mask(out / "body_subbox.png", sub)

################################################################
# The training mixture draws grid masks with probability random_ratio.

mix = MaskSpec(random_ratio=0.5)
draws = [sample_training_mask(silhouette, rng, mix) for _ in range(6)]
print("mixture coverages:", [f"{m.mean():.2f}" for m in draws])

################################################################
# Latent-resolution masks: a cell is masked iff >= 50% of its pixel
# footprint is masked.

m = draws[0]
for factor in (4, 8):
    d = downsample_mask(m, factor)
    print(f"factor {factor}: {m.shape} -> {d.shape}, {d.sum()} latent cells set")
print(f"wrote mask images to {out}")
