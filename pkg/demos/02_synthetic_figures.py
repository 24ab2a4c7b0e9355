"""Synthetic figure dataset tour.

Shows what one figure identity looks like across poses and backgrounds,
what its reference parts are, and how a training pair / benchmark group is
assembled. Writes PNGs under demos/out/figures/.
"""

from pathlib import Path

import numpy as np

from refcomplete.masks import MaskSpec
from refcomplete.pngio import save_mask, save_raster
from refcomplete.synth import (
    FigureSpec,
    Pose,
    build_benchmark_group,
    build_training_pair,
    figure_caption,
    generate_figure,
)

out = Path(__file__).parent / "out" / "figures"
out.mkdir(parents=True, exist_ok=True)

################################################################
# One identity, three poses: the textures and the unique glyph follow the
# figure, while pose and background vary.

spec = FigureSpec.random("demo_fig", np.random.default_rng(42))
print("parts:", spec.part_labels)
print("glyph lives on:", spec.glyph_part)
print("caption:", figure_caption(spec))

rng = np.random.default_rng(0)
for i in range(3):
    img, part_masks, sil = generate_figure(spec, Pose.random(rng), background=i)
    save_raster(out / f"pose_{i}.png", img)
print("three renders of the same identity written")

################################################################
# Reference parts: a full render plus one mask per appearance part.

sample = build_training_pair(spec, np.random.default_rng(5), MaskSpec())
save_raster(out / "target.png", sample.target)
save_raster(out / "occluded.png", sample.occluded_input)
save_mask(out / "source_mask.png", sample.source_mask)
for ref in sample.references:
    save_raster(out / f"ref_{ref.label}.png", ref.image)
    save_mask(out / f"ref_{ref.label}_mask.png", ref.mask)
    print(f"reference {ref.label:20s} mask px {int(ref.mask.sum()):4d}  '{ref.caption}'")

################################################################
# A benchmark group: same person, different pose AND background; the source
# mask covers the glyph-bearing part, so completion needs the references.

group = build_benchmark_group(spec, np.random.default_rng(9))
print(f"benchmark group {group.group_id}: source bg "
      f"{group.meta['source_background']}, reference bg "
      f"{group.meta['reference_background']}, masked px {int(group.source_mask.sum())}")
save_raster(out / "bench_source.png", group.source)
save_mask(out / "bench_mask.png", group.source_mask)
print(f"wrote figure images to {out}")
