"""Procedural figure generator.

Renders small articulated 2D figures (head / torso / limbs) whose six
appearance parts each carry a procedural texture, plus one unique glyph per
figure whose reconstruction is the measurable identity signal. Rendering is
a pure function of (spec, pose, background id), so every downstream artifact
is reproducible from seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .masks import Mask, MaskSpec, apply_mask, sample_training_mask
from .pngio import Raster, load_mask, load_raster, quantize, save_mask, save_raster

PART_LABELS = (
    "upper_clothes",
    "lower_clothes",
    "whole_body_clothes",
    "hair_headwear",
    "face",
    "shoes",
)

TEXTURES = ("solid", "hstripes", "vstripes", "checker", "dots")

_PART_PHRASE = {
    "upper_clothes": "top",
    "lower_clothes": "trousers",
    "whole_body_clothes": "overalls",
    "hair_headwear": "headwear",
    "face": "face",
    "shoes": "shoes",
}

_COLOR_WORDS = (
    "red", "orange", "yellow", "lime", "green", "teal",
    "cyan", "azure", "blue", "violet", "magenta", "pink",
)

N_BACKGROUNDS = 8


def part_index(label: str) -> int:
    try:
        return PART_LABELS.index(label)
    except ValueError:
        raise InvalidArgumentError(f"unknown part label {label!r}") from None


def _stable_seed(*keys) -> int:
    digest = hashlib.sha256("|".join(str(k) for k in keys).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def color_word(rgb: np.ndarray) -> str:
    """Coarse hue bucket name; intentionally lossy so prompts stay vague."""
    r, g, b = float(rgb[0]), float(rgb[1]), float(rgb[2])
    mx, mn = max(r, g, b), min(r, g, b)
    if mx - mn < 0.08:
        return "gray"
    if mx == r:
        h = ((g - b) / (mx - mn)) % 6
    elif mx == g:
        h = (b - r) / (mx - mn) + 2
    else:
        h = (r - g) / (mx - mn) + 4
    return _COLOR_WORDS[int(h * 2) % 12]


@dataclass(frozen=True)
class PartStyle:
    base: tuple[float, float, float]
    accent: tuple[float, float, float]
    texture: str
    period: int = 4


@dataclass(frozen=True)
class Pose:
    """Articulation parameters; al ranges validated at render time.

    Angles are radians from straight-down; dx/dy translate the whole figure
    in units of the canvas size.
    """

    arm_left: float = 2.6
    arm_right: float = 2.6
    leg_spread: float = 0.02
    dx: float = 0.0
    dy: float = 0.0

    ARM_RANGE = (0.26, 2.88)  # ~15..165 degrees
    SPREAD_RANGE = (0.0, 0.06)
    SHIFT_RANGE = (-0.05, 0.05)

    def validate(self) -> None:
        lo, hi = self.ARM_RANGE
        for a in (self.arm_left, self.arm_right):
            if not lo <= a <= hi:
                raise InvalidArgumentError(f"arm angle {a} outside [{lo}, {hi}]")
        if not self.SPREAD_RANGE[0] <= self.leg_spread <= self.SPREAD_RANGE[1]:
            raise InvalidArgumentError(f"leg_spread {self.leg_spread} out of range")
        for d in (self.dx, self.dy):
            if not self.SHIFT_RANGE[0] <= d <= self.SHIFT_RANGE[1]:
                raise InvalidArgumentError(f"figure shift {d} out of range")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Pose":
        return cls(
            arm_left=float(rng.uniform(*cls.ARM_RANGE)),
            arm_right=float(rng.uniform(*cls.ARM_RANGE)),
            leg_spread=float(rng.uniform(*cls.SPREAD_RANGE)),
            dx=float(rng.uniform(*cls.SHIFT_RANGE)),
            dy=float(rng.uniform(*cls.SHIFT_RANGE)),
        )


@dataclass(frozen=True)
class FigureSpec:
    """Identity of one figure: per-part styles plus a unique glyph."""

    figure_id: str
    styles: dict[str, PartStyle]
    glyph_part: str
    glyph_seed: int
    glyph_color: tuple[float, float, float]
    skin: tuple[float, float, float]
    proportions: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    @property
    def part_labels(self) -> list[str]:
        return [p for p in PART_LABELS if p in self.styles]

    @classmethod
    def random(cls, figure_id: str, rng: np.random.Generator) -> "FigureSpec":
        def palette() -> tuple[tuple, tuple]:
            base = rng.uniform(0.15, 0.95, size=3)
            accent = np.clip(base + rng.uniform(-0.4, 0.4, size=3), 0.05, 1.0)
            return tuple(base.round(3)), tuple(accent.round(3))

        whole_body = rng.random() < 0.35
        labels = ["hair_headwear", "face", "shoes"]
        labels += ["whole_body_clothes"] if whole_body else ["upper_clothes", "lower_clothes"]
        styles = {}
        for label in labels:
            base, accent = palette()
            texture = "solid" if label == "face" else TEXTURES[int(rng.integers(len(TEXTURES)))]
            styles[label] = PartStyle(base=base, accent=accent, texture=texture,
                                      period=int(rng.integers(3, 6)))
        glyph_part = "whole_body_clothes" if whole_body else "upper_clothes"
        glyph_color = tuple(np.round(1.0 - np.asarray(styles[glyph_part].base), 3))
        props = tuple(np.round(rng.uniform(0.9, 1.1, size=4), 3))
        skin = tuple(np.round(rng.uniform(0.55, 0.9, size=3), 3))
        return cls(figure_id=figure_id, styles=styles, glyph_part=glyph_part,
                   glyph_seed=int(rng.integers(2**31)), glyph_color=glyph_color,
                   skin=skin, proportions=props)


@dataclass
class ReferencePart:
    """One reference conditioning unit: a part label, an image, and the mask
    selecting that part inside the image."""

    label: str
    image: Raster
    mask: Mask
    caption: str = ""

    def validate(self) -> None:
        if self.label not in PART_LABELS:
            raise InvalidArgumentError(f"unknown part label {self.label!r}")
        if self.mask.shape != self.image.shape[:2]:
            raise InvalidArgumentError("reference mask does not match image size")
        if self.mask.sum() == 0:
            raise InvalidArgumentError("reference mask is empty")


@dataclass
class TrainingSample:
    target: Raster
    occluded_input: Raster
    source_mask: Mask
    references: list[ReferencePart]
    prompt: str
    silhouette: Mask | None = None  # kept so training can resample masks
    figure_id: str = ""


def _texture_field(style: PartStyle, rows: np.ndarray, cols: np.ndarray,
                   anchor: tuple[float, float], size: int) -> np.ndarray:
    """Per-pixel colors in part-local coordinates, so the pattern moves with
    the figure instead of the canvas."""
    p = max(2, round(style.period * size / 64))
    r = np.asarray(rows) - int(round(anchor[0]))
    c = np.asarray(cols) - int(round(anchor[1]))
    base = np.asarray(style.base)
    accent = np.asarray(style.accent)
    if style.texture == "solid":
        pick = np.zeros(r.shape, dtype=bool)
    elif style.texture == "hstripes":
        pick = (r // p) % 2 == 1
    elif style.texture == "vstripes":
        pick = (c // p) % 2 == 1
    elif style.texture == "checker":
        pick = ((r // p) + (c // p)) % 2 == 1
    elif style.texture == "dots":
        pick = ((r % (2 * p) - p // 2) ** 2 + (c % (2 * p) - p // 2) ** 2) <= (p // 2 + 1) ** 2
    else:
        raise InvalidArgumentError(f"unknown texture {style.texture!r}")
    return np.where(pick[..., None], accent, base)


def _background(bg_id: int, size: int) -> np.ndarray:
    rng = np.random.default_rng(_stable_seed("background", bg_id))
    c0 = rng.uniform(0.05, 0.6, size=3)
    c1 = rng.uniform(0.3, 0.95, size=3)
    rr, cc = np.mgrid[0:size, 0:size]
    kind = bg_id % 4
    if kind == 0:
        t = rr / max(size - 1, 1)
    elif kind == 1:
        t = cc / max(size - 1, 1)
    elif kind == 2:
        t = ((rr + cc) // max(2, size // 8)) % 2
    else:
        t = (np.sin(rr / 3.1) * np.cos(cc / 4.3) > 0).astype(float)
    img = c0 + np.asarray(t)[..., None] * (c1 - c0)
    return img.astype(np.float64)


def _paint(canvas, owner, sel: np.ndarray, color, part: int) -> None:
    canvas[sel] = color if np.ndim(color) == 1 else color[sel]
    owner[sel] = part


def _capsule(size: int, p0, p1, radius: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    ar, ac = p0
    br, bc = p1
    dr, dc = br - ar, bc - ac
    L2 = dr * dr + dc * dc
    t = np.clip(((rr - ar) * dr + (cc - ac) * dc) / max(L2, 1e-9), 0.0, 1.0)
    dist2 = (rr - (ar + t * dr)) ** 2 + (cc - (ac + t * dc)) ** 2
    return dist2 <= radius * radius


def generate_figure(
    spec: FigureSpec,
    pose: Pose | None = None,
    background: int | None = None,
    rng: np.random.Generator | None = None,
    size: int = 64,
) -> tuple[Raster, dict[str, Mask], Mask]:
    """Render (image, per-part masks, silhouette).

    Pose/background may be omitted, in which case they are sampled from
    ``rng``; with explicit values the render is fully deterministic.
    """
    if pose is None or background is None:
        if rng is None:
            raise InvalidArgumentError("rng required when pose/background are sampled")
        pose = Pose.random(rng) if pose is None else pose
        background = int(rng.integers(N_BACKGROUNDS)) if background is None else background
    pose.validate()
    if not 0 <= background < N_BACKGROUNDS:
        raise InvalidArgumentError(f"background id {background} out of range")

    S = size
    ph, pw, pt, pl = spec.proportions
    head_r = max(2, round(0.085 * S * ph))
    hair_h = max(2, round(0.06 * S))
    torso_w = max(6, round(0.28 * S * pw))
    torso_h = max(6, round(0.29 * S * pt))
    leg_len = max(4, round(0.24 * S * pl))
    leg_w = max(2, round(0.075 * S))
    shoe_h = max(2, round(0.06 * S))
    arm_len = max(4, round(0.21 * S))
    arm_r = max(1, round(0.028 * S))

    cx = S / 2 + pose.dx * S
    top = 0.06 * S + pose.dy * S

    canvas = _background(background, S).copy()
    owner = np.full((S, S), -1, dtype=np.int8)  # part index or -2 for skin
    rr, cc = np.mgrid[0:S, 0:S]

    face_cy = top + hair_h + head_r
    neck_y = face_cy + head_r
    torso_top = neck_y
    torso_bot = torso_top + torso_h
    body_label = "whole_body_clothes" if "whole_body_clothes" in spec.styles else None

    # Arms first so clothing is drawn over the shoulder joints.
    for side, ang in ((-1, pose.arm_left), (1, pose.arm_right)):
        sh = (torso_top + 0.12 * torso_h, cx + side * (torso_w / 2 - 1))
        tip = (sh[0] + arm_len * np.cos(ang), sh[1] + side * arm_len * np.sin(ang))
        sel = _capsule(S, sh, tip, arm_r)
        _paint(canvas, owner, sel, np.asarray(spec.skin), -2)

    # Legs / lower clothing.
    leg_label = body_label or "lower_clothes"
    leg_top, leg_bot = torso_bot, torso_bot + leg_len
    spread = pose.leg_spread * S
    leg_sels = []
    for side in (-1, 1):
        x0 = cx + side * (leg_w / 2 + 1)
        t = np.clip((rr - leg_top) / max(leg_len, 1), 0, 1)
        center = x0 + side * spread * t
        sel = (rr >= leg_top) & (rr < leg_bot) & (np.abs(cc - center) <= leg_w / 2)
        leg_sels.append(sel)
        style = spec.styles[leg_label]
        colors = _texture_field(style, rr, cc, (leg_top, cx - torso_w / 2), S)
        _paint(canvas, owner, sel, colors, part_index(leg_label))

    # Shoes at the bottom of each leg.
    shoe_style = spec.styles["shoes"]
    for side, leg_sel in zip((-1, 1), leg_sels):
        foot_cols = np.where(leg_sel[min(int(leg_bot) - 1, S - 1)])[0]
        x_lo = foot_cols.min() - 1 if foot_cols.size else cx + side * 2 - 2
        x_hi = foot_cols.max() + 2 if foot_cols.size else cx + side * 2 + 2
        sel = (rr >= leg_bot) & (rr < leg_bot + shoe_h) & (cc >= x_lo) & (cc < x_hi)
        colors = _texture_field(shoe_style, rr, cc, (leg_bot, x_lo), S)
        _paint(canvas, owner, sel, colors, part_index("shoes"))

    # Torso / upper clothing (drawn over the arm roots).
    torso_label = body_label or "upper_clothes"
    sel = (rr >= torso_top) & (rr < torso_bot) & (np.abs(cc - cx) <= torso_w / 2)
    style = spec.styles[torso_label]
    colors = _texture_field(style, rr, cc, (torso_top, cx - torso_w / 2), S)
    _paint(canvas, owner, sel, colors, part_index(torso_label))

    # Identity glyph: a seeded block pattern stamped on the torso.
    g = max(4, round(0.125 * S))
    grng = np.random.default_rng(spec.glyph_seed)
    cells = grng.integers(0, 2, size=(4, 4))
    gr0 = int(round(torso_top + 0.3 * torso_h))
    gc0 = int(round(cx - g / 2))
    cell_px = max(1, g // 4)
    for i in range(4):
        for j in range(4):
            if cells[i, j]:
                sel_g = (
                    (rr >= gr0 + i * cell_px) & (rr < gr0 + (i + 1) * cell_px)
                    & (cc >= gc0 + j * cell_px) & (cc < gc0 + (j + 1) * cell_px)
                    & (owner == part_index(spec.glyph_part))
                )
                canvas[sel_g] = np.asarray(spec.glyph_color)

    # Face, then hair on top.
    sel = (rr - face_cy) ** 2 + (cc - cx) ** 2 <= head_r**2
    _paint(canvas, owner, sel, np.asarray(spec.styles["face"].base), part_index("face"))
    hair_style = spec.styles["hair_headwear"]
    sel = ((rr - face_cy) ** 2 + (cc - cx) ** 2 <= (head_r + hair_h / 2) ** 2) & (
        rr <= face_cy - head_r * 0.35
    )
    colors = _texture_field(hair_style, rr, cc, (top, cx - head_r), S)
    _paint(canvas, owner, sel, colors, part_index("hair_headwear"))

    part_masks = {
        label: (owner == part_index(label)).astype(np.uint8)
        for label in spec.part_labels
    }
    silhouette = (owner != -1).astype(np.uint8)
    image = quantize(np.clip(canvas, 0.0, 1.0))
    return image, part_masks, silhouette


def figure_caption(spec: FigureSpec) -> str:
    word = color_word(np.asarray(spec.styles[spec.glyph_part].base))
    return f"a figure wearing {word} {_PART_PHRASE[spec.glyph_part]}"


def reference_parts(spec: FigureSpec, pose: Pose, background: int,
                    size: int = 64) -> list[ReferencePart]:
    """All present parts of one render, as reference conditioning units."""
    image, part_masks, _ = generate_figure(spec, pose, background, size=size)
    refs = []
    for label in spec.part_labels:
        mask = part_masks[label]
        if mask.sum() == 0:
            continue
        word = color_word(np.asarray(spec.styles[label].base))
        refs.append(ReferencePart(label=label, image=image, mask=mask,
                                  caption=f"the {word} {_PART_PHRASE[label]} of a figure"))
    return refs


def _two_distinct(rng: np.random.Generator, n: int) -> tuple[int, int]:
    a = int(rng.integers(n))
    b = int(rng.integers(n - 1))
    return a, b if b < a else b + 1


def build_training_pair(
    spec: FigureSpec,
    rng: np.random.Generator,
    mask_spec: MaskSpec | None = None,
    size: int = 64,
) -> TrainingSample:
    """Occluded target + reference parts rendered from a different pose."""
    mask_spec = mask_spec or MaskSpec()
    pose_a, pose_b = Pose.random(rng), Pose.random(rng)
    bg_a, bg_b = _two_distinct(rng, N_BACKGROUNDS)
    target, _, silhouette = generate_figure(spec, pose_a, bg_a, size=size)
    refs = reference_parts(spec, pose_b, bg_b, size=size)
    source_mask = sample_training_mask(silhouette, rng, mask_spec)
    occluded = apply_mask(target, source_mask, 0.0)
    return TrainingSample(
        target=target,
        occluded_input=occluded,
        source_mask=source_mask,
        references=refs,
        prompt=figure_caption(spec),
        silhouette=silhouette,
        figure_id=spec.figure_id,
    )


def build_benchmark_group(spec: FigureSpec, rng: np.random.Generator,
                          size: int = 64):
    """Evaluation unit: same figure, different pose and background, with the
    source mask covering the glyph-bearing part."""
    from .benchmark import BenchmarkGroup  # local import avoids a module cycle

    pose_a, pose_b = Pose.random(rng), Pose.random(rng)
    bg_a, bg_b = _two_distinct(rng, N_BACKGROUNDS)
    source, part_masks, _ = generate_figure(spec, pose_a, bg_a, size=size)
    refs = reference_parts(spec, pose_b, bg_b, size=size)
    from scipy import ndimage

    glyph_mask = part_masks[spec.glyph_part]
    source_mask = ndimage.binary_dilation(glyph_mask, iterations=1).astype(np.uint8)
    return BenchmarkGroup(
        group_id=spec.figure_id,
        source=source,
        source_mask=source_mask,
        references=refs,
        prompt=figure_caption(spec),
        ground_truth=source.copy(),
        meta={"source_background": bg_a, "reference_background": bg_b,
              "figure_id": spec.figure_id},
    )


# ---------------------------------------------------------------------------
# Dataset persistence:
#   figures/<id>/{target,occluded,mask,silhouette}.png
#   figures/<id>/refs/<label>.png + <label>_mask.png
#   figures/<id>/meta.json, plus a top-level dataset.json manifest.
# ---------------------------------------------------------------------------

def save_training_dataset(out_dir: str | Path, samples: list[TrainingSample],
                          seed: int) -> None:
    out = Path(out_dir)
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for sample in samples:
        d = fig_dir / sample.figure_id
        (d / "refs").mkdir(parents=True, exist_ok=True)
        save_raster(d / "target.png", sample.target)
        save_raster(d / "occluded.png", sample.occluded_input)
        save_mask(d / "mask.png", sample.source_mask)
        if sample.silhouette is not None:
            save_mask(d / "silhouette.png", sample.silhouette)
        for ref in sample.references:
            save_raster(d / "refs" / f"{ref.label}.png", ref.image)
            save_mask(d / "refs" / f"{ref.label}_mask.png", ref.mask)
        meta = {
            "figure_id": sample.figure_id,
            "caption": sample.prompt,
            "reference_labels": [r.label for r in sample.references],
            "reference_captions": {r.label: r.caption for r in sample.references},
            "seed": seed,
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        ids.append(sample.figure_id)
    manifest = {"version": 1, "count": len(ids), "figure_ids": ids, "seed": seed}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_training_dataset(dataset_dir: str | Path) -> list[TrainingSample]:
    root = Path(dataset_dir)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise InvalidArgumentError(f"no dataset.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for fid in manifest["figure_ids"]:
        d = root / "figures" / fid
        meta = json.loads((d / "meta.json").read_text())
        refs = []
        for label in meta["reference_labels"]:
            refs.append(ReferencePart(
                label=label,
                image=load_raster(d / "refs" / f"{label}.png"),
                mask=load_mask(d / "refs" / f"{label}_mask.png"),
                caption=meta.get("reference_captions", {}).get(label, ""),
            ))
        sil_path = d / "silhouette.png"
        samples.append(TrainingSample(
            target=load_raster(d / "target.png"),
            occluded_input=load_raster(d / "occluded.png"),
            source_mask=load_mask(d / "mask.png"),
            references=refs,
            prompt=meta["caption"],
            silhouette=load_mask(sil_path) if sil_path.exists() else None,
            figure_id=fid,
        ))
    return samples


def generate_dataset(
    out_dir: str | Path,
    n_figures: int,
    seed: int,
    n_benchmark_groups: int = 20,
    size: int = 64,
    mask_spec: MaskSpec | None = None,
) -> dict:
    """Training pairs plus a held-out benchmark subset, persisted to disk.

    Benchmark figures draw from a disjoint id/seed range so evaluation never
    sees a training identity.
    """
    from .benchmark import save_benchmark

    if n_figures < 1:
        raise InvalidArgumentError("figures must be >= 1")
    out = Path(out_dir)
    samples = []
    for i in range(n_figures):
        rng = np.random.default_rng(_stable_seed("train", seed, i))
        spec = FigureSpec.random(f"fig{i:05d}", rng)
        samples.append(build_training_pair(spec, rng, mask_spec, size=size))
    save_training_dataset(out, samples, seed)

    groups = []
    for i in range(n_benchmark_groups):
        rng = np.random.default_rng(_stable_seed("bench", seed, i))
        spec = FigureSpec.random(f"bench{i:04d}", rng)
        groups.append(build_benchmark_group(spec, rng, size=size))
    if groups:
        save_benchmark(out / "benchmark", groups)
    return {"figures": n_figures, "benchmark_groups": n_benchmark_groups,
            "out": str(out), "seed": seed, "size": size}
