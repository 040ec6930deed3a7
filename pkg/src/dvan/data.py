"""Synthetic fine-grained task, image ingestion and mini-batch iteration.

Every synthetic image shows the same elliptical "body" over a cluttered
background. Classes differ only in small glyphs stamped at fixed slots on
the body, so the label can only be read by looking closely at those spots.
"""

from __future__ import annotations

import colorsys
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pnm
from .canvas import normalize_image
from .errors import InputError, SpecError

BODY_COLOR = np.array([0.86, 0.62, 0.30])
PAPER_COLOR = np.array([0.98, 0.97, 0.92])
# slot centres relative to the body centre, in units of the body radii
SLOT_OFFSETS = ((-0.48, -0.22), (0.48, 0.18), (0.0, 0.50))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    image_size: int = 96
    num_classes: int = 8
    body_size: float = 0.62
    glyph_size: int = 5
    glyphs_per_class: int = 1
    background_clutter: float = 0.5
    placement_jitter: int = 8
    body_decoys: int = 2  # vocabulary glyphs placed on the body away from the slots
    decoy_spot: float = 1.0  # radius of the body-coloured patch under a decoy, in glyph sizes
    train_per_class: int = 200
    test_per_class: int = 100
    pattern_grid: int = 3
    ink_colors: int = 4  # distinct inks shared round-robin by the patterns, 0 gives each its own
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.num_classes}")
        if not 1 <= self.glyphs_per_class <= len(SLOT_OFFSETS):
            raise SpecError("glyphs_per_class must be between 1 and 3")
        if self.glyph_size < self.pattern_grid:
            raise SpecError("glyph_size must cover the pattern grid")
        if self.image_size < 16:
            raise SpecError("image_size must be at least 16")
        if not 0.2 <= self.body_size <= 0.95:
            raise SpecError("body_size must lie in [0.2, 0.95]")
        ry = 0.5 * self.body_size * self.image_size * 0.62
        if self.glyph_size >= ry:
            raise SpecError(f"glyph ({self.glyph_size}px) larger than the body (half-height {ry:.1f}px)")
        if not 0.0 <= self.background_clutter <= 1.0:
            raise SpecError("background_clutter must lie in [0, 1]")
        if self.body_decoys < 0:
            raise SpecError("body_decoys must be non-negative")
        if self.decoy_spot < 0:
            raise SpecError("decoy_spot must be non-negative")
        if self.ink_colors < 0:
            raise SpecError("ink_colors must be non-negative")
        if self.placement_jitter < 0:
            raise SpecError("placement_jitter must be non-negative")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise SpecError("need at least one train and one test image per class")
        vocab = vocabulary_size(self.num_classes, self.glyphs_per_class)
        if vocab > 2 ** (self.pattern_grid ** 2) // 4:
            raise SpecError("too many classes for the pattern grid")
        return self


@dataclass
class Split:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    glyph_boxes: list = field(default_factory=list)  # per image: list of (x0, y0, x1, y1)
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        boxes = [self.glyph_boxes[i] for i in idx] if self.glyph_boxes else []
        paths = [self.paths[i] for i in idx] if self.paths else []
        return Split(self.images[idx], self.labels[idx], boxes, paths)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    patterns: np.ndarray | None = None  # (V, g, g) binary vocabulary
    class_codes: np.ndarray | None = None  # (C, slots) vocabulary index per slot


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------
def vocabulary_size(num_classes: int, slots: int) -> int:
    v = 2
    while v ** slots < num_classes:
        v += 1
    return v


def make_patterns(n: int, grid: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` binary ``grid x grid`` patterns, pairwise Hamming distance >= 3."""
    cells = grid * grid
    chosen: list = []
    candidates = list(itertools.product((0, 1), repeat=cells))
    order = rng.permutation(len(candidates))
    for i in order:
        cand = np.array(candidates[i])
        if not 3 <= cand.sum() <= cells - 3:
            continue
        if all(np.sum(cand != c) >= 3 for c in chosen):
            chosen.append(cand)
            if len(chosen) == n:
                break
    if len(chosen) < n:
        raise SpecError(f"could not find {n} distinct glyph patterns")
    return np.stack(chosen).reshape(n, grid, grid).astype(np.uint8)


def class_codes(num_classes: int, slots: int, vocab: int, rng) -> np.ndarray:
    combos = np.array(list(itertools.product(range(vocab), repeat=slots)))
    pick = rng.choice(len(combos), size=num_classes, replace=False)
    return combos[np.sort(pick)]


def ink_palette(n: int, colors: int = 0) -> np.ndarray:
    """Ink colour for each of ``n`` vocabulary patterns, hues evenly spaced.

    With ``colors`` below ``n`` the patterns share inks round-robin, so some
    glyphs differ only in shape and reading them needs resolution.
    """
    k = min(colors, n) if colors else n
    hues = np.array([colorsys.hsv_to_rgb((0.55 + i / k) % 1.0, 0.9, 0.85) for i in range(k)])
    return hues[np.arange(n) % k]


def stamp_glyph(img: np.ndarray, pattern: np.ndarray, x0: int, y0: int, size: int, ink) -> None:
    g = pattern.shape[0]
    cell = (np.arange(size) * g) // size
    mask = pattern[cell[:, None], cell[None, :]].astype(bool)
    patch = np.where(mask[None], np.asarray(ink)[:, None, None], PAPER_COLOR[:, None, None])
    img[:, y0:y0 + size, x0:x0 + size] = patch


def _smooth_noise(rng, size, cells=6):
    coarse = rng.uniform(-1, 1, size=(3, cells, cells))
    idx = (np.arange(size) * cells) // size
    return coarse[:, idx[:, None], idx[None, :]]


def render_example(spec: SyntheticTaskSpec, code, patterns, rng, mask_glyphs=False):
    """One image plus its glyph boxes; ``code`` holds a pattern index per slot."""
    s = spec.image_size
    bg = rng.uniform(0.25, 0.55, size=3)
    img = bg[:, None, None] + 0.08 * spec.background_clutter * _smooth_noise(rng, s)

    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    scale = rng.uniform(0.92, 1.08)
    rx = 0.5 * spec.body_size * s * scale
    ry = rx * 0.62
    j = spec.placement_jitter
    cx = s / 2 + rng.integers(-j, j + 1)
    cy = s / 2 + rng.integers(-j, j + 1)
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0

    # decoy glyphs live on the background only, each on a body-coloured spot
    # so that up close it looks like the real thing
    n_decoys = int(round(spec.background_clutter * 6))
    g = spec.glyph_size
    inks = ink_palette(len(patterns), spec.ink_colors)
    shade = rng.uniform(0.92, 1.05)
    radius = spec.decoy_spot * g
    for _ in range(n_decoys):
        for _attempt in range(20):
            x0, y0 = rng.integers(0, s - g + 1, size=2)
            spot = (xx - x0 - g / 2) ** 2 + (yy - y0 - g / 2) ** 2 <= radius ** 2
            if not (inside & spot).any() and not inside[y0:y0 + g, x0:x0 + g].any():
                img[:, spot] = (BODY_COLOR * shade)[:, None]
                v = rng.integers(len(patterns))
                stamp_glyph(img, patterns[v], x0, y0, g, inks[v])
                break

    img[:, inside] = (BODY_COLOR * shade)[:, None]

    boxes = []
    for slot in range(len(code)):
        ox, oy = SLOT_OFFSETS[slot]
        gx = int(round(cx + ox * rx - g / 2)) + int(rng.integers(-1, 2))
        gy = int(round(cy + oy * ry - g / 2)) + int(rng.integers(-1, 2))
        gx, gy = min(max(gx, 0), s - g), min(max(gy, 0), s - g)
        boxes.append((gx, gy, gx + g, gy + g))

    # decoys on the body itself, kept a glyph's width away from every slot
    for _ in range(spec.body_decoys):
        for _attempt in range(50):
            x0, y0 = rng.integers(0, s - g + 1, size=2)
            clear = all(x0 >= bx1 + g or x0 + g <= bx0 - g or y0 >= by1 + g or y0 + g <= by0 - g
                        for bx0, by0, bx1, by1 in boxes)
            if clear and inside[y0:y0 + g, x0:x0 + g].all():
                v = rng.integers(len(patterns))
                stamp_glyph(img, patterns[v], x0, y0, g, inks[v])
                break

    for (gx, gy, _, _), idx in zip(boxes, code):
        if mask_glyphs:
            img[:, gy:gy + g, gx:gx + g] = PAPER_COLOR[:, None, None]
        else:
            stamp_glyph(img, patterns[idx], gx, gy, g, inks[idx])

    img += rng.normal(0.0, 0.02 * spec.background_clutter, size=img.shape)
    # quantize so the in-memory image equals what a PPM round trip yields
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, boxes


def generate_synthetic(spec: SyntheticTaskSpec, mask_glyphs: bool = False) -> Dataset:
    """Deterministic train/test splits for ``spec``; classes are balanced."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 7])
    vocab = vocabulary_size(spec.num_classes, spec.glyphs_per_class)
    patterns = make_patterns(vocab, spec.pattern_grid, rng)
    codes = class_codes(spec.num_classes, spec.glyphs_per_class, vocab, rng)

    def build(per_class, stream):
        r = np.random.default_rng([spec.seed, stream])
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        labels = labels[r.permutation(len(labels))]
        images = np.empty((len(labels), 3, spec.image_size, spec.image_size))
        boxes = []
        for n, y in enumerate(labels):
            images[n], b = render_example(spec, codes[y], patterns, r, mask_glyphs)
            boxes.append(b)
        return Split(images, labels.astype(np.int64), boxes)

    return Dataset(build(spec.train_per_class, 1), build(spec.test_per_class, 2),
                   spec.num_classes, patterns, codes)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------
def load_image(path) -> np.ndarray:
    """PPM/PGM file to a channel-major float array in [0, 1]."""
    return pnm.read_image(path)


def read_manifest(path) -> list:
    """Lines of ``relative_path,label``; paths resolve against the manifest's folder."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rel, label = line.rsplit(",", 1)
            rows.append((rel.strip(), int(label)))
        except ValueError:
            raise InputError(f"{path}:{lineno}: expected 'relative_path,label'") from None
    return rows


def write_manifest(path, rows) -> None:
    Path(path).write_text("".join(f"{rel},{label}\n" for rel, label in rows))


def load_manifest_split(path, short_edge: int) -> Split:
    """Load and normalize every image listed in a manifest.

    All normalized images must share one shape so the canvas sequence length
    is the same for every example.
    """
    path = Path(path)
    rows = read_manifest(path)
    if not rows:
        raise InputError(f"{path} lists no images")
    images, labels, shape = [], [], None
    for rel, label in rows:
        img = normalize_image(load_image(path.parent / rel), short_edge)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise InputError(f"{rel}: normalized shape {img.shape[1:]} differs from {shape[1:]}")
        images.append(img)
        labels.append(label)
    return Split(np.stack(images), np.asarray(labels, dtype=np.int64), [], [r for r, _ in rows])


# ---------------------------------------------------------------------------
# Mini-batches
# ---------------------------------------------------------------------------
@dataclass
class Batch:
    indices: np.ndarray  # example indices into the split
    orders: np.ndarray  # (B, T) canvas sequence per example


def within_scale_permutation(blocks, rng) -> np.ndarray:
    """Shuffle canvases inside each scale block; blocks keep their order."""
    parts = [start + rng.permutation(stop - start) for start, stop in blocks]
    return np.concatenate(parts)


def iterate_minibatches(n_examples: int, batch: int, seed: int = 0, shuffle: bool = False,
                        blocks=None, epoch: int = 0):
    """Yield :class:`Batch` objects over ``n_examples``.

    With ``shuffle`` the example order and the within-scale canvas order are
    drawn from a generator seeded by ``(seed, epoch)``; otherwise both are
    the identity. ``blocks`` are the ``(start, stop)`` scale ranges.
    """
    if batch < 1:
        raise InputError("batch size must be >= 1")
    blocks = blocks or []
    t_total = blocks[-1][1] if blocks else 0
    rng = np.random.default_rng([seed, epoch, 11])
    order = rng.permutation(n_examples) if shuffle else np.arange(n_examples)
    identity = np.arange(t_total)
    for start in range(0, n_examples, batch):
        idx = order[start:start + batch]
        if shuffle and blocks:
            orders = np.stack([within_scale_permutation(blocks, rng) for _ in idx])
        else:
            orders = np.tile(identity, (len(idx), 1))
        yield Batch(idx, orders)
