"""Multi-scale attention canvases and the support-overlap validator.

Images are channel-major float arrays ``(C, H, W)``. A canvas is a square
crop of the normalized image, resized to ``output_size``; its footprint is
kept in normalized-image pixel coordinates so attention maps can be traced
back onto the picture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractError, InputError, PlanError

MASS_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CanvasPlan:
    normalized_short_edge: int = 256
    scales: tuple = ((224, 32), (168, 44), (112, 48))
    output_size: int = 224
    include_center_per_scale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(tuple(int(v) for v in s) for s in self.scales))
        for window, stride in self.scales:
            if window < 1 or stride < 1:
                raise PlanError(f"window and stride must be positive, got ({window}, {stride})")
            if window > self.normalized_short_edge:
                raise PlanError(f"window {window} exceeds short edge {self.normalized_short_edge}")
        if self.output_size < 1:
            raise PlanError("output_size must be positive")

    @classmethod
    def paper(cls) -> "CanvasPlan":
        return cls()

    def with_scales(self, n: int) -> "CanvasPlan":
        """Keep only the ``n`` coarsest scales."""
        ordered = sorted(self.scales, key=lambda s: -s[0])
        return CanvasPlan(self.normalized_short_edge, tuple(ordered[:n]),
                          self.output_size, self.include_center_per_scale)


@dataclass(frozen=True)
class Footprint:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def side(self) -> int:
        return self.x1 - self.x0

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class Canvas:
    pixels: np.ndarray
    footprint: Footprint
    scale_index: int
    sequence_index: int
    image_size: tuple  # (H, W) of the normalized image


@dataclass(frozen=True)
class CanvasLayout:
    """Image-independent crop geometry for a given normalized image size."""

    image_size: tuple
    footprints: tuple
    scale_index: tuple
    output_size: int

    def __len__(self):
        return len(self.footprints)

    def blocks(self):
        """Sequence index ranges ``(start, stop)`` for each scale."""
        out, start = [], 0
        idx = np.asarray(self.scale_index)
        for s in sorted(set(self.scale_index)):
            n = int(np.sum(idx == s))
            out.append((start, start + n))
            start += n
        return out


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------
@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows are bilinear weights with half-pixel centers, edge-clamped."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``(..., H, W)`` arrays; leading axes are carried through."""
    h, w = image.shape[-2:]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ry = _interp_matrix(h, out_h).astype(image.dtype, copy=False)
    rx = _interp_matrix(w, out_w).astype(image.dtype, copy=False)
    return np.matmul(np.matmul(ry, image), rx.T)


def normalized_shape(h: int, w: int, short_edge: int) -> tuple:
    short, long_ = (h, w) if h <= w else (w, h)
    # round half up in exact integer arithmetic
    scaled = (2 * long_ * short_edge + short) // (2 * short)
    return (short_edge, scaled) if h <= w else (scaled, short_edge)


def normalize_image(image, short_edge: int) -> np.ndarray:
    """Resize so the shorter side equals ``short_edge``, keeping aspect ratio."""
    image = np.asarray(getattr(image, "data", image))
    if image.ndim != 3 or image.shape[1] < 1 or image.shape[2] < 1:
        raise InputError(f"expected a non-empty (C, H, W) image, got shape {image.shape}")
    h, w = image.shape[1:]
    nh, nw = normalized_shape(h, w, short_edge)
    return resize_bilinear(image, nh, nw)


# ---------------------------------------------------------------------------
# Canvas generation
# ---------------------------------------------------------------------------
def grid_offsets(dim: int, window: int, stride: int) -> list:
    if window > dim:
        raise PlanError(f"window {window} larger than image side {dim}")
    count = (dim - window) // stride + 1
    return [k * stride for k in range(count)]


def plan_layout(image_size, plan: CanvasPlan) -> CanvasLayout:
    h, w = image_size
    footprints, scales = [], []
    order = sorted(range(len(plan.scales)), key=lambda i: -plan.scales[i][0])
    for s_rank, si in enumerate(order):
        window, stride = plan.scales[si]
        grid = [(x, y) for y in grid_offsets(h, window, stride)
                for x in grid_offsets(w, window, stride)]
        for x, y in grid:
            footprints.append(Footprint(x, y, x + window, y + window))
            scales.append(s_rank)
        if plan.include_center_per_scale:
            c = ((w - window) // 2, (h - window) // 2)
            # a center landing on a grid cell is still its own time step
            # (3x3 + 1 at window 168); only a one-cell grid is collapsed
            if grid != [c]:
                footprints.append(Footprint(c[0], c[1], c[0] + window, c[1] + window))
                scales.append(s_rank)
    return CanvasLayout((h, w), tuple(footprints), tuple(scales), plan.output_size)


def render(images: np.ndarray, layout: CanvasLayout) -> np.ndarray:
    """Crop and resize every canvas of ``layout`` for a stack of images.

    ``images`` is ``(N, C, H, W)``; the result is ``(N, T, C, S, S)``.
    """
    n, c = images.shape[:2]
    s = layout.output_size
    out = np.empty((n, len(layout), c, s, s), dtype=images.dtype)
    for t, fp in enumerate(layout.footprints):
        crop = images[:, :, fp.y0:fp.y1, fp.x0:fp.x1]
        out[:, t] = resize_bilinear(crop, s, s)
    return out


def generate_canvases(image, plan: CanvasPlan) -> list:
    """Ordered canvases: largest window first, grid row-major then center."""
    image = np.asarray(getattr(image, "data", image))
    if image.ndim != 3:
        raise InputError(f"expected (C, H, W) image, got {image.shape}")
    layout = plan_layout(image.shape[1:], plan)
    pixels = render(image[None], layout)[0]
    return [
        Canvas(pixels[t], fp, layout.scale_index[t], t, layout.image_size)
        for t, fp in enumerate(layout.footprints)
    ]


# ---------------------------------------------------------------------------
# Support regions and overlap
# ---------------------------------------------------------------------------
@dataclass
class SupportRegion:
    """Union of axis-aligned rectangles inside an ``H x W`` image."""

    rects: np.ndarray  # (n, 4) rows of x0, y0, x1, y1
    image_size: tuple
    cells: list = field(default_factory=list)

    @property
    def n_pixels(self) -> int:
        return int(self.image_size[0] * self.image_size[1])

    def area(self) -> float:
        return _covered_area([self.rects])

    def intersection_area(self, other: "SupportRegion") -> float:
        return _covered_area([self.rects, other.rects])


def _covered_area(rect_sets) -> float:
    """Area covered by every one of the rectangle unions in ``rect_sets``."""
    if any(len(r) == 0 for r in rect_sets):
        return 0.0
    allr = np.concatenate(rect_sets)
    xs = np.unique(np.concatenate([allr[:, 0], allr[:, 2]]))
    ys = np.unique(np.concatenate([allr[:, 1], allr[:, 3]]))
    covered = np.ones((len(ys) - 1, len(xs) - 1), dtype=bool)
    for rects in rect_sets:
        mask = np.zeros_like(covered)
        ix0 = np.searchsorted(xs, rects[:, 0])
        ix1 = np.searchsorted(xs, rects[:, 2])
        iy0 = np.searchsorted(ys, rects[:, 1])
        iy1 = np.searchsorted(ys, rects[:, 3])
        for a, b, c, d in zip(iy0, iy1, ix0, ix1):
            mask[a:b, c:d] = True
        covered &= mask
    cell_area = np.outer(np.diff(ys), np.diff(xs))
    return float(np.sum(cell_area[covered]))


def _check_normalized(att: np.ndarray):
    total = float(att.sum())
    if abs(total - 1.0) > MASS_TOLERANCE or np.any(att < 0):
        raise ContractError(f"attention map must be a distribution (sum={total:.6g})")


def select_cells(att, mass_threshold: float) -> np.ndarray:
    """Indices of the smallest cell set holding at least ``mass_threshold``."""
    if not 0 < mass_threshold <= 1:
        raise ContractError("mass_threshold must lie in (0, 1]")
    flat = np.asarray(att, dtype=np.float64).reshape(-1)
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    target = min(mass_threshold, cum[-1]) - 1e-12
    k = int(np.searchsorted(cum, target, side="left")) + 1
    return order[:k]


def cell_rects(cells, k: int, footprint: Footprint) -> np.ndarray:
    cells = np.asarray(cells)
    side = (footprint.x1 - footprint.x0) / k
    rows, cols = cells // k, cells % k
    x0 = footprint.x0 + cols * side
    y0 = footprint.y0 + rows * side
    return np.stack([x0, y0, x0 + side, y0 + side], axis=1).astype(np.float64)


def attention_support(att_map, canvas, mass_threshold: float = 0.5) -> SupportRegion:
    """Pixel region of the dominant attention cells, in image coordinates.

    ``att_map`` may be ``(K, K)`` or flat ``(K*K,)`` with row-major cells.
    """
    att = np.asarray(getattr(att_map, "data", att_map), dtype=np.float64)
    _check_normalized(att)
    k = int(round(np.sqrt(att.size)))
    if k * k != att.size:
        raise ContractError(f"attention map of size {att.size} is not square")
    cells = select_cells(att, mass_threshold)
    rects = cell_rects(cells, k, canvas.footprint)
    return SupportRegion(rects, tuple(canvas.image_size), cells=list(cells))


def overlap_ratio(a: SupportRegion, b: SupportRegion) -> float:
    if a.n_pixels != b.n_pixels:
        raise ContractError("support regions come from images of different size")
    return a.intersection_area(b) / a.n_pixels


@dataclass
class SequenceReport:
    ratios: list
    violations: list  # 1-based step t whose pair (t-1, t) breaks the bound
    beta: float

    @property
    def violation_count(self) -> int:
        return len(self.violations)

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios)) if self.ratios else 0.0


def validate_sequence(canvases, att_maps, beta: float = 0.5,
                      mass_threshold: float = 0.5) -> SequenceReport:
    """Check consecutive support overlaps against ``beta``."""
    if len(canvases) != len(att_maps):
        raise InputError(f"{len(canvases)} canvases but {len(att_maps)} attention maps")
    supports = [attention_support(m, c, mass_threshold) for c, m in zip(canvases, att_maps)]
    ratios, violations = [], []
    for t in range(1, len(supports)):
        r = overlap_ratio(supports[t - 1], supports[t])
        ratios.append(r)
        if r >= beta:
            violations.append(t + 1)
    return SequenceReport(ratios, violations, beta)


def sequence_overlaps(att_maps: np.ndarray, layout: CanvasLayout,
                      mass_threshold: float = 0.5) -> np.ndarray:
    """Consecutive overlap ratios for one example's ``(T, K*K)`` maps."""
    k = int(round(np.sqrt(att_maps.shape[-1])))
    h, w = layout.image_size
    prev = None
    out = np.empty(max(len(att_maps) - 1, 0))
    for t, fp in enumerate(layout.footprints):
        rects = cell_rects(select_cells(att_maps[t], mass_threshold), k, fp)
        if prev is not None:
            out[t - 1] = _covered_area([prev, rects]) / (h * w)
        prev = rects
    return out
