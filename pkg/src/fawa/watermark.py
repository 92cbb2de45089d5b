"""Watermark placement, masks, initial watermarked images and colour conversion."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .glyphs import GLYPHS
from .validation import check_mask, check_same_shape

KERNEL = np.ones((3, 3), dtype=bool)
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
# brightest gray reachable with R=255, B=0
MAX_COLOR_GRAY = (GRAY_WEIGHTS[0] * 255 + GRAY_WEIGHTS[1] * 255) / 255
MIN_COLOR_GRAY = GRAY_WEIGHTS[0]
NEAR_MAX_COVER = 0.9


class NoPerturbedRegionError(ValueError):
    pass


class GamutError(ValueError):
    def __init__(self, row: int, col: int, gray: float, green: float):
        super().__init__(
            f"color gamut: pixel ({row}, {col}) gray {gray:.4f} needs G={green:.2f}, outside [0, 255]"
        )
        self.row, self.col, self.gray, self.green = row, col, gray, green


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return self.height * self.width

    def shifted(self, dx: int = 0, dy: int = 0) -> "Rect":
        return Rect(self.top + dy, self.left + dx, self.bottom + dy, self.right + dx)

    def overlaps_columns(self, start: int, stop: int) -> bool:
        return self.left < stop and start < self.right

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.top, self.left, self.bottom, self.right)


@dataclass(frozen=True)
class WatermarkSpec:
    """Style of the watermark text drawn over the found position.

    ``glyph_height`` is the pixel height of one glyph cell row block
    (9 grid rows); ``None`` sizes the x-height to 1.2 times the anchor
    height. ``stroke`` thickens the strokes by that many pixels.
    """

    text: str = "ecml"
    rotation: float = 15.0
    glyph_height: int | None = None
    beta: float = 0.682
    anchor: Rect | None = None
    stroke: int = 3

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not -90.0 < self.rotation < 90.0:
            raise ValueError(f"rotation must lie in (-90, 90), got {self.rotation}")
        missing = [ch for ch in self.text if ch not in GLYPHS]
        if missing:
            raise ValueError(f"watermark text has characters without glyphs: {missing}")


# --------------------------------------------------------------------------
# morphology


def erode(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_erosion(mask, structure=KERNEL, border_value=0)


def dilate(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=KERNEL, border_value=0)


def morph_open_twice(mask) -> np.ndarray:
    """Erode then dilate with a 3x3 block, two rounds; outside reads as 0."""
    m = check_mask(mask)
    for _ in range(2):
        m = dilate(erode(m))
    return m


def perturbed_region(x, x_adv, threshold: float = 1e-9) -> np.ndarray:
    x, x_adv = np.asarray(x, dtype=np.float64), np.asarray(x_adv, dtype=np.float64)
    check_same_shape(x, x_adv)
    return np.abs(x - x_adv) > threshold


def components(mask) -> list[tuple[int, Rect]]:
    """4-connected components as ``(area, bounding box)``, largest first.

    Equal areas are ordered leftmost, then topmost.
    """
    labels, count = ndimage.label(check_mask(mask))
    if count == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]
    boxes = ndimage.find_objects(labels)
    out = []
    for area, (rows, cols) in zip(areas, boxes):
        out.append((int(area), Rect(rows.start, cols.start, rows.stop, cols.stop)))
    out.sort(key=lambda item: (-item[0], item[1].left, item[1].top))
    return out


def find_position(x, basic_adv, threshold: float | None = None) -> Rect:
    """Bounding box of the largest cleaned-up perturbed region.

    With ``threshold=None`` a pixel counts as perturbed when its change
    exceeds a quarter of the largest change; gradient attacks touch nearly
    every pixel by a tiny amount, so a fixed near-zero cut marks the whole
    image.
    """
    x, basic_adv = np.asarray(x, dtype=np.float64), np.asarray(basic_adv, dtype=np.float64)
    check_same_shape(x, basic_adv)
    if threshold is None:
        peak = float(np.abs(x - basic_adv).max())
        if peak == 0.0:
            raise NoPerturbedRegionError("no perturbed region: images are identical")
        threshold = 0.25 * peak
    region = morph_open_twice(perturbed_region(x, basic_adv, threshold))
    comps = components(region)
    if not comps:
        raise NoPerturbedRegionError("no perturbed region survives the opening")
    return comps[0][1]


def text_mask(x, tau: float = 0.5) -> np.ndarray:
    """True on background (pixel brighter than ``tau``)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return np.asarray(x) > tau


# --------------------------------------------------------------------------
# watermark rendering


def _text_bitmap(text: str, cell: int, stroke: int) -> np.ndarray:
    gap = np.zeros((GLYPHS[text[0]].shape[0], 1), dtype=bool)
    parts = []
    for k, ch in enumerate(text):
        if k:
            parts.append(gap)
        parts.append(GLYPHS[ch])
    grid = np.concatenate(parts, axis=1)
    bitmap = np.kron(grid, np.ones((cell, cell), dtype=bool))
    bitmap = np.pad(bitmap, stroke + 1)
    for _ in range(stroke):
        bitmap = dilate(bitmap)
    return bitmap


def _crop(bitmap: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    return bitmap[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def watermark_bitmap(spec: WatermarkSpec, anchor_height: int) -> np.ndarray:
    cell = spec.glyph_height // 9 if spec.glyph_height else int(np.ceil(1.2 * anchor_height / 5))
    cell = max(cell, 1)
    bitmap = _text_bitmap(spec.text, cell, spec.stroke)
    if spec.rotation:
        bitmap = ndimage.rotate(bitmap.astype(np.float64), spec.rotation, reshape=True, order=0) > 0.5
    return _crop(bitmap)


def render_watermark_mask(spec: WatermarkSpec, shape: tuple[int, int]) -> np.ndarray:
    """Binary watermark mask placed to cover as much of ``spec.anchor`` as possible.

    Among placements within ``NEAR_MAX_COVER`` of the best coverage, the one
    keeping most of the watermark inside the image wins, then the one
    closest to centring the watermark on the anchor, then the smallest
    offsets.
    """
    h, w = shape
    a = spec.anchor or Rect(0, 0, h, w)
    if a.top < 0 or a.left < 0 or a.bottom > h or a.right > w or a.height <= 0 or a.width <= 0:
        raise ValueError(f"anchor {a} lies outside the {h}x{w} image")
    bmp = watermark_bitmap(spec, a.height)
    bh, bw = bmp.shape
    # sat[i, j] = ink count in bmp[:i, :j]
    sat = np.zeros((bh + 1, bw + 1), dtype=np.int64)
    sat[1:, 1:] = bmp.cumsum(0).cumsum(1)

    # placement (oy, ox) puts bmp[0, 0] at image (oy, ox)
    oy = np.arange(a.bottom - bh, a.top + 1)[:, None]
    ox = np.arange(a.right - bw, a.left + 1)[None, :]
    r0 = np.clip(a.top - oy, 0, bh)
    r1 = np.clip(a.bottom - oy, 0, bh)
    c0 = np.clip(a.left - ox, 0, bw)
    c1 = np.clip(a.right - ox, 0, bw)
    cover = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
    # watermark pixels that land inside the image
    i0, i1 = np.clip(-oy, 0, bh), np.clip(h - oy, 0, bh)
    j0, j1 = np.clip(-ox, 0, bw), np.clip(w - ox, 0, bw)
    inside = sat[i1, j1] - sat[i0, j1] - sat[i1, j0] + sat[i0, j0]
    cy = (a.top + a.bottom) / 2 - bh / 2
    cx = (a.left + a.right) / 2 - bw / 2
    dist = (oy - cy) ** 2 + (ox - cx) ** 2
    near = np.flatnonzero(cover.ravel() >= NEAR_MAX_COVER * cover.max())
    pick = near[np.lexsort((near, dist.ravel()[near], -inside.ravel()[near]))[0]]
    py, px = np.unravel_index(pick, cover.shape)
    top, left = int(oy[py, 0]), int(ox[0, px])

    mask = np.zeros(shape, dtype=bool)
    ys, xs = max(top, 0), max(left, 0)
    ye, xe = min(top + bh, h), min(left + bw, w)
    mask[ys:ye, xs:xe] = bmp[ys - top : ye - top, xs - left : xe - left]
    return mask


def shift_mask(mask: np.ndarray, dx: int) -> np.ndarray:
    """Translate a mask horizontally; bits shifted out are dropped."""
    out = np.zeros_like(mask)
    if dx >= 0:
        out[:, dx:] = mask[:, : mask.shape[1] - dx]
    else:
        out[:, :dx] = mask[:, -dx:]
    return out


def apply_watermark(x, wm_mask, txt_mask, beta: float) -> np.ndarray:
    """Fill watermark pixels that lie on the background with gray ``beta``."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    x = np.asarray(x, dtype=np.float64)
    wm = check_mask(wm_mask, x.shape, "watermark mask")
    tm = check_mask(txt_mask, x.shape, "text mask")
    return np.where(wm & tm, beta, x)


def watermark_spec_with_anchor(spec: WatermarkSpec, anchor: Rect) -> WatermarkSpec:
    return replace(spec, anchor=anchor)


# --------------------------------------------------------------------------
# colour


def colorize(x, mask, red: int = 255, blue: int = 0) -> np.ndarray:
    """8-bit RGB image whose gray conversion reproduces ``x``.

    Inside ``mask`` red and blue are fixed and green is solved from the
    luma equation; elsewhere the gray level is copied to all channels.
    """
    x = np.asarray(x, dtype=np.float64)
    m = check_mask(mask, x.shape)
    wr, wg, wb = GRAY_WEIGHTS
    out = np.repeat(np.rint(x * 255.0)[..., None], 3, axis=2)
    green = (255.0 * x - wr * red - wb * blue) / wg
    bad = m & ((green < -1e-9) | (green > 255.0 + 1e-9))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise GamutError(int(r), int(c), float(x[r, c]), float(green[r, c]))
    out[m, 0] = red
    out[m, 1] = np.clip(np.rint(green[m]), 0, 255)
    out[m, 2] = blue
    return out.astype(np.uint8)


def to_gray(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    wr, wg, wb = GRAY_WEIGHTS
    return np.clip((wr * rgb[..., 0] + wg * rgb[..., 1] + wb * rgb[..., 2]) / 255.0, 0.0, 1.0)
