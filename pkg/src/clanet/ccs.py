"""Cell cluster-level selection: fixed-size, density-ranked patches per image.

Pipeline for one frame: label mask regions -> tight box per region ->
re-centre on the region's mass centre at patch size (and tile very large
regions) -> score every overlapping pair -> drop the lower-density member of
each pair scoring at or above the mean -> keep the ``K`` densest boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .segmentation import RegionMap, label_regions
from .texture import N_INTENSITY_BINS, N_LBP_BINS, lbp_codes


@dataclass(frozen=True, order=False)
class BBox:
    x: int
    y: int
    w: int
    h: int
    density: int

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def raster_key(self) -> tuple[int, int]:
        return (self.y, self.x)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def intersection(self, other: "BBox") -> int:
        iw = min(self.x + self.w, other.x + other.w) - max(self.x, other.x)
        ih = min(self.y + self.h, other.y + other.h) - max(self.y, other.y)
        return max(iw, 0) * max(ih, 0)


@dataclass(frozen=True, eq=False)
class PatchSet:
    image_id: str
    patches: np.ndarray  # (k, H_q, W_q) uint8
    boxes: tuple[BBox, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.boxes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchSet):
            return NotImplemented
        return (
            self.boxes == other.boxes
            and self.patches.shape == other.patches.shape
            and self.patches.tobytes() == other.patches.tobytes()
        )

    __hash__ = None

    @property
    def densities(self) -> np.ndarray:
        return np.array([b.density for b in self.boxes], dtype=np.int64)


class PatchSizeError(ValueError):
    """Patch size does not fit the image."""


def _integral(mask: np.ndarray) -> np.ndarray:
    ii = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = np.asarray(mask, dtype=np.int64).cumsum(0).cumsum(1)
    return ii


def _box_count(ii: np.ndarray, x: int, y: int, w: int, h: int) -> int:
    return int(ii[y + h, x + w] - ii[y, x + w] - ii[y + h, x] + ii[y, x])


def initial_bboxes(regions: RegionMap) -> list[BBox]:
    """Tight box around every region; density is the region's pixel count."""
    if regions.count == 0:
        return []
    sizes = regions.sizes
    out = []
    for o, sl in enumerate(ndimage.find_objects(regions.labels, max_label=regions.count)):
        ys, xs = sl
        out.append(BBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start, int(sizes[o])))
    return out


def _clamp(v: int, lo: int, hi: int) -> int:
    return min(max(v, lo), hi)


def tile_origins(start: int, extent: int, size: int, limit: int) -> list[int]:
    """Tile anchors covering ``[start, start+extent)`` with stride ``size``.

    A last partial tile is pulled back inside the box; every anchor is then
    clamped to ``[0, limit - size]``.
    """
    n = max(1, math.ceil(extent / size))
    out = []
    for i in range(n):
        a = start + i * size
        if a + size > start + extent:
            a = start + extent - size
        out.append(_clamp(a, 0, limit - size))
    return out


def correct_bboxes(
    boxes: Sequence[BBox],
    regions: RegionMap,
    patch_w: int,
    patch_h: int,
    image_dims: tuple[int, int],
    mask: np.ndarray | None = None,
) -> list[BBox]:
    """Fixed-size boxes: one on each region's mass centre, plus tiles for big regions.

    ``image_dims`` is ``(width, height)``. Output densities count mask
    foreground inside each box; ``mask`` defaults to the region map's
    foreground.
    """
    width, height = image_dims
    if patch_w > width or patch_h > height or patch_w < 1 or patch_h < 1:
        raise PatchSizeError(f"patch {patch_w}x{patch_h} does not fit image {width}x{height}")
    if mask is None:
        mask = regions.labels > 0
    ii = _integral(mask)
    if regions.count:
        lab = regions.labels
        rows, cols = np.indices(lab.shape)
        sizes = regions.sizes.astype(np.float64)
        cy = np.bincount(lab.ravel(), rows.ravel(), minlength=regions.count + 1)[1:] / sizes
        cx = np.bincount(lab.ravel(), cols.ravel(), minlength=regions.count + 1)[1:] / sizes

    def make(x: int, y: int) -> BBox:
        return BBox(x, y, patch_w, patch_h, _box_count(ii, x, y, patch_w, patch_h))

    out: list[BBox] = []
    for o, r in enumerate(boxes):
        x0 = _clamp(int(math.floor(cx[o])) - patch_w // 2, 0, width - patch_w)
        y0 = _clamp(int(math.floor(cy[o])) - patch_h // 2, 0, height - patch_h)
        out.append(make(x0, y0))
        if r.density >= 2 * patch_w * patch_h:
            for ty in tile_origins(r.y, r.h, patch_h, height):
                for tx in tile_origins(r.x, r.w, patch_w, width):
                    out.append(make(tx, ty))
    return out


# --------------------------------------------------------------------------
# complementary similarity
# --------------------------------------------------------------------------


class BoxFeatures:
    """Integer intensity/LBP bin counts for a list of boxes on one image."""

    def __init__(self, image: np.ndarray, boxes: Sequence[BBox], codes: np.ndarray | None = None):
        img = np.asarray(image, dtype=np.uint8)
        if codes is None:
            codes = lbp_codes(img)
        ibin = img.astype(np.int64) * N_INTENSITY_BINS // 256
        n = len(boxes)
        self.boxes = list(boxes)
        self.color = np.zeros((n, N_INTENSITY_BINS), dtype=np.int64)
        self.texture = np.zeros((n, N_LBP_BINS), dtype=np.int64)
        self.area = np.array([b.area for b in boxes], dtype=np.int64)
        for i, b in enumerate(boxes):
            sl = b.slices()
            self.color[i] = np.bincount(ibin[sl].ravel(), minlength=N_INTENSITY_BINS)
            self.texture[i] = np.bincount(codes[sl].ravel(), minlength=N_LBP_BINS)

    def score(self, i: int, j: int) -> float:
        a, b = self.boxes[i], self.boxes[j]
        inter = a.intersection(b)
        if inter <= 0:
            raise ValueError(f"boxes {a} and {b} do not overlap")
        na, nb = int(self.area[i]), int(self.area[j])
        return _score(self.color[i], self.color[j], self.texture[i], self.texture[j], na, nb, inter)


def _score(ca, cb, ta, tb, na: int, nb: int, inter: int) -> float:
    # sum_i min(ca_i/na, cb_i/nb) evaluated as one exact integer ratio, so the
    # result is symmetric and identical boxes give exactly 1 per term
    den = na * nb
    hist = int(np.minimum(ca * nb, cb * na).sum()) / den
    tex = int(np.minimum(ta * nb, tb * na).sum()) / den
    return hist + tex + inter / (na + nb - inter)


def similarity(a: BBox, b: BBox, image: np.ndarray, codes: np.ndarray | None = None) -> float:
    """Colour-histogram + LBP-histogram intersection + IoU of two overlapping boxes."""
    return BoxFeatures(image, [a, b], codes).score(0, 1)


def overlapping_pairs(boxes: Sequence[BBox]) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)``, ``i < j``, whose boxes share at least one pixel."""
    n = len(boxes)
    if n < 2:
        return []
    x = np.array([b.x for b in boxes])
    y = np.array([b.y for b in boxes])
    x2 = x + np.array([b.w for b in boxes])
    y2 = y + np.array([b.h for b in boxes])
    iw = np.minimum(x2[:, None], x2[None, :]) - np.maximum(x[:, None], x[None, :])
    ih = np.minimum(y2[:, None], y2[None, :]) - np.maximum(y[:, None], y[None, :])
    ov = (iw > 0) & (ih > 0)
    ii, jj = np.nonzero(np.triu(ov, 1))
    return list(zip(ii.tolist(), jj.tolist()))


def pair_scores(image: np.ndarray, boxes: Sequence[BBox], codes: np.ndarray | None = None) -> dict[tuple[int, int], float]:
    pairs = overlapping_pairs(boxes)
    if not pairs:
        return {}
    feats = BoxFeatures(image, boxes, codes)
    return {(i, j): feats.score(i, j) for i, j in pairs}


def _raster_order(boxes: Sequence[BBox]) -> list[int]:
    """rank[i] = position of box i in (y, x, index) order."""
    order = sorted(range(len(boxes)), key=lambda i: (boxes[i].y, boxes[i].x, i))
    rank = [0] * len(boxes)
    for pos, i in enumerate(order):
        rank[i] = pos
    return rank


def prune_similar(boxes: Sequence[BBox], scores: dict[tuple[int, int], float]) -> list[BBox]:
    """Drop the lower-density box of every pair scoring >= the mean score.

    The mean is taken once over all pairs. Pairs are visited by descending
    score (ties: raster order of the pair), and a pair is skipped once either
    member is gone. Equal densities keep the box that comes first in raster
    order. Surviving boxes keep their input order.
    """
    if not scores:
        return list(boxes)
    mean = math.fsum(scores.values()) / len(scores)
    rank = _raster_order(boxes)
    visits = []
    for (i, j), u in scores.items():
        a, b = (i, j) if rank[i] < rank[j] else (j, i)
        visits.append((-u, rank[a], rank[b], a, b))
    visits.sort()
    removed = set()
    for neg_u, _, _, a, b in visits:
        if -neg_u < mean:
            break
        if a in removed or b in removed:
            continue
        removed.add(a if boxes[a].density < boxes[b].density else b)
    return [bx for k, bx in enumerate(boxes) if k not in removed]


def rank_by_density(boxes: Sequence[BBox]) -> list[BBox]:
    return sorted(boxes, key=lambda b: (-b.density, b.y, b.x))


def select_patches(
    image: np.ndarray,
    mask: np.ndarray,
    k: int = 10,
    patch_w: int = 112,
    patch_h: int = 112,
    image_id: str = "",
    regions: RegionMap | None = None,
) -> PatchSet:
    """At most ``k`` patch crops from the densest surviving boxes, densest first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    img = np.asarray(image, dtype=np.uint8)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise ValueError("mask and image shapes differ")
    height, width = img.shape
    if patch_w > width or patch_h > height:
        raise PatchSizeError(f"patch {patch_w}x{patch_h} does not fit image {width}x{height}")
    if regions is None:
        regions = label_regions(mask)
    empty = np.zeros((0, patch_h, patch_w), dtype=np.uint8)
    if regions.count == 0:
        return PatchSet(image_id, empty, ())
    boxes = correct_bboxes(initial_bboxes(regions), regions, patch_w, patch_h, (width, height), mask)
    kept = prune_similar(boxes, pair_scores(img, boxes))
    top = rank_by_density(kept)[:k]
    patches = np.stack([img[b.slices()] for b in top]) if top else empty
    return PatchSet(image_id, np.ascontiguousarray(patches), tuple(top))


def draw_overlay(image: np.ndarray, boxes: Sequence[BBox], path: str | Path | None = None) -> np.ndarray:
    """RGB copy of ``image`` with red box outlines; saved when ``path`` is given."""
    img = np.asarray(image, dtype=np.uint8)
    rgb = np.repeat(img[:, :, None], 3, axis=2)
    red = np.array([255, 0, 0], dtype=np.uint8)
    for b in boxes:
        x2, y2 = b.x + b.w - 1, b.y + b.h - 1
        rgb[b.y, b.x : x2 + 1] = red
        rgb[y2, b.x : x2 + 1] = red
        rgb[b.y : y2 + 1, b.x] = red
        rgb[b.y : y2 + 1, x2] = red
    if path is not None:
        from PIL import Image

        Image.fromarray(rgb, mode="RGB").save(path)
    return rgb
