import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clanet.ccs import (
    BBox,
    PatchSizeError,
    correct_bboxes,
    draw_overlay,
    initial_bboxes,
    overlapping_pairs,
    prune_similar,
    select_patches,
    similarity,
)
from clanet.segmentation import label_regions

from oracles import blob_image, brute_force_ccs, exact_similarity, lbp_bins


def _regions(mask):
    return label_regions(np.asarray(mask, dtype=bool))


class TestInitialBoxes:
    def test_single_region(self):
        m = np.zeros((10, 10), bool)
        m[2:5, 3:8] = True
        (box,) = initial_bboxes(_regions(m))
        assert (box.x, box.y, box.w, box.h) == (3, 2, 5, 3)
        assert box.density == 15

    def test_no_regions(self):
        assert initial_bboxes(_regions(np.zeros((4, 4)))) == []

    def test_extent_oracle(self, gen):
        for _ in range(20):
            m = gen.random((30, 30)) < 0.3
            r = _regions(m)
            for box, (ys, xs) in zip(initial_bboxes(r), r.pixel_lists()):
                assert (box.x, box.y) == (xs.min(), ys.min())
                assert (box.w, box.h) == (xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
                assert box.density == ys.size


class TestCorrectBoxes:
    def _one(self, m, size=112, dims=None):
        r = _regions(m)
        dims = dims or (m.shape[1], m.shape[0])
        return correct_bboxes(initial_bboxes(r), r, size, size, dims)

    def test_centred_on_pixel(self):
        m = np.zeros((400, 400), bool)
        m[200, 200] = True
        (box,) = self._one(m)
        assert (box.x, box.y, box.w, box.h, box.density) == (144, 144, 112, 112, 1)

    def test_clamped_at_left_edge(self):
        m = np.zeros((300, 300), bool)
        m[140:160, 5:16] = True  # centroid column 10
        (box,) = self._one(m)
        assert box.x == 0

    def test_large_region_tiled(self):
        m = np.zeros((1040, 1408), bool)
        m[300:600, 500:800] = True
        boxes = self._one(m)
        assert len(boxes) == 1 + 9
        for b in boxes:
            assert b.w == b.h == 112
            assert 0 <= b.x <= 1408 - 112 and 0 <= b.y <= 1040 - 112
        tiles = boxes[1:]
        covered = np.zeros_like(m)
        for b in tiles:
            covered[b.slices()] = True
        assert covered[m].all()
        # last row/column pulled back inside the region box
        assert sorted({b.x for b in tiles}) == [500, 612, 688]

    def test_patch_too_large(self):
        m = np.zeros((50, 50), bool)
        m[10, 10] = True
        with pytest.raises(PatchSizeError):
            self._one(m, size=60)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(8, 40))
    def test_boxes_in_bounds(self, seed, size):
        m = np.random.default_rng(seed).random((60, 70)) < 0.2
        for b in self._one(m, size=size):
            assert b.w == b.h == size
            assert 0 <= b.x <= 70 - size and 0 <= b.y <= 60 - size
            assert 0 <= b.density <= size * size
            assert b.density == int(m[b.slices()].sum())


class TestSimilarity:
    def test_identical_box(self, gen):
        img = gen.integers(0, 256, (40, 40)).astype(np.uint8)
        b = BBox(3, 4, 20, 20, 0)
        assert similarity(b, b, img) == 3.0

    def test_uniform_half_overlap(self):
        img = np.full((5, 5), 90, np.uint8)
        u = similarity(BBox(0, 0, 2, 2, 0), BBox(1, 0, 2, 2, 0), img)
        assert u == pytest.approx(2 + 1 / 3, abs=1e-15)

    def test_disjoint_rejected(self):
        img = np.zeros((10, 10), np.uint8)
        with pytest.raises(ValueError, match="overlap"):
            similarity(BBox(0, 0, 2, 2, 0), BBox(5, 5, 2, 2, 0), img)

    def test_matches_exact_rational(self, gen):
        img = gen.integers(0, 256, (50, 50)).astype(np.uint8)
        codes = lbp_bins(img)
        for _ in range(30):
            a = BBox(*gen.integers(0, 20, 2), 25, 25, 0)
            b = BBox(*gen.integers(0, 20, 2), 25, 25, 0)
            want = float(exact_similarity(img, codes, (a.x, a.y, 25, 25), (b.x, b.y, 25, 25)))
            assert similarity(a, b, img) == pytest.approx(want, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_bounded(self, seed):
        g = np.random.default_rng(seed)
        img = g.integers(0, 256, (32, 32)).astype(np.uint8)
        w, h = g.integers(2, 16, 2)
        a = BBox(int(g.integers(0, 32 - w)), int(g.integers(0, 32 - h)), int(w), int(h), 0)
        x = int(np.clip(a.x + g.integers(-w + 1, w), 0, 32 - w))
        y = int(np.clip(a.y + g.integers(-h + 1, h), 0, 32 - h))
        b = BBox(x, y, int(w), int(h), 0)
        uab, uba = similarity(a, b, img), similarity(b, a, img)
        assert abs(uab - uba) <= 1e-12
        assert 0.0 <= uab <= 3.0


class TestPrune:
    def test_identical_pair(self):
        a, b = BBox(5, 5, 4, 4, 10), BBox(5, 5, 4, 4, 10)
        kept = prune_similar([a, b], {(0, 1): 3.0})
        assert len(kept) == 1 and kept[0] is a

    def test_no_pairs(self):
        boxes = [BBox(0, 0, 2, 2, 1), BBox(5, 5, 2, 2, 2)]
        assert prune_similar(boxes, {}) == boxes

    def test_lower_density_goes(self):
        a, b = BBox(0, 0, 4, 4, 3), BBox(1, 1, 4, 4, 9)
        assert prune_similar([a, b], {(0, 1): 2.0}) == [b]

    def test_five_box_re_execution(self):
        gen = np.random.default_rng(11)
        for _ in range(50):
            boxes = [BBox(int(gen.integers(0, 6)), int(gen.integers(0, 6)), 4, 4, int(gen.integers(0, 5)))
                     for _ in range(5)]
            pairs = overlapping_pairs(boxes)
            scores = {p: float(gen.choice([0.5, 1.0, 1.5, 2.0])) for p in pairs}
            # direct re-execution of the removal rule
            removed = set()
            if scores:
                mean = sum(scores.values()) / len(scores)
                rank = {i: r for r, i in enumerate(sorted(range(5), key=lambda i: (boxes[i].y, boxes[i].x, i)))}
                order = sorted(scores, key=lambda p: (-scores[p], min(rank[p[0]], rank[p[1]]),
                                                      max(rank[p[0]], rank[p[1]])))
                for i, j in order:
                    if scores[(i, j)] < mean:
                        break
                    if i in removed or j in removed:
                        continue
                    a, b = sorted((i, j), key=rank.get)
                    removed.add(a if boxes[a].density < boxes[b].density else b)
            want = [b for k, b in enumerate(boxes) if k not in removed]
            assert prune_similar(boxes, scores) == want

    def test_survivors_never_conflict(self, gen):
        for _ in range(20):
            img, mask = blob_image(gen, 128, 128)
            r = _regions(mask)
            boxes = correct_bboxes(initial_bboxes(r), r, 32, 32, (128, 128), mask)
            scores = {p: similarity(boxes[p[0]], boxes[p[1]], img) for p in overlapping_pairs(boxes)}
            if not scores:
                continue
            mean = sum(scores.values()) / len(scores)
            kept = {id(b) for b in prune_similar(boxes, scores)}
            for (i, j), u in scores.items():
                if u >= mean:
                    assert not (id(boxes[i]) in kept and id(boxes[j]) in kept)


class TestSelectPatches:
    def _three_regions(self):
        img = np.full((300, 1000), 128, np.uint8)
        mask = np.zeros(img.shape, bool)
        mask[100:120, 100:125] = True  # 500
        mask[100:115, 450:470] = True  # 300
        mask[100:110, 800:810] = True  # 100
        return img, mask

    def test_ranking(self):
        img, mask = self._three_regions()
        ps = select_patches(img, mask, k=2)
        assert ps.densities.tolist() == [500, 300]
        assert ps.patches.shape == (2, 112, 112)

    def test_under_supply(self):
        img, mask = self._three_regions()
        mask[200:210, 300:310] = True
        assert len(select_patches(img, mask, k=10)) == 4

    def test_empty_mask(self):
        ps = select_patches(np.zeros((200, 200), np.uint8), np.zeros((200, 200), bool))
        assert len(ps) == 0 and ps.patches.shape == (0, 112, 112)

    def test_patches_are_crops(self, gen):
        img, mask = blob_image(gen, 256, 256)
        ps = select_patches(img, mask, k=10)
        for patch, b in zip(ps.patches, ps.boxes):
            np.testing.assert_array_equal(patch, img[b.slices()])
        assert np.all(np.diff(ps.densities) <= 0)

    def test_deterministic(self, gen):
        img, mask = blob_image(gen, 256, 256, big=True)
        assert select_patches(img, mask) == select_patches(img, mask)

    def test_brute_force_oracle(self, backend):
        gen = np.random.default_rng(21)
        for i in range(12):
            img, mask = blob_image(gen, 256, 256, big=i % 3 == 0)
            ps = select_patches(img, mask, k=10)
            got = [(b.x, b.y, b.w, b.h, b.density) for b in ps.boxes]
            assert got == brute_force_ccs(img, mask, 10, 112, 112)

    def test_small_patch_oracle(self):
        gen = np.random.default_rng(5)
        for _ in range(8):
            img, mask = blob_image(gen, 96, 128)
            ps = select_patches(img, mask, k=6, patch_w=24, patch_h=16)
            got = [(b.x, b.y, b.w, b.h, b.density) for b in ps.boxes]
            assert got == brute_force_ccs(img, mask, 6, 24, 16)


def test_overlay_draws_outline(tmp_path):
    img = np.zeros((20, 20), np.uint8)
    rgb = draw_overlay(img, [BBox(2, 3, 5, 4, 0)], tmp_path / "o.png")
    assert rgb.shape == (20, 20, 3)
    assert tuple(rgb[3, 4]) == (255, 0, 0) and tuple(rgb[5, 4]) == (0, 0, 0)
    assert (tmp_path / "o.png").exists()


def test_overlapping_pairs_matches_direct():
    gen = np.random.default_rng(3)
    boxes = [BBox(int(gen.integers(0, 30)), int(gen.integers(0, 30)), 6, 6, 0) for _ in range(25)]
    want = [(i, j) for i, j in itertools.combinations(range(25), 2) if boxes[i].intersection(boxes[j]) > 0]
    assert overlapping_pairs(boxes) == want
