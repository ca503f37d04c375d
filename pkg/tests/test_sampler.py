import numpy as np
import pytest

from gridkie.docmodel import points_in_quad
from gridkie.sampler import (CATEGORY_BACKGROUND, CATEGORY_FIELD,
                             CATEGORY_OTHER_WORD, build_pixel_category_map,
                             hard_word_batches, ohem_select, rng_for_page,
                             sample_pixels, sample_words, word_targets)

from conftest import make_doc, make_word


class TestPixelCategoryMap:
    def test_blank_page(self):
        pcm = build_pixel_category_map(make_doc([], height=8, width=10), num_fields=2)
        assert (pcm.categories == CATEGORY_BACKGROUND).all()
        assert not pcm.field_masks.any()

    def test_labeled_word_covers_exact_pixels(self):
        # 10x4 region: x in [3, 13), y in [2, 6) by pixel centers.
        word = make_word("w", 3, 2, 13, 6, labels={1})
        pcm = build_pixel_category_map(make_doc([word], 16, 16), num_fields=3)
        assert (pcm.categories == CATEGORY_FIELD).sum() == 40
        assert pcm.field_masks[1].sum() == 40
        assert (pcm.field_masks[1] == (pcm.categories == CATEGORY_FIELD)).all()

    def test_unlabeled_word_is_category_three(self):
        word = make_word("w", 3, 2, 13, 6)
        pcm = build_pixel_category_map(make_doc([word], 16, 16), num_fields=3)
        assert (pcm.categories == CATEGORY_OTHER_WORD).sum() == 40
        assert not pcm.field_masks.any()

    def test_partition_counts(self):
        words = [make_word("a", 1, 1, 6, 4, labels={0}), make_word("b", 8, 8, 14, 12)]
        pcm = build_pixel_category_map(make_doc(words, 16, 16), num_fields=2)
        total = ((pcm.categories == 1).sum() + (pcm.categories == 2).sum()
                 + (pcm.categories == 3).sum())
        assert total == 16 * 16

    def test_overlap_later_word_wins(self):
        a = make_word("a", 2, 2, 10, 10, labels={0})
        b = make_word("b", 6, 6, 14, 14)  # unlabeled, painted later
        pcm = build_pixel_category_map(make_doc([a, b], 16, 16), num_fields=2)
        assert pcm.categories[8, 8] == CATEGORY_OTHER_WORD
        assert not pcm.field_masks[0, 8, 8]
        assert pcm.categories[3, 3] == CATEGORY_FIELD

    def test_targets_agree_with_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            words = []
            for i in range(int(rng.integers(1, 5))):
                x0, y0 = rng.integers(0, 20, size=2)
                w, h = rng.integers(2, 10, size=2)
                labels = {int(rng.integers(0, 3))} if rng.random() < 0.6 else set()
                words.append(make_word(f"w{i}", x0, y0, x0 + w, y0 + h, labels=labels))
            doc = make_doc(words, 32, 32)
            pcm = build_pixel_category_map(doc, num_fields=3)
            for y in range(32):
                for x in range(32):
                    owner = -1
                    for i, word in enumerate(words):
                        if points_in_quad(x + 0.5, y + 0.5, word.quad):
                            owner = i
                    if owner < 0:
                        assert pcm.categories[y, x] == CATEGORY_BACKGROUND
                    elif words[owner].labels:
                        assert pcm.categories[y, x] == CATEGORY_FIELD
                        for k in range(3):
                            assert pcm.field_masks[k, y, x] == (k in words[owner].labels)
                    else:
                        assert pcm.categories[y, x] == CATEGORY_OTHER_WORD


class TestSampleWords:
    def _doc(self, n_pos=10, n_neg=200):
        words = [make_word(f"p{i}", 0, i, 5, i + 1, labels={0}) for i in range(n_pos)]
        words += [make_word(f"n{i}", 10, i, 15, i + 1) for i in range(n_neg)]
        return make_doc(words, height=max(n_pos, n_neg) + 2, width=32)

    def test_capped_availability(self):
        ids, targets = sample_words(self._doc(n_pos=10), (64, 64), np.random.default_rng(0))
        assert (targets == 1).sum() == 10
        assert (targets == 0).sum() == 64

    def test_deterministic_under_seed(self):
        doc = self._doc()
        a = sample_words(doc, (4, 4), np.random.default_rng(9))
        b = sample_words(doc, (4, 4), np.random.default_rng(9))
        np.testing.assert_array_equal(a[0], b[0])

    def test_without_replacement(self):
        ids, targets = sample_words(self._doc(n_neg=200), (0, 64),
                                    np.random.default_rng(1))
        assert len(ids) == 64
        assert len(set(ids.tolist())) == 64


class TestOhemSelect:
    def test_picks_largest_losses(self):
        assert ohem_select({"a": 0.1, "b": 0.9, "c": 0.5}, 2) == ["b", "c"]

    def test_k_zero(self):
        assert ohem_select({"a": 0.1}, 0) == []

    def test_all_excluded(self):
        assert ohem_select({"a": 0.1, "b": 0.2}, 2, exclude={"a", "b"}) == []

    def test_ties_break_by_smaller_id(self):
        assert ohem_select({3: 0.5, 1: 0.5, 2: 0.9}, 2) == [2, 1]

    def test_selection_is_nonincreasing_prefix(self):
        rng = np.random.default_rng(2)
        losses = {i: float(rng.uniform()) for i in range(30)}
        picked = ohem_select(losses, 10)
        values = [losses[i] for i in picked]
        assert values == sorted(values, reverse=True)
        assert min(values) >= max(loss for i, loss in losses.items() if i not in picked)


class TestSamplePixels:
    def _pcm(self, n_fields=2):
        words = [make_word("a", 2, 2, 12, 6, labels={0}), make_word("b", 2, 8, 12, 12)]
        return build_pixel_category_map(make_doc(words, 16, 16), n_fields)

    def test_capped_category_counts(self):
        pcm = self._pcm()
        loss_map = np.zeros((16, 16))
        (coords1, t1), _ = sample_pixels(pcm, (256, 512, 256), (0, 0), loss_map,
                                         np.random.default_rng(0))
        # 40 category-2 and 40 category-3 pixels exist; the rest is background.
        assert (t1 == 1).sum() == 40
        assert (t1 == 2).sum() == 40
        assert (t1 == 0).sum() == 16 * 16 - 80

    def test_hard_batches_pick_highest_loss_pixels(self):
        pcm = self._pcm()
        rng = np.random.default_rng(0)
        loss_map = rng.uniform(size=(16, 16))
        _, (coords2, t2) = sample_pixels(pcm, (0, 0, 0), (5, 5), loss_map, rng)
        assert len(coords2) == 10
        pos_pool = pcm.field_masks.any(axis=0)
        pos_chosen = coords2[:5]
        assert all(pos_pool[y, x] for y, x in pos_chosen)
        pos_losses = loss_map[pos_pool]
        chosen_losses = loss_map[pos_chosen[:, 0], pos_chosen[:, 1]]
        assert set(np.round(chosen_losses, 12)) == set(
            np.round(np.sort(pos_losses)[-5:], 12))
        # Negatives come from unlabeled-word pixels, here category 3 only.
        assert all(pcm.categories[y, x] == CATEGORY_OTHER_WORD for y, x in coords2[5:])
        np.testing.assert_array_equal(t2[:5], [[1, 0]] * 5)
        np.testing.assert_array_equal(t2[5:], [[0, 0]] * 5)

    def test_deterministic_under_seed(self):
        pcm = self._pcm()
        loss_map = np.zeros((16, 16))
        a = sample_pixels(pcm, (8, 8, 8), (4, 4), loss_map, np.random.default_rng(3))
        b = sample_pixels(pcm, (8, 8, 8), (4, 4), loss_map, np.random.default_rng(3))
        np.testing.assert_array_equal(a[0][0], b[0][0])
        np.testing.assert_array_equal(a[1][0], b[1][0])

    def test_sampled_targets_match_brute_force(self):
        pcm = self._pcm()
        rng = np.random.default_rng(1)
        loss_map = rng.uniform(size=(16, 16))
        (coords1, t1), (coords2, t2) = sample_pixels(pcm, (16, 16, 16), (8, 8),
                                                     loss_map, rng)
        for (y, x), cls in zip(coords1, t1):
            assert pcm.categories[y, x] == cls + 1
        for (y, x), targets in zip(coords2, t2):
            np.testing.assert_array_equal(targets, pcm.field_masks[:, y, x])


class TestHardWordBatches:
    def test_splits_by_stage1_truth(self):
        losses = np.array([0.9, 0.1, 0.8, 0.2, 0.5])
        y1 = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
        ids = hard_word_batches(losses, y1, (1, 2))
        assert ids.tolist() == [0, 2, 4]


class TestWordTargets:
    def test_targets(self):
        words = [make_word("a", 0, 0, 5, 5, labels={0, 2}), make_word("b", 0, 6, 5, 11)]
        y1, y2 = word_targets(make_doc(words, 16, 16), num_fields=3)
        np.testing.assert_array_equal(y1, [1.0, 0.0])
        np.testing.assert_array_equal(y2, [[1, 0, 1], [0, 0, 0]])


def test_rng_for_page_is_stable_and_distinct():
    a = rng_for_page(7, "page-1", 3).integers(0, 1 << 30, size=4)
    b = rng_for_page(7, "page-1", 3).integers(0, 1 << 30, size=4)
    c = rng_for_page(7, "page-2", 3).integers(0, 1 << 30, size=4)
    np.testing.assert_array_equal(a, b)
    assert (a != c).any()
