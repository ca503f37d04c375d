"""Word- and pixel-level mini-batch construction: random sampling, hard
example mining, and the 3-way pixel category map."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .docmodel import Document
from .textgrid import word_index_map

CATEGORY_BACKGROUND = 1   # pixel in no word box
CATEGORY_FIELD = 2        # pixel inside a labeled word's box
CATEGORY_OTHER_WORD = 3   # pixel inside an unlabeled word's box


@dataclass
class PixelCategoryMap:
    """Per-pixel category plus per-field masks over category-2 pixels."""

    categories: np.ndarray   # (H, W) uint8 in {1, 2, 3}
    field_masks: np.ndarray  # (C, H, W) bool
    word_index: np.ndarray   # (H, W) int32, -1 where no word covers the pixel


@dataclass
class SampleBatch:
    """Sampled word ids / pixel coords with their training targets."""

    word_batch1: np.ndarray    # (N1,) word ids
    word_targets1: np.ndarray  # (N1,) binary
    word_batch2: np.ndarray    # (N2,) word ids
    word_targets2: np.ndarray  # (N2, C) binary
    pixel_batch1: np.ndarray   # (N1', 2) (y, x)
    pixel_targets1: np.ndarray  # (N1',) class index 0..2
    pixel_batch2: np.ndarray   # (N2', 2) (y, x)
    pixel_targets2: np.ndarray  # (N2', C) binary


def rng_for_page(seed: int, page_id: str, step: int = 0) -> np.random.Generator:
    """Independent, reproducible stream for one page (and training step)."""
    digest = hashlib.sha256(page_id.encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence(
        [seed, step, int.from_bytes(digest[:8], "big")]))


def build_pixel_category_map(doc: Document, num_fields: int) -> PixelCategoryMap:
    """Classify each pixel by the word covering its center (x+0.5, y+0.5).

    Overlaps resolve to the word latest in sequence order, matching the
    grid rasterization rule.
    """
    height, width = doc.height, doc.width
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    index = word_index_map(doc.words, xs, ys)

    categories = np.full((height, width), CATEGORY_BACKGROUND, dtype=np.uint8)
    field_masks = np.zeros((num_fields, height, width), dtype=bool)
    covered = index >= 0
    if covered.any():
        labeled_words = np.array([bool(w.labels) for w in doc.words], dtype=bool)
        word_at = index[covered]
        categories[covered] = np.where(labeled_words[word_at], CATEGORY_FIELD,
                                       CATEGORY_OTHER_WORD)
        for i, word in enumerate(doc.words):
            if word.labels:
                mask = covered & (index == i)
                for k in word.labels:
                    field_masks[k] |= mask
    return PixelCategoryMap(categories=categories, field_masks=field_masks, word_index=index)


def word_targets(doc: Document, num_fields: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground truth per word: any-field binary y1 and per-field binary y2."""
    n = len(doc.words)
    y1 = np.zeros(n, dtype=np.float64)
    y2 = np.zeros((n, num_fields), dtype=np.float64)
    for i, word in enumerate(doc.words):
        if word.labels:
            y1[i] = 1.0
            for k in word.labels:
                y2[i, k] = 1.0
    return y1, y2


def _choice(rng: np.random.Generator, pool: np.ndarray, count: int) -> np.ndarray:
    """Uniform sample without replacement, capped at the pool size."""
    if count >= len(pool):
        return pool.copy()
    return rng.choice(pool, size=count, replace=False)


def sample_words(doc: Document, counts: tuple[int, int],
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random positive/negative word ids with their binary targets.

    Positives are words carrying any field label. Requests beyond the
    available pool are capped.
    """
    labels = np.array([bool(w.labels) for w in doc.words], dtype=bool)
    positives = np.nonzero(labels)[0]
    negatives = np.nonzero(~labels)[0]
    picked_pos = _choice(rng, positives, counts[0])
    picked_neg = _choice(rng, negatives, counts[1])
    ids = np.concatenate([picked_pos, picked_neg]).astype(np.int64)
    targets = np.concatenate([np.ones(len(picked_pos)), np.zeros(len(picked_neg))])
    return ids, targets


def ohem_select(losses: dict, k: int, exclude: set = frozenset()) -> list:
    """Ids of the k largest current losses, ties broken by smaller id."""
    candidates = [(float(loss), key) for key, loss in losses.items() if key not in exclude]
    candidates.sort(key=lambda pair: (-pair[0], pair[1]))
    return [key for _, key in candidates[:max(k, 0)]]


def _ohem_coords(loss_map: np.ndarray, pool_mask: np.ndarray, k: int) -> np.ndarray:
    """(y, x) coords of the k hardest pixels inside the pool."""
    flat_ids = np.nonzero(pool_mask.reshape(-1))[0]
    if len(flat_ids) == 0 or k <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    losses = loss_map.reshape(-1)[flat_ids]
    order = np.lexsort((flat_ids, -losses))[:k]
    chosen = flat_ids[order]
    width = loss_map.shape[1]
    return np.stack([chosen // width, chosen % width], axis=1)


def sample_pixels(pcm: PixelCategoryMap, counts: tuple[int, int, int],
                  hard_counts: tuple[int, int], loss_map: np.ndarray,
                  rng: np.random.Generator
                  ) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Build both pixel batches.

    Batch 1 samples the requested number of pixels uniformly per category
    (capped by availability) for the 3-way classifier. Batch 2 selects the
    hardest positives among pixels carrying any field target and the
    hardest negatives among the remaining within-word pixels, ranked by
    ``loss_map``.
    """
    height, width = pcm.categories.shape
    coords1_parts, targets1_parts = [], []
    for class_index, (category, count) in enumerate(
            zip((CATEGORY_BACKGROUND, CATEGORY_FIELD, CATEGORY_OTHER_WORD), counts)):
        pool = np.nonzero((pcm.categories == category).reshape(-1))[0]
        picked = _choice(rng, pool, count)
        coords1_parts.append(np.stack([picked // width, picked % width], axis=1))
        targets1_parts.append(np.full(len(picked), class_index, dtype=np.int64))
    coords1 = np.concatenate(coords1_parts).astype(np.int64)
    targets1 = np.concatenate(targets1_parts)

    any_field = pcm.field_masks.any(axis=0)
    pos_pool = any_field
    neg_pool = ((pcm.categories == CATEGORY_FIELD) & ~any_field) \
        | (pcm.categories == CATEGORY_OTHER_WORD)
    coords2 = np.concatenate([
        _ohem_coords(loss_map, pos_pool, hard_counts[0]),
        _ohem_coords(loss_map, neg_pool, hard_counts[1]),
    ])
    targets2 = pcm.field_masks[:, coords2[:, 0], coords2[:, 1]].T.astype(np.float64)
    return (coords1, targets1), (coords2, targets2)


def hard_word_batches(per_word_losses: np.ndarray, y1: np.ndarray,
                      counts: tuple[int, int]) -> np.ndarray:
    """OHEM word ids for the second classifier: hardest positives plus
    hardest negatives under the current per-word loss."""
    ids = np.arange(len(per_word_losses))
    pos = {int(i): float(per_word_losses[i]) for i in ids[y1 > 0.5]}
    neg = {int(i): float(per_word_losses[i]) for i in ids[y1 <= 0.5]}
    picked = ohem_select(pos, counts[0]) + ohem_select(neg, counts[1])
    return np.asarray(picked, dtype=np.int64)
