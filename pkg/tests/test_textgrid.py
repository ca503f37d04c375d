import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from gridkie.textgrid import (CLS_ID, PAD_ID, SEP_ID, UNK_ID, BertGrid,
                              NUM_SPECIAL_TOKENS, ShapeError, TokenizedDocument,
                              Vocab, aggregate_word_embeddings, rasterize_bertgrid,
                              read_grid_dump, select_gradient_windows, slice_windows,
                              tokenize, write_grid_dump)

from conftest import make_doc, make_word, random_trapezoid


class TestTokenize:
    def test_char_level_two_chars(self):
        doc = make_doc([make_word("AB", 0, 0, 10, 8)])
        td = tokenize(doc)
        assert td.tokens == (NUM_SPECIAL_TOKENS + ord("A"), NUM_SPECIAL_TOKENS + ord("B"))
        assert td.word_spans == ((0, 2),)

    def test_char_level_spans(self):
        doc = make_doc([make_word("TO", 0, 0, 10, 8), make_word("TAL", 0, 10, 10, 18)])
        td = tokenize(doc)
        assert td.length == 5
        assert td.word_spans == ((0, 2), (2, 5))

    def test_byte_fallback_for_wide_chars(self):
        doc = make_doc([make_word("€", 0, 0, 10, 8)])  # 3 UTF-8 bytes
        td = tokenize(doc)
        assert td.length == 3
        assert all(NUM_SPECIAL_TOKENS <= t < NUM_SPECIAL_TOKENS + 256 for t in td.tokens)

    def test_vocab_greedy_longest_match(self):
        vocab = Vocab(["<pad>", "<cls>", "<sep>", "<unk>", "TOT", "AL", "T"])
        doc = make_doc([make_word("TOTAL", 0, 0, 10, 8)])
        td = tokenize(doc, vocab)
        assert td.tokens == (4, 5)
        assert td.vocab_size == 7

    def test_vocab_unk(self):
        vocab = Vocab(["<pad>", "<cls>", "<sep>", "<unk>", "AB"])
        doc = make_doc([make_word("AXB", 0, 0, 10, 8)])
        td = tokenize(doc, vocab)
        assert td.tokens == (UNK_ID, UNK_ID, UNK_ID)


class TestSliceWindows:
    def test_long_sequence_splits(self):
        td = TokenizedDocument(tokens=tuple(range(4, 1004)), word_spans=((0, 1000),),
                               vocab_size=2000)
        windows = slice_windows(td)
        assert [w.real_count for w in windows] == [510, 490]
        second = windows[1]
        assert second.token_ids[0] == CLS_ID
        assert second.token_ids[491] == SEP_ID
        assert (second.token_ids[492:] == PAD_ID).all()
        assert second.attention_mask.sum() == 492

    def test_empty_document(self):
        td = TokenizedDocument(tokens=(), word_spans=(), vocab_size=300)
        windows = slice_windows(td)
        assert len(windows) == 1
        w = windows[0]
        assert w.real_count == 0
        assert w.token_ids[0] == CLS_ID and w.token_ids[1] == SEP_ID
        assert (w.token_ids[2:] == PAD_ID).all()

    def test_exact_fit(self):
        td = TokenizedDocument(tokens=tuple([5] * 510), word_spans=((0, 510),),
                               vocab_size=300)
        windows = slice_windows(td)
        assert len(windows) == 1
        assert windows[0].real_count == 510
        assert (windows[0].token_ids != PAD_ID).all()

    @given(st.integers(0, 5000))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, m):
        td = TokenizedDocument(tokens=tuple(int(v) for v in np.arange(m) % 200 + 4),
                               word_spans=((0, m),) if m else (), vocab_size=300)
        windows = slice_windows(td)
        rebuilt = []
        for w in windows:
            assert len(w.token_ids) == 512
            assert w.token_ids[0] == CLS_ID
            assert w.token_ids[w.real_count + 1] == SEP_ID
            assert (w.attention_mask == (np.arange(512) < w.real_count + 2)).all()
            rebuilt.extend(w.token_ids[1:1 + w.real_count].tolist())
        assert tuple(rebuilt) == td.tokens


class TestAggregate:
    def test_single_token_identity(self):
        td = TokenizedDocument(tokens=(7,), word_spans=((0, 1),), vocab_size=300)
        emb = np.zeros((512, 2))
        emb[1] = [3.0, -1.0]
        out = aggregate_word_embeddings([emb], td)
        np.testing.assert_allclose(out, [[3.0, -1.0]])

    def test_mean_of_two(self):
        td = TokenizedDocument(tokens=(7, 8), word_spans=((0, 2),), vocab_size=300)
        emb = np.zeros((512, 2))
        emb[1] = [1.0, 0.0]
        emb[2] = [0.0, 1.0]
        out = aggregate_word_embeddings([emb], td)
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_straddling_word_averages_across_windows(self):
        td = TokenizedDocument(tokens=(7, 8, 9), word_spans=((0, 3),), vocab_size=300)
        windows_emb = []
        for value in (2.0, 4.0, 6.0):
            emb = np.zeros((3, 1))
            emb[1] = value
            windows_emb.append(emb)
        out = aggregate_word_embeddings(windows_emb, td, capacity=1)
        np.testing.assert_allclose(out, [[4.0]])

    def test_missing_window_is_alignment_error(self):
        from gridkie.textgrid import AlignmentError
        td = TokenizedDocument(tokens=tuple([7] * 600), word_spans=((0, 600),),
                               vocab_size=300)
        with pytest.raises(AlignmentError):
            aggregate_word_embeddings([np.zeros((512, 2))], td)

    def test_window_capacity_invariance_with_identity_encoder(self):
        # An encoder that maps token id t to embedding [t] regardless of
        # context makes word embeddings independent of the slicing.
        doc = make_doc([make_word("ABC", 0, 0, 10, 8), make_word("DE", 0, 10, 10, 18)])
        td = tokenize(doc)

        def identity_encode(capacity):
            outs = []
            for w in slice_windows(td, capacity):
                emb = np.zeros((capacity + 2, 1))
                emb[1:1 + w.real_count, 0] = w.token_ids[1:1 + w.real_count]
                outs.append(emb)
            return aggregate_word_embeddings(outs, td, capacity=capacity)

        np.testing.assert_allclose(identity_encode(510), identity_encode(2))


def shapely_raster_oracle(words, embeddings, height, width, stride):
    """Brute force: test every cell sample point against every quad with an
    independent geometry engine; later words win."""
    rows, cols = math.ceil(height / stride), math.ceil(width / stride)
    dim = embeddings.shape[1]
    values = np.zeros((rows, cols, dim), dtype=np.float32)
    polys = [Polygon(w.quad) for w in words]
    for y in range(rows):
        for x in range(cols):
            pt = Point(x * stride, y * stride)
            owner = -1
            for i, poly in enumerate(polys):
                if poly.covers(pt):
                    owner = i
            if owner >= 0:
                values[y, x] = embeddings[owner]
    return values


class TestRasterize:
    def test_no_words_all_zero(self):
        grid = rasterize_bertgrid([], np.zeros((0, 4)), 32, 32, 8)
        assert grid.values.shape == (4, 4, 4)
        assert (grid.values == 0).all()

    def test_hand_case_32x32_stride8(self):
        word = make_word("w", 8, 8, 23, 15)
        emb = np.array([[1.0, 2.0]])
        grid = rasterize_bertgrid([word], emb, 32, 32, 8)
        expected_cells = {(1, 1), (1, 2)}  # (row y, col x)
        for y in range(4):
            for x in range(4):
                if (y, x) in expected_cells:
                    np.testing.assert_allclose(grid.values[y, x], [1.0, 2.0])
                else:
                    assert (grid.values[y, x] == 0).all()

    def test_overlap_later_word_wins(self):
        a = make_word("a", 4, 4, 12, 12)
        b = make_word("b", 6, 6, 14, 14)
        emb = np.array([[1.0], [2.0]])
        grid = rasterize_bertgrid([a, b], emb, 16, 16, 8)
        assert grid.values[1, 1, 0] == 2.0  # sample point (8, 8) inside both

    def test_ceil_grid_dims(self):
        grid = rasterize_bertgrid([], np.zeros((0, 1)), 33, 47, 8)
        assert grid.values.shape == (5, 6, 1)

    def test_embedding_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rasterize_bertgrid([make_word("w", 0, 0, 8, 8)], np.zeros((2, 4)), 16, 16, 8)

    @pytest.mark.parametrize("stride", [4, 8, 16])
    def test_matches_shapely_oracle(self, stride):
        rng = np.random.default_rng(stride)
        for _ in range(12):
            n = int(rng.integers(1, 7))
            words = [make_word(f"w{i}", 0, 0, 1, 1) for i in range(n)]
            words = [w.__class__(text=w.text, quad=random_trapezoid(rng, 48, 48),
                                 labels=w.labels) for w in words]
            emb = rng.standard_normal((n, 3))
            grid = rasterize_bertgrid(words, emb, 48, 48, stride)
            oracle = shapely_raster_oracle(words, emb, 48, 48, stride)
            np.testing.assert_array_equal(grid.values, oracle)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(11)
        stride = 8
        for _ in range(10):
            n = int(rng.integers(1, 5))
            quads = [random_trapezoid(rng, 32, 48) for _ in range(n)]
            emb = rng.standard_normal((n, 2))
            words = [make_word(f"w{i}", 0, 0, 1, 1) for i in range(n)]
            base = rasterize_bertgrid(
                [w.__class__(text=w.text, quad=q, labels=w.labels)
                 for w, q in zip(words, quads)], emb, 48, 64, stride)
            shifted = rasterize_bertgrid(
                [w.__class__(text=w.text, quad=q + [stride, 0], labels=w.labels)
                 for w, q in zip(words, quads)], emb, 48, 64, stride)
            # Interior cells shift one column to the right.
            np.testing.assert_array_equal(shifted.values[:, 1:], base.values[:, :-1])


class TestGridDump:
    def test_round_trip_and_header(self):
        rng = np.random.default_rng(0)
        grid = BertGrid(values=rng.standard_normal((4, 6, 3)).astype(np.float32), stride=8)
        buf = io.BytesIO()
        write_grid_dump(grid, buf)
        raw = buf.getvalue()
        assert raw[:4] == b"GKGR"
        header = np.frombuffer(raw[4:24], dtype="<u4")
        assert list(header) == [1, 4, 6, 3, 8]
        buf.seek(0)
        back = read_grid_dump(buf)
        assert back.stride == 8
        np.testing.assert_array_equal(back.values, grid.values)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            read_grid_dump(io.BytesIO(b"XXXX" + b"\x00" * 20))


class TestSelectGradientWindows:
    def test_caps_at_limit(self):
        rng = np.random.default_rng(3)
        grad, frozen = select_gradient_windows(15, 10, rng)
        assert len(grad) == 10 and len(frozen) == 5
        assert sorted(np.concatenate([grad, frozen]).tolist()) == list(range(15))

    def test_under_limit_takes_all(self):
        rng = np.random.default_rng(3)
        grad, frozen = select_gradient_windows(3, 10, rng)
        assert grad.tolist() == [0, 1, 2] and len(frozen) == 0
