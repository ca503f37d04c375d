"""Tokenization, 512-token windowing, word-embedding aggregation and the
rasterization of word embeddings into a 2D grid aligned with the page."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .docmodel import Word, Document, points_in_quad

PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3
NUM_SPECIAL_TOKENS = 4
CHAR_VOCAB_SIZE = NUM_SPECIAL_TOKENS + 256
WINDOW_LENGTH = 512
WINDOW_CAPACITY = 510

GRID_MAGIC = b"GKGR"
GRID_VERSION = 1


class TokenizationError(ValueError):
    """A word produced no tokens."""


class AlignmentError(ValueError):
    """Token embeddings do not line up with the tokenized document."""


class ShapeError(ValueError):
    """Tensor shapes disagree with the documented contract."""


@dataclass(frozen=True)
class TokenizedDocument:
    """Token ids for a whole document plus per-word half-open spans."""

    tokens: tuple[int, ...]
    word_spans: tuple[tuple[int, int], ...]
    vocab_size: int

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Window:
    """One encoder input: CLS + up to 510 real tokens + SEP, padded to 512."""

    token_ids: np.ndarray       # (512,) int64
    real_count: int
    attention_mask: np.ndarray  # (512,) bool, True on non-PAD positions

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "attention_mask", np.asarray(self.attention_mask, dtype=bool))


@dataclass
class BertGrid:
    """Page-aligned grid of word embeddings; uncovered cells are zero."""

    values: np.ndarray  # (H/S, W/S, d) float32
    stride: int

    @property
    def dim(self) -> int:
        return self.values.shape[2]


class Vocab:
    """Subword vocabulary: one token per line, line number = token id.

    Ids 0-3 are reserved for PAD/CLS/SEP/UNK; the strings on those lines
    are treated as special markers and never matched against text.
    """

    def __init__(self, tokens: list[str]):
        if len(tokens) <= NUM_SPECIAL_TOKENS:
            raise ValueError("vocab must list the 4 reserved ids plus at least one token")
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens) if i >= NUM_SPECIAL_TOKENS}
        self.max_token_len = max(len(t) for t in self.token_to_id)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls([line for line in text.splitlines()])

    def __len__(self) -> int:
        return len(self.tokens)


def _tokenize_word_chars(text: str) -> list[int]:
    ids = []
    for ch in text:
        cp = ord(ch)
        if cp < 256:
            ids.append(NUM_SPECIAL_TOKENS + cp)
        else:
            ids.extend(NUM_SPECIAL_TOKENS + b for b in ch.encode("utf-8"))
    return ids


def _tokenize_word_vocab(text: str, vocab: Vocab) -> list[int]:
    ids = []
    pos = 0
    while pos < len(text):
        match_id = None
        for length in range(min(vocab.max_token_len, len(text) - pos), 0, -1):
            candidate = text[pos:pos + length]
            if candidate in vocab.token_to_id:
                match_id = vocab.token_to_id[candidate]
                pos += length
                break
        if match_id is None:
            match_id = UNK_ID
            pos += 1
        ids.append(match_id)
    return ids


def tokenize(doc: Document, vocab: Vocab | None = None) -> TokenizedDocument:
    """Tokenize a document's words in order.

    Without a vocabulary each character becomes one token (codepoints below
    256 directly, anything else as its UTF-8 bytes). With a vocabulary,
    greedy longest-match subword tokenization with UNK for unmatched
    characters.
    """
    tokens: list[int] = []
    spans: list[tuple[int, int]] = []
    for i, word in enumerate(doc.words):
        ids = _tokenize_word_chars(word.text) if vocab is None \
            else _tokenize_word_vocab(word.text, vocab)
        if not ids:
            raise TokenizationError(f"word {i} ({word.text!r}) produced no tokens")
        spans.append((len(tokens), len(tokens) + len(ids)))
        tokens.extend(ids)
    return TokenizedDocument(tokens=tuple(tokens), word_spans=tuple(spans),
                             vocab_size=CHAR_VOCAB_SIZE if vocab is None else len(vocab))


def slice_windows(td: TokenizedDocument, capacity: int = WINDOW_CAPACITY) -> list[Window]:
    """Slice the token sequence into consecutive non-overlapping windows.

    Chunks of ``capacity`` real tokens (the last one may be shorter, word
    boundaries are ignored) are wrapped with CLS/SEP and padded to a total
    length of ``capacity + 2``. An empty document yields one window holding
    only CLS and SEP.
    """
    total = capacity + 2
    chunks = [td.tokens[i:i + capacity] for i in range(0, len(td.tokens), capacity)] or [()]
    windows = []
    for chunk in chunks:
        ids = np.full(total, PAD_ID, dtype=np.int64)
        ids[0] = CLS_ID
        ids[1:1 + len(chunk)] = chunk
        ids[1 + len(chunk)] = SEP_ID
        mask = np.zeros(total, dtype=bool)
        mask[:len(chunk) + 2] = True
        windows.append(Window(token_ids=ids, real_count=len(chunk), attention_mask=mask))
    return windows


def token_window_positions(td: TokenizedDocument,
                           capacity: int = WINDOW_CAPACITY) -> tuple[np.ndarray, np.ndarray]:
    """For every real token, its (window index, in-window position)."""
    g = np.arange(td.length)
    return g // capacity, 1 + g % capacity


def select_gradient_windows(n_windows: int, limit: int,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split window indices into a gradient-carrying subset of at most
    ``limit`` (chosen uniformly) and the remainder."""
    if limit < 1:
        raise ValueError("gradient window limit must be at least 1")
    ids = np.arange(n_windows)
    if n_windows <= limit:
        return ids, np.zeros(0, dtype=np.int64)
    chosen = np.sort(rng.choice(ids, size=limit, replace=False))
    rest = np.setdiff1d(ids, chosen)
    return chosen, rest


def aggregate_word_embeddings(token_embeddings, td: TokenizedDocument,
                              capacity: int = WINDOW_CAPACITY) -> np.ndarray:
    """Mean per-word embedding over each word's tokens.

    ``token_embeddings`` is a sequence of per-window (window_length, d)
    arrays. CLS/SEP/PAD rows are never read; words whose tokens straddle a
    window boundary average across windows.
    """
    arrays = [np.asarray(e) for e in token_embeddings]
    win_idx, pos_idx = token_window_positions(td, capacity)
    if td.length:
        if len(arrays) <= win_idx.max():
            raise AlignmentError(
                f"{int(win_idx.max()) + 1} windows of embeddings needed, got {len(arrays)}")
        if any(a.shape[0] <= pos_idx[win_idx == w].max() for w, a in enumerate(arrays)
               if (win_idx == w).any()):
            raise AlignmentError("window embedding array shorter than its token positions")
    dim = arrays[0].shape[1] if arrays else 0
    out = np.zeros((len(td.word_spans), dim), dtype=np.float64)
    for j, (start, stop) in enumerate(td.word_spans):
        rows = [arrays[win_idx[g]][pos_idx[g]] for g in range(start, stop)]
        out[j] = np.mean(rows, axis=0)
    return out


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def word_index_map(words: tuple[Word, ...], sample_xs: np.ndarray,
                   sample_ys: np.ndarray) -> np.ndarray:
    """Index of the covering word at each (y, x) sample point, -1 if none.

    Sample points form the grid ``sample_ys x sample_xs``. When several
    quads contain a point, the word latest in sequence order wins.
    """
    out = np.full((len(sample_ys), len(sample_xs)), -1, dtype=np.int32)
    for i, word in enumerate(words):
        min_x, min_y, max_x, max_y = word.bounds
        cols = np.nonzero((sample_xs >= min_x) & (sample_xs <= max_x))[0]
        rows = np.nonzero((sample_ys >= min_y) & (sample_ys <= max_y))[0]
        if cols.size == 0 or rows.size == 0:
            continue
        inside = points_in_quad(sample_xs[cols][None, :], sample_ys[rows][:, None], word.quad)
        out[np.ix_(rows, cols)] = np.where(inside, i, out[np.ix_(rows, cols)])
    return out


def grid_cell_index_map(words: tuple[Word, ...], height: int, width: int,
                        stride: int) -> np.ndarray:
    """Covering word per grid cell; cell (x, y) samples pixel (x*S, y*S)."""
    rows = int(math.ceil(height / stride))
    cols = int(math.ceil(width / stride))
    xs = np.arange(cols, dtype=np.float64) * stride
    ys = np.arange(rows, dtype=np.float64) * stride
    return word_index_map(words, xs, ys)


def rasterize_bertgrid(words: list[Word], embeddings: np.ndarray, height: int,
                       width: int, stride: int) -> BertGrid:
    """Build the word-embedding grid for a page.

    Cell (x, y) holds the embedding of the word whose quad contains the
    sample point (x*stride, y*stride), boundary inclusive, with later words
    winning overlaps; uncovered cells hold the zero vector.
    """
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(words):
        raise ShapeError(
            f"embeddings shape {embeddings.shape} does not match {len(words)} words")
    index = grid_cell_index_map(tuple(words), height, width, stride)
    values = np.zeros(index.shape + (embeddings.shape[1],), dtype=np.float32)
    covered = index >= 0
    values[covered] = embeddings[index[covered]].astype(np.float32)
    return BertGrid(values=values, stride=stride)


# ---------------------------------------------------------------------------
# Grid dump format
# ---------------------------------------------------------------------------

def write_grid_dump(grid: BertGrid, fp) -> None:
    """Binary dump: magic, version, rows, cols, dim, stride, then float32 cells."""
    rows, cols, dim = grid.values.shape
    fp.write(GRID_MAGIC)
    fp.write(struct.pack("<5I", GRID_VERSION, rows, cols, dim, grid.stride))
    fp.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())


def read_grid_dump(fp) -> BertGrid:
    magic = fp.read(4)
    if magic != GRID_MAGIC:
        raise ValueError(f"bad grid dump magic {magic!r}")
    version, rows, cols, dim, stride = struct.unpack("<5I", fp.read(20))
    if version != GRID_VERSION:
        raise ValueError(f"unsupported grid dump version {version}")
    data = np.frombuffer(fp.read(rows * cols * dim * 4), dtype="<f4")
    if data.size != rows * cols * dim:
        raise ValueError("grid dump truncated")
    return BertGrid(values=data.reshape(rows, cols, dim).copy(), stride=stride)
