"""Domain types for documents, words and field schemas, plus OCR ingestion.

The OCR interchange format is a small JSON document::

    {"page_id": str, "width": int, "height": int,
     "words": [{"text": str, "quad": [x1,y1,...,x4,y4], "labels": [str]?}]}

and the companion labels file maps field names to transcript strings::

    {"page_id": str, "fields": {field-name: value-string}}
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    """A field name is unknown or a field schema is invalid."""


class OcrParseError(ValueError):
    """The OCR file does not conform to the interchange schema."""


class QuadValidationError(ValueError):
    """A word quad is degenerate (zero area) before or after clamping."""


# ---------------------------------------------------------------------------
# Quad geometry
# ---------------------------------------------------------------------------

def polygon_area(quad: np.ndarray) -> float:
    """Unsigned area of a simple polygon (shoelace formula)."""
    q = np.asarray(quad, dtype=np.float64)
    x, y = q[:, 0], q[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def canonical_quad(quad) -> np.ndarray:
    """Return the quad's vertices ordered clockwise starting at top-left.

    Vertices are sorted by angle around the centroid (clockwise in image
    coordinates, where y grows downward) and rotated so the vertex nearest
    the top-left corner comes first.
    """
    q = np.asarray(quad, dtype=np.float64).reshape(4, 2)
    center = q.mean(axis=0)
    angles = np.arctan2(q[:, 1] - center[1], q[:, 0] - center[0])
    q = q[np.argsort(angles, kind="stable")]
    start = int(np.argmin(q[:, 0] + q[:, 1]))
    return np.roll(q, -start, axis=0)


def points_in_quad(xs: np.ndarray, ys: np.ndarray, quad: np.ndarray) -> np.ndarray:
    """Boundary-inclusive containment test for a convex quad.

    ``xs`` and ``ys`` broadcast together; the result has their broadcast
    shape. A point is inside iff every edge cross product has the same sign
    (zero allowed, so edges and vertices count as inside).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    nonneg = np.ones(np.broadcast(xs, ys).shape, dtype=bool)
    nonpos = np.ones_like(nonneg)
    for i in range(4):
        x0, y0 = quad[i]
        x1, y1 = quad[(i + 1) % 4]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        nonneg &= cross >= 0
        nonpos &= cross <= 0
    return nonneg | nonpos


def quad_bounds(quad: np.ndarray) -> tuple[float, float, float, float]:
    """Axis-aligned bounding rectangle (min_x, min_y, max_x, max_y)."""
    q = np.asarray(quad, dtype=np.float64)
    return float(q[:, 0].min()), float(q[:, 1].min()), float(q[:, 0].max()), float(q[:, 1].max())


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldSchema:
    """Ordered collection of the pre-defined field-type names."""

    field_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.field_names)
        object.__setattr__(self, "field_names", names)
        if len(names) < 1:
            raise SchemaError("schema needs at least one field")
        if any(not n for n in names):
            raise SchemaError("field names must be non-empty")
        if len(set(names)) != len(names):
            raise SchemaError("field names must be unique")

    @property
    def num_fields(self) -> int:
        return len(self.field_names)

    def index_of(self, name: str) -> int:
        try:
            return self.field_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown field name: {name!r}") from None


@dataclass(frozen=True, eq=False)
class Word:
    """A single OCR word with its quadrilateral box and field labels.

    ``quad`` is a (4, 2) float array, clockwise from top-left, in image
    pixels. ``labels`` holds field indices; empty and multi-label sets are
    both legal.
    """

    text: str
    quad: np.ndarray
    labels: frozenset[int] = frozenset()

    def __post_init__(self):
        if not self.text:
            raise ValueError("word text must be non-empty")
        object.__setattr__(self, "quad", np.asarray(self.quad, dtype=np.float64).reshape(4, 2))
        object.__setattr__(self, "labels", frozenset(self.labels))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return quad_bounds(self.quad)


@dataclass
class Document:
    """A page image plus its words in reading order."""

    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    words: tuple[Word, ...]
    page_id: str = ""

    def __post_init__(self):
        self.words = tuple(self.words)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


# ---------------------------------------------------------------------------
# OCR ingestion
# ---------------------------------------------------------------------------

def _require(mapping: dict, key: str, kind, where: str):
    if key not in mapping:
        raise OcrParseError(f"missing field {key!r} in {where}")
    value = mapping[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise OcrParseError(f"field {key!r} in {where} must be a number")
        return float(value)
    if not isinstance(value, kind):
        raise OcrParseError(f"field {key!r} in {where} has wrong type")
    return value


def load_ocr_document(ocr_bytes: bytes, image_bytes: bytes,
                      schema: FieldSchema | None = None) -> Document:
    """Parse an OCR file and its page image into a Document.

    Words keep file order. Quads are canonicalized, validated (zero area is
    an error naming the word index) and clamped to image bounds with a
    warning. Label names are resolved through ``schema``; labels present
    without a schema are a schema error.
    """
    try:
        data = json.loads(ocr_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise OcrParseError(f"OCR file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise OcrParseError("OCR file root must be an object")

    page_id = _require(data, "page_id", str, "document")
    file_w = _require(data, "width", int, "document")
    file_h = _require(data, "height", int, "document")
    raw_words = _require(data, "words", list, "document")

    image = Image.open(io.BytesIO(image_bytes)).convert("RGB")
    pixels = np.asarray(image, dtype=np.float32) / 255.0
    height, width = pixels.shape[:2]
    if (file_w, file_h) != (width, height):
        raise OcrParseError(
            f"field 'width'/'height' ({file_w}x{file_h}) disagree with image ({width}x{height})")

    words = []
    for i, entry in enumerate(raw_words):
        if not isinstance(entry, dict):
            raise OcrParseError(f"words[{i}] must be an object")
        where = f"words[{i}]"
        text = _require(entry, "text", str, where)
        if not text:
            raise OcrParseError(f"field 'text' in {where} must be non-empty")
        raw_quad = _require(entry, "quad", list, where)
        if len(raw_quad) != 8 or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                         for v in raw_quad):
            raise OcrParseError(f"field 'quad' in {where} must hold 8 numbers")
        quad = canonical_quad(np.asarray(raw_quad, dtype=np.float64).reshape(4, 2))
        if polygon_area(quad) <= 0:
            raise QuadValidationError(f"word {i} ({text!r}) has a zero-area quad")
        clamped = np.clip(quad, [0.0, 0.0], [float(width), float(height)])
        if not np.array_equal(clamped, quad):
            logger.warning("word %d (%r) on page %s: quad clamped to image bounds", i, text, page_id)
            quad = clamped
            if polygon_area(quad) <= 0:
                raise QuadValidationError(
                    f"word {i} ({text!r}) has zero area after clamping to image bounds")

        labels: frozenset[int] = frozenset()
        if "labels" in entry:
            raw_labels = entry["labels"]
            if not isinstance(raw_labels, list) or not all(isinstance(s, str) for s in raw_labels):
                raise OcrParseError(f"field 'labels' in {where} must be a list of strings")
            if raw_labels:
                if schema is None:
                    raise SchemaError(
                        f"words[{i}] carries labels but no field schema was given")
                labels = frozenset(schema.index_of(name) for name in raw_labels)
        words.append(Word(text=text, quad=quad, labels=labels))

    return Document(image=pixels, words=tuple(words), page_id=page_id)


def document_to_ocr_dict(doc: Document, schema: FieldSchema | None = None) -> dict:
    """Inverse of load_ocr_document, for writing datasets."""
    words = []
    for w in doc.words:
        entry = {"text": w.text, "quad": [round(float(v), 4) for v in w.quad.reshape(-1)]}
        if w.labels:
            if schema is None:
                raise SchemaError("cannot serialize labels without a schema")
            entry["labels"] = sorted(schema.field_names[i] for i in w.labels)
        words.append(entry)
    return {"page_id": doc.page_id, "width": doc.width, "height": doc.height, "words": words}


# ---------------------------------------------------------------------------
# Reading order
# ---------------------------------------------------------------------------

def reading_order_permutation(words: list[Word], line_grouping: bool = True) -> list[int]:
    """Indices of ``words`` in top-left to bottom-right reading order."""
    n = len(words)
    if n == 0:
        return []
    bounds = np.array([w.bounds for w in words])  # (n, 4): min_x, min_y, max_x, max_y
    tops, bottoms, lefts = bounds[:, 1], bounds[:, 3], bounds[:, 0]

    if not line_grouping:
        return sorted(range(n), key=lambda i: (tops[i], lefts[i], i))

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    heights = bottoms - tops
    for i in range(n):
        overlap = np.minimum(bottoms[i], bottoms[i + 1:]) - np.maximum(tops[i], tops[i + 1:])
        shorter = np.minimum(heights[i], heights[i + 1:])
        for j in np.nonzero(overlap >= 0.5 * shorter)[0]:
            ri, rj = find(i), find(i + 1 + j)
            if ri != rj:
                parent[rj] = ri

    lines: dict[int, list[int]] = {}
    for i in range(n):
        lines.setdefault(find(i), []).append(i)
    ordered_lines = sorted(lines.values(), key=lambda members: min(tops[m] for m in members))
    result: list[int] = []
    for members in ordered_lines:
        result.extend(sorted(members, key=lambda i: (lefts[i], i)))
    return result


def reading_order_sort(words: list[Word], line_grouping: bool = True) -> list[Word]:
    """Sort words top-left to bottom-right.

    With ``line_grouping`` (the default) two words share a line iff the
    vertical overlap of their bounding rectangles is at least half the
    shorter rectangle's height; the relation is closed transitively. Lines
    are ordered by their topmost coordinate and words within a line by left
    coordinate, stable on ties. ``line_grouping=False`` falls back to a raw
    (top, left) sort.
    """
    return [words[i] for i in reading_order_permutation(words, line_grouping)]


# ---------------------------------------------------------------------------
# Label generation from field transcripts
# ---------------------------------------------------------------------------

def normalize_text(s: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces."""
    return " ".join(s.lower().split())


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with two rolling rows."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1,
                               previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def assign_labels_from_transcripts(doc: Document, transcripts: dict[str, str],
                                   schema: FieldSchema,
                                   max_edit_ratio: float = 0.2) -> Document:
    """Label words by matching field transcripts against word runs.

    For each field the shortest contiguous run of reading-ordered words
    whose normalized concatenation equals the normalized transcript gets
    the field's label (earliest run on ties). Without an exact match, the
    run with minimum edit distance is used when that distance is at most
    ``max_edit_ratio`` of the transcript length; otherwise the field stays
    unlabeled and a warning reports it. Existing labels are never removed.
    """
    order = reading_order_permutation(list(doc.words))
    texts = [doc.words[i].text for i in order]
    n = len(order)
    extra: dict[int, set[int]] = {}  # keyed by original word index

    for name, transcript in transcripts.items():
        field = schema.index_of(name)
        target = normalize_text(transcript)
        if not target:
            logger.warning("page %s: empty transcript for field %r ignored", doc.page_id, name)
            continue

        exact: tuple[int, int] | None = None  # (length, start)
        best_fuzzy: tuple[int, int, int] | None = None  # (distance, length, start)
        for start in range(n):
            parts = []
            for stop in range(start + 1, n + 1):
                parts.append(texts[stop - 1])
                candidate = normalize_text(" ".join(parts))
                length = stop - start
                if candidate == target:
                    if exact is None or (length, start) < exact:
                        exact = (length, start)
                    break  # longer runs from this start are never shorter matches
                if len(candidate) > 2 * len(target) + 8:
                    break  # run already far too long to be a plausible match
                if exact is None:
                    dist = edit_distance(candidate, target)
                    key = (dist, length, start)
                    if best_fuzzy is None or key < best_fuzzy:
                        best_fuzzy = key

        if exact is not None:
            length, start = exact
        elif best_fuzzy is not None and best_fuzzy[0] <= max_edit_ratio * len(target):
            _, length, start = best_fuzzy
        else:
            logger.warning("page %s: field %r transcript %r matched no word run",
                           doc.page_id, name, transcript)
            continue
        for k in range(start, start + length):
            extra.setdefault(order[k], set()).add(field)

    if not extra:
        return doc
    new_words = []
    for i, w in enumerate(doc.words):
        added = extra.get(i)
        new_words.append(replace(w, labels=w.labels | frozenset(added)) if added else w)
    return Document(image=doc.image, words=tuple(new_words), page_id=doc.page_id)
