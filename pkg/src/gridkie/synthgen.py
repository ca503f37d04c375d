"""Deterministic synthetic receipt generator: rendered pages, OCR words
with tight quads, field labels and train/test manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .docmodel import (Document, FieldSchema, Word, document_to_ocr_dict,
                       reading_order_sort)

GLYPH_HEIGHT = 7
GLYPH_WIDTH = 5

# Classic 5x7 dot-matrix glyphs; 'X' marks an inked pixel.
_RAW_FONT = {
    "A": ".XXX.|X...X|X...X|XXXXX|X...X|X...X|X...X",
    "B": "XXXX.|X...X|X...X|XXXX.|X...X|X...X|XXXX.",
    "C": ".XXX.|X...X|X....|X....|X....|X...X|.XXX.",
    "D": "XXXX.|X...X|X...X|X...X|X...X|X...X|XXXX.",
    "E": "XXXXX|X....|X....|XXXX.|X....|X....|XXXXX",
    "F": "XXXXX|X....|X....|XXXX.|X....|X....|X....",
    "G": ".XXX.|X...X|X....|X.XXX|X...X|X...X|.XXX.",
    "H": "X...X|X...X|X...X|XXXXX|X...X|X...X|X...X",
    "I": "XXXXX|..X..|..X..|..X..|..X..|..X..|XXXXX",
    "J": "..XXX|...X.|...X.|...X.|...X.|X..X.|.XX..",
    "K": "X...X|X..X.|X.X..|XX...|X.X..|X..X.|X...X",
    "L": "X....|X....|X....|X....|X....|X....|XXXXX",
    "M": "X...X|XX.XX|X.X.X|X.X.X|X...X|X...X|X...X",
    "N": "X...X|XX..X|X.X.X|X..XX|X...X|X...X|X...X",
    "O": ".XXX.|X...X|X...X|X...X|X...X|X...X|.XXX.",
    "P": "XXXX.|X...X|X...X|XXXX.|X....|X....|X....",
    "Q": ".XXX.|X...X|X...X|X...X|X.X.X|X..X.|.XX.X",
    "R": "XXXX.|X...X|X...X|XXXX.|X.X..|X..X.|X...X",
    "S": ".XXXX|X....|X....|.XXX.|....X|....X|XXXX.",
    "T": "XXXXX|..X..|..X..|..X..|..X..|..X..|..X..",
    "U": "X...X|X...X|X...X|X...X|X...X|X...X|.XXX.",
    "V": "X...X|X...X|X...X|X...X|X...X|.X.X.|..X..",
    "W": "X...X|X...X|X...X|X.X.X|X.X.X|XX.XX|X...X",
    "X": "X...X|X...X|.X.X.|..X..|.X.X.|X...X|X...X",
    "Y": "X...X|X...X|.X.X.|..X..|..X..|..X..|..X..",
    "Z": "XXXXX|....X|...X.|..X..|.X...|X....|XXXXX",
    "0": ".XXX.|X...X|X..XX|X.X.X|XX..X|X...X|.XXX.",
    "1": "..X..|.XX..|..X..|..X..|..X..|..X..|XXXXX",
    "2": ".XXX.|X...X|....X|...X.|..X..|.X...|XXXXX",
    "3": "XXXXX|...X.|..X..|...X.|....X|X...X|.XXX.",
    "4": "...X.|..XX.|.X.X.|X..X.|XXXXX|...X.|...X.",
    "5": "XXXXX|X....|XXXX.|....X|....X|X...X|.XXX.",
    "6": "..XX.|.X...|X....|XXXX.|X...X|X...X|.XXX.",
    "7": "XXXXX|....X|...X.|..X..|.X...|.X...|.X...",
    "8": ".XXX.|X...X|X...X|.XXX.|X...X|X...X|.XXX.",
    "9": ".XXX.|X...X|X...X|.XXXX|....X|...X.|.XX..",
    ".": ".....|.....|.....|.....|.....|.XX..|.XX..",
    ",": ".....|.....|.....|.....|.XX..|..X..|.X...",
    ":": ".....|.XX..|.XX..|.....|.XX..|.XX..|.....",
    "-": ".....|.....|.....|XXXXX|.....|.....|.....",
    "$": "..X..|.XXXX|X.X..|.XXX.|..X.X|XXXX.|..X..",
    "/": "....X|....X|...X.|..X..|.X...|X....|X....",
    "#": ".X.X.|.X.X.|XXXXX|.X.X.|XXXXX|.X.X.|.X.X.",
    "%": "XX..X|XX..X|...X.|..X..|.X...|X..XX|X..XX",
    "&": ".XX..|X..X.|X.X..|.X...|X.X.X|X..X.|.XX.X",
}

FONT = {
    ch: np.array([[c == "X" for c in row] for row in rows.split("|")], dtype=bool)
    for ch, rows in _RAW_FONT.items()
}


class LayoutError(RuntimeError):
    """The page could not accommodate its content after retries."""


@dataclass
class GenSpec:
    """Knobs for the synthetic corpus."""

    width_range: tuple[int, int] = (176, 224)
    height_range: tuple[int, int] = (224, 288)
    fields: tuple[str, ...] = ("TOTAL", "DATE", "COMPANY", "ADDRESS")
    templates: int = 4
    glyph_scale: int = 1
    pixel_noise: float = 0.02
    box_jitter: float = 0.0
    field_probability: float = 0.95
    min_distractor_lines: int = 2
    max_distractor_lines: int = 4
    seed: int = 0

    def schema(self) -> FieldSchema:
        return FieldSchema(field_names=tuple(self.fields))


_COMPANY_NAMES = ("ACME", "NOVA", "DELTA", "ORION", "KODA", "LUMEN", "VERTEX", "ZENITH")
_COMPANY_SUFFIX = ("LTD", "INC", "CO", "CORP")
_STREETS = ("MAIN", "OAK", "HIGH", "PARK", "LAKE", "HILL", "ELM", "CEDAR")
_STREET_SUFFIX = ("ST", "RD", "AVE", "LN")
_DISTRACTORS = (
    "THANK YOU", "CASHIER #3", "ITEM 2 X 1.50", "CASH ONLY", "CHANGE 0.66",
    "RECEIPT COPY", "TAX 5%", "VISIT AGAIN", "SERVED BY ANN", "TILL 7",
    "CARD PAYMENT", "REF 48213",
)


def word_width(text: str, scale: int) -> int:
    return len(text) * (GLYPH_WIDTH + 1) * scale - scale


def render_word(canvas: np.ndarray, text: str, x: int, y: int, scale: int) -> None:
    """Stamp glyph blocks onto the page; unknown characters are an error."""
    cx = x
    for ch in text:
        glyph = FONT.get(ch)
        if glyph is None:
            raise ValueError(f"no glyph for character {ch!r}")
        block = np.kron(glyph, np.ones((scale, scale), dtype=bool))
        h, w = block.shape
        canvas[y:y + h, cx:cx + w][block] = 0.0
        cx += (GLYPH_WIDTH + 1) * scale


def _field_value(field: str, rng: np.random.Generator) -> str:
    if field == "TOTAL":
        return f"${rng.integers(1, 100)}.{rng.integers(0, 100):02d}"
    if field == "DATE":
        return f"{rng.integers(2015, 2026)}-{rng.integers(1, 13):02d}-{rng.integers(1, 29):02d}"
    if field == "COMPANY":
        name = rng.choice(_COMPANY_NAMES)
        return f"{name} {rng.choice(_COMPANY_SUFFIX)}"
    if field == "ADDRESS":
        return f"{rng.integers(1, 100)} {rng.choice(_STREETS)} {rng.choice(_STREET_SUFFIX)}"
    # Unknown schema fields get a generic alphanumeric code.
    return f"{rng.choice(_COMPANY_NAMES)}{rng.integers(10, 100)}"


def _compose_lines(spec: GenSpec, rng: np.random.Generator):
    """Plan the page content: (words, field-or-None per word) rows."""
    lines: list[list[tuple[str, str | None]]] = []
    field_order = list(spec.fields)
    rng.shuffle(field_order)
    for field in field_order:
        if rng.random() >= spec.field_probability:
            continue
        row: list[tuple[str, str | None]] = [(f"{field}:", None)]
        row += [(token, field) for token in _field_value(field, rng).split()]
        lines.append(row)
    n_distract = int(rng.integers(spec.min_distractor_lines, spec.max_distractor_lines + 1))
    picks = rng.choice(len(_DISTRACTORS), size=n_distract, replace=False)
    for p in picks:
        lines.append([(token, None) for token in _DISTRACTORS[p].split()])
    rng.shuffle(lines)
    return lines


def generate_document(spec: GenSpec, rng: np.random.Generator | None = None,
                      index: int = 0) -> Document:
    """Render one deterministic page with ground-truth labels on the words.

    The layout (margins, spacing, jitter) follows one of ``spec.templates``
    style presets; layout overflow retries on a larger page and raises
    after 10 attempts.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    schema = spec.schema()
    scale = spec.glyph_scale
    lines = _compose_lines(spec, rng)

    width = int(rng.integers(spec.width_range[0], spec.width_range[1] + 1))
    height = int(rng.integers(spec.height_range[0], spec.height_range[1] + 1))
    template = int(rng.integers(0, spec.templates))
    margin = 4 + 2 * (template % 2)
    gap = 4 + template
    space = (3 + (template // 2)) * scale

    for attempt in range(10):
        canvas = np.ones((height, width), dtype=np.float32)
        words: list[Word] = []
        y = margin
        overflow = False
        for row in lines:
            if y + GLYPH_HEIGHT * scale > height - margin:
                overflow = True
                break
            x = margin + int(rng.integers(0, 5))
            row_width = sum(word_width(t, scale) for t, _ in row) + space * (len(row) - 1)
            if x + row_width > width - margin:
                overflow = True
                break
            for text, field in row:
                w = word_width(text, scale)
                h = GLYPH_HEIGHT * scale
                render_word(canvas, text, x, y, scale)
                quad = np.array([[x, y], [x + w, y], [x + w, y + h], [x, y + h]],
                                dtype=np.float64)
                if spec.box_jitter > 0:
                    quad += rng.uniform(-spec.box_jitter, spec.box_jitter, size=(4, 2))
                    quad = np.clip(quad, [0, 0], [width, height])
                labels = frozenset({schema.index_of(field)}) if field else frozenset()
                words.append(Word(text=text, quad=quad, labels=labels))
                x += w + space
            y += GLYPH_HEIGHT * scale + gap
        if not overflow:
            break
        width = int(width * 1.2)
        height = int(height * 1.2)
    else:
        raise LayoutError(f"page layout failed after 10 attempts (document {index})")

    if spec.pixel_noise > 0:
        canvas = np.clip(canvas + rng.normal(0.0, spec.pixel_noise,
                                             size=canvas.shape).astype(np.float32), 0.0, 1.0)
    image = np.repeat(canvas[:, :, None], 3, axis=2)
    return Document(image=image, words=tuple(words),
                    page_id=f"page-{spec.seed}-{index:05d}")


def transcripts_for(doc: Document, schema: FieldSchema) -> dict[str, str]:
    """Field value strings: each field's labeled words joined in reading order."""
    ordered = reading_order_sort(list(doc.words))
    values: dict[str, list[str]] = {}
    for word in ordered:
        for k in word.labels:
            values.setdefault(schema.field_names[k], []).append(word.text)
    return {name: " ".join(parts) for name, parts in values.items()}


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def write_ppm(image: np.ndarray, path: Path) -> None:
    """Binary portable pixel-map (P6) with 8-bit channels."""
    h, w = image.shape[:2]
    data = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fp:
        fp.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fp.write(data.tobytes())


def split_for_page(page_id: str) -> str:
    """Stable 80/20 split decided by the page id alone."""
    digest = hashlib.sha256(page_id.encode("utf-8")).digest()
    return "test" if int.from_bytes(digest[:4], "big") % 5 == 0 else "train"


def generate_dataset(spec: GenSpec, n: int, out_dir: Path) -> Path:
    """Write n documents (OCR JSON, PPM image, labels file) plus a manifest.

    The manifest lists ``page_id<TAB>split`` in generation order; the split
    is a pure function of the page id.
    """
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    out_dir = Path(out_dir)
    schema = spec.schema()
    for sub in ("ocr", "images", "labels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(n):
        doc = generate_document(spec, index=index)
        write_ppm(doc.image, out_dir / "images" / f"{doc.page_id}.ppm")
        with open(out_dir / "ocr" / f"{doc.page_id}.json", "w") as fp:
            json.dump(document_to_ocr_dict(doc, schema), fp, indent=1)
        with open(out_dir / "labels" / f"{doc.page_id}.json", "w") as fp:
            json.dump({"page_id": doc.page_id, "fields": transcripts_for(doc, schema)}, fp,
                      indent=1)
        entries.append(f"{doc.page_id}\t{split_for_page(doc.page_id)}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(entries) + "\n")
    return manifest


def read_manifest(data_dir: Path) -> list[tuple[str, str]]:
    rows = []
    for line in (Path(data_dir) / "manifest.txt").read_text().splitlines():
        if line.strip():
            page_id, split = line.split("\t")
            rows.append((page_id, split))
    return rows


def load_dataset(data_dir: Path, schema: FieldSchema,
                 split: str | None = None) -> tuple[list[Document], dict[str, dict[str, str]]]:
    """Load the documents of one split plus their field transcripts."""
    from .docmodel import load_ocr_document

    data_dir = Path(data_dir)
    documents, transcripts = [], {}
    for page_id, page_split in read_manifest(data_dir):
        if split is not None and page_split != split:
            continue
        ocr_bytes = (data_dir / "ocr" / f"{page_id}.json").read_bytes()
        image_bytes = (data_dir / "images" / f"{page_id}.ppm").read_bytes()
        documents.append(load_ocr_document(ocr_bytes, image_bytes, schema))
        labels_path = data_dir / "labels" / f"{page_id}.json"
        if labels_path.exists():
            transcripts[page_id] = json.loads(labels_path.read_text())["fields"]
    return documents, transcripts
