import io

import numpy as np
import pytest

from gridkie.backbone import BackboneConfig
from gridkie.docmodel import Document, FieldSchema, Word
from gridkie.encoder import EncoderConfig


def make_word(text, x0, y0, x1, y1, labels=()):
    quad = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    return Word(text=text, quad=quad, labels=frozenset(labels))


def make_doc(words, height=64, width=64, page_id="test-page"):
    image = np.ones((height, width, 3), dtype=np.float32)
    return Document(image=image, words=tuple(words), page_id=page_id)


def ppm_bytes(image):
    """P6 bytes for an HxWx3 float image in [0, 1]."""
    h, w = image.shape[:2]
    data = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    buf.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
    buf.write(data.tobytes())
    return buf.getvalue()


@pytest.fixture
def schema4():
    return FieldSchema(field_names=("TOTAL", "DATE", "COMPANY", "ADDRESS"))


def tiny_encoder_config(**overrides):
    base = dict(layers=2, heads=2, hidden=16, ffn_dim=32, dropout=0.0)
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_backbone_config(**overrides):
    base = dict(width_multiplier=0.0625, fusion_stage="C3", grid_channels=16)
    base.update(overrides)
    return BackboneConfig(**base)


def random_trapezoid(rng, width, height, quarter=True):
    """Convex quad with quarter-integer coordinates (exact float arithmetic)."""
    step = 4 if quarter else 1
    x0 = rng.integers(0, max(1, (width - 8) * step)) / step
    y0 = rng.integers(0, max(1, (height - 8) * step)) / step
    w = rng.integers(2 * step, 8 * step) / step
    h = rng.integers(2 * step, 8 * step) / step
    x1 = min(x0 + w, width)
    y1 = min(y0 + h, height)
    shear = rng.integers(-6, 7) / step
    top_x0 = np.clip(x0 + shear, 0, width)
    top_x1 = np.clip(x1 + shear, 0, width)
    if top_x1 - top_x0 < 0.5:  # keep the top edge non-degenerate
        top_x0, top_x1 = x0, x1
    return np.array([[top_x0, y0], [top_x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
