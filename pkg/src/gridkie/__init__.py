"""gridkie: key information extraction from document pages by fusing a
page-aligned grid of contextual word embeddings into a convolutional
backbone, with word-level and pixel-level classification heads trained
jointly under two optimizers."""

__version__ = "0.1.0"

from .docmodel import Document, FieldSchema, Word  # noqa: F401
