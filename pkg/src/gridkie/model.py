"""End-to-end network assembly: one differentiable forward pass per
document, from token windows through the fused feature map to both heads."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, ResNetFPNBackbone, padded_size
from .docmodel import Document, FieldSchema
from .encoder import EncoderConfig, WindowEncoder, encode_windows
from .heads import (AuxHead, PixelPrediction, WordHead, WordPrediction,
                    quads_to_rois, roi_align)
from .textgrid import (Vocab, grid_cell_index_map, select_gradient_windows,
                       slice_windows, token_window_positions, tokenize)

P_FUSE_STRIDE = 4


@dataclass
class DocumentForward:
    """Everything one document forward produces for losses and decoding."""

    word_pred: WordPrediction
    pixel_pred: PixelPrediction
    word_embeddings: torch.Tensor  # (N, d)
    n_windows: int


class KIEModel(nn.Module):
    """Field-type extraction network over OCR'd document pages."""

    def __init__(self, schema: FieldSchema, encoder_cfg: EncoderConfig,
                 backbone_cfg: BackboneConfig, late_fusion: bool = True,
                 vocab: Vocab | None = None):
        super().__init__()
        if vocab is not None and encoder_cfg.vocab_size != len(vocab):
            raise ValueError("encoder vocab_size must match the vocabulary")
        backbone_cfg = replace(backbone_cfg, grid_channels=encoder_cfg.hidden)
        self.schema = schema
        self.vocab = vocab
        self.late_fusion = late_fusion
        self.encoder = WindowEncoder(encoder_cfg)
        self.backbone = ResNetFPNBackbone(backbone_cfg)
        self.word_head = WordHead(backbone_cfg.fpn_channels, encoder_cfg.hidden,
                                  schema.num_fields, late_fusion=late_fusion)
        self.aux_head = AuxHead(backbone_cfg.fpn_channels, schema.num_fields)

    @property
    def num_fields(self) -> int:
        return self.schema.num_fields

    @property
    def param_dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _encode_document(self, doc: Document, grad_window_limit: int | None,
                         rng: np.random.Generator | None) -> tuple[torch.Tensor, int]:
        """Per-word mean embeddings, with optional gradient subsampling of
        windows. All windows contribute values either way."""
        td = tokenize(doc, self.vocab)
        windows = slice_windows(td)
        if grad_window_limit is not None and self.training and len(windows) > grad_window_limit:
            if rng is None:
                rng = np.random.default_rng(0)
            grad_ids, frozen_ids = select_gradient_windows(len(windows), grad_window_limit, rng)
            parts: list[torch.Tensor | None] = [None] * len(windows)
            grad_out = encode_windows(self.encoder, [windows[i] for i in grad_ids])
            with torch.no_grad():
                frozen_out = encode_windows(self.encoder, [windows[i] for i in frozen_ids])
            for row, i in enumerate(grad_ids):
                parts[int(i)] = grad_out[row]
            for row, i in enumerate(frozen_ids):
                parts[int(i)] = frozen_out[row]
            token_embeddings = torch.stack(parts)
        else:
            token_embeddings = encode_windows(self.encoder, windows)

        window_len = token_embeddings.shape[1]
        dim = token_embeddings.shape[2]
        n_words = len(doc.words)
        if n_words == 0:
            return token_embeddings.new_zeros((0, dim)), len(windows)
        win_idx, pos_idx = token_window_positions(td)
        flat = token_embeddings.reshape(-1, dim)
        token_vecs = flat[torch.from_numpy(win_idx * window_len + pos_idx)]
        span_lengths = np.array([stop - start for start, stop in td.word_spans])
        owner = torch.from_numpy(np.repeat(np.arange(n_words), span_lengths))
        sums = token_vecs.new_zeros((n_words, dim)).index_add_(0, owner, token_vecs)
        counts = torch.from_numpy(span_lengths).to(token_vecs.dtype).unsqueeze(1)
        return sums / counts, len(windows)

    def _build_grid(self, doc: Document, word_embeddings: torch.Tensor) -> torch.Tensor | None:
        if not self.backbone.cfg.use_textual:
            return None
        stride = self.backbone.cfg.grid_stride
        ph, pw = padded_size(doc.height, doc.width)
        index = grid_cell_index_map(doc.words, ph, pw, stride)
        index_t = torch.from_numpy(index.astype(np.int64))
        grid = word_embeddings.new_zeros(index.shape + (word_embeddings.shape[1],))
        covered = index_t >= 0
        if bool(covered.any()):
            grid[covered] = word_embeddings[index_t[covered]]
        return grid.permute(2, 0, 1).unsqueeze(0)

    def forward_document(self, doc: Document, grad_window_limit: int | None = None,
                         rng: np.random.Generator | None = None) -> DocumentForward:
        dtype = self.param_dtype
        word_embeddings, n_windows = self._encode_document(doc, grad_window_limit, rng)
        grid = self._build_grid(doc, word_embeddings)
        image = torch.from_numpy(np.ascontiguousarray(doc.image.transpose(2, 0, 1)))
        image = image.to(dtype).unsqueeze(0)
        features = self.backbone(image, grid)
        rois = quads_to_rois([w.quad for w in doc.words], P_FUSE_STRIDE).to(dtype)
        pooled = roi_align(features.p_fuse[0], rois)
        embeddings_in = word_embeddings if self.late_fusion else None
        word_pred = self.word_head(pooled, embeddings_in)
        pixel_pred = self.aux_head(features.p_fuse, (doc.height, doc.width))
        return DocumentForward(word_pred=word_pred, pixel_pred=pixel_pred,
                               word_embeddings=word_embeddings, n_windows=n_windows)

    @torch.no_grad()
    def predict_document(self, doc: Document) -> WordPrediction:
        """Inference-mode word probabilities for an already-resized page."""
        was_training = self.training
        self.eval()
        try:
            return self.forward_document(doc).word_pred
        finally:
            self.train(was_training)
