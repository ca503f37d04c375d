"""Mini BERT-style transformer producing contextual token embeddings for
512-token windows, with a frozen mode for ablations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .textgrid import Window, CHAR_VOCAB_SIZE


class VocabError(ValueError):
    """A token id falls outside the embedding table."""


class NumericError(RuntimeError):
    """A forward pass produced non-finite activations."""


@dataclass
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 256
    ffn_dim: int = 1024
    max_positions: int = 512
    vocab_size: int = CHAR_VOCAB_SIZE
    dropout: float = 0.1
    frozen: bool = False

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.ffn_dim < self.hidden:
            raise ValueError("ffn_dim must be at least hidden")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor,
                attn_sink: list | None = None) -> torch.Tensor:
        batch, length, hidden = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (batch, length, self.heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / self.head_dim ** 0.5
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        if attn_sink is not None:
            attn_sink.append(probs.detach())
        probs = self.dropout(probs)
        merged = (probs @ v).transpose(1, 2).reshape(batch, length, hidden)
        return self.out(merged)


class EncoderBlock(nn.Module):
    """Post-layer-norm transformer block: attention and feed-forward, each
    wrapped in residual + LayerNorm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn = MultiHeadSelfAttention(cfg.hidden, cfg.heads, cfg.dropout)
        self.attn_norm = nn.LayerNorm(cfg.hidden)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.ffn_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_dim, cfg.hidden),
        )
        self.ffn_norm = nn.LayerNorm(cfg.hidden)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask, attn_sink=None):
        x = self.attn_norm(x + self.dropout(self.attn(x, key_mask, attn_sink)))
        x = self.ffn_norm(x + self.dropout(self.ffn(x)))
        return x


class WindowEncoder(nn.Module):
    """Stack of BERT-style blocks over token windows.

    PAD positions are masked out of attention, so real-token outputs are
    independent of trailing padding.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.position_embedding = nn.Embedding(cfg.max_positions, cfg.hidden)
        self.embedding_norm = nn.LayerNorm(cfg.hidden)
        self.dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.layers))
        self.frozen = cfg.frozen
        self.reset_parameters()
        if self.frozen:
            self.freeze()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    nn.init.zeros_(module.bias)

    def freeze(self):
        """Exclude all encoder parameters from future training steps."""
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor,
                attn_sink: list | None = None) -> torch.Tensor:
        if token_ids.numel() and int(token_ids.max()) >= self.cfg.vocab_size:
            raise VocabError(
                f"token id {int(token_ids.max())} >= vocab_size {self.cfg.vocab_size}")
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        x = self.token_embedding(token_ids) + self.position_embedding(positions)[None]
        x = self.dropout(self.embedding_norm(x))
        if not torch.isfinite(x).all():
            raise NumericError("non-finite activations after embedding layer")
        for i, block in enumerate(self.blocks):
            x = block(x, attention_mask, attn_sink)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after encoder block {i}")
        return x


def windows_to_tensors(windows: list[Window], device=None) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.from_numpy(np.stack([w.token_ids for w in windows]))
    mask = torch.from_numpy(np.stack([w.attention_mask for w in windows]))
    if device is not None:
        ids, mask = ids.to(device), mask.to(device)
    return ids, mask


def encode_windows(encoder: WindowEncoder, windows: list[Window],
                   trim: bool = True, attn_sink: list | None = None) -> torch.Tensor:
    """Contextual embeddings for every window, shape (n, window_len, d).

    With ``trim`` the computation runs at the longest real length in the
    batch and PAD rows of the output are zero-filled; masking makes this
    equivalent to encoding at full length.
    """
    ids, mask = windows_to_tensors(windows)
    full_len = ids.shape[1]
    param = next(encoder.parameters(), None)
    if param is not None:
        ids, mask = ids.to(param.device), mask.to(param.device)
    used = full_len
    if trim:
        used = max(w.real_count + 2 for w in windows)
    out = encoder(ids[:, :used], mask[:, :used], attn_sink)
    if used < full_len:
        pad = out.new_zeros(out.shape[0], full_len - used, out.shape[2])
        out = torch.cat([out, pad], dim=1)
    return out


def parameter_checksum(module: nn.Module) -> float:
    """Order-stable scalar fingerprint of all parameters."""
    total = 0.0
    for name, p in sorted(module.named_parameters()):
        total += float(p.detach().double().sum())
    return total
