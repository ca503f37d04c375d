import numpy as np
import pytest
import torch

from gridkie.encoder import (EncoderConfig, NumericError, VocabError,
                             WindowEncoder, encode_windows, parameter_checksum)
from gridkie.textgrid import TokenizedDocument, slice_windows

from conftest import tiny_encoder_config


def windows_for(tokens):
    td = TokenizedDocument(tokens=tuple(tokens), word_spans=((0, len(tokens)),),
                           vocab_size=300)
    return slice_windows(td)


def ids_mask(windows):
    ids = torch.from_numpy(np.stack([w.token_ids for w in windows]))
    mask = torch.from_numpy(np.stack([w.attention_mask for w in windows]))
    return ids, mask


class TestForward:
    def test_zero_layers_is_normed_embedding_sum(self):
        torch.manual_seed(0)
        enc = WindowEncoder(tiny_encoder_config(layers=0))
        windows = windows_for([10, 11, 12])
        ids, mask = ids_mask(windows)
        out = enc(ids, mask)
        reference = enc.embedding_norm(
            enc.token_embedding(ids)
            + enc.position_embedding(torch.arange(ids.shape[1]))[None])
        torch.testing.assert_close(out, reference)

    def test_deterministic_with_dropout_off(self):
        torch.manual_seed(0)
        enc = WindowEncoder(tiny_encoder_config())
        enc.eval()
        windows = windows_for(list(range(10, 40)))
        a = encode_windows(enc, windows)
        b = encode_windows(enc, windows)
        torch.testing.assert_close(a, b)

    def test_pad_invariance(self):
        # Trimmed computation (no trailing PAD) must match the full-length
        # computation on every real-token row.
        torch.manual_seed(1)
        enc = WindowEncoder(tiny_encoder_config())
        enc.eval()
        windows = windows_for(list(range(10, 25)))
        trimmed = encode_windows(enc, windows, trim=True)
        full = encode_windows(enc, windows, trim=False)
        real = windows[0].real_count + 2
        assert (trimmed[:, real:] == 0).all()
        assert (full[0, :real] - trimmed[0, :real]).abs().max() <= 1e-5

    def test_attention_rows_sum_to_one_and_ignore_pad(self):
        torch.manual_seed(2)
        enc = WindowEncoder(tiny_encoder_config())
        enc.eval()
        windows = windows_for(list(range(10, 20)))
        sink = []
        encode_windows(enc, windows, trim=False, attn_sink=sink)
        assert len(sink) == enc.cfg.layers
        real = windows[0].real_count + 2
        for probs in sink:  # (batch, heads, T, T)
            torch.testing.assert_close(probs.sum(dim=-1),
                                       torch.ones_like(probs.sum(dim=-1)))
            assert probs[..., real:].abs().max() == 0.0  # no mass on PAD keys

    def test_vocab_error(self):
        enc = WindowEncoder(tiny_encoder_config(vocab_size=50))
        windows = windows_for([49, 50])
        ids, mask = ids_mask(windows)
        with pytest.raises(VocabError):
            enc(ids, mask)

    def test_numeric_error_names_layer(self):
        torch.manual_seed(0)
        enc = WindowEncoder(tiny_encoder_config())
        enc.eval()
        with torch.no_grad():
            enc.blocks[1].ffn[0].weight.fill_(float("inf"))
        windows = windows_for([10, 11])
        ids, mask = ids_mask(windows)
        with pytest.raises(NumericError, match="block 1"):
            enc(ids, mask)


class TestGradients:
    def test_weight_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        enc = WindowEncoder(tiny_encoder_config()).double()
        enc.eval()
        windows = windows_for(list(range(10, 22)))
        ids, mask = ids_mask(windows)

        # A plain sum is blind to LayerNorm outputs at init (standardized
        # rows sum to zero when every gamma is 1), so project randomly.
        probe = torch.randn(enc.cfg.hidden, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(9))

        def objective():
            return (enc(ids, mask)[mask] @ probe).sum()

        loss = objective()
        loss.backward()

        h = 1e-5
        checked = 0
        for name, p in enc.named_parameters():
            if p.grad is None or p.numel() == 0:
                continue
            # Check the entry with the largest gradient so the relative
            # error is meaningful (unused embedding rows have zero grads).
            flat_index = int(p.grad.abs().view(-1).argmax())
            with torch.no_grad():
                original = p.view(-1)[flat_index].item()
                p.view(-1)[flat_index] = original + h
                plus = objective().item()
                p.view(-1)[flat_index] = original - h
                minus = objective().item()
                p.view(-1)[flat_index] = original
            numeric = (plus - minus) / (2 * h)
            analytic = p.grad.view(-1)[flat_index].item()
            scale = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / scale <= 1e-4, (name, numeric, analytic)
            checked += 1
        assert checked >= 10


class TestFreeze:
    def test_frozen_checksum_constant(self):
        torch.manual_seed(4)
        enc = WindowEncoder(tiny_encoder_config())
        enc.freeze()
        before = parameter_checksum(enc)
        windows = windows_for([10, 11, 12])
        out = encode_windows(enc, windows)
        assert not out.requires_grad
        # Nothing to step; parameters cannot move without gradients.
        assert parameter_checksum(enc) == before

    def test_unfrozen_parameters_move_under_a_step(self):
        torch.manual_seed(4)
        enc = WindowEncoder(tiny_encoder_config())
        before = parameter_checksum(enc)
        windows = windows_for([10, 11, 12])
        out = encode_windows(enc, windows)
        out.sum().backward()
        with torch.no_grad():
            for p in enc.parameters():
                if p.grad is not None:
                    p -= 0.01 * p.grad
        assert parameter_checksum(enc) != before
