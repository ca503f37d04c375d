"""Joint training loop: two optimizers over disjoint parameter groups,
warmup plus step decay, multi-scale augmentation, window gradient
subsampling and checkpointing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .docmodel import Document, Word
from .encoder import NumericError
from .heads import (loss_aux, loss_word, per_pixel_stage2_loss,
                    per_word_stage2_loss, total_loss)
from .model import KIEModel
from .sampler import (build_pixel_category_map, hard_word_batches, rng_for_page,
                      sample_pixels, sample_words, word_targets)
from .textgrid import select_gradient_windows  # noqa: F401  (re-exported op)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """A parameter could not be assigned to an optimizer group."""


@dataclass
class TrainConfig:
    epochs: int = 33
    warmup_epochs: int = 1
    optimizer_t: str = "adamw"       # transformer group
    optimizer_v: str = "sgd"         # cnn-and-heads group
    lr_t: float = 2e-5
    lr_v: float = 0.016
    adamw_betas: tuple[float, float] = (0.9, 0.999)
    adamw_eps: float = 1e-8
    adamw_weight_decay: float = 1e-2
    sgd_momentum: float = 0.9
    sgd_weight_decay: float = 5e-4
    lr_v_decay_every: int = 15
    lr_v_decay_factor: float = 10.0
    lambda_aux: float = 1.0
    max_grad_windows: int = 10
    scales: tuple[int, ...] = (320, 416, 512, 608, 704)
    max_long_side: int = 800
    eval_short_side: int = 512
    batch_size: int = 2
    seed: int = 0
    word_counts: tuple[int, int] = (64, 64)
    hard_word_counts: tuple[int, int] = (32, 32)
    pixel_counts: tuple[int, int, int] = (256, 512, 256)
    hard_pixel_counts: tuple[int, int] = (512, 512)
    half_counts: bool = False
    per_field_mean: bool = True
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.lr_t <= 0 or self.lr_v <= 0:
            raise ValueError("learning rates must be positive")
        if tuple(sorted(self.scales)) != tuple(self.scales):
            raise ValueError("scales must be sorted ascending")
        for kind in (self.optimizer_t, self.optimizer_v):
            if kind not in ("adamw", "sgd"):
                raise ValueError(f"unknown optimizer kind {kind!r}")

    def effective_counts(self):
        """Sampling counts, halved for small-document corpora when asked."""
        div = 2 if self.half_counts else 1
        halve = lambda t: tuple(c // div for c in t)
        return (halve(self.word_counts), halve(self.hard_word_counts),
                halve(self.pixel_counts), halve(self.hard_pixel_counts))


@dataclass
class LossReport:
    step: int
    epoch: int
    l1: float
    l2: float
    lc: float
    laux1: float
    laux2: float
    laux: float
    total: float
    lr_t: float
    lr_v: float
    skipped: bool = False
    grads: dict | None = None

    LOG_COLUMNS = ("step", "L1", "L2", "LAUX1", "LAUX2", "Loss", "lr_T", "lr_V")

    def log_row(self) -> tuple:
        return (self.step, self.l1, self.l2, self.laux1, self.laux2,
                self.total, self.lr_t, self.lr_v)


# ---------------------------------------------------------------------------
# Parameter groups and optimizer updates
# ---------------------------------------------------------------------------

def partition_parameters(model: KIEModel) -> tuple[dict, dict]:
    """Split parameters into the transformer group and the cnn-and-heads
    group. The partition must cover every parameter exactly once."""
    transformer, cnn = {}, {}
    for name, p in model.named_parameters():
        if name.startswith("encoder."):
            transformer[name] = p
        elif name.startswith(("backbone.", "word_head.", "aux_head.")):
            cnn[name] = p
        else:
            raise ConfigurationError(f"parameter {name!r} belongs to no optimizer group")
    return transformer, cnn


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


@dataclass
class SgdState:
    momentum_buf: dict = field(default_factory=dict)


def _check_finite_grads(grads: dict) -> None:
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")


@torch.no_grad()
def adamw_step(params: dict, grads: dict, lr: float, state: AdamWState,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2) -> None:
    """Decoupled-weight-decay adaptive update with bias correction.

    Only parameters present in ``grads`` are touched: w -= lr*wd*w, then
    w -= lr * m_hat / (sqrt(v_hat) + eps).
    """
    _check_finite_grads(grads)
    if not grads:
        return
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(p, alpha=lr * weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


@torch.no_grad()
def sgd_step(params: dict, grads: dict, lr: float, state: SgdState,
             momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """Momentum SGD: v = mu*v + (g + wd*w); w -= lr*v."""
    _check_finite_grads(grads)
    for name, g in grads.items():
        p = params[name]
        buf = state.momentum_buf.setdefault(name, torch.zeros_like(p))
        buf.mul_(momentum).add_(g + weight_decay * p)
        p.sub_(buf, alpha=lr)


def optimizer_step(kind: str, params: dict, grads: dict, lr: float, state,
                   cfg: TrainConfig) -> None:
    if kind == "adamw":
        adamw_step(params, grads, lr, state, betas=cfg.adamw_betas,
                   eps=cfg.adamw_eps, weight_decay=cfg.adamw_weight_decay)
    else:
        sgd_step(params, grads, lr, state, momentum=cfg.sgd_momentum,
                 weight_decay=cfg.sgd_weight_decay)


def make_optimizer_state(kind: str):
    return AdamWState() if kind == "adamw" else SgdState()


# ---------------------------------------------------------------------------
# Schedules and augmentation
# ---------------------------------------------------------------------------

def lr_schedule(epoch: int, step_in_epoch: int, steps_per_epoch: int,
                cfg: TrainConfig) -> tuple[float, float]:
    """Learning rates for both groups at a given point in training.

    During warmup both rates rise linearly from 0 to their peaks; after it
    the transformer rate stays constant while the cnn-group rate is divided
    by the decay factor at every decay boundary.
    """
    lr_v = cfg.lr_v / cfg.lr_v_decay_factor ** (epoch // cfg.lr_v_decay_every)
    lr_t = cfg.lr_t
    if epoch < cfg.warmup_epochs and steps_per_epoch > 0:
        fraction = (epoch * steps_per_epoch + step_in_epoch) / (
            cfg.warmup_epochs * steps_per_epoch)
        lr_t *= fraction
        lr_v *= fraction
    return lr_t, lr_v


def resize_document(doc: Document, factor: float) -> Document:
    """Rescale image and quads by the same factor (bilinear resampling)."""
    if factor == 1.0:
        return doc
    new_h = max(1, round(doc.height * factor))
    new_w = max(1, round(doc.width * factor))
    image = torch.from_numpy(np.ascontiguousarray(doc.image.transpose(2, 0, 1)))[None]
    resized = F.interpolate(image, size=(new_h, new_w), mode="bilinear",
                            align_corners=False)
    pixels = resized[0].permute(1, 2, 0).numpy()
    words = tuple(
        Word(text=w.text,
             quad=np.clip(w.quad * factor, [0.0, 0.0], [float(new_w), float(new_h)]),
             labels=w.labels)
        for w in doc.words)
    return Document(image=pixels, words=words, page_id=doc.page_id)


def _capped_factor(doc: Document, short_target: int, max_long: int) -> float:
    short = min(doc.height, doc.width)
    long_side = max(doc.height, doc.width)
    factor = short_target / short
    if long_side * factor > max_long:
        factor = max_long / long_side
    return factor


def multiscale_resize(doc: Document, rng: np.random.Generator,
                      scales=None, max_long_side: int = 800) -> Document:
    """Training augmentation: shorter side to a random scale, longer side
    capped so it never exceeds the maximum."""
    scales = scales or (320, 416, 512, 608, 704)
    target = int(rng.choice(np.asarray(scales)))
    return resize_document(doc, _capped_factor(doc, target, max_long_side))


def resize_for_eval(doc: Document, short_side: int = 512,
                    max_long_side: int = 800) -> Document:
    """Inference resize: fixed shorter side, same long-side cap."""
    return resize_document(doc, _capped_factor(doc, short_side, max_long_side))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the model, both optimizer states and all training counters."""

    def __init__(self, model: KIEModel, cfg: TrainConfig, steps_per_epoch: int,
                 config_text: str = ""):
        self.model = model
        self.cfg = cfg
        self.steps_per_epoch = steps_per_epoch
        self.config_text = config_text
        if cfg.freeze_encoder:
            model.encoder.freeze()
        self.t_params, self.v_params = partition_parameters(model)
        self.t_state = make_optimizer_state(cfg.optimizer_t)
        self.v_state = make_optimizer_state(cfg.optimizer_v)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0

    def _document_losses(self, doc: Document):
        cfg = self.cfg
        counts, hard_counts, pixel_counts, hard_pixel_counts = cfg.effective_counts()
        num_fields = self.model.num_fields
        fwd = self.model.forward_document(doc, grad_window_limit=cfg.max_grad_windows,
                                          rng=self.rng)
        y1_np, y2_np = word_targets(doc, num_fields)
        dtype = self.model.param_dtype
        y1 = torch.from_numpy(y1_np).to(dtype)
        y2 = torch.from_numpy(y2_np).to(dtype)

        page_rng = rng_for_page(cfg.seed, doc.page_id, self.global_step)
        batch1_ids, _ = sample_words(doc, counts, page_rng)
        with torch.no_grad():
            word_rank = per_word_stage2_loss(fwd.word_pred, y2).cpu().numpy()
        batch2_ids = hard_word_batches(word_rank, y1_np, hard_counts)
        l1, l2, lc = loss_word(fwd.word_pred, y1, y2,
                               torch.from_numpy(batch1_ids), torch.from_numpy(batch2_ids),
                               per_field_mean=cfg.per_field_mean)

        pcm = build_pixel_category_map(doc, num_fields)
        masks = torch.from_numpy(pcm.field_masks.astype(np.float64)).to(dtype)
        with torch.no_grad():
            pixel_rank = per_pixel_stage2_loss(fwd.pixel_pred.field_probs, masks).cpu().numpy()
        (coords1, t1), (coords2, t2) = sample_pixels(
            pcm, pixel_counts, hard_pixel_counts, pixel_rank, page_rng)
        laux1, laux2, laux = loss_aux(
            fwd.pixel_pred,
            torch.from_numpy(coords1), torch.from_numpy(t1),
            torch.from_numpy(coords2), torch.from_numpy(t2).to(dtype),
            per_field_mean=cfg.per_field_mean)
        return l1, l2, lc, laux1, laux2, laux

    def train_step(self, docs: list[Document], augment: bool = True,
                   record_grads: bool = False) -> LossReport:
        """One optimization step over a batch of documents.

        Losses are averaged over the batch and a single backward pass feeds
        one update of each optimizer group. A non-finite loss skips the
        update and flags the report.
        """
        cfg = self.cfg
        self.model.train()
        lr_t, lr_v = lr_schedule(self.epoch, self.step_in_epoch, self.steps_per_epoch, cfg)

        terms = []
        for doc in docs:
            if augment:
                doc = multiscale_resize(doc, self.rng, cfg.scales, cfg.max_long_side)
            terms.append(self._document_losses(doc))
        n = len(docs)
        l1, l2, lc, laux1, laux2, laux = (sum(t[i] for t in terms) / n for i in range(6))
        if cfg.lambda_aux == 0.0:
            loss = lc
            laux1, laux2, laux = laux1.detach(), laux2.detach(), laux.detach()
        else:
            loss = total_loss(lc, laux, cfg.lambda_aux)

        report = LossReport(step=self.global_step, epoch=self.epoch,
                            l1=float(l1), l2=float(l2), lc=float(lc),
                            laux1=float(laux1), laux2=float(laux2), laux=float(laux),
                            total=float(loss), lr_t=lr_t, lr_v=lr_v)
        self.global_step += 1
        self.step_in_epoch += 1
        if self.step_in_epoch >= self.steps_per_epoch:
            self.step_in_epoch = 0
            self.epoch += 1

        if not torch.isfinite(loss):
            logger.error("non-finite loss on pages %s; step %d skipped",
                         [d.page_id for d in docs], report.step)
            report.skipped = True
            return report

        self.model.zero_grad(set_to_none=True)
        loss.backward()
        t_grads = {k: p.grad for k, p in self.t_params.items() if p.grad is not None}
        v_grads = {k: p.grad for k, p in self.v_params.items() if p.grad is not None}
        if record_grads:
            report.grads = {
                "transformer": {k: g.detach().clone() for k, g in t_grads.items()},
                "cnn": {k: g.detach().clone() for k, g in v_grads.items()},
            }
        optimizer_step(cfg.optimizer_t, self.t_params, t_grads, lr_t, self.t_state, cfg)
        optimizer_step(cfg.optimizer_v, self.v_params, v_grads, lr_v, self.v_state, cfg)
        return report

    # -- checkpointing ------------------------------------------------------

    def _optimizer_payload(self, state):
        if isinstance(state, AdamWState):
            return {"kind": "adamw", "step": state.step,
                    "exp_avg": state.exp_avg, "exp_avg_sq": state.exp_avg_sq}
        return {"kind": "sgd", "momentum_buf": state.momentum_buf}

    def save_checkpoint(self, path) -> None:
        torch.save({
            "format_version": CHECKPOINT_VERSION,
            "model": self.model.state_dict(),
            "optimizer_t": self._optimizer_payload(self.t_state),
            "optimizer_v": self._optimizer_payload(self.v_state),
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "global_step": self.global_step,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "config_text": self.config_text,
        }, path)

    def restore(self, payload: dict) -> None:
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint format version {payload.get('format_version')} "
                f"not supported (expected {CHECKPOINT_VERSION})")
        self.model.load_state_dict(payload["model"])
        for state, saved in ((self.t_state, payload["optimizer_t"]),
                             (self.v_state, payload["optimizer_v"])):
            if isinstance(state, AdamWState):
                state.step = saved["step"]
                state.exp_avg = saved["exp_avg"]
                state.exp_avg_sq = saved["exp_avg_sq"]
            else:
                state.momentum_buf = saved["momentum_buf"]
        self.epoch = payload["epoch"]
        self.step_in_epoch = payload["step_in_epoch"]
        self.global_step = payload["global_step"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = payload["numpy_rng"]
        torch.set_rng_state(payload["torch_rng"])


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "format_version" not in payload:
        raise ValueError("not a training checkpoint (missing format version)")
    return payload


def fit(trainer: Trainer, documents: list[Document], epochs: int,
        log_fn=None, epoch_end_fn=None, augment: bool = True) -> list[LossReport]:
    """Run epochs of shuffled mini-batches; optional per-step logging and a
    per-epoch callback that may stop training early by returning True."""
    reports = []
    cfg = trainer.cfg
    for _ in range(epochs):
        order = trainer.rng.permutation(len(documents))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [documents[i] for i in order[lo:lo + cfg.batch_size]]
            report = trainer.train_step(batch, augment=augment)
            reports.append(report)
            if log_fn is not None:
                log_fn(report)
        if epoch_end_fn is not None and epoch_end_fn(trainer):
            break
    return reports
