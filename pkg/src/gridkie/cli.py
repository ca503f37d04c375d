"""Command-line entry points: synthesize, rasterize, train, evaluate,
predict. Every run writes a manifest before doing any work.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import config as configmod
from .backbone import FUSION_STRIDES
from .config import ConfigError, RunConfig, config_from_text, config_hash, config_to_text
from .docmodel import (OcrParseError, QuadValidationError, SchemaError,
                       load_ocr_document)
from .encoder import EncoderConfig, NumericError, VocabError
from .evalkit import (decode_predictions, extract_field_values, field_level_f1,
                      format_metrics_report, lexicon_autocorrect, word_f1)
from .heads import WordPrediction
from .model import KIEModel
from .report import (append_loss_row, render_field_f1, render_loss_curves,
                     write_metrics_csv)
from .synthgen import GenSpec, LayoutError, generate_dataset, load_dataset
from .textgrid import (AlignmentError, ShapeError, TokenizationError, Vocab,
                       rasterize_bertgrid, write_grid_dump)
from .trainer import (ConfigurationError, Trainer, load_checkpoint,
                      resize_for_eval)

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (OcrParseError, SchemaError, QuadValidationError, TokenizationError,
                AlignmentError, ShapeError, ConfigError, ConfigurationError,
                LayoutError, VocabError, FileNotFoundError, ValueError)


class UsageError(Exception):
    pass


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                       cfg_hash: str, seed: int) -> None:
    """Record what this run is before any real work starts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(getattr(args, "config", "") or ""),
        "seed": seed,
        "out_dir": str(out_dir),
        "config_hash": cfg_hash,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        cfg = config_from_text(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    return _apply_ablation_flags(cfg, args)


def _apply_ablation_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Single-flag switches mirroring the ablation axes."""
    backbone = cfg.backbone
    train = cfg.train
    if getattr(args, "fusion_stage", None):
        stage = args.fusion_stage
        if stage == "none":
            backbone.use_textual = False
        elif stage not in FUSION_STRIDES:
            raise UsageError(f"unknown fusion stage {stage!r}")
        backbone.fusion_stage = stage
    if getattr(args, "no_visual", False):
        backbone.use_visual = False
    if getattr(args, "no_textual", False):
        backbone.use_textual = False
        backbone.fusion_stage = "none"
        cfg.late_fusion = False
    if getattr(args, "no_early_fusion", False):
        backbone.use_textual = False
        backbone.fusion_stage = "none"
    if getattr(args, "no_late_fusion", False):
        cfg.late_fusion = False
    if getattr(args, "freeze_encoder", False):
        train.freeze_encoder = True
    if getattr(args, "lambda_aux", None) is not None:
        train.lambda_aux = args.lambda_aux
    if getattr(args, "optimizer_grid", None):
        try:
            t_part, v_part = args.optimizer_grid.split(",")
            train.optimizer_t, lr_t = t_part.split(":")
            train.optimizer_v, lr_v = v_part.split(":")
            train.lr_t, train.lr_v = float(lr_t), float(lr_v)
        except ValueError as exc:
            raise UsageError(
                "--optimizer-grid expects 'kind:lr,kind:lr' "
                "(e.g. adamw:2e-5,sgd:0.016)") from exc
    if getattr(args, "seed", None) is not None:
        train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        train.epochs = args.epochs
    # Rebuild through the constructors so the invariants re-run.
    cfg.backbone = dataclasses.replace(backbone)
    cfg.train = dataclasses.replace(train)
    return cfg


def build_model(cfg: RunConfig) -> KIEModel:
    torch.manual_seed(cfg.train.seed)
    vocab = None
    encoder_cfg = cfg.encoder
    if cfg.vocab_file:
        vocab = Vocab.from_text(Path(cfg.vocab_file).read_text())
        encoder_cfg = EncoderConfig(**{**encoder_cfg.__dict__, "vocab_size": len(vocab)})
    return KIEModel(cfg.schema(), encoder_cfg, cfg.backbone,
                    late_fusion=cfg.late_fusion, vocab=vocab)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synthesize(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    spec = GenSpec()
    if args.spec:
        spec = configmod.simple_config_from_text(GenSpec, Path(args.spec).read_text())
    if args.seed is not None:
        spec.seed = args.seed
    out_dir = Path(args.out)
    write_run_manifest(out_dir, "synthesize", args,
                       config_hash(configmod.simple_config_to_text(spec)), spec.seed)
    if args.workers > 1:
        # Generation is deterministic per index, so parallel order is safe.
        from .docmodel import document_to_ocr_dict
        from .synthgen import (generate_document, split_for_page, transcripts_for,
                               write_ppm)
        schema = spec.schema()
        for sub in ("ocr", "images", "labels"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)

        def job(index: int) -> str:
            doc = generate_document(spec, index=index)
            write_ppm(doc.image, out_dir / "images" / f"{doc.page_id}.ppm")
            (out_dir / "ocr" / f"{doc.page_id}.json").write_text(
                json.dumps(document_to_ocr_dict(doc, schema), indent=1))
            (out_dir / "labels" / f"{doc.page_id}.json").write_text(
                json.dumps({"page_id": doc.page_id,
                            "fields": transcripts_for(doc, schema)}, indent=1))
            return f"{doc.page_id}\t{split_for_page(doc.page_id)}"

        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            entries = list(pool.map(job, range(args.n)))
        (out_dir / "manifest.txt").write_text("\n".join(entries) + "\n")
    else:
        generate_dataset(spec, args.n, out_dir)
    print(f"wrote {args.n} documents to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    cfg_text = config_to_text(cfg)
    out_dir = Path(args.out)
    write_run_manifest(out_dir, "train", args, config_hash(cfg_text), cfg.train.seed)
    (out_dir / "config.txt").write_text(cfg_text)

    schema = cfg.schema()
    documents, _ = load_dataset(Path(args.data), schema, split="train")
    if not documents:
        raise ValueError(f"no training documents in {args.data}")

    model = build_model(cfg)
    steps_per_epoch = (len(documents) + cfg.train.batch_size - 1) // cfg.train.batch_size
    trainer = Trainer(model, cfg.train, steps_per_epoch, config_text=cfg_text)

    if args.resume:
        payload = load_checkpoint(args.resume)
        old_hash = config_hash(payload["config_text"])
        if old_hash != config_hash(cfg_text):
            diff = configmod.diff_config_texts(payload["config_text"], cfg_text)
            raise ValueError("refusing to resume: config differs from checkpoint:\n  "
                             + "\n  ".join(diff))
        trainer.restore(payload)
        logger.info("resumed from %s at epoch %d step %d", args.resume,
                    trainer.epoch, trainer.global_step)

    log_path = out_dir / "loss_log.tsv"
    start_epoch = trainer.epoch
    for epoch in range(start_epoch, cfg.train.epochs):
        order = trainer.rng.permutation(len(documents))
        for lo in range(0, len(order), cfg.train.batch_size):
            batch = [documents[i] for i in order[lo:lo + cfg.train.batch_size]]
            report = trainer.train_step(batch)
            append_loss_row(report, log_path)
        trainer.save_checkpoint(out_dir / f"ckpt_epoch_{epoch}.pt")
        trainer.save_checkpoint(out_dir / "ckpt_latest.pt")
        print(f"epoch {epoch}: loss {report.total:.4f} lr_T {report.lr_t:.2e} "
              f"lr_V {report.lr_v:.2e}")
    render_loss_curves(log_path, out_dir / "loss_curves.png")
    return 0


def _predict_words(model: KIEModel, cfg: RunConfig, doc) -> WordPrediction:
    resized = resize_for_eval(doc, cfg.train.eval_short_side, cfg.train.max_long_side)
    return model.predict_document(resized)


def cmd_evaluate(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    cfg = config_from_text(payload["config_text"])
    out_dir = Path(args.out)
    write_run_manifest(out_dir, "evaluate", args, config_hash(payload["config_text"]),
                       cfg.train.seed)
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    schema = cfg.schema()

    documents, transcripts = load_dataset(Path(args.data), schema, split=args.split)
    if not documents:
        raise ValueError(f"no documents in split {args.split!r} of {args.data}")

    lexicons: dict[str, set[str]] = {}
    if args.autocorrect:
        _, train_transcripts = load_dataset(Path(args.data), schema, split="train")
        for fields in train_transcripts.values():
            for name, value in fields.items():
                lexicons.setdefault(name, set()).add(value)

    all_preds, all_gt = [], []
    extracted_docs, gt_docs = [], []
    for doc in documents:
        pred = _predict_words(model, cfg, doc)
        decoded = decode_predictions(pred.o1.numpy(), pred.o2.numpy(), cfg.tau1, cfg.tau2)
        all_preds.extend(decoded)
        all_gt.extend(w.labels for w in doc.words)
        extracted = extract_field_values(doc, decoded, schema)
        if lexicons:
            extracted = {name: lexicon_autocorrect(value, lexicons.get(name, set()))
                         for name, value in extracted.items()}
        extracted_docs.append(extracted)
        gt_docs.append(transcripts.get(doc.page_id, {}))

    report = word_f1(all_preds, all_gt, schema)
    report.field_level_f1 = field_level_f1(extracted_docs, gt_docs)
    (out_dir / "metrics.txt").write_text(format_metrics_report(report))
    write_metrics_csv(report, out_dir / "metrics.tsv")
    render_field_f1(report, out_dir / "field_f1.png")
    print(format_metrics_report(report), end="")
    return 0


def cmd_predict(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    cfg = config_from_text(payload["config_text"])
    out_dir = Path(args.out)
    write_run_manifest(out_dir, "predict", args, config_hash(payload["config_text"]),
                       cfg.train.seed)
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    schema = cfg.schema()

    doc = load_ocr_document(Path(args.ocr).read_bytes(), Path(args.image).read_bytes())
    pred = _predict_words(model, cfg, doc)
    decoded = decode_predictions(pred.o1.numpy(), pred.o2.numpy(), cfg.tau1, cfg.tau2)

    lines = ["\t".join(["index", "text", "o1"]
                       + [f"o2_{name}" for name in schema.field_names] + ["labels"])]
    for i, word in enumerate(doc.words):
        cells = [str(i), word.text, f"{float(pred.o1[i]):.6f}"]
        cells += [f"{float(pred.o2[i, k]):.6f}" for k in range(schema.num_fields)]
        cells.append(";".join(sorted(schema.field_names[k] for k in decoded[i])))
        lines.append("\t".join(cells))
    (out_dir / "predictions.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote predictions for {len(doc.words)} words to {out_dir / 'predictions.tsv'}")
    return 0


def _pseudo_embedding(text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    return rng.standard_normal(dim)


def cmd_rasterize(args) -> int:
    doc = load_ocr_document(Path(args.ocr).read_bytes(), Path(args.image).read_bytes())
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        payload = load_checkpoint(args.checkpoint)
        cfg = config_from_text(payload["config_text"])
        model = build_model(cfg)
        model.load_state_dict(payload["model"])
        model.eval()
        with torch.no_grad():
            embeddings, _ = model._encode_document(doc, None, None)
        embeddings = embeddings.numpy()
    else:
        embeddings = np.stack([_pseudo_embedding(w.text, args.dim) for w in doc.words]) \
            if doc.words else np.zeros((0, args.dim))
    grid = rasterize_bertgrid(list(doc.words), embeddings, doc.height, doc.width,
                              args.stride)
    with open(out_path, "wb") as fp:
        write_grid_dump(grid, fp)
    rows, cols, dim = grid.values.shape
    print(f"wrote {rows}x{cols}x{dim} grid (stride {args.stride}) to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridkie",
        description="Key information extraction with fused text/image grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate a synthetic labeled dataset")
    p.add_argument("--spec", help="generator config file (key = value lines)")
    p.add_argument("--n", type=int, required=True, help="number of documents")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.add_argument("--workers", type=int, default=1, help="parallel generation workers")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="run config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--fusion-stage", dest="fusion_stage",
                   choices=[*FUSION_STRIDES, "none"], help="early-fusion stage")
    p.add_argument("--no-visual", dest="no_visual", action="store_true",
                   help="zero out the image input")
    p.add_argument("--no-textual", dest="no_textual", action="store_true",
                   help="drop the text modality entirely")
    p.add_argument("--no-early-fusion", dest="no_early_fusion", action="store_true",
                   help="disable the grid concat (late fusion only)")
    p.add_argument("--no-late-fusion", dest="no_late_fusion", action="store_true",
                   help="disable the embedding skip connection")
    p.add_argument("--freeze-encoder", dest="freeze_encoder", action="store_true",
                   help="keep transformer parameters fixed")
    p.add_argument("--lambda", dest="lambda_aux", type=float,
                   help="auxiliary loss weight")
    p.add_argument("--optimizer-grid", dest="optimizer_grid",
                   help="optimizer grid cell as 'kind:lr,kind:lr' (transformer,cnn)")
    p.add_argument("--workers", type=int, default=1, help="data loading workers (reserved)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--autocorrect", action="store_true",
                   help="snap extracted values onto the training lexicon")
    p.add_argument("--workers", type=int, default=1, help="data loading workers (reserved)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-word predictions for one page")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ocr", required=True, help="OCR JSON file")
    p.add_argument("--image", required=True, help="page image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("rasterize", help="dump the word-embedding grid of one page")
    p.add_argument("--ocr", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--dim", type=int, default=16,
                   help="pseudo-embedding size when no checkpoint is given")
    p.add_argument("--checkpoint", help="use a trained encoder for embeddings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
