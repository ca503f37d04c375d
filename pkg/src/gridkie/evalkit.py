"""Prediction decoding, word-level micro/macro F1, field-level exact-match
F1 and lexicon autocorrection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .docmodel import Document, FieldSchema, edit_distance, reading_order_permutation


@dataclass
class FieldScore:
    name: str
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class MetricsReport:
    per_field: list[FieldScore]
    micro_f1: float
    macro_f1: float
    field_level_f1: float | None = None


def decode_predictions(o1, o2, tau1: float = 0.5, tau2: float = 0.5) -> list[frozenset[int]]:
    """Field sets per word: {k : o1 >= tau1 and o2[k] >= tau2}.

    Words pruned by the first stage get the empty set; multiple fields per
    word are allowed.
    """
    o1 = np.asarray(o1, dtype=np.float64)
    o2 = np.asarray(o2, dtype=np.float64)
    out = []
    for i in range(len(o1)):
        if o1[i] >= tau1:
            out.append(frozenset(np.nonzero(o2[i] >= tau2)[0].tolist()))
        else:
            out.append(frozenset())
    return out


def word_f1(predictions: list[frozenset[int]], ground_truth: list[frozenset[int]],
            schema: FieldSchema) -> MetricsReport:
    """Per-field precision/recall/F1 plus corpus-pooled micro and
    unweighted macro aggregates."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must cover the same words")
    scores = []
    for k, name in enumerate(schema.field_names):
        tp = sum(1 for p, g in zip(predictions, ground_truth) if k in p and k in g)
        fp = sum(1 for p, g in zip(predictions, ground_truth) if k in p and k not in g)
        fn = sum(1 for p, g in zip(predictions, ground_truth) if k not in p and k in g)
        scores.append(FieldScore(name=name, tp=tp, fp=fp, fn=fn))
    pooled = FieldScore(name="micro", tp=sum(s.tp for s in scores),
                        fp=sum(s.fp for s in scores), fn=sum(s.fn for s in scores))
    macro = sum(s.f1 for s in scores) / len(scores)
    return MetricsReport(per_field=scores, micro_f1=pooled.f1, macro_f1=macro)


def extract_field_values(doc: Document, predictions: list[frozenset[int]],
                         schema: FieldSchema) -> dict[str, str]:
    """Space-joined text of each field's predicted words, in reading order."""
    values: dict[str, list[str]] = {}
    for i in reading_order_permutation(list(doc.words)):
        for k in predictions[i]:
            values.setdefault(schema.field_names[k], []).append(doc.words[i].text)
    return {name: " ".join(parts) for name, parts in values.items()}


def field_level_f1(extracted: list[dict[str, str]], ground_truth: list[dict[str, str]]) -> float:
    """Exact-string-match F1 over all (document, field) pairs.

    A field counts as TP only when the extracted string equals the ground
    truth exactly; predictions for absent fields are FP, missed or wrong
    fields are FN.
    """
    tp = fp = fn = 0
    for pred, gt in zip(extracted, ground_truth):
        for name in set(pred) | set(gt):
            if name in pred and name in gt and pred[name] == gt[name]:
                tp += 1
            else:
                if name in pred:
                    fp += 1
                if name in gt:
                    fn += 1
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def lexicon_autocorrect(value: str, lexicon: set[str],
                        max_ratio: float = 0.15) -> str:
    """Snap a value onto the nearest lexicon entry when it is close enough.

    Replacement happens only when the value is absent from the lexicon and
    the nearest entry's edit distance is within ``max_ratio`` of the
    value's length; ties pick the lexicographically smallest entry.
    """
    if not lexicon or value in lexicon:
        return value
    best = min(lexicon, key=lambda entry: (edit_distance(value, entry), entry))
    if edit_distance(value, best) <= max_ratio * len(value):
        return best
    return value


def format_metrics_report(report: MetricsReport) -> str:
    """Human-readable per-field table plus the aggregate rows."""
    width = max([len("Field")] + [len(s.name) for s in report.per_field])
    lines = [f"{'Field':<{width}}  {'Precision':>9}  {'Recall':>9}  {'F1':>9}"]
    for s in report.per_field:
        lines.append(f"{s.name:<{width}}  {s.precision:>9.4f}  {s.recall:>9.4f}  {s.f1:>9.4f}")
    lines.append(f"{'Micro F1':<{width}}  {'':>9}  {'':>9}  {report.micro_f1:>9.4f}")
    lines.append(f"{'Macro F1':<{width}}  {'':>9}  {'':>9}  {report.macro_f1:>9.4f}")
    if report.field_level_f1 is not None:
        lines.append(f"{'Field-level F1':<{width}}  {'':>9}  {'':>9}  "
                     f"{report.field_level_f1:>9.4f}")
    return "\n".join(lines) + "\n"
