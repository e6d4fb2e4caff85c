"""Evaluation: task F1, rationale token F1, faithfulness, cue pickup.

Task predictions come from the selected rationale (evaluation-mode hard
mask fed to the predictor), matching how a selector-predictor model is
meant to be used. Sufficiency and comprehensiveness compare the model's
full-input confidence in its own full-input prediction against the
rationale-only and complement-only views. Token F1 is micro-averaged over
all non-PAD positions of gold-annotated documents (per-document macro is
available behind a flag). On synthetic corpora the report also carries the
fraction of planted cue tokens that ended up inside predicted rationales.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as tc
from .corpus import Document
from .encoder import nonpad_positions
from .rationalizer import ModelBundle, predict, select


def _f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def token_f1(
    pred_masks: Sequence[Sequence[int]],
    gold_masks: Sequence[Sequence[int]],
    average: str = "micro",
) -> tuple[float, float, float]:
    """(precision, recall, F1) of per-token rationale membership."""
    if len(pred_masks) != len(gold_masks):
        raise ValueError("token_f1: mask list lengths differ")
    if average == "micro":
        tp = fp = fn = 0
        for pred, gold in zip(pred_masks, gold_masks):
            p = np.asarray(pred, dtype=bool)
            g = np.asarray(gold, dtype=bool)
            if p.shape != g.shape:
                raise ValueError("token_f1: mask pair lengths differ")
            tp += int(np.sum(p & g))
            fp += int(np.sum(p & ~g))
            fn += int(np.sum(~p & g))
        return _f1_from_counts(tp, fp, fn)
    if average == "macro":
        scores = [token_f1([p], [g]) for p, g in zip(pred_masks, gold_masks)]
        arr = np.array(scores) if scores else np.zeros((1, 3))
        return tuple(float(x) for x in arr.mean(axis=0))
    raise ValueError(f"token_f1: unknown average {average!r}")


def weighted_f1(pred_labels: Sequence[int], gold_labels: Sequence[int],
                n_classes: int) -> float:
    """Per-class F1 weighted by gold support."""
    pred = np.asarray(pred_labels)
    gold = np.asarray(gold_labels)
    if pred.shape != gold.shape:
        raise ValueError("weighted_f1: label list lengths differ")
    if gold.size == 0:
        return 0.0
    total = 0.0
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (gold == c)))
        fp = int(np.sum((pred == c) & (gold != c)))
        fn = int(np.sum((pred != c) & (gold == c)))
        _, _, f1 = _f1_from_counts(tp, fp, fn)
        total += f1 * int(np.sum(gold == c))
    return total / gold.size


@dataclass
class EvalReport:
    weighted_f1: float
    token_precision: float
    token_recall: float
    token_f1: float
    selected_fraction: float
    sufficiency: float
    comprehensiveness: float
    support: dict[int, int] = field(default_factory=dict)
    shortcut_inclusion_rate: Optional[float] = None
    n_docs: int = 0

    def to_dict(self) -> dict:
        out = {
            "weighted_f1": self.weighted_f1,
            "token_precision": self.token_precision,
            "token_recall": self.token_recall,
            "token_f1": self.token_f1,
            "selected_fraction": self.selected_fraction,
            "sufficiency": self.sufficiency,
            "comprehensiveness": self.comprehensiveness,
            "support": {str(k): v for k, v in sorted(self.support.items())},
            "shortcut_inclusion_rate": self.shortcut_inclusion_rate,
            "n_docs": self.n_docs,
        }
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")

    def write_csv(self, path: str | Path) -> None:
        flat = self.to_dict()
        supports = flat.pop("support")
        for c, count in supports.items():
            flat[f"support_{c}"] = count
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(flat))
            writer.writeheader()
            writer.writerow(flat)


def suff_comp(bundle: ModelBundle, docs: Iterable[Document],
              top_k: Optional[int] = None) -> tuple[float, float]:
    """Mean sufficiency and comprehensiveness over documents.

    sufficiency = p(y_hat | x) - p(y_hat | rationale only); comprehensiveness
    swaps in the complement view. y_hat is the model's own full-input
    prediction.
    """
    suffs, comps = [], []
    for doc in docs:
        sel = select(bundle, doc.tokens, "eval", top_k=top_k)
        full = predict(bundle, doc.tokens).data
        y_hat = int(full.argmax())
        keep = tc.constant(sel.hard_mask.astype(np.float64))
        rationale_only = predict(bundle, doc.tokens, soft_mask=keep).data
        complement = np.zeros(len(doc.tokens))
        nonpad = nonpad_positions(doc.tokens)
        complement[nonpad] = 1.0 - sel.hard_mask[nonpad]
        complement_only = predict(bundle, doc.tokens,
                                  soft_mask=tc.constant(complement)).data
        suffs.append(full[y_hat] - rationale_only[y_hat])
        comps.append(full[y_hat] - complement_only[y_hat])
    if not suffs:
        return 0.0, 0.0
    return float(np.mean(suffs)), float(np.mean(comps))


def evaluate(
    bundle: ModelBundle,
    docs: Sequence[Document],
    top_k: Optional[int] = None,
    shortcut_ids: Optional[Sequence[int]] = None,
    macro: bool = False,
) -> EvalReport:
    """Full evaluation pass over one corpus split."""
    pred_labels, gold_labels = [], []
    pred_masks, gold_masks = [], []
    fractions = []
    suffs, comps = [], []
    planted_total = planted_selected = 0
    cue_ids = set(int(t) for t in shortcut_ids) if shortcut_ids is not None else None

    for doc in docs:
        sel = select(bundle, doc.tokens, "eval", top_k=top_k)
        nonpad = nonpad_positions(doc.tokens)
        keep = tc.constant(sel.hard_mask.astype(np.float64))
        rationale_probs = predict(bundle, doc.tokens, soft_mask=keep).data
        pred_labels.append(int(rationale_probs.argmax()))
        gold_labels.append(doc.label)
        fractions.append(float(sel.hard_mask[nonpad].mean()))

        full = predict(bundle, doc.tokens).data
        y_hat = int(full.argmax())
        complement = np.zeros(len(doc.tokens))
        complement[nonpad] = 1.0 - sel.hard_mask[nonpad]
        complement_probs = predict(bundle, doc.tokens,
                                   soft_mask=tc.constant(complement)).data
        suffs.append(full[y_hat] - rationale_probs[y_hat])
        comps.append(full[y_hat] - complement_probs[y_hat])

        if doc.gold_mask is not None:
            pred_masks.append(sel.hard_mask[nonpad].tolist())
            gold_masks.append([doc.gold_mask[i] for i in nonpad])
        if cue_ids is not None:
            for pos in nonpad:
                if doc.tokens[pos] in cue_ids:
                    planted_total += 1
                    planted_selected += int(sel.hard_mask[pos])

    n_classes = bundle.n_classes
    precision, recall, f1 = token_f1(pred_masks, gold_masks,
                                     average="macro" if macro else "micro")
    support = {c: int(np.sum(np.asarray(gold_labels) == c)) for c in range(n_classes)}
    rate = planted_selected / planted_total if planted_total else None
    return EvalReport(
        weighted_f1=weighted_f1(pred_labels, gold_labels, n_classes),
        token_precision=precision,
        token_recall=recall,
        token_f1=f1,
        selected_fraction=float(np.mean(fractions)) if fractions else 0.0,
        sufficiency=float(np.mean(suffs)) if suffs else 0.0,
        comprehensiveness=float(np.mean(comps)) if comps else 0.0,
        support=support,
        shortcut_inclusion_rate=rate,
        n_docs=len(docs),
    )
