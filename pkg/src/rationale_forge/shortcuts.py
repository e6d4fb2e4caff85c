"""Shortcut discovery and the two mitigation strategies.

A potential shortcut token is one a trained unsupervised rationalizer
selects even though it is absent from the gold rationale; maximal runs of
three or more such tokens form a shortcut span. Discovery runs offline,
once, over the labeled split and the spans are cached on the documents.

Strategy 1 (uniform constraint) feeds the predictor the shortcut-only view
and pulls its output toward the uniform class distribution, so shortcut
features stop paying off. Strategy 2 (virtual shortcut representations)
trains a separate encoder to (a) predict the label from the shortcut-only
view and (b) imitate that representation from the full input; during the
unlabeled phase the imitator runs frozen and only the shared predictor head
is pushed toward uniform on its output, transferring the de-correlation to
documents that have no labeled shortcuts at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, TYPE_CHECKING

import numpy as np

from . import tensor as tc
from .encoder import ContractError, EncoderParams, encode
from .rationalizer import LossWeights, ModelBundle, loss_sup, loss_un, loss_un_task
from .tensor import Tensor

if TYPE_CHECKING:
    from .corpus import Document

MIN_SPAN_LEN = 3


@dataclass(frozen=True)
class ShortcutSpan:
    """Half-open token range [start, end) flagged as a potential shortcut."""

    doc_id: str
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.end - self.start < MIN_SPAN_LEN:
            raise ContractError(
                f"span ({self.start}, {self.end}) shorter than {MIN_SPAN_LEN}"
            )

    def positions(self) -> range:
        return range(self.start, self.end)


@dataclass
class ImitatorState:
    """Imitator encoder role; frozen throughout the unlabeled phase."""

    encoder: EncoderParams
    frozen: bool = False


def discover(pred_mask: Sequence[int], gold_mask: Sequence[int],
             doc_id: str = "") -> list[ShortcutSpan]:
    """Maximal runs (length >= 3) of predicted-but-not-gold tokens."""
    pred = np.asarray(pred_mask, dtype=np.int64)
    gold = np.asarray(gold_mask, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ContractError(
            f"discover: mask lengths {pred.shape} and {gold.shape} differ"
        )
    pst = (pred == 1) & (gold == 0)
    spans = []
    start = None
    for i, flag in enumerate(pst.tolist() + [False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start >= MIN_SPAN_LEN:
                spans.append(ShortcutSpan(doc_id=doc_id, start=start, end=i))
            start = None
    return spans


def spans_to_mask(spans: Sequence, n: int) -> np.ndarray:
    """Binary keep-mask that is 1 exactly on span positions.

    Accepts ShortcutSpan objects or plain (start, end) pairs.
    """
    mask = np.zeros(n)
    for span in spans:
        start, end = (span.start, span.end) if isinstance(span, ShortcutSpan) else span
        if not 0 <= start < end <= n:
            raise ContractError(f"span ({start}, {end}) outside document of length {n}")
        mask[start:end] = 1.0
    return mask


def doc_spans(doc: "Document") -> list[tuple[int, int]]:
    return list(doc.cached_spans or [])


def uniform_kl(class_probs: Tensor) -> Tensor:
    """KL(U || q) of the uniform class distribution against ``class_probs``."""
    n_classes = class_probs.shape[0]
    inv = 1.0 / n_classes
    return tc.add_scalar(tc.scale(tc.tensor_sum(tc.log(class_probs)), -inv),
                         np.log(inv))


def _shortcut_probs(bundle: ModelBundle, doc: "Document",
                    spans: Sequence, encoder_role: str, head_role: str) -> Tensor:
    from .rationalizer import predict

    mask = tc.constant(spans_to_mask(spans, len(doc.tokens)))
    return predict(bundle, doc.tokens, soft_mask=mask,
                   encoder_role=encoder_role, head_role=head_role)


def loss_unif(bundle: ModelBundle, doc: "Document", spans: Sequence,
              weights: LossWeights) -> Tensor:
    """Uniform constraint: predictor output on the shortcut-only view.

    Documents without discovered spans contribute zero.
    """
    if not spans:
        return tc.constant(0.0)
    probs = _shortcut_probs(bundle, doc, spans, "pred_sup", "pred_sup")
    return uniform_kl(probs)


def loss_s(bundle: ModelBundle, doc: "Document", spans: Sequence) -> Tensor:
    """External predictor's cross-entropy on the shortcut-only view."""
    if not spans:
        return tc.constant(0.0)
    probs = _shortcut_probs(bundle, doc, spans, "shortcut", "shortcut")
    return loss_un_task(probs, doc.label)


def loss_virt(bundle: ModelBundle, doc: "Document", spans: Sequence) -> Tensor:
    """Squared distance between shortcut-view and full-input representations.

    Both views run through the same physical auxiliary encoder, so the
    imitator learns to reproduce shortcut features from the whole document.
    """
    if not spans:
        return tc.constant(0.0)
    mask = tc.constant(spans_to_mask(spans, len(doc.tokens)))
    aux = bundle.resolve_encoder("shortcut")
    _, shortcut_pooled = encode(aux, doc.tokens, soft_mask=mask)
    _, full_pooled = encode(bundle.resolve_encoder("imitator"), doc.tokens)
    return tc.squared_distance(shortcut_pooled, full_pooled)


def loss_diff(bundle: ModelBundle, doc: "Document") -> Tensor:
    """Uniform pull on the shared head over the frozen imitator's features.

    The pooled representation is detached: no gradient ever reaches the
    imitator encoder here, only the (shared) predictor head moves.
    """
    _, pooled = encode(bundle.resolve_encoder("imitator"), doc.tokens)
    pooled = tc.detach(pooled)
    head = bundle.resolve_head("imitator")
    logits = tc.reshape(tc.matmul(head, tc.reshape(pooled, (bundle.dim, 1))),
                        (head.shape[0],))
    return uniform_kl(tc.softmax(logits))


def loss_ssr_unif_step(
    bundle: ModelBundle,
    doc: "Document",
    phase: str,
    weights: LossWeights,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[Tensor] = None,
    parts: Optional[dict] = None,
) -> Tensor:
    """Per-document loss of the uniform-constraint strategy for one phase."""
    if phase == "sup":
        base = loss_sup(bundle, doc, weights, parts=parts)
        unif = loss_unif(bundle, doc, doc_spans(doc), weights)
        if parts is not None:
            parts["unif"] = unif.item()
        if weights.lambda_unif == 0.0 or not doc_spans(doc):
            return base
        return tc.add(base, tc.scale(unif, weights.lambda_unif))
    if phase == "un":
        return loss_un(bundle, doc, weights, rng=rng, noise=noise, parts=parts)
    raise ContractError(f"unknown phase {phase!r}")


def loss_ssr_virt_step(
    bundle: ModelBundle,
    doc: "Document",
    phase: str,
    weights: LossWeights,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[Tensor] = None,
    parts: Optional[dict] = None,
) -> Tensor:
    """Per-document loss of the virtual-representation strategy for one phase."""
    if phase == "sup":
        total = loss_sup(bundle, doc, weights, parts=parts)
        spans = doc_spans(doc)
        shortcut_ce = loss_s(bundle, doc, spans)
        virt = loss_virt(bundle, doc, spans)
        if parts is not None:
            parts["shortcut_ce"] = shortcut_ce.item()
            parts["virt"] = virt.item()
        if spans:
            total = tc.add(total, shortcut_ce)
            if weights.lambda_virt != 0.0:
                total = tc.add(total, tc.scale(virt, weights.lambda_virt))
        return total
    if phase == "un":
        total = loss_un(bundle, doc, weights, rng=rng, noise=noise, parts=parts)
        diff = loss_diff(bundle, doc)
        if parts is not None:
            parts["diff"] = diff.item()
        if weights.lambda_diff != 0.0:
            total = tc.add(total, tc.scale(diff, weights.lambda_diff))
        return total
    raise ContractError(f"unknown phase {phase!r}")
