"""Selector-predictor core: mask sampling, prediction, and the base losses.

The selector scores every token with a 2-way softmax and samples a relaxed
binary mask (temperature-controlled noisy softmax) during training; at
evaluation the mask is thresholded at 0.5 (or top-k when configured). The
predictor classifies from the masked encoding. A single physical encoder
and single pair of selector/predictor heads serve both the unsupervised and
supervised objectives; the imitator branch used by the virtual-shortcut
strategy gets its own encoder but shares the predictor head. The bundle's
alias map records which logical role resolves to which physical tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, TYPE_CHECKING

import numpy as np

from . import tensor as tc
from .encoder import ContractError, EncoderParams, encode, nonpad_positions
from .tensor import Tensor

if TYPE_CHECKING:
    from .corpus import Document

SELECT_CHANNEL = 1  # column of the 2-way selector softmax meaning "keep"


class LabelError(ValueError):
    """Class label outside [0, n_classes)."""


# Logical role -> physical tensor name. Both phases of semi-supervised
# training run through the same encoder and heads; the imitator branch has
# its own encoder but reuses the predictor head.
ENCODER_ALIASES = {
    "sel_un": "encoder",
    "pred_un": "encoder",
    "sel_sup": "encoder",
    "pred_sup": "encoder",
    "shortcut": "aux_encoder",
    "imitator": "aux_encoder",
}
HEAD_ALIASES = {
    "sel_un": "selector_head",
    "sel_sup": "selector_head",
    "pred_un": "predictor_head",
    "pred_sup": "predictor_head",
    "shortcut": "external_head",
    "imitator": "predictor_head",
}


@dataclass
class LossWeights:
    """Loss coefficients; the 0.1 defaults for the three strategy terms and
    the 0.2 sparsity target follow the reference training recipe."""

    lambda1: float = 1.0
    lambda2: float = 0.3
    alpha: float = 0.2
    lambda_unif: float = 0.1
    lambda_virt: float = 0.1
    lambda_diff: float = 0.1
    tau: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("lambda1", "lambda2", "lambda_unif", "lambda_virt", "lambda_diff"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")


@dataclass
class SelectionResult:
    """Per-token selection output for one document."""

    select_prob: Tensor  # [n], P(keep token i), differentiable
    soft_mask: Tensor  # [n], relaxed mask actually fed to the predictor
    hard_mask: np.ndarray  # [n] ints in {0, 1}; PAD forced to 0


@dataclass
class ModelBundle:
    """All learnable tensors plus the role-aliasing map."""

    encoder: EncoderParams
    aux_encoder: EncoderParams
    selector_head: Tensor  # [2, d]
    predictor_head: Tensor  # [N, d]
    external_head: Tensor  # [N, d]
    n_classes: int
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.aliases:
            self.aliases = {f"encoder/{k}": v for k, v in ENCODER_ALIASES.items()}
            self.aliases.update({f"head/{k}": v for k, v in HEAD_ALIASES.items()})

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def vocab_size(self) -> int:
        return self.encoder.vocab_size

    @classmethod
    def init(cls, vocab_size: int, dim: int, n_classes: int,
             rng: np.random.Generator) -> "ModelBundle":
        return cls(
            encoder=EncoderParams.init(vocab_size, dim, rng),
            aux_encoder=EncoderParams.init(vocab_size, dim, rng),
            selector_head=tc.parameter(rng.normal(0.0, 0.1, size=(2, dim))),
            predictor_head=tc.parameter(rng.normal(0.0, 0.1, size=(n_classes, dim))),
            external_head=tc.parameter(rng.normal(0.0, 0.1, size=(n_classes, dim))),
            n_classes=n_classes,
        )

    def resolve_encoder(self, role: str) -> EncoderParams:
        name = self.aliases[f"encoder/{role}"]
        return self.encoder if name == "encoder" else self.aux_encoder

    def resolve_head(self, role: str) -> Tensor:
        return getattr(self, self.aliases[f"head/{role}"])

    def physical_parameters(self) -> dict[str, Tensor]:
        params = dict(self.encoder.tensors())
        params.update({f"aux_{k}": v for k, v in self.aux_encoder.tensors().items()})
        params["selector_head"] = self.selector_head
        params["predictor_head"] = self.predictor_head
        params["external_head"] = self.external_head
        return params

    def zero_grads(self) -> None:
        for t in self.physical_parameters().values():
            t.zero_grad()


def _column(t: Tensor, index: int, width: int) -> Tensor:
    """Extract one column of an [n, width] tensor as an [n] tensor."""
    picker = np.zeros((width, 1))
    picker[index, 0] = 1.0
    return tc.reshape(tc.matmul(t, tc.constant(picker)), (t.shape[0],))


def hard_selection(select_prob: np.ndarray, nonpad: np.ndarray,
                   top_k: Optional[int] = None) -> np.ndarray:
    """Deterministic evaluation-time discretization of selection probabilities.

    Default rule keeps every non-PAD token with probability >= 0.5; top_k
    instead keeps the k most probable non-PAD tokens (ties to the earlier
    position).
    """
    n = select_prob.shape[0]
    hard = np.zeros(n, dtype=np.int64)
    if top_k is None:
        hard[nonpad] = (select_prob[nonpad] >= 0.5).astype(np.int64)
    else:
        k = min(int(top_k), nonpad.size)
        order = nonpad[np.argsort(-select_prob[nonpad], kind="stable")]
        hard[order[:k]] = 1
    return hard


def select(
    bundle: ModelBundle,
    tokens: Sequence[int],
    mode: str,
    rng: Optional[np.random.Generator] = None,
    tau: float = 1.0,
    noise: Optional[Tensor] = None,
    top_k: Optional[int] = None,
) -> SelectionResult:
    """Score tokens and produce soft/hard keep-masks.

    ``train`` samples the relaxed mask with injected or rng-drawn noise;
    ``eval`` is deterministic (threshold or top-k). PAD is never selected.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"select: mode must be 'train' or 'eval', got {mode!r}")
    ids = np.asarray(tokens, dtype=np.int64)
    n = ids.size
    states, _ = encode(bundle.resolve_encoder("sel_un"), tokens)
    logits = tc.matmul(states, tc.transpose(bundle.resolve_head("sel_un")))  # [n, 2]
    probs = tc.softmax(logits)
    select_prob = _column(probs, SELECT_CHANNEL, 2)
    nonpad = nonpad_positions(ids)
    nonpad_indicator = np.zeros(n)
    nonpad_indicator[nonpad] = 1.0

    if mode == "eval":
        hard = hard_selection(select_prob.data, nonpad, top_k=top_k)
        soft = tc.constant(hard.astype(np.float64))
        return SelectionResult(select_prob=select_prob, soft_mask=soft, hard_mask=hard)

    if noise is None:
        if rng is None:
            raise ContractError("select: train mode needs an rng or injected noise")
        noise = tc.sample_gumbel((n, 2), rng)
    relaxed = tc.gumbel_softmax(tc.log(probs), noise, tau)  # [n, 2]
    soft = tc.multiply(_column(relaxed, SELECT_CHANNEL, 2), tc.constant(nonpad_indicator))
    hard = (relaxed.data[:, SELECT_CHANNEL] > relaxed.data[:, 1 - SELECT_CHANNEL])
    hard = hard.astype(np.int64) * nonpad_indicator.astype(np.int64)
    return SelectionResult(select_prob=select_prob, soft_mask=soft, hard_mask=hard)


def predict(
    bundle: ModelBundle,
    tokens: Sequence[int],
    soft_mask: Optional[Tensor] = None,
    encoder_role: str = "pred_un",
    head_role: str = "pred_un",
) -> Tensor:
    """Class probabilities from the (optionally masked) input."""
    _, pooled = encode(bundle.resolve_encoder(encoder_role), tokens, soft_mask=soft_mask)
    head = bundle.resolve_head(head_role)
    logits = tc.reshape(tc.matmul(head, tc.reshape(pooled, (bundle.dim, 1))),
                        (head.shape[0],))
    return tc.softmax(logits)


def loss_un_task(class_probs: Tensor, label: int) -> Tensor:
    """Cross-entropy of the true label under the predicted distribution."""
    n_classes = class_probs.shape[0]
    if not 0 <= label < n_classes:
        raise LabelError(f"label {label} outside [0, {n_classes})")
    return tc.scale(tc.tensor_sum(tc.log(tc.gather_rows(class_probs, [label]))), -1.0)


def loss_regularizer(soft_mask: Tensor, weights: LossWeights) -> Tensor:
    """Sparsity |mean(m) - alpha| plus total-variation continuity penalty.

    Expects a mask covering only non-PAD tokens.
    """
    sparsity = tc.scale(tc.absolute(tc.add_scalar(tc.mean(soft_mask), -weights.alpha)),
                        weights.lambda1)
    n = soft_mask.shape[0]
    if n < 2 or weights.lambda2 == 0.0:
        return sparsity
    steps = tc.subtract(tc.gather_rows(soft_mask, list(range(1, n))),
                        tc.gather_rows(soft_mask, list(range(0, n - 1))))
    continuity = tc.scale(tc.tensor_sum(tc.absolute(steps)), weights.lambda2)
    return tc.add(sparsity, continuity)


def loss_select(select_prob: Tensor, gold_mask: Sequence[int]) -> Tensor:
    """Token-level binary cross-entropy against the gold keep-mask.

    Both classes contribute (false positives are penalized too), summed over
    the provided positions; PAD positions must already be excluded.
    """
    gold = np.asarray(gold_mask, dtype=np.float64)
    if gold.shape != select_prob.shape:
        raise ContractError(
            f"loss_select: gold mask shape {gold.shape} != probs shape {select_prob.shape}"
        )
    keep_term = tc.multiply(tc.constant(gold), tc.log(select_prob))
    drop_prob = tc.add_scalar(tc.scale(select_prob, -1.0), 1.0)
    drop_term = tc.multiply(tc.constant(1.0 - gold), tc.log(drop_prob))
    return tc.scale(tc.tensor_sum(tc.add(keep_term, drop_term)), -1.0)


def loss_un(
    bundle: ModelBundle,
    doc: "Document",
    weights: LossWeights,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[Tensor] = None,
    parts: Optional[dict] = None,
) -> Tensor:
    """Unsupervised objective: rationale-masked prediction loss + mask penalty.

    One relaxed-mask sample realizes the expectation over masks.
    """
    sel = select(bundle, doc.tokens, "train", rng=rng, tau=weights.tau, noise=noise)
    probs = predict(bundle, doc.tokens, soft_mask=sel.soft_mask)
    task = loss_un_task(probs, doc.label)
    nonpad = nonpad_positions(doc.tokens)
    reg = loss_regularizer(tc.gather_rows(sel.soft_mask, nonpad.tolist()), weights)
    if parts is not None:
        parts["un_task"] = task.item()
        parts["regularizer"] = reg.item()
    return tc.add(task, reg)


def loss_sup(
    bundle: ModelBundle,
    doc: "Document",
    weights: LossWeights,
    parts: Optional[dict] = None,
) -> Tensor:
    """Supervised objective: full-input prediction loss + token BCE."""
    if doc.gold_mask is None:
        raise ContractError(f"loss_sup: doc {doc.id} has no gold mask")
    probs = predict(bundle, doc.tokens, soft_mask=None,
                    encoder_role="pred_sup", head_role="pred_sup")
    task = loss_un_task(probs, doc.label)
    sel = select(bundle, doc.tokens, "eval")
    nonpad = nonpad_positions(doc.tokens).tolist()
    gold = [doc.gold_mask[i] for i in nonpad]
    select_term = loss_select(tc.gather_rows(sel.select_prob, nonpad), gold)
    if parts is not None:
        parts["sup_task"] = task.item()
        parts["select"] = select_term.item()
    return tc.add(task, select_term)
