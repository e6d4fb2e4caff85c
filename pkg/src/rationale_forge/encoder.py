"""Token encoder: id sequence -> per-token hidden states + pooled vector.

A single self-attention layer over learned embeddings with a tanh mixing
projection. Deliberately small (default width 32) so gradient checks and
full training runs stay desk-scale; the encoder is the one named interface
behind which a heavier model could be swapped without touching the rest of
the toolkit.

Masking multiplies token embeddings (mask_i * e_i): token ids are discrete,
so "keep token i" is realized on the embedding, which is also what lets
selector gradients flow through the mask. PAD (id 0) positions are excluded
from attention keys and from the pooled average, so a PAD suffix never
influences the rest of the document.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .tensor import Tensor

PAD_ID = 0

ATTENTION_MASK_VALUE = -1e9


class VocabularyError(ValueError):
    """Token id outside the embedding table."""


class ContractError(ValueError):
    """Caller violated an operation precondition."""


@dataclass
class EncoderParams:
    """Learnable encoder tensors; one instance may serve several roles."""

    embedding: Tensor  # [V, d]
    mix_weight: Tensor  # [d, 2d]
    mix_bias: Tensor  # [d]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def attn_scale(self) -> float:
        return 1.0 / np.sqrt(self.dim)

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> "EncoderParams":
        emb = rng.normal(0.0, 0.5, size=(vocab_size, dim))
        mix = rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(dim, 2 * dim))
        bias = np.zeros(dim)
        return cls(
            embedding=tc.parameter(emb),
            mix_weight=tc.parameter(mix),
            mix_bias=tc.parameter(bias),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"embedding": self.embedding, "mix_weight": self.mix_weight,
                "mix_bias": self.mix_bias}


def nonpad_positions(tokens: Sequence[int]) -> np.ndarray:
    return np.flatnonzero(np.asarray(tokens) != PAD_ID)


def encode(
    params: EncoderParams,
    tokens: Sequence[int],
    soft_mask: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Encode a token sequence into ([n, d] states, [d] pooled vector).

    soft_mask, when given, weights each token's embedding in [0, 1] before
    attention; it defaults to all-ones. Differentiable w.r.t. the params and
    the mask.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    n = ids.size
    if n == 0:
        raise ContractError("encode: empty token sequence")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise VocabularyError(
            f"encode: token id out of range [0, {params.vocab_size}) in {ids.tolist()}"
        )
    nonpad = np.flatnonzero(ids != PAD_ID)
    if nonpad.size == 0:
        raise ContractError("encode: sequence is all PAD")
    d = params.dim

    e = tc.gather_rows(params.embedding, ids)  # [n, d]
    if soft_mask is not None:
        if soft_mask.shape != (n,):
            raise ContractError(f"encode: soft_mask shape {soft_mask.shape} != ({n},)")
        mask_col = tc.reshape(soft_mask, (n, 1))
        e = tc.multiply(e, tc.matmul(mask_col, tc.constant(np.ones((1, d)))))

    # Scaled dot-product attention; PAD keys pushed out of the softmax.
    logits = tc.scale(tc.matmul(e, tc.transpose(e)), params.attn_scale)  # [n, n]
    key_bias = np.zeros((n, n))
    key_bias[:, ids == PAD_ID] = ATTENTION_MASK_VALUE
    attn = tc.softmax(tc.add(logits, tc.constant(key_bias)))
    context = tc.matmul(attn, e)  # [n, d]

    mixed = tc.matmul(tc.concat_last(e, context), tc.transpose(params.mix_weight))
    bias_rows = tc.matmul(tc.constant(np.ones((n, 1))), tc.reshape(params.mix_bias, (1, d)))
    states = tc.tanh(tc.add(mixed, bias_rows))  # [n, d]

    pool_weights = np.zeros((1, n))
    pool_weights[0, nonpad] = 1.0 / nonpad.size
    pooled = tc.reshape(tc.matmul(tc.constant(pool_weights), states), (d,))
    return states, pooled
