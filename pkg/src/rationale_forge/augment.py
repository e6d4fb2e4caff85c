"""Data augmentation by replacing discovered shortcut tokens.

Random replacement draws substitutes uniformly from the pool of every token
occurrence in the corpus. Semantic replacement retrieves them instead:
first the nearest other labeled document under the trained unsupervised
model's pooled encoding (exact L2 scan), then, per shortcut position, the
nearest per-token state within that neighbor, skipping candidates whose
token id is a gold-rationale token of either document. Mixed augmentation
splits the budget half random, half semantic (odd remainder to random).

Augmented documents keep their label and gold mask, drop the now-stale
span cache, and carry an ``augmented`` provenance tag.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Document, PAD_ID
from .encoder import ContractError, encode
from .rationalizer import ModelBundle
from .shortcuts import spans_to_mask


class RetrievalExhaustedError(LookupError):
    """Every datastore entry was excluded by the query's filter."""


@dataclass(frozen=True)
class VectorDatastore:
    """Immutable (key vector, payload) table with exact L2 lookup."""

    keys: np.ndarray  # [m, d]
    payloads: tuple

    @classmethod
    def build(cls, entries: Sequence[tuple[np.ndarray, object]]) -> "VectorDatastore":
        if not entries:
            return cls(keys=np.zeros((0, 0)), payloads=())
        keys = np.stack([np.asarray(k, dtype=np.float64) for k, _ in entries])
        return cls(keys=keys, payloads=tuple(p for _, p in entries))

    def __len__(self) -> int:
        return len(self.payloads)


def nn_query(store: VectorDatastore, query: np.ndarray,
             exclude: Optional[Callable[[object], bool]] = None) -> object:
    """Payload of the entry nearest to ``query`` in squared L2 distance.

    Ties break toward the lowest entry index; raises when the exclusion
    predicate filters out every entry.
    """
    if len(store) == 0:
        raise RetrievalExhaustedError("datastore is empty")
    query = np.asarray(query, dtype=np.float64)
    diffs = store.keys - query[None, :]
    dists = np.einsum("ij,ij->i", diffs, diffs)
    order = np.argsort(dists, kind="stable")
    for idx in order:
        payload = store.payloads[idx]
        if exclude is None or not exclude(payload):
            return payload
    raise RetrievalExhaustedError("all datastore entries excluded")


def token_pool(docs: Sequence[Document]) -> list[int]:
    """Every non-PAD token occurrence across the given documents."""
    return [t for d in docs for t in d.tokens if t != PAD_ID]


def _replaceable_positions(doc: Document, spans: Sequence) -> list[int]:
    mask = spans_to_mask(spans, len(doc.tokens))
    return [i for i in range(len(doc.tokens)) if mask[i] == 1.0]


def _augmented_copy(doc: Document, tokens: list[int], tag: str) -> Document:
    # Replacement consumed the spans: the copy has no known shortcuts left.
    return replace(doc, tokens=tokens, cached_spans=[], augmented=tag)


def random_da(doc: Document, spans: Sequence, pool: Sequence[int],
              rng: np.random.Generator) -> Document:
    """Replace every span position with a uniform draw from the token pool."""
    if not list(spans):
        return _augmented_copy(doc, list(doc.tokens), "random")
    if not pool:
        raise ContractError("random_da: empty token pool")
    tokens = list(doc.tokens)
    for pos in _replaceable_positions(doc, spans):
        tokens[pos] = int(pool[rng.integers(len(pool))])
    return _augmented_copy(doc, tokens, "random")


def global_datastore(docs: Sequence[Document], mun_bundle: ModelBundle) -> VectorDatastore:
    """Whole-document store keyed by the trained model's pooled encodings."""
    encoder = mun_bundle.resolve_encoder("pred_un")
    entries = []
    for doc in docs:
        _, pooled = encode(encoder, doc.tokens)
        entries.append((pooled.data, doc))
    return VectorDatastore.build(entries)


def _gold_token_ids(doc: Document) -> set[int]:
    if doc.gold_mask is None:
        return set()
    return {t for t, g in zip(doc.tokens, doc.gold_mask) if g == 1}


def semantic_da(
    doc: Document,
    spans: Sequence,
    corpus_store: VectorDatastore,
    mun_bundle: ModelBundle,
    pool: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
) -> Document:
    """Replace span tokens with retrieval-selected semantic substitutes.

    Candidates whose token id is a gold token of this document or of the
    retrieved neighbor are filtered; if that empties the neighbor, the
    position falls back to random replacement (pool + rng required then).
    """
    if not list(spans):
        return _augmented_copy(doc, list(doc.tokens), "semantic")
    encoder = mun_bundle.resolve_encoder("pred_un")
    _, pooled = encode(encoder, doc.tokens)
    neighbor = nn_query(corpus_store, pooled.data,
                        exclude=lambda other: other.id == doc.id)

    neighbor_states, _ = encode(encoder, neighbor.tokens)
    nonpad = [i for i, t in enumerate(neighbor.tokens) if t != PAD_ID]
    local = VectorDatastore.build(
        [(neighbor_states.data[i], neighbor.tokens[i]) for i in nonpad])
    forbidden = _gold_token_ids(doc) | _gold_token_ids(neighbor)

    doc_states, _ = encode(encoder, doc.tokens)
    tokens = list(doc.tokens)
    for pos in _replaceable_positions(doc, spans):
        try:
            tokens[pos] = int(nn_query(local, doc_states.data[pos],
                                       exclude=lambda t: t in forbidden))
        except RetrievalExhaustedError:
            if pool is None or rng is None:
                raise
            tokens[pos] = int(pool[rng.integers(len(pool))])
    return _augmented_copy(doc, tokens, "semantic")


def mixed_da(
    docs: Sequence[Document],
    fraction: float,
    mun_bundle: Optional[ModelBundle],
    rng: np.random.Generator,
    kind: str = "mixed",
) -> list[Document]:
    """New labeled documents from span replacement over a corpus sample.

    Samples fraction * |labeled split| labeled documents and augments them
    (``random`` / ``semantic`` / ``mixed`` = half and half, odd count to
    random). The returned documents are new supervised examples; append
    them to the corpus.
    """
    if kind not in ("random", "semantic", "mixed"):
        raise ContractError(f"unknown augmentation kind {kind!r}")
    if fraction < 0:
        raise ContractError(f"fraction must be >= 0, got {fraction}")
    sup = [d for d in docs if d.split == "sup" and d.augmented is None]
    n_new = int(np.floor(fraction * len(sup) + 0.5))
    if n_new == 0:
        return []
    if n_new > len(sup):
        raise ContractError(f"cannot sample {n_new} of {len(sup)} labeled docs")
    picked = [sup[i] for i in rng.choice(len(sup), size=n_new, replace=False)]
    if kind == "random":
        n_random = n_new
    elif kind == "semantic":
        n_random = 0
    else:
        n_random = (n_new + 1) // 2

    pool = token_pool([d for d in docs if d.split in ("sup", "un")])
    store = None
    if n_random < n_new:
        if mun_bundle is None:
            raise ContractError("semantic augmentation needs the trained model bundle")
        store = global_datastore(sup, mun_bundle)

    out = []
    for j, src in enumerate(picked):
        spans = src.cached_spans or []
        if j < n_random:
            new = random_da(src, spans, pool, rng)
        else:
            new = semantic_da(src, spans, store, mun_bundle, pool=pool, rng=rng)
        out.append(replace(new, id=f"{src.id}-aug{j:04d}"))
    return out
