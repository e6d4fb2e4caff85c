"""Document model, split management, JSONL I/O, and the synthetic corpus.

The generator plants three disjoint vocabulary families into each document:
label-indicative tokens (the gold rationale), one contiguous cue span whose
family agrees with the label with a configurable probability, and neutral
filler. Breaking the cue-label correlation on the OOD split (agreement 0.5)
is what makes reliance on cue tokens measurable.

File format: JSONL, one object per line with keys
``id, tokens, label, gold_mask?, split, spans?, augmented?`` (UTF-8,
integer arrays for tokens/masks, spans as [start, end) pairs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PAD_ID = 0

SPLITS = ("un", "sup", "test", "ood_test")

AUGMENT_TAGS = ("random", "semantic")


class ParseError(ValueError):
    """Malformed corpus file; message carries the 1-based line number."""


class ValidationError(ValueError):
    """Structurally valid JSON that violates a document invariant."""


class SpecError(ValueError):
    """Inconsistent generator specification."""


@dataclass
class Document:
    """One classified token sequence, optionally rationale-annotated."""

    id: str
    tokens: list[int]
    label: int
    gold_mask: Optional[list[int]] = None
    split: str = "un"
    cached_spans: Optional[list[tuple[int, int]]] = None
    augmented: Optional[str] = None

    def validate(self) -> None:
        if not self.tokens:
            raise ValidationError(f"doc {self.id}: empty token sequence")
        if any((not isinstance(t, int)) or t < 0 for t in self.tokens):
            raise ValidationError(f"doc {self.id}: tokens must be non-negative ints")
        if PAD_ID in self.tokens:
            first_pad = self.tokens.index(PAD_ID)
            if any(t != PAD_ID for t in self.tokens[first_pad:]):
                raise ValidationError(f"doc {self.id}: PAD id {PAD_ID} appears interior")
        if not isinstance(self.label, int) or self.label < 0:
            raise ValidationError(f"doc {self.id}: label must be a non-negative int")
        if self.gold_mask is not None:
            if len(self.gold_mask) != len(self.tokens):
                raise ValidationError(
                    f"doc {self.id}: gold_mask length {len(self.gold_mask)} "
                    f"!= tokens length {len(self.tokens)}"
                )
            if any(m not in (0, 1) for m in self.gold_mask):
                raise ValidationError(f"doc {self.id}: gold_mask must be binary")
        if self.split not in SPLITS:
            raise ValidationError(f"doc {self.id}: unknown split {self.split!r}")
        if self.cached_spans is not None:
            for start, end in self.cached_spans:
                if not (0 <= start < end <= len(self.tokens)) or end - start < 3:
                    raise ValidationError(
                        f"doc {self.id}: invalid span ({start}, {end}) for length "
                        f"{len(self.tokens)}"
                    )
        if self.augmented is not None and self.augmented not in AUGMENT_TAGS:
            raise ValidationError(f"doc {self.id}: unknown augmented tag {self.augmented!r}")

    def nonpad_length(self) -> int:
        return sum(1 for t in self.tokens if t != PAD_ID)

    def to_json(self) -> str:
        record: dict = {"id": self.id, "tokens": self.tokens, "label": self.label}
        if self.gold_mask is not None:
            record["gold_mask"] = self.gold_mask
        record["split"] = self.split
        if self.cached_spans is not None:
            record["spans"] = [[s, e] for s, e in self.cached_spans]
        if self.augmented is not None:
            record["augmented"] = self.augmented
        return json.dumps(record, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Document":
        record = json.loads(line)
        doc = cls(
            id=str(record["id"]),
            tokens=[int(t) for t in record["tokens"]],
            label=int(record["label"]),
            gold_mask=[int(m) for m in record["gold_mask"]] if "gold_mask" in record else None,
            split=str(record["split"]),
            cached_spans=[(int(s), int(e)) for s, e in record["spans"]]
            if "spans" in record else None,
            augmented=record.get("augmented"),
        )
        doc.validate()
        return doc


def save_corpus(docs: Sequence[Document], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(doc.to_json())
            fh.write("\n")


def load_corpus(path: str | Path) -> list[Document]:
    docs = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                docs.append(Document.from_json(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    return docs


def by_split(docs: Sequence[Document], split: str) -> list[Document]:
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    return [d for d in docs if d.split == split]


def split_labeled_fraction(
    docs: Sequence[Document], fraction: float, seed: int
) -> tuple[list[Document], list[Document]]:
    """Deterministically partition docs into (labeled, unlabeled) views.

    The labeled view keeps gold masks and is tagged ``sup``; the unlabeled
    view is tagged ``un`` with gold masks stripped so training code cannot
    see them.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"labeled fraction must be in [0, 1], got {fraction}")
    sup_positions = _labeled_positions(len(docs), fraction, seed)
    labeled, unlabeled = [], []
    for i, doc in enumerate(docs):
        if i in sup_positions:
            labeled.append(replace(doc, split="sup"))
        else:
            unlabeled.append(replace(doc, split="un", gold_mask=None))
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class GeneratorSpec:
    """Recipe for a cue-planted corpus with in-distribution and OOD splits."""

    vocab_indicative: int = 40
    vocab_shortcut: int = 20
    vocab_filler: int = 139
    n_classes: int = 2
    n_train: int = 400
    n_test: int = 200
    n_ood_test: int = 200
    doc_len: int = 40
    rationale_tokens: int = 4
    span_len: int = 4
    rho_train: float = 0.95
    rho_ood: float = 0.5
    labeled_fraction: float = 0.25
    # Fraction of each cue family's vocabulary that labeled documents draw
    # their spans from. Below 1.0, unlabeled docs mix the full family while
    # test/OOD docs use only the remainder: annotation never enumerates every
    # shortcut surface form, so mitigation has to generalize past the ids it
    # was supervised on.
    sup_cue_coverage: float = 1.0
    # Probability that each rationale token individually agrees with the
    # label. Below 1.0 single gold tokens are ambiguous and only their
    # majority decides (documents are resampled until the majority is right),
    # which keeps the contiguous cue span competitive as a prediction signal.
    ind_purity: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.span_len < 3:
            raise SpecError("span_len must be >= 3 so discovery can fire")
        if self.rationale_tokens < 1:
            raise SpecError("rationale_tokens must be >= 1")
        if self.span_len + self.rationale_tokens > self.doc_len:
            raise SpecError(
                f"span_len {self.span_len} + rationale_tokens {self.rationale_tokens} "
                f"exceed doc_len {self.doc_len}"
            )
        if self.n_classes < 2:
            raise SpecError("need at least two classes")
        for name in ("vocab_indicative", "vocab_shortcut"):
            size = getattr(self, name)
            if size < self.n_classes or size % self.n_classes:
                raise SpecError(f"{name} must be a positive multiple of n_classes")
        if self.vocab_filler < 1:
            raise SpecError("vocab_filler must be >= 1")
        for name in ("rho_train", "rho_ood", "labeled_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SpecError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 < self.sup_cue_coverage <= 1.0:
            raise SpecError("sup_cue_coverage must be in (0, 1]")
        if not 0.5 < self.ind_purity <= 1.0:
            raise SpecError("ind_purity must be in (0.5, 1] so a majority exists")
        if self.sup_cue_coverage < 1.0:
            per_family = self.vocab_shortcut // self.n_classes
            visible = self._visible_per_family(per_family)
            if visible >= per_family:
                raise SpecError(
                    "sup_cue_coverage leaves no held-out cue ids; lower it or "
                    "widen vocab_shortcut"
                )

    def _visible_per_family(self, per_family: int) -> int:
        return max(1, int(round(self.sup_cue_coverage * per_family)))

    @property
    def vocab_size(self) -> int:
        return 1 + self.vocab_indicative + self.vocab_shortcut + self.vocab_filler

    def indicative_ids(self, label: int) -> range:
        chunk = self.vocab_indicative // self.n_classes
        lo = 1 + label * chunk
        return range(lo, lo + chunk)

    def shortcut_ids(self, family: int) -> range:
        chunk = self.vocab_shortcut // self.n_classes
        lo = 1 + self.vocab_indicative + family * chunk
        return range(lo, lo + chunk)

    def cue_pool(self, family: int, split: str) -> range:
        """Cue ids a given split's documents draw their spans from."""
        full = self.shortcut_ids(family)
        if self.sup_cue_coverage >= 1.0:
            return full
        visible = self._visible_per_family(len(full))
        if split == "sup":
            return range(full.start, full.start + visible)
        if split in ("test", "ood_test"):
            return range(full.start + visible, full.stop)
        return full  # unlabeled docs mix seen and held-out ids

    def all_shortcut_ids(self) -> range:
        lo = 1 + self.vocab_indicative
        return range(lo, lo + self.vocab_shortcut)

    def filler_ids(self) -> range:
        lo = 1 + self.vocab_indicative + self.vocab_shortcut
        return range(lo, lo + self.vocab_filler)

    def meta(self) -> dict:
        """Corpus sidecar describing the planted vocabulary layout."""
        return {
            "generator": {k: getattr(self, k) for k in self.__dataclass_fields__},
            "vocab_size": self.vocab_size,
            "n_classes": self.n_classes,
            "indicative_ids": [1, self.vocab_indicative],
            "shortcut_ids": [self.all_shortcut_ids().start,
                             self.all_shortcut_ids().stop - 1],
            "filler_ids": [self.filler_ids().start, self.filler_ids().stop - 1],
        }

    def display_vocab(self) -> list[str]:
        names = ["pad"]
        chunk_i = self.vocab_indicative // self.n_classes
        for c in range(self.n_classes):
            names.extend(f"ind{c}_{j}" for j in range(chunk_i))
        chunk_s = self.vocab_shortcut // self.n_classes
        for f in range(self.n_classes):
            names.extend(f"cue{f}_{j}" for j in range(chunk_s))
        names.extend(f"w{j}" for j in range(self.vocab_filler))
        return names


def _make_doc(spec: GeneratorSpec, rng: np.random.Generator, rho: float,
              doc_id: str, split: str) -> Document:
    n = spec.doc_len
    label = int(rng.integers(spec.n_classes))
    span_start = int(rng.integers(0, n - spec.span_len + 1))
    span = range(span_start, span_start + spec.span_len)
    outside = [p for p in range(n) if p not in span]
    rationale_pos = sorted(rng.choice(outside, size=spec.rationale_tokens, replace=False))

    if rng.random() < rho:
        family = label
    else:
        others = [c for c in range(spec.n_classes) if c != label]
        family = int(others[rng.integers(len(others))])

    filler = spec.filler_ids()
    tokens = rng.integers(filler.start, filler.stop, size=n).tolist()
    ind = spec.indicative_ids(label)
    for p in rationale_pos:
        tokens[p] = int(rng.integers(ind.start, ind.stop))
    cue = spec.cue_pool(family, split)
    for p in span:
        tokens[p] = int(rng.integers(cue.start, cue.stop))

    gold = [0] * n
    for p in rationale_pos:
        gold[p] = 1
    return Document(id=doc_id, tokens=tokens, label=label, gold_mask=gold, split=split)


def _labeled_positions(n: int, fraction: float, seed: int) -> set[int]:
    n_sup = int(np.floor(fraction * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    return set(order[:n_sup].tolist())


def generate(spec: GeneratorSpec) -> list[Document]:
    """Build the full corpus: sup/un train views plus test and OOD splits."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sup_positions = _labeled_positions(spec.n_train, spec.labeled_fraction, spec.seed)
    labeled, unlabeled = [], []
    for i in range(spec.n_train):
        split = "sup" if i in sup_positions else "un"
        doc = _make_doc(spec, rng, spec.rho_train, f"train-{i:05d}", split)
        if split == "sup":
            labeled.append(doc)
        else:
            doc.gold_mask = None
            unlabeled.append(doc)
    test = [_make_doc(spec, rng, spec.rho_train, f"test-{i:05d}", "test")
            for i in range(spec.n_test)]
    ood = [_make_doc(spec, rng, spec.rho_ood, f"ood-{i:05d}", "ood_test")
           for i in range(spec.n_ood_test)]
    return labeled + unlabeled + test + ood
