"""Optimizer, two-phase epochs, end-to-end pipelines, checkpoints.

Every epoch runs all labeled batches first, then all unlabeled batches,
with per-mode losses (plain unsupervised / supervised / semi-supervised, or
either shortcut-mitigation strategy). One optimizer spans both phases and
keeps exactly one moment entry per physical tensor, so aliased roles can
never drift apart. During the unlabeled phase of the virtual-representation
strategy the imitator encoder is frozen: excluded from the update entirely,
not merely zero-gradient (decay and momentum tails would otherwise move it).

The full pipeline is: train an unsupervised model on the unlabeled split,
run shortcut discovery over the labeled split and cache the spans,
optionally augment, then train the requested mode from scratch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .augment import mixed_da
from .corpus import Document, by_split
from .encoder import ContractError, EncoderParams
from .metrics import EvalReport, evaluate
from .rationalizer import LossWeights, ModelBundle, loss_sup, loss_un
from .shortcuts import ImitatorState, discover, loss_ssr_unif_step, loss_ssr_virt_step
from .tensor import Tape, Tensor

MODES = ("un", "sup", "semi", "ssr_unif", "ssr_virt")

DA_KINDS = ("none", "random", "semantic", "mixed")

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Desk-scale defaults; ``paper_profile`` restores the reference recipe
    (lr 2e-5, batch 4), which is tuned for a large pretrained encoder and
    mostly stalls the small one used here."""

    mode: str = "semi"
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_path: Optional[str] = None
    da: str = "none"
    da_fraction: float = 0.25
    mun_epochs: Optional[int] = None
    dim: int = 32
    eval_top_k: Optional[int] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if self.da not in DA_KINDS:
            raise ContractError(f"unknown da kind {self.da!r}; expected one of {DA_KINDS}")
        if not 0.0 <= self.da_fraction <= 1.0:
            raise ContractError("da_fraction must be in [0, 1]")
        if self.mun_epochs is not None and self.mun_epochs < 0:
            raise ContractError("mun_epochs must be >= 0")
        if self.dim < 1:
            raise ContractError("dim must be >= 1")
        if self.mode == "ssr_virt" and (self.weights.lambda_virt is None
                                        or self.weights.lambda_diff is None):
            raise ContractError("ssr_virt needs lambda_virt and lambda_diff")
        self.weights.validate()

    @classmethod
    def paper_profile(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=30, batch_size=4, learning_rate=2e-5)
        base.update(overrides)
        return cls(**base)


@dataclass
class AdamW:
    """Adam with decoupled weight decay, one state entry per physical tensor."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: dict = field(default_factory=dict)

    def step(self, named_params: dict[str, Tensor]) -> None:
        for name, p in named_params.items():
            if p.grad is None:
                raise ContractError(f"optimizer step: parameter {name!r} has no gradient")
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self.state[name] = st
            if self.weight_decay:
                p.data = p.data - self.learning_rate * self.weight_decay * p.data
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * p.grad
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (p.grad * p.grad)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def infer_vocab_size(docs: Sequence[Document]) -> int:
    return max((max(d.tokens) for d in docs if d.tokens), default=0) + 1


def infer_n_classes(docs: Sequence[Document]) -> int:
    return max((d.label for d in docs), default=0) + 1


def _phase_loss(mode: str, phase: str, bundle: ModelBundle, doc: Document,
                weights: LossWeights, rng: np.random.Generator,
                parts: dict) -> Optional[Tensor]:
    if phase == "sup":
        if mode == "un":
            return None
        if mode in ("sup", "semi"):
            return loss_sup(bundle, doc, weights, parts=parts)
        if mode == "ssr_unif":
            return loss_ssr_unif_step(bundle, doc, "sup", weights, parts=parts)
        return loss_ssr_virt_step(bundle, doc, "sup", weights, parts=parts)
    if mode == "sup":
        return None
    if mode in ("un", "semi"):
        return loss_un(bundle, doc, weights, rng=rng, parts=parts)
    if mode == "ssr_unif":
        return loss_ssr_unif_step(bundle, doc, "un", weights, rng=rng, parts=parts)
    return loss_ssr_virt_step(bundle, doc, "un", weights, rng=rng, parts=parts)


def _require_spans(mode: str, d_sup: Sequence[Document]) -> None:
    if mode not in ("ssr_unif", "ssr_virt"):
        return
    missing = [d.id for d in d_sup if d.cached_spans is None]
    if missing:
        raise ContractError(
            f"mode {mode} needs cached shortcut spans on every labeled doc; "
            f"{len(missing)} docs lack them (e.g. {missing[0]!r}) - run discover first"
        )


class _RunningMeans:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def update(self, parts: dict) -> None:
        for key, value in parts.items():
            self.sums[key] = self.sums.get(key, 0.0) + value
            self.counts[key] = self.counts.get(key, 0) + 1

    def means(self) -> dict[str, float]:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums)}


def train_epoch_semi(
    bundle: ModelBundle,
    d_sup: Sequence[Document],
    d_un: Sequence[Document],
    config: TrainConfig,
    optimizer: AdamW,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One epoch: all labeled batches, then all unlabeled batches."""
    config.validate()
    _require_spans(config.mode, d_sup)
    stats = _RunningMeans()
    imitator = ImitatorState(encoder=bundle.aux_encoder, frozen=False)

    for phase, docs in (("sup", d_sup), ("un", d_un)):
        imitator.frozen = config.mode == "ssr_virt" and phase == "un"
        trainable = bundle.physical_parameters()
        if imitator.frozen:
            trainable = {k: v for k, v in trainable.items() if not k.startswith("aux_")}
        if not docs:
            continue
        order = rng.permutation(len(docs))
        for start in range(0, len(docs), config.batch_size):
            batch = [docs[i] for i in order[start:start + config.batch_size]]
            bundle.zero_grads()
            with Tape() as tape:
                total = tc.constant(0.0)
                batch_value = 0.0
                for doc in batch:
                    parts: dict = {}
                    loss = _phase_loss(config.mode, phase, bundle, doc,
                                       config.weights, rng, parts)
                    if loss is None:
                        continue
                    total = tc.add(total, tc.scale(loss, 1.0 / len(batch)))
                    batch_value += loss.item() / len(batch)
                    stats.update(parts)
            if total.requires_grad:
                tape.backward(total)
                optimizer.step(trainable)
                stats.update({f"{phase}_total": batch_value})
    return stats.means()


def train_model(
    d_sup: Sequence[Document],
    d_un: Sequence[Document],
    config: TrainConfig,
    rng: np.random.Generator,
    bundle: Optional[ModelBundle] = None,
    epochs: Optional[int] = None,
    vocab_size: Optional[int] = None,
    n_classes: Optional[int] = None,
) -> tuple[ModelBundle, AdamW, list[dict[str, float]]]:
    """Train a (fresh by default) bundle for the configured number of epochs."""
    all_docs = list(d_sup) + list(d_un)
    if bundle is None:
        vocab = vocab_size or infer_vocab_size(all_docs)
        classes = n_classes or infer_n_classes(all_docs)
        bundle = ModelBundle.init(vocab, config.dim, classes, rng)
    optimizer = AdamW(learning_rate=config.learning_rate,
                      weight_decay=config.weight_decay)
    history = []
    for _ in range(config.epochs if epochs is None else epochs):
        history.append(train_epoch_semi(bundle, d_sup, d_un, config, optimizer, rng))
    return bundle, optimizer, history


def discover_spans(mun_bundle: ModelBundle, d_sup: Sequence[Document],
                   top_k: Optional[int] = None) -> tuple[list[Document], int]:
    """Cache discovered shortcut spans on copies of the labeled documents."""
    from .rationalizer import select

    out = []
    total = 0
    for doc in d_sup:
        if doc.gold_mask is None:
            raise ContractError(f"discover: doc {doc.id} has no gold mask")
        sel = select(mun_bundle, doc.tokens, "eval", top_k=top_k)
        spans = discover(sel.hard_mask.tolist(), doc.gold_mask, doc_id=doc.id)
        out.append(replace(doc, cached_spans=[(s.start, s.end) for s in spans]))
        total += len(spans)
    return out, total


def pipeline_ssr(
    docs: Sequence[Document],
    config: TrainConfig,
    meta: Optional[dict] = None,
) -> tuple[ModelBundle, dict]:
    """Full staged run; returns the trained bundle and a machine-readable report.

    Stage 1 trains the unsupervised model on the unlabeled split (skipped for
    plain modes without augmentation); stage 2 caches discovered spans; stage
    3 augments; stage 4 trains the requested mode from scratch. Requesting 0
    stage-4 epochs returns the stage-1 model unchanged.
    """
    config.validate()
    d_sup = by_split(docs, "sup")
    d_un = by_split(docs, "un")
    d_test = by_split(docs, "test")
    d_ood = by_split(docs, "ood_test")
    vocab = infer_vocab_size(docs)
    classes = infer_n_classes(docs)
    if meta:
        vocab = int(meta.get("vocab_size", vocab))
        classes = int(meta.get("n_classes", classes))
    shortcut_ids = None
    if meta and "shortcut_ids" in meta:
        lo, hi = meta["shortcut_ids"]
        shortcut_ids = range(int(lo), int(hi) + 1)

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_mun = np.random.default_rng(seeds[0])
    rng_da = np.random.default_rng(seeds[1])
    rng_main = np.random.default_rng(seeds[2])

    report: dict = {"mode": config.mode, "seed": config.seed, "stages": []}
    mun_bundle = None
    needs_stage1 = config.mode in ("ssr_unif", "ssr_virt") or config.da != "none"

    if needs_stage1:
        mun_config = replace(config, mode="un", weights=config.weights)
        mun_epochs = config.epochs if config.mun_epochs is None else config.mun_epochs
        mun_bundle, _, mun_history = train_model(
            [], d_un, mun_config, rng_mun, epochs=mun_epochs,
            vocab_size=vocab, n_classes=classes)
        report["stages"].append({"stage": "train_unsupervised", "epochs": mun_epochs,
                                 "history": mun_history})
        d_sup, span_count = discover_spans(mun_bundle, d_sup, top_k=config.eval_top_k)
        report["stages"].append({"stage": "discover", "span_count": span_count,
                                 "docs": len(d_sup)})
        if config.da != "none":
            corpus_view = d_sup + d_un
            new_docs = mixed_da(corpus_view, config.da_fraction, mun_bundle,
                                rng_da, kind=config.da)
            d_sup = d_sup + new_docs
            report["stages"].append({"stage": "augment", "kind": config.da,
                                     "added": len(new_docs)})

    if config.epochs == 0 and mun_bundle is not None:
        bundle = mun_bundle
        history: list[dict[str, float]] = []
    else:
        bundle, optimizer, history = train_model(
            d_sup, d_un, config, rng_main, vocab_size=vocab, n_classes=classes)
        if config.checkpoint_path:
            save_checkpoint(config.checkpoint_path, bundle, optimizer, rng_main,
                            epoch=config.epochs)
    report["stages"].append({"stage": "train_main", "mode": config.mode,
                             "epochs": config.epochs, "history": history})

    if d_test:
        report["eval_test"] = evaluate(bundle, d_test, top_k=config.eval_top_k,
                                       shortcut_ids=shortcut_ids).to_dict()
    if d_ood:
        report["eval_ood"] = evaluate(bundle, d_ood, top_k=config.eval_top_k,
                                      shortcut_ids=shortcut_ids).to_dict()
    return bundle, report


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: str | Path, bundle: ModelBundle, optimizer: AdamW,
                    rng: np.random.Generator, epoch: int = 0) -> None:
    """Single-file snapshot: parameters, alias map, optimizer moments, rng."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, p in bundle.physical_parameters().items():
        arrays[f"param/{name}"] = p.data
    opt_steps = {}
    for name, st in optimizer.state.items():
        arrays[f"opt/{name}/m"] = st["m"]
        arrays[f"opt/{name}/v"] = st["v"]
        opt_steps[name] = st["t"]
    meta = {
        "version": CHECKPOINT_VERSION,
        "vocab_size": bundle.vocab_size,
        "dim": bundle.dim,
        "n_classes": bundle.n_classes,
        "aliases": bundle.aliases,
        "optimizer": {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "steps": opt_steps,
        },
        "rng_state": rng.bit_generator.state,
        "epoch": epoch,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, AdamW,
                                               np.random.Generator, int]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ContractError(
                f"checkpoint version {meta['version']} != {CHECKPOINT_VERSION}")

        def param(name: str) -> Tensor:
            return tc.parameter(data[f"param/{name}"].copy())

        encoder = EncoderParams(embedding=param("embedding"),
                                mix_weight=param("mix_weight"),
                                mix_bias=param("mix_bias"))
        aux = EncoderParams(embedding=param("aux_embedding"),
                            mix_weight=param("aux_mix_weight"),
                            mix_bias=param("aux_mix_bias"))
        bundle = ModelBundle(
            encoder=encoder,
            aux_encoder=aux,
            selector_head=param("selector_head"),
            predictor_head=param("predictor_head"),
            external_head=param("external_head"),
            n_classes=int(meta["n_classes"]),
            aliases=dict(meta["aliases"]),
        )
        opt_meta = meta["optimizer"]
        optimizer = AdamW(learning_rate=opt_meta["learning_rate"],
                          beta1=opt_meta["beta1"], beta2=opt_meta["beta2"],
                          eps=opt_meta["eps"], weight_decay=opt_meta["weight_decay"])
        for name, t in opt_meta["steps"].items():
            optimizer.state[name] = {"m": data[f"opt/{name}/m"].copy(),
                                     "v": data[f"opt/{name}/v"].copy(),
                                     "t": int(t)}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return bundle, optimizer, rng, int(meta["epoch"])
