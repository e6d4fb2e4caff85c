"""Retrieval store, random/semantic/mixed augmentation against scan oracles."""

import numpy as np
import pytest

from rationale_forge.augment import (
    RetrievalExhaustedError,
    VectorDatastore,
    global_datastore,
    mixed_da,
    nn_query,
    random_da,
    semantic_da,
    token_pool,
)
from rationale_forge.corpus import Document, GeneratorSpec, generate, load_corpus, save_corpus
from rationale_forge.encoder import ContractError, encode
from rationale_forge.rationalizer import ModelBundle


def make_bundle(vocab=30, dim=4, seed=0):
    return ModelBundle.init(vocab, dim, 2, np.random.default_rng(seed))


def make_doc(tokens, doc_id="d0", label=0, gold=None, spans=None):
    return Document(id=doc_id, tokens=list(tokens), label=label,
                    gold_mask=gold, split="sup", cached_spans=spans)


def scan_oracle(keys, payloads, query, excluded=lambda p: False):
    best, best_d = None, None
    for k, p in zip(keys, payloads):
        if excluded(p):
            continue
        d = float(np.sum((np.asarray(k) - query) ** 2))
        if best_d is None or d < best_d:
            best, best_d = p, d
    if best is None:
        raise RetrievalExhaustedError("oracle: all excluded")
    return best


class TestNnQuery:
    def test_two_key_example(self):
        store = VectorDatastore.build([(np.array([0.0, 0.0]), "a"),
                                       (np.array([3.0, 4.0]), "b")])
        assert nn_query(store, np.array([1.0, 1.0])) == "a"

    def test_exact_key_hit(self):
        store = VectorDatastore.build([(np.array([2.0, 5.0]), "x"),
                                       (np.array([1.0, 1.0]), "y")])
        assert nn_query(store, np.array([1.0, 1.0])) == "y"

    def test_tie_breaks_to_lowest_index(self):
        store = VectorDatastore.build([(np.array([1.0, 0.0]), "first"),
                                       (np.array([-1.0, 0.0]), "second")])
        assert nn_query(store, np.array([0.0, 0.0])) == "first"

    def test_all_excluded_raises(self):
        store = VectorDatastore.build([(np.array([0.0]), "only")])
        with pytest.raises(RetrievalExhaustedError):
            nn_query(store, np.array([0.0]), exclude=lambda p: True)

    def test_matches_scan_oracle_on_random_stores(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            m = int(rng.integers(1, 65))
            d = int(rng.integers(1, 9))
            keys = rng.normal(size=(m, d))
            payloads = list(range(m))
            store = VectorDatastore.build(list(zip(keys, payloads)))
            query = rng.normal(size=d)
            drop = set(rng.choice(m, size=int(rng.integers(0, m)), replace=False).tolist())
            excluded = lambda p: p in drop
            if len(drop) == m:
                with pytest.raises(RetrievalExhaustedError):
                    nn_query(store, query, exclude=excluded)
            else:
                assert nn_query(store, query, exclude=excluded) == scan_oracle(
                    keys, payloads, query, excluded)


class TestRandomDa:
    def test_no_spans_identity_apart_from_tag(self):
        doc = make_doc([5, 6, 7], gold=[1, 0, 0])
        out = random_da(doc, [], [9, 9], np.random.default_rng(0))
        assert out.tokens == doc.tokens
        assert out.gold_mask == doc.gold_mask
        assert out.augmented == "random"

    def test_only_span_positions_change(self):
        doc = make_doc([5, 6, 7, 8, 9, 10], gold=[1, 0, 0, 0, 0, 1])
        pool = [20, 21, 22]
        out = random_da(doc, [(1, 4)], pool, np.random.default_rng(1))
        assert out.tokens[0] == 5 and out.tokens[4] == 9 and out.tokens[5] == 10
        assert all(out.tokens[i] in pool for i in (1, 2, 3))
        assert out.gold_mask == doc.gold_mask and out.label == doc.label

    def test_fixed_seed_reproducible(self):
        doc = make_doc([5, 6, 7, 8], gold=[0, 0, 0, 0])
        pool = list(range(10, 20))
        a = random_da(doc, [(0, 3)], pool, np.random.default_rng(7))
        b = random_da(doc, [(0, 3)], pool, np.random.default_rng(7))
        assert a == b

    def test_empty_pool_rejected(self):
        doc = make_doc([5, 6, 7])
        with pytest.raises(ContractError):
            random_da(doc, [(0, 3)], [], np.random.default_rng(0))


class TestSemanticDa:
    def test_no_spans_identity(self):
        bundle = make_bundle()
        docs = [make_doc([5, 6, 7], doc_id="a"), make_doc([8, 9, 10], doc_id="b")]
        store = global_datastore(docs, bundle)
        out = semantic_da(docs[0], [], store, bundle)
        assert out.tokens == docs[0].tokens and out.augmented == "semantic"

    def test_two_doc_corpus_forces_the_other_neighbor(self):
        bundle = make_bundle(seed=1)
        a = make_doc([5, 6, 7, 8], doc_id="a", gold=[0, 0, 0, 0])
        b = make_doc([9, 10, 11, 12], doc_id="b", gold=[0, 0, 0, 0])
        store = global_datastore([a, b], bundle)
        out = semantic_da(a, [(0, 3)], store, bundle)
        assert all(t in b.tokens for t in out.tokens[:3])

    def test_matches_scan_oracle_with_gold_filter(self):
        bundle = make_bundle(seed=2)
        docs = [
            make_doc([5, 6, 7, 8, 9], doc_id="x", gold=[0, 0, 0, 1, 0]),
            make_doc([10, 11, 12, 13, 14], doc_id="r1", gold=[1, 0, 0, 0, 0]),
            make_doc([15, 16, 17, 18, 19], doc_id="r2", gold=[0, 1, 0, 0, 0]),
        ]
        store = global_datastore(docs, bundle)
        spans = [(0, 3)]
        out = semantic_da(docs[0], spans, store, bundle)

        encoder = bundle.resolve_encoder("pred_un")
        pooled = {d.id: encode(encoder, d.tokens)[1].data for d in docs}
        neighbor = scan_oracle([pooled["r1"], pooled["r2"]], [docs[1], docs[2]],
                               pooled["x"])
        forbidden = {docs[0].tokens[3], neighbor.tokens[neighbor.gold_mask.index(1)]}
        nstates = encode(encoder, neighbor.tokens)[0].data
        xstates = encode(encoder, docs[0].tokens)[0].data
        for pos in range(3):
            expected = scan_oracle(nstates, neighbor.tokens, xstates[pos],
                                   excluded=lambda t: t in forbidden)
            assert out.tokens[pos] == expected

    def test_replacements_never_gold_tokens(self):
        bundle = make_bundle(seed=3)
        docs = [make_doc([5, 6, 7, 8], doc_id=f"g{i}",
                         gold=[1, 0, 0, 1]) for i in range(4)]
        for i, d in enumerate(docs):
            d.tokens = [5 + i, 6 + i, 7 + i, 8 + i]
        store = global_datastore(docs, bundle)
        out = semantic_da(docs[0], [(1, 4)], store, bundle,
                          pool=[25, 26], rng=np.random.default_rng(4))
        gold_ids = {d.tokens[0] for d in docs} | {d.tokens[3] for d in docs}
        for pos in (1, 2):  # position 3 is gold in x and never touched? no: span covers it
            assert out.tokens[pos] not in {docs[0].tokens[0], docs[0].tokens[3]}

    def test_exhausted_neighbor_falls_back_to_pool(self):
        bundle = make_bundle(seed=5)
        # Neighbor's every token is gold, so retrieval filters them all.
        a = make_doc([5, 6, 7], doc_id="a", gold=[0, 0, 0])
        b = make_doc([9, 10, 11], doc_id="b", gold=[1, 1, 1])
        store = global_datastore([a, b], bundle)
        out = semantic_da(a, [(0, 3)], store, bundle,
                          pool=[20], rng=np.random.default_rng(6))
        assert out.tokens == [20, 20, 20]
        with pytest.raises(RetrievalExhaustedError):
            semantic_da(a, [(0, 3)], store, bundle)


class TestMixedDa:
    def corpus_with_spans(self, n_sup=8):
        spec = GeneratorSpec(vocab_indicative=8, vocab_shortcut=6, vocab_filler=14,
                             n_train=n_sup * 4, n_test=4, n_ood_test=4, doc_len=12,
                             rationale_tokens=2, span_len=3,
                             labeled_fraction=0.25, seed=11)
        docs = generate(spec)
        for d in docs:
            if d.split == "sup":
                d.cached_spans = [(4, 7)]
        return docs

    def test_fraction_zero_adds_nothing(self):
        docs = self.corpus_with_spans()
        assert mixed_da(docs, 0.0, make_bundle(), np.random.default_rng(0)) == []

    def test_counts_split_odd_to_random(self):
        docs = self.corpus_with_spans(n_sup=25)  # 100 train docs -> 25 sup
        bundle = make_bundle(vocab=40, seed=6)
        out = mixed_da(docs, 1.0, bundle, np.random.default_rng(1))
        assert len(out) == 25
        kinds = [d.augmented for d in out]
        assert kinds.count("random") == 13 and kinds.count("semantic") == 12

    def test_augmented_docs_carry_gold_and_label(self):
        docs = self.corpus_with_spans()
        bundle = make_bundle(vocab=40, seed=7)
        out = mixed_da(docs, 0.5, bundle, np.random.default_rng(2))
        by_id = {d.id: d for d in docs}
        for aug in out:
            src = by_id[aug.id.split("-aug")[0]]
            assert aug.gold_mask == src.gold_mask
            assert aug.label == src.label
            assert aug.split == "sup"
            assert aug.cached_spans == []  # replacement consumed the spans

    def test_gold_positions_unchanged(self):
        docs = self.corpus_with_spans()
        bundle = make_bundle(vocab=40, seed=8)
        out = mixed_da(docs, 1.0, bundle, np.random.default_rng(3))
        by_id = {d.id: d for d in docs}
        for aug in out:
            src = by_id[aug.id.split("-aug")[0]]
            for pos, g in enumerate(src.gold_mask):
                if g:
                    assert aug.tokens[pos] == src.tokens[pos]

    def test_round_trip_through_serialization(self, tmp_path):
        docs = self.corpus_with_spans()
        bundle = make_bundle(vocab=40, seed=9)
        out = mixed_da(docs, 0.5, bundle, np.random.default_rng(4))
        all_docs = docs + out
        path = tmp_path / "augmented.jsonl"
        save_corpus(all_docs, path)
        assert load_corpus(path) == all_docs

    def test_token_pool_skips_pad(self):
        docs = [make_doc([3, 4, 0], doc_id="p")]
        assert token_pool(docs) == [3, 4]
