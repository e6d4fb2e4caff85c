"""Optimizer oracle values, phase schedule, freezing, checkpoints, pipeline."""

import numpy as np
import pytest

from rationale_forge import tensor as tc
from rationale_forge.corpus import GeneratorSpec, by_split, generate
from rationale_forge.encoder import ContractError
from rationale_forge.rationalizer import LossWeights, ModelBundle, loss_sup, loss_un
from rationale_forge.tensor import Tape
from rationale_forge.trainer import (
    AdamW,
    TrainConfig,
    discover_spans,
    load_checkpoint,
    pipeline_ssr,
    save_checkpoint,
    train_epoch_semi,
    train_model,
)
from rationale_forge.shortcuts import discover
from rationale_forge.rationalizer import select


def small_corpus(seed=0, n_train=48):
    spec = GeneratorSpec(vocab_indicative=8, vocab_shortcut=6, vocab_filler=20,
                         n_train=n_train, n_test=12, n_ood_test=12, doc_len=16,
                         rationale_tokens=3, span_len=3, labeled_fraction=0.25,
                         seed=seed)
    return spec, generate(spec)


def small_config(**overrides):
    base = dict(mode="semi", epochs=1, batch_size=8, learning_rate=1e-3,
                dim=8, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def params_snapshot(bundle):
    return {k: v.data.copy() for k, v in bundle.physical_parameters().items()}


def assert_params_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


class TestAdamW:
    def test_hand_computed_first_step(self):
        w = tc.parameter([1.0])
        w.grad = np.array([1.0])
        opt = AdamW(learning_rate=0.1)
        opt.step({"w": w})
        # Bias-corrected m_hat = v_hat = 1 -> update = lr * 1 / (1 + eps).
        assert w.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_decoupled_decay_with_zero_grad(self):
        w = tc.parameter([2.0])
        w.grad = np.array([0.0])
        opt = AdamW(learning_rate=0.1, weight_decay=0.01)
        opt.step({"w": w})
        assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, abs=1e-15)

    def test_missing_grad_rejected(self):
        w = tc.parameter([1.0])
        with pytest.raises(ContractError, match="no gradient"):
            AdamW(learning_rate=0.1).step({"w": w})

    def test_grads_cleared_after_step(self):
        w = tc.parameter([1.0])
        w.grad = np.array([1.0])
        opt = AdamW(learning_rate=0.1)
        opt.step({"w": w})
        assert w.grad is None

    def test_aliased_tensor_updated_once_with_summed_grads(self):
        # Two graph uses of one leaf accumulate into a single grad, and one
        # optimizer entry consumes it exactly once.
        w = tc.parameter([1.0, 2.0])
        with Tape() as tape:
            loss = tc.add(tc.tensor_sum(tc.multiply(w, w)),
                          tc.tensor_sum(tc.scale(w, 3.0)))
        tape.backward(loss)
        np.testing.assert_allclose(w.grad, 2.0 * w.data + 3.0)
        opt = AdamW(learning_rate=0.1)
        opt.step({"w": w})
        assert len(opt.state) == 1
        assert opt.state["w"]["t"] == 1


class TestTrainEpoch:
    def test_fixed_seed_reproduces_trajectory_bitwise(self):
        spec, docs = small_corpus()
        d_sup, d_un = by_split(docs, "sup"), by_split(docs, "un")
        runs = []
        for _ in range(2):
            cfg = small_config(epochs=2)
            rng = np.random.default_rng(cfg.seed)
            bundle, _, history = train_model(d_sup, d_un, cfg, rng)
            runs.append((params_snapshot(bundle), history))
        assert_params_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_semi_equals_manual_sup_then_un_phases(self):
        spec, docs = small_corpus(seed=1)
        d_sup, d_un = by_split(docs, "sup"), by_split(docs, "un")
        cfg = small_config(mode="semi", batch_size=4)

        bundle_a = ModelBundle.init(spec.vocab_size, cfg.dim, 2, np.random.default_rng(99))
        opt_a = AdamW(learning_rate=cfg.learning_rate)
        train_epoch_semi(bundle_a, d_sup, d_un, cfg, opt_a, np.random.default_rng(5))

        # Manual replica: labeled batches first, unlabeled second, same rng.
        bundle_b = ModelBundle.init(spec.vocab_size, cfg.dim, 2, np.random.default_rng(99))
        opt_b = AdamW(learning_rate=cfg.learning_rate)
        rng = np.random.default_rng(5)
        for phase, phase_docs in (("sup", d_sup), ("un", d_un)):
            order = rng.permutation(len(phase_docs))
            for start in range(0, len(phase_docs), cfg.batch_size):
                batch = [phase_docs[i] for i in order[start:start + cfg.batch_size]]
                bundle_b.zero_grads()
                with Tape() as tape:
                    total = tc.constant(0.0)
                    for doc in batch:
                        if phase == "sup":
                            loss = loss_sup(bundle_b, doc, cfg.weights)
                        else:
                            loss = loss_un(bundle_b, doc, cfg.weights, rng=rng)
                        total = tc.add(total, tc.scale(loss, 1.0 / len(batch)))
                tape.backward(total)
                opt_b.step(bundle_b.physical_parameters())
        assert_params_equal(params_snapshot(bundle_a), params_snapshot(bundle_b))

    def test_ssr_modes_require_cached_spans(self):
        spec, docs = small_corpus(seed=2)
        d_sup, d_un = by_split(docs, "sup"), by_split(docs, "un")
        cfg = small_config(mode="ssr_unif")
        bundle = ModelBundle.init(spec.vocab_size, cfg.dim, 2, np.random.default_rng(0))
        opt = AdamW(learning_rate=1e-3)
        with pytest.raises(ContractError, match="discover"):
            train_epoch_semi(bundle, d_sup, d_un, cfg, opt, np.random.default_rng(0))

    def test_virt_unlabeled_phase_leaves_imitator_bit_identical(self):
        spec, docs = small_corpus(seed=3)
        d_un = by_split(docs, "un")
        cfg = small_config(mode="ssr_virt")
        bundle = ModelBundle.init(spec.vocab_size, cfg.dim, 2, np.random.default_rng(1))
        opt = AdamW(learning_rate=1e-3)
        before = {k: v.data.copy() for k, v in bundle.aux_encoder.tensors().items()}
        main_before = bundle.encoder.embedding.data.copy()
        train_epoch_semi(bundle, [], d_un, cfg, opt, np.random.default_rng(2))
        for k, v in bundle.aux_encoder.tensors().items():
            np.testing.assert_array_equal(before[k], v.data, err_msg=k)
        assert not np.array_equal(main_before, bundle.encoder.embedding.data)

    def test_virt_labeled_phase_does_train_imitator(self):
        spec, docs = small_corpus(seed=4)
        d_sup, _ = by_split(docs, "sup"), None
        d_sup, _count = discover_spans(
            ModelBundle.init(spec.vocab_size, 8, 2, np.random.default_rng(7)), d_sup)
        # Ensure at least one doc has a span so the imitator sees gradients.
        if all(not d.cached_spans for d in d_sup):
            d_sup[0].cached_spans = [(0, 3)]
        cfg = small_config(mode="ssr_virt")
        bundle = ModelBundle.init(spec.vocab_size, cfg.dim, 2, np.random.default_rng(8))
        opt = AdamW(learning_rate=1e-3)
        before = bundle.aux_encoder.embedding.data.copy()
        train_epoch_semi(bundle, d_sup, [], cfg, opt, np.random.default_rng(9))
        assert not np.array_equal(before, bundle.aux_encoder.embedding.data)

    def test_alias_bit_identity_after_steps(self):
        spec, docs = small_corpus(seed=5)
        d_sup, d_un = by_split(docs, "sup"), by_split(docs, "un")
        cfg = small_config(mode="semi")
        bundle = ModelBundle.init(spec.vocab_size, cfg.dim, 2, np.random.default_rng(3))
        opt = AdamW(learning_rate=1e-3)
        train_epoch_semi(bundle, d_sup, d_un, cfg, opt, np.random.default_rng(4))
        assert bundle.resolve_head("pred_un") is bundle.resolve_head("pred_sup")
        assert bundle.resolve_head("imitator") is bundle.resolve_head("pred_un")
        assert bundle.resolve_encoder("sel_un") is bundle.resolve_encoder("pred_sup")

    def test_loss_decreases_across_modes(self):
        spec, docs = small_corpus(seed=6, n_train=48)
        d_sup, d_un = by_split(docs, "sup"), by_split(docs, "un")
        d_sup_spanned, _ = discover_spans(
            train_model([], d_un, small_config(mode="un", epochs=3),
                        np.random.default_rng(10))[0], d_sup)
        for mode in ("un", "sup", "semi", "ssr_unif", "ssr_virt"):
            cfg = small_config(mode=mode, epochs=20, batch_size=8)
            rng = np.random.default_rng(11)
            _, _, history = train_model(d_sup_spanned, d_un, cfg, rng)
            keys = [k for k in ("sup_total", "un_total") if k in history[0]]
            first = sum(history[0][k] for k in keys)
            last = sum(history[-1].get(k, 0.0) for k in keys)
            assert last < 0.5 * first, f"{mode}: {first} -> {last}"


class TestDiscoverSpans:
    def test_span_count_matches_recount_oracle(self):
        spec, docs = small_corpus(seed=7)
        d_sup = by_split(docs, "sup")
        bundle = ModelBundle.init(spec.vocab_size, 8, 2, np.random.default_rng(12))
        spanned, total = discover_spans(bundle, d_sup)
        recount = 0
        for doc in d_sup:
            sel = select(bundle, doc.tokens, "eval")
            recount += len(discover(sel.hard_mask.tolist(), doc.gold_mask))
        assert total == recount
        assert sum(len(d.cached_spans) for d in spanned) == recount

    def test_input_docs_not_mutated(self):
        spec, docs = small_corpus(seed=8)
        d_sup = by_split(docs, "sup")
        bundle = ModelBundle.init(spec.vocab_size, 8, 2, np.random.default_rng(13))
        before = [d.cached_spans for d in d_sup]
        discover_spans(bundle, d_sup)
        assert [d.cached_spans for d in d_sup] == before


class TestCheckpoint:
    def test_round_trip_then_one_step_matches_uninterrupted_run(self, tmp_path):
        spec, docs = small_corpus(seed=9)
        d_sup, d_un = by_split(docs, "sup"), by_split(docs, "un")
        cfg = small_config(mode="semi", epochs=1)

        rng = np.random.default_rng(20)
        bundle, opt, _ = train_model(d_sup, d_un, cfg, rng)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, bundle, opt, rng, epoch=1)
        train_epoch_semi(bundle, d_sup, d_un, cfg, opt, rng)
        uninterrupted = params_snapshot(bundle)

        bundle2, opt2, rng2, epoch = load_checkpoint(path)
        assert epoch == 1
        train_epoch_semi(bundle2, d_sup, d_un, cfg, opt2, rng2)
        assert_params_equal(uninterrupted, params_snapshot(bundle2))

    def test_checkpoint_preserves_parameters_bitwise(self, tmp_path):
        spec, docs = small_corpus(seed=10)
        d_sup, d_un = by_split(docs, "sup"), by_split(docs, "un")
        rng = np.random.default_rng(21)
        bundle, opt, _ = train_model(d_sup, d_un, small_config(), rng)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, bundle, opt, rng)
        bundle2, opt2, _, _ = load_checkpoint(path)
        assert_params_equal(params_snapshot(bundle), params_snapshot(bundle2))
        for name, st in opt.state.items():
            np.testing.assert_array_equal(st["m"], opt2.state[name]["m"])
            np.testing.assert_array_equal(st["v"], opt2.state[name]["v"])
            assert st["t"] == opt2.state[name]["t"]


class TestPipeline:
    def test_zero_main_epochs_returns_stage_one_model(self):
        spec, docs = small_corpus(seed=11)
        cfg = small_config(mode="ssr_unif", epochs=0, mun_epochs=2)
        bundle, report = pipeline_ssr(docs, cfg, meta=spec.meta())

        replica_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0])
        from dataclasses import replace as dc_replace
        mun_cfg = dc_replace(cfg, mode="un")
        expected, _, _ = train_model([], by_split(docs, "un"), mun_cfg, replica_rng,
                                     epochs=2, vocab_size=spec.vocab_size, n_classes=2)
        assert_params_equal(params_snapshot(bundle), params_snapshot(expected))
        assert report["stages"][-1]["epochs"] == 0

    def test_report_structure_and_determinism(self):
        spec, docs = small_corpus(seed=12)
        cfg = small_config(mode="ssr_unif", epochs=2, mun_epochs=2)
        _, r1 = pipeline_ssr(docs, cfg, meta=spec.meta())
        _, r2 = pipeline_ssr(docs, cfg, meta=spec.meta())
        assert r1 == r2
        stage_names = [s["stage"] for s in r1["stages"]]
        assert stage_names == ["train_unsupervised", "discover", "train_main"]
        assert "eval_test" in r1 and "eval_ood" in r1
        assert r1["eval_test"]["shortcut_inclusion_rate"] is not None

    def test_pipeline_does_not_mutate_inputs(self):
        spec, docs = small_corpus(seed=13)
        import copy
        before = copy.deepcopy(docs)
        cfg = small_config(mode="ssr_virt", epochs=1, mun_epochs=1, da="random",
                           da_fraction=0.5)
        pipeline_ssr(docs, cfg, meta=spec.meta())
        assert docs == before

    def test_da_stage_adds_documents(self):
        spec, docs = small_corpus(seed=14)
        cfg = small_config(mode="ssr_unif", epochs=1, mun_epochs=1, da="mixed",
                           da_fraction=0.5)
        _, report = pipeline_ssr(docs, cfg, meta=spec.meta())
        aug_stage = [s for s in report["stages"] if s["stage"] == "augment"]
        n_sup = len(by_split(docs, "sup"))
        assert aug_stage and aug_stage[0]["added"] == round(0.5 * n_sup)

    def test_checkpoint_written_when_configured(self, tmp_path):
        spec, docs = small_corpus(seed=15)
        path = tmp_path / "out.npz"
        cfg = small_config(mode="semi", epochs=1, checkpoint_path=str(path))
        bundle, _ = pipeline_ssr(docs, cfg, meta=spec.meta())
        loaded, _, _, _ = load_checkpoint(path)
        assert_params_equal(params_snapshot(bundle), params_snapshot(loaded))

    def test_invalid_config_rejected(self):
        _, docs = small_corpus(seed=16)
        with pytest.raises(ContractError):
            pipeline_ssr(docs, small_config(mode="bogus"))
        with pytest.raises(ContractError):
            pipeline_ssr(docs, small_config(batch_size=0))
        with pytest.raises(ContractError):
            pipeline_ssr(docs, small_config(learning_rate=-1.0))


class TestProfiles:
    def test_paper_profile_values(self):
        cfg = TrainConfig.paper_profile(mode="semi")
        assert cfg.learning_rate == pytest.approx(2e-5)
        assert cfg.batch_size == 4
        assert cfg.epochs == 30

    def test_default_strategy_weights(self):
        w = LossWeights()
        assert w.lambda_unif == w.lambda_virt == w.lambda_diff == 0.1
        assert w.alpha == 0.2
