"""Training orchestration: schedule, clipping, optimizer, determinism,
checkpoint resume, stage isolation, augmentation accounting."""

import numpy as np
import pytest

from docrelex import autodiff as ad
from docrelex import corpus as C
from docrelex import pipeline as P
from docrelex.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from docrelex.encoder import EncoderConfig
from docrelex.metrics import gold_triples, micro_f1
from docrelex.model import Model, ModelConfig
from docrelex.optim import AdamW, clip_gradients, clip_gradients_, lr_schedule


SPEC = C.SynthSpec(num_documents=8, num_relations=4, entities_per_doc=4,
                   vocab_size=60, pairs_per_doc=2)
CORPUS = C.generate_synthetic(SPEC, seed=5)
VOCAB = C.synthetic_vocabulary(SPEC)


def tiny_model(seed=0, dim=16, layers=1):
    enc = EncoderConfig(vocab_size=len(VOCAB), dim=dim, heads=2, layers=layers,
                        ffn_dim=32, max_len=128, dropout=0.1)
    return Model(ModelConfig(encoder=enc, bilinear_groups=4), CORPUS.scheme.ids, seed=seed)


def tiny_config(**overrides):
    base = dict(seed=3, batch_size=3, epochs=2, pretrain_epochs=2,
                lr_backbone=1e-3, lr_other=2e-3, pretrain_lr=1e-3,
                era_threshold=100, cl_queue_size=10)
    base.update(overrides)
    return P.TrainConfig(**base)


# ----------------------------------------------------------------------
# schedule and clipping
def test_lr_schedule_boundaries():
    assert lr_schedule(0, 100, 0.1, 2.0) == 0.0
    assert lr_schedule(10, 100, 0.1, 2.0) == 2.0
    assert lr_schedule(100, 100, 0.1, 2.0) == 0.0
    assert lr_schedule(55, 100, 0.1, 2.0) == pytest.approx(2.0 * 45 / 90)
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 0.1, 2.0)


def test_lr_schedule_no_warmup():
    assert lr_schedule(0, 10, 0.0, 1.0) == 1.0
    assert lr_schedule(5, 10, 0.0, 1.0) == 0.5


def test_clip_below_threshold_unchanged():
    grads = [np.array([0.3, 0.4])]
    out = clip_gradients(grads, 1.0)
    np.testing.assert_array_equal(out[0], grads[0])


def test_clip_three_four_five():
    out = clip_gradients([np.array([3.0, 4.0])], 1.0)
    np.testing.assert_allclose(out[0], [0.6, 0.8], rtol=1e-12)


def test_clip_post_norm_bounded():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(4, 5)) * 10, rng.normal(size=7) * 10]
    out = clip_gradients(grads, 1.0)
    norm = np.sqrt(sum((g**2).sum() for g in out))
    assert norm <= 1.0 + 1e-9


def test_clip_inplace_over_tensor_grads():
    a = ad.parameter(np.zeros(2))
    b = ad.parameter(np.zeros(3))
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([0.0, 4.0, 0.0])
    pre = clip_gradients_({"a": a, "b": b}, 1.0)
    assert pre == pytest.approx(5.0)
    total = np.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    assert total == pytest.approx(1.0)


# ----------------------------------------------------------------------
# optimizer
def test_adamw_distinct_group_learning_rates():
    pa = ad.parameter(np.full((2, 2), 1.0))
    pb = ad.parameter(np.full((2, 2), 1.0))
    opt = AdamW({"a": pa, "b": pb}, {"g1": ["a"], "g2": ["b"]}, weight_decay=0.0)
    pa.grad = np.ones((2, 2))
    pb.grad = np.ones((2, 2))
    opt.step({"g1": 0.1, "g2": 0.01})
    # first Adam step moves each weight by exactly lr * g/(|g| + eps)
    expected_a = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    expected_b = 1.0 - 0.01 * (1.0 / (1.0 + 1e-8))
    np.testing.assert_allclose(pa.data, expected_a, rtol=1e-12)
    np.testing.assert_allclose(pb.data, expected_b, rtol=1e-12)


def test_adamw_decay_skips_vectors_and_gradless_params():
    w = ad.parameter(np.full((2, 2), 2.0))
    bias = ad.parameter(np.full(2, 2.0))
    idle = ad.parameter(np.full((2, 2), 2.0))
    opt = AdamW({"w": w, "bias": bias, "idle": idle},
                {"all": ["w", "bias", "idle"]}, weight_decay=0.5)
    w.grad = np.zeros((2, 2))
    bias.grad = np.zeros(2)
    opt.step({"all": 0.1})
    np.testing.assert_allclose(w.data, 2.0 - 0.1 * 0.5 * 2.0)   # decayed
    np.testing.assert_array_equal(bias.data, np.full(2, 2.0))   # 1-D: no decay
    np.testing.assert_array_equal(idle.data, np.full((2, 2), 2.0))  # no grad: untouched


def test_adamw_requires_partition():
    p = ad.parameter(np.zeros(2))
    with pytest.raises(ValueError):
        AdamW({"a": p}, {"g": []})


# ----------------------------------------------------------------------
# checkpoint container
def test_checkpoint_round_trip_bitwise(tmp_path):
    path = tmp_path / "x.ckpt"
    tensors = {
        "w": np.arange(6.0).reshape(2, 3),
        "ids": np.array([3, 1, 4], dtype=np.int64),
    }
    state = {"epoch": 2, "note": "abc", "big": 2**80}
    save_checkpoint(path, tensors, state)
    loaded, loaded_state = load_checkpoint(path)
    assert loaded_state == state
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
        assert loaded[k].dtype == tensors[k].dtype
    # saving the loaded content reproduces the file byte for byte
    path2 = tmp_path / "y.ckpt"
    save_checkpoint(path2, loaded, loaded_state)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.ones(4)}, {})
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.ones(4)}, {})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.ones(2)}, {})
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_wrong_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


# ----------------------------------------------------------------------
# augment-set resolution
def test_resolve_augment_set_explicit_override():
    cfg = tiny_config(era_relations=("R01",))
    assert P.resolve_augment_set(CORPUS, cfg) == {"R01"}


def test_resolve_augment_set_threshold():
    freqs = C.relation_frequencies(CORPUS)
    cfg = tiny_config(era_threshold=3)
    expected = {r for r in CORPUS.scheme.ids if freqs.get(r, 0) < 3}
    assert P.resolve_augment_set(CORPUS, cfg) == expected


def test_resolve_augment_set_median_default():
    freqs = C.relation_frequencies(CORPUS)
    med = P.median_frequency_threshold(freqs, CORPUS.scheme.ids)
    cfg = tiny_config(era_threshold=None)
    expected = {r for r in CORPUS.scheme.ids if freqs.get(r, 0) < med}
    assert P.resolve_augment_set(CORPUS, cfg) == expected


def test_resolve_augment_set_disabled():
    assert P.resolve_augment_set(CORPUS, tiny_config(use_era=False)) == frozenset()


# ----------------------------------------------------------------------
# fine-tuning determinism and resume
def run_finetune(seed=3, epochs=2, **overrides):
    cfg = tiny_config(seed=seed, epochs=epochs, **overrides)
    trainer = P.FineTuner(CORPUS, VOCAB, cfg, tiny_model(seed=1))
    trainer.train()
    return trainer


def params_equal(a, b):
    return all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_finetune_deterministic_bitwise():
    t1 = run_finetune()
    t2 = run_finetune()
    assert params_equal(t1.model.parameters(), t2.model.parameters())
    assert t1.history == t2.history
    t3 = run_finetune(seed=4)
    assert not params_equal(t1.model.parameters(), t3.model.parameters())


def test_finetune_resume_mid_epoch_matches_uninterrupted(tmp_path):
    cfg = tiny_config(epochs=3)
    straight = P.FineTuner(CORPUS, VOCAB, cfg, tiny_model(seed=1))
    straight.train()

    broken = P.FineTuner(CORPUS, VOCAB, cfg, tiny_model(seed=1))
    # stop mid-epoch: 8 docs / batch 3 = 3 steps per epoch; take 4 steps
    for _ in range(4):
        broken.step_batch()
    path = tmp_path / "mid.ckpt"
    broken.save(path)

    resumed = P.FineTuner.resume(path, CORPUS)
    assert resumed.epoch == broken.epoch and resumed.cursor == broken.cursor
    resumed.train()
    assert params_equal(straight.model.parameters(), resumed.model.parameters())
    # the metrics records after the split point also line up
    tail = [r for r in straight.history if r["step"] >= 4]
    assert tail == resumed.history


def test_finetune_checkpoint_bitwise_stable(tmp_path):
    trainer = P.FineTuner(CORPUS, VOCAB, tiny_config(), tiny_model(seed=1))
    trainer.run_epoch()
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    trainer.save(p1)
    P.FineTuner.resume(p1, CORPUS).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_finetune_best_model_tracked_on_dev():
    cfg = tiny_config(epochs=2)
    trainer = P.FineTuner(CORPUS, VOCAB, cfg, tiny_model(seed=1), dev_corpus=CORPUS)
    trainer.train()
    assert trainer.best_metric is not None
    best = trainer.best_model()
    assert set(best.parameters()) == set(trainer.model.parameters())


def test_finetune_era_triple_accounting():
    cfg = tiny_config(epochs=1, use_era=True, era_num_augments=2, batch_size=8)
    trainer = P.FineTuner(CORPUS, VOCAB, cfg, tiny_model(seed=1))
    aug_set = trainer.era_config.augment_set
    assert aug_set  # threshold chosen so some relations qualify
    trainer.run_epoch()
    seen = sum(r["triples"] for r in trainer.history if "triples" in r)
    expected = 0
    for doc in CORPUS.documents:
        n = len(doc.entities)
        orig = n * (n - 1)
        qualifying = sum(1 for p in doc.labels if p.relations & aug_set)
        expected += orig + 2 * qualifying
    assert seen == expected


def test_finetune_rejects_empty_corpus():
    empty = C.Corpus([], CORPUS.scheme)
    with pytest.raises(ValueError):
        P.FineTuner(empty, VOCAB, tiny_config(), tiny_model())


# ----------------------------------------------------------------------
# pretraining
def test_pretrain_cold_start_and_determinism():
    cfg = tiny_config(pretrain_epochs=2)
    t1 = P.Pretrainer(CORPUS, VOCAB, cfg, tiny_model(seed=2))
    t1.train()
    losses = [r["loss"] for r in t1.history if "loss" in r]
    assert losses and all(np.isfinite(x) for x in losses)
    for rid in CORPUS.scheme.ids:
        assert t1.bank.size(rid) <= cfg.cl_queue_size

    t2 = P.Pretrainer(CORPUS, VOCAB, cfg, tiny_model(seed=2))
    t2.train()
    assert params_equal(t1.model.parameters(), t2.model.parameters())
    assert t1.history == t2.history


def test_pretrain_requires_contrastive_stage_and_labels():
    with pytest.raises(ValueError, match="contrastive"):
        P.Pretrainer(CORPUS, VOCAB, tiny_config(use_cl=False), tiny_model())
    stripped = C.Corpus(
        [C.RawDocument(d.title, d.sentences, d.entities, ()) for d in CORPUS.documents],
        CORPUS.scheme,
    )
    with pytest.raises(ValueError, match="labeled"):
        P.Pretrainer(stripped, VOCAB, tiny_config(), tiny_model())


def test_pretrain_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(pretrain_epochs=2)
    straight = P.Pretrainer(CORPUS, VOCAB, cfg, tiny_model(seed=2))
    straight.train()

    broken = P.Pretrainer(CORPUS, VOCAB, cfg, tiny_model(seed=2))
    for _ in range(2):  # mid-epoch
        broken.step_batch()
    path = tmp_path / "pre.ckpt"
    broken.save(path)
    resumed = P.Pretrainer.resume(path, CORPUS)
    resumed.train()
    assert params_equal(straight.model.parameters(), resumed.model.parameters())
    for k in straight.shadow:
        np.testing.assert_array_equal(resumed.shadow[k].data, straight.shadow[k].data)
    for rid in CORPUS.scheme.ids:
        np.testing.assert_array_equal(
            resumed.bank.gather({rid}), straight.bank.gather({rid})
        )


def test_stage_isolation_projection_never_read_in_finetune():
    cfg = tiny_config(epochs=2)
    base = tiny_model(seed=6)
    snapshot = {k: v.data.copy() for k, v in base.parameters().items()}

    def rebuild(perturb_projection):
        params = {k: ad.parameter(v.copy()) for k, v in snapshot.items()}
        if perturb_projection:
            for k in params:
                if k.startswith("proj."):
                    params[k].data = params[k].data + 7.5
        return Model(base.config, base.relations, params=params)

    t1 = P.FineTuner(CORPUS, VOCAB, cfg, rebuild(False))
    t1.train()
    t2 = P.FineTuner(CORPUS, VOCAB, cfg, rebuild(True))
    t2.train()
    for k in t1.model.parameters():
        if k.startswith("proj."):
            continue
        np.testing.assert_array_equal(
            t1.model.parameters()[k].data, t2.model.parameters()[k].data,
            err_msg=f"projection perturbation leaked into {k}",
        )


def test_transfer_for_finetuning_drops_projection():
    cfg = tiny_config(pretrain_epochs=1)
    pre = P.Pretrainer(CORPUS, VOCAB, cfg, tiny_model(seed=2))
    pre.train()
    fresh = P.transfer_for_finetuning(pre.model, seed=11)
    for k, p in fresh.parameters().items():
        if k.startswith("proj."):
            assert not np.array_equal(p.data, pre.model.parameters()[k].data)
        else:
            np.testing.assert_array_equal(p.data, pre.model.parameters()[k].data)


def test_predict_corpus_returns_triples():
    trainer = run_finetune(epochs=1)
    preds = P.predict_corpus(trainer.model, CORPUS, VOCAB)
    for item in preds:
        doc_id, h, rid, t = item
        assert rid in CORPUS.scheme.ids
        assert h != t


def test_full_finetune_gradcheck_micro_config():
    # 1 document, deterministic loss closure (no dropout, fixed masks)
    spec = C.SynthSpec(num_documents=1, num_relations=3, entities_per_doc=3,
                       vocab_size=40, pairs_per_doc=2)
    corpus = C.generate_synthetic(spec, seed=2)
    vocab = C.synthetic_vocabulary(spec)
    enc = EncoderConfig(vocab_size=len(vocab), dim=16, heads=2, layers=2,
                        ffn_dim=32, max_len=64, dropout=0.0)
    model = Model(ModelConfig(encoder=enc, bilinear_groups=4), corpus.scheme.ids, seed=4)
    doc = corpus.documents[0]
    marked = C.insert_markers(doc, vocab, 64)
    pairs = C.document_pairs(doc)
    from docrelex.era import EraConfig, augment
    from docrelex.model import score_triples
    from docrelex.relation_encoding import build_triples
    from docrelex.relation_head import atl_loss_batch

    era_cfg = EraConfig(0.2, 1, frozenset({corpus.scheme.ids[0]}))

    def loss():
        rng = np.random.default_rng(123)  # identical masks on every call
        out = model.encoder.encode(marked)
        triples = build_triples(out, marked, pairs)
        _, triples = augment(triples, out.hidden, era_cfg, rng)
        scores = score_triples(model, triples)
        total, n = atl_loss_batch(scores, [t.labels for t in triples], model.head)
        return total * (1.0 / n)

    value = loss()
    model.zero_grad()
    value.backward()
    rng = np.random.default_rng(0)
    for name, p in sorted(model.parameters().items()):
        if name.startswith("proj."):
            continue  # projection takes no part in fine-tuning
        flat = p.data.reshape(-1)
        take = min(4, flat.size)
        coords = sorted(rng.choice(flat.size, size=take, replace=False))
        coords = [np.unravel_index(c, p.data.shape) for c in coords]
        numeric = ad.numeric_gradient(loss, p, step=1e-5, coords=coords)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        for c in coords:
            a, n_ = analytic[c], numeric[c]
            assert abs(a - n_) <= 1e-3 * max(1e-4, abs(n_)), (
                f"{name}{c}: analytic {a} vs numeric {n_}"
            )
