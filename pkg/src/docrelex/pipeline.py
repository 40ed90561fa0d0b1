"""Two-stage training orchestration.

Stage one (optional) is contrastive pretraining on a distant or synthetic
corpus; stage two fine-tunes the relation head with the adaptive-threshold
objective, optionally augmenting low-frequency relations. Both stages are
deterministic under a fixed seed in single-worker mode, checkpoint their full
state (parameters, optimizer moments, RNG streams, queues), and can resume
mid-epoch to the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import reduce
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (
    Corpus,
    MarkedDocument,
    Vocabulary,
    document_pairs,
    insert_markers,
    relation_frequencies,
    select_augment_set,
)
from .encoder import EncoderConfig
from .era import EraConfig, augment
from .metrics import Triple, gold_triples, micro_f1
from .model import Model, ModelConfig, predict_pairs, score_triples
from .moco import RelationQueueBank, infonce, make_shadow, momentum_update, project
from .optim import AdamW, clip_gradients_, lr_schedule
from .relation_encoding import build_triples
from .relation_head import atl_loss_batch, fuse

__all__ = [
    "TrainConfig",
    "resolve_augment_set",
    "median_frequency_threshold",
    "FineTuner",
    "Pretrainer",
    "finetune",
    "pretrain",
    "predict_corpus",
    "load_model",
    "save_model_checkpoint",
    "transfer_for_finetuning",
]

_PRETRAIN_STAGE = 0
_FINETUNE_STAGE = 1


@dataclass(frozen=True)
class TrainConfig:
    """All training hyperparameters. The stated defaults are the published
    protocol values; desk-scale runs usually retune the learning rates and
    epoch counts (see the profiles in the command-line layer)."""

    seed: int = 0
    batch_size: int = 8
    epochs: int = 30
    pretrain_epochs: int = 5
    lr_backbone: float = 5e-5
    lr_other: float = 1e-4
    pretrain_lr: float = 1e-5
    warmup_ratio: float = 0.06
    max_grad_norm: float = 1.0
    weight_decay: float = 0.01
    use_era: bool = True
    use_cl: bool = True
    era_drop_prob: float = 0.1
    era_num_augments: int = 2
    era_threshold: int | None = None
    era_relations: tuple[str, ...] | None = None
    cl_tau: float = 0.5
    cl_queue_size: int = 500
    cl_momentum: float = 0.99
    negative_ratio: float | None = None

    def __post_init__(self):
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup ratio must lie in [0, 1)")
        if self.max_grad_norm <= 0:
            raise ValueError("max gradient norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


def median_frequency_threshold(freqs: dict[str, int], relations: Sequence[str]) -> int:
    """Default augment-set cutoff: the median training frequency over the
    scheme (missing relations count as zero)."""
    values = [freqs.get(r, 0) for r in relations]
    return int(np.median(values)) if values else 0


def resolve_augment_set(corpus: Corpus, config: TrainConfig) -> frozenset[str]:
    if not config.use_era or config.era_num_augments == 0:
        return frozenset()
    if config.era_relations is not None:
        return select_augment_set({}, 0, explicit=config.era_relations)
    freqs = relation_frequencies(corpus)
    threshold = config.era_threshold
    if threshold is None:
        threshold = median_frequency_threshold(freqs, corpus.scheme.ids)
    return select_augment_set(freqs, threshold, relations=corpus.scheme.ids)


def _spawn_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _epoch_permutation(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    return _spawn_rng(seed, stage, epoch).permutation(n)


def _sum(tensors):
    return reduce(lambda a, b: a + b, tensors)


def predict_corpus(model: Model, corpus: Corpus, vocab: Vocabulary) -> set[Triple]:
    """Eval-mode predictions over every ordered entity pair of every document."""
    preds: set[Triple] = set()
    max_len = model.config.encoder.max_len
    for doc in corpus.documents:
        marked = insert_markers(doc, vocab, max_len)
        preds |= predict_pairs(model, marked, document_pairs(doc))
    return preds


class _TrainerBase:
    stage: int

    def __init__(self, corpus: Corpus, vocab: Vocabulary, config: TrainConfig,
                 model: Model, on_record: Callable[[dict], None] | None = None):
        if len(corpus.documents) == 0:
            raise ValueError("cannot train on an empty corpus")
        self.corpus = corpus
        self.vocab = vocab
        self.config = config
        self.model = model
        self.on_record = on_record
        self.marked: list[MarkedDocument] = [
            insert_markers(doc, vocab, model.config.encoder.max_len)
            for doc in corpus.documents
        ]
        self.optimizer = AdamW(
            model.parameters(), model.parameter_groups(),
            weight_decay=config.weight_decay,
        )
        self.rng = _spawn_rng(config.seed, self.stage)
        self.epoch = 0
        self.cursor = 0
        self.step = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------------
    def _record(self, record: dict) -> None:
        self.history.append(record)
        if self.on_record is not None:
            self.on_record(record)

    def _lr(self, base: float) -> float:
        # evaluated at step+1 over an extended horizon so no actual update
        # ever runs at exactly zero learning rate
        return lr_schedule(self.step + 1, self.total_steps + 1,
                           self.config.warmup_ratio, base)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.marked) / self.config.batch_size)

    def _restore_counters(self, state: dict) -> None:
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self.step = int(state["step"])
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        self.rng = rng

    def _base_state(self) -> dict:
        return {
            "stage": self.stage,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "step": self.step,
            "opt_t": self.optimizer.t,
            "rng": self.rng.bit_generator.state,
            "config": _config_to_json(self.config),
            "model": {
                "encoder": asdict(self.model.config.encoder),
                "bilinear_groups": self.model.config.bilinear_groups,
                "proj_dim": self.model.config.proj_dim,
                "relations": list(self.model.relations),
            },
            "vocab_tokens": self.vocab.tokens(),
        }

    def _model_tensors(self) -> dict[str, np.ndarray]:
        out = {f"model.{n}": p.data for n, p in self.model.parameters().items()}
        out.update(self.optimizer.state_tensors())
        return out


def _config_to_json(config: TrainConfig) -> dict:
    payload = asdict(config)
    if payload["era_relations"] is not None:
        payload["era_relations"] = list(payload["era_relations"])
    return payload


def _config_from_json(payload: dict) -> TrainConfig:
    data = dict(payload)
    if data.get("era_relations") is not None:
        data["era_relations"] = tuple(data["era_relations"])
    return TrainConfig(**data)


def _model_from_state(state: dict, tensors: dict[str, np.ndarray]) -> tuple[Model, Vocabulary]:
    spec = state["model"]
    config = ModelConfig(
        encoder=EncoderConfig(**spec["encoder"]),
        bilinear_groups=spec["bilinear_groups"],
        proj_dim=spec["proj_dim"],
    )
    params = {
        name[len("model."):]: ad.parameter(arr)
        for name, arr in tensors.items()
        if name.startswith("model.")
    }
    model = Model(config, spec["relations"], params=params)
    vocab = Vocabulary(state["vocab_tokens"])
    return model, vocab


def load_model(path: str | Path) -> tuple[Model, Vocabulary, dict]:
    """Model, vocabulary, and raw state from any training checkpoint."""
    tensors, state = load_checkpoint(path)
    model, vocab = _model_from_state(state, tensors)
    return model, vocab, state


def save_model_checkpoint(path: str | Path, model: Model, vocab: Vocabulary,
                          extra_state: dict | None = None) -> None:
    """Evaluation-ready checkpoint holding only the model and vocabulary
    (no optimizer or trainer state, so it cannot resume training)."""
    tensors = {f"model.{n}": p.data for n, p in model.parameters().items()}
    state = {
        "stage": "model-only",
        "model": {
            "encoder": asdict(model.config.encoder),
            "bilinear_groups": model.config.bilinear_groups,
            "proj_dim": model.config.proj_dim,
            "relations": list(model.relations),
        },
        "vocab_tokens": vocab.tokens(),
    }
    if extra_state:
        state.update(extra_state)
    save_checkpoint(path, tensors, state)


# ----------------------------------------------------------------------
class FineTuner(_TrainerBase):
    """Adaptive-threshold training over all entity pairs, with optional
    augmentation of low-frequency relations. Tracks the best parameters by
    dev micro F1 when a dev corpus is supplied."""

    stage = _FINETUNE_STAGE

    def __init__(self, corpus: Corpus, vocab: Vocabulary, config: TrainConfig,
                 model: Model, dev_corpus: Corpus | None = None,
                 on_record: Callable[[dict], None] | None = None):
        super().__init__(corpus, vocab, config, model, on_record)
        self.dev_corpus = dev_corpus
        self.dev_gold = gold_triples(dev_corpus) if dev_corpus is not None else None
        self.era_config = EraConfig(
            drop_prob=config.era_drop_prob,
            num_augments=config.era_num_augments,
            augment_set=resolve_augment_set(corpus, config),
        )
        self.total_steps = config.epochs * self.steps_per_epoch
        self.best_metric: float | None = None
        self.best_params: dict[str, np.ndarray] | None = None

    # ------------------------------------------------------------------
    def _batch_loss(self, doc_indices: np.ndarray):
        pieces = []
        count = 0
        for di in doc_indices:
            marked = self.marked[int(di)]
            doc = marked.source
            pairs = document_pairs(
                doc,
                negative_ratio=self.config.negative_ratio,
                rng=self.rng if self.config.negative_ratio is not None else None,
            )
            if not pairs:
                continue
            encoding = self.model.encoder.encode(marked, train=True, rng=self.rng)
            triples = build_triples(encoding, marked, pairs)
            if self.config.use_era:
                _, triples = augment(triples, encoding.hidden, self.era_config, self.rng)
            scores = score_triples(self.model, triples)
            doc_sum, n = atl_loss_batch(scores, [t.labels for t in triples], self.model.head)
            pieces.append(doc_sum)
            count += n
        if not pieces:
            return None, 0
        return _sum(pieces) * (1.0 / count), count

    def step_batch(self) -> bool:
        """Process one batch; returns True when an epoch boundary is crossed.
        The document order for the current epoch is recomputed from the seed,
        so a trainer resumed mid-epoch continues on the same permutation."""
        n = len(self.marked)
        perm = _epoch_permutation(self.config.seed, self.stage, self.epoch, n)
        batch = perm[self.cursor:self.cursor + self.config.batch_size]
        loss, count = self._batch_loss(batch)
        if loss is not None:
            self.model.zero_grad()
            loss.backward()
            grad_norm = clip_gradients_(self.model.parameters(),
                                        self.config.max_grad_norm)
            self.optimizer.step({
                "backbone": self._lr(self.config.lr_backbone),
                "other": self._lr(self.config.lr_other),
            })
            self.optimizer.zero_grad()
            self._record({
                "stage": "finetune",
                "epoch": self.epoch,
                "step": self.step,
                "loss": float(loss.data),
                "lr": self._lr(self.config.lr_other),
                "triples": count,
                "grad_norm": grad_norm,
            })
        self.cursor += len(batch)
        self.step += 1
        if self.cursor < n:
            return False
        self.cursor = 0
        self.epoch += 1
        self._end_of_epoch()
        return True

    def _end_of_epoch(self) -> None:
        if self.dev_corpus is None:
            return
        metric = micro_f1(
            predict_corpus(self.model, self.dev_corpus, self.vocab),
            self.dev_gold,
        )
        self._record({
            "stage": "finetune",
            "epoch": self.epoch,
            "step": self.step,
            "dev_micro_f1": metric,
        })
        if self.best_metric is None or metric > self.best_metric:
            self.best_metric = metric
            self.best_params = {
                n_: p.data.copy() for n_, p in self.model.parameters().items()
            }

    def run_epoch(self) -> None:
        while not self.step_batch():
            pass

    def train(self, epochs: int | None = None) -> Model:
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
        return self.best_model()

    def best_model(self) -> Model:
        """Best dev checkpoint when available, otherwise the current model."""
        if self.best_params is None:
            return self.model
        params = {n: ad.parameter(arr.copy()) for n, arr in self.best_params.items()}
        return Model(self.model.config, self.model.relations, params=params)

    # checkpointing ------------------------------------------------------
    def save(self, path: str | Path) -> None:
        tensors = self._model_tensors()
        state = self._base_state()
        state["best_metric"] = self.best_metric
        if self.best_params is not None:
            tensors.update({f"best.{n}": arr for n, arr in self.best_params.items()})
        save_checkpoint(path, tensors, state)

    @classmethod
    def resume(cls, path: str | Path, corpus: Corpus,
               dev_corpus: Corpus | None = None,
               on_record: Callable[[dict], None] | None = None) -> "FineTuner":
        tensors, state = load_checkpoint(path)
        if state["stage"] != _FINETUNE_STAGE:
            raise ValueError("checkpoint does not belong to the fine-tune stage")
        model, vocab = _model_from_state(state, tensors)
        config = _config_from_json(state["config"])
        trainer = cls(corpus, vocab, config, model, dev_corpus, on_record)
        trainer.optimizer.restore_tensors(tensors, state["opt_t"])
        trainer._restore_counters(state)
        trainer.best_metric = state.get("best_metric")
        best = {
            name[len("best."):]: np.array(arr)
            for name, arr in tensors.items()
            if name.startswith("best.")
        }
        trainer.best_params = best or None
        return trainer


# ----------------------------------------------------------------------
class Pretrainer(_TrainerBase):
    """Contrastive pretraining with a momentum-updated shadow model and one
    key queue per relation.

    Per step: anchors come from the online model over the (possibly
    augmented) triples of the batch; keys come from the shadow model over the
    unaugmented triples and are pushed to their relations' queues before the
    loss is formed, so an anchor always finds its own key among the
    positives. Pairs without labels take no part. The projection layer is
    trained here and deliberately never read again during fine-tuning.
    """

    stage = _PRETRAIN_STAGE

    def __init__(self, corpus: Corpus, vocab: Vocabulary, config: TrainConfig,
                 model: Model, on_record: Callable[[dict], None] | None = None):
        if not config.use_cl:
            raise ValueError("pretraining requires the contrastive stage to be enabled")
        super().__init__(corpus, vocab, config, model, on_record)
        self.labeled: list[list[tuple[int, int, frozenset[str]]]] = [
            [(p.head, p.tail, p.relations) for p in doc.labels]
            for doc in corpus.documents
        ]
        if not any(self.labeled):
            raise ValueError("pretraining corpus has no labeled pairs")
        self.era_config = EraConfig(
            drop_prob=config.era_drop_prob,
            num_augments=config.era_num_augments,
            augment_set=resolve_augment_set(corpus, config),
        )
        self.total_steps = config.pretrain_epochs * self.steps_per_epoch
        self.shadow = make_shadow(model.parameters())
        self.shadow_model = Model(model.config, model.relations, params=self.shadow)
        self.bank = RelationQueueBank(
            corpus.scheme.ids, config.cl_queue_size, model.projection.out_dim
        )
        self._epoch_losses: list[float] = []
        self.epoch_mean_losses: list[float] = []

    # ------------------------------------------------------------------
    def _document_anchors(self, di: int):
        """Online anchors (with augmentation) and shadow keys for one doc."""
        marked = self.marked[di]
        labeled = self.labeled[di]
        if not labeled:
            return [], []
        encoding = self.model.encoder.encode(marked, train=True, rng=self.rng)
        triples = build_triples(encoding, marked, labeled)
        if self.config.use_era:
            _, triples = augment(triples, encoding.hidden, self.era_config, self.rng)
        e_h = ad.stack([t.e_head for t in triples])
        ctx = ad.stack([t.context for t in triples])
        e_t = ad.stack([t.e_tail for t in triples])
        h, t = fuse(e_h, ctx, e_t, self.model.head)
        projected = project(h, t, self.model.projection)
        anchors = [
            (ad.gather_rows(projected, np.array([i])).reshape(-1), tr.labels)
            for i, tr in enumerate(triples)
        ]

        shadow_encoding = self.shadow_model.encoder.encode(marked)
        shadow_triples = build_triples(shadow_encoding, marked, labeled)
        sh = ad.stack([t.e_head for t in shadow_triples])
        sc = ad.stack([t.context for t in shadow_triples])
        st = ad.stack([t.e_tail for t in shadow_triples])
        kh, kt = fuse(sh, sc, st, self.shadow_model.head)
        key_vectors = project(kh, kt, self.shadow_model.projection).data
        keys = [(key_vectors[i], tr.labels) for i, tr in enumerate(shadow_triples)]
        return anchors, keys

    def _batch_step(self, doc_indices: np.ndarray) -> float | None:
        anchors = []
        keys = []
        for di in doc_indices:
            doc_anchors, doc_keys = self._document_anchors(int(di))
            anchors.extend(doc_anchors)
            keys.extend(doc_keys)

        for vector, labels in keys:
            if np.linalg.norm(vector) > 0.5:  # skip degenerate all-zero keys
                self.bank.enqueue(vector, labels)

        terms = []
        for x, labels in anchors:
            positives = self.bank.positives(labels)
            if len(positives) == 0:
                continue  # queues for these relations have not warmed up yet
            negatives = self.bank.negatives(labels)
            terms.append(infonce(x, positives, negatives, self.config.cl_tau))

        loss_value: float | None = None
        if terms:
            loss = _sum(terms) * (1.0 / len(terms))
            loss_value = float(loss.data)
            # all terms can be vacuous zeros while the negative queues are
            # still empty; there is nothing to backpropagate then
            if loss.requires_grad:
                self.model.zero_grad()
                loss.backward()
                clip_gradients_(self.model.parameters(), self.config.max_grad_norm)
                lr = self._lr(self.config.pretrain_lr)
                self.optimizer.step({"backbone": lr, "other": lr})
                self.optimizer.zero_grad()
        momentum_update(self.shadow, self.model.parameters(), self.config.cl_momentum)
        return loss_value

    def step_batch(self) -> bool:
        """One batch of the contrastive stage; True at epoch boundaries."""
        n = len(self.marked)
        perm = _epoch_permutation(self.config.seed, self.stage, self.epoch, n)
        batch = perm[self.cursor:self.cursor + self.config.batch_size]
        loss_value = self._batch_step(batch)
        if loss_value is not None:
            self._epoch_losses.append(loss_value)
            self._record({
                "stage": "pretrain",
                "epoch": self.epoch,
                "step": self.step,
                "loss": loss_value,
                "lr": self._lr(self.config.pretrain_lr),
            })
        self.cursor += len(batch)
        self.step += 1
        if self.cursor < n:
            return False
        self.cursor = 0
        self.epoch += 1
        mean_loss = float(np.mean(self._epoch_losses)) if self._epoch_losses else float("nan")
        self._epoch_losses = []
        self.epoch_mean_losses.append(mean_loss)
        self._record({
            "stage": "pretrain",
            "epoch": self.epoch,
            "step": self.step,
            "epoch_mean_loss": mean_loss,
        })
        return True

    def run_epoch(self) -> float:
        while not self.step_batch():
            pass
        return self.epoch_mean_losses[-1]

    def train(self, epochs: int | None = None) -> Model:
        target = self.config.pretrain_epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
        return self.model

    # checkpointing ------------------------------------------------------
    def save(self, path: str | Path) -> None:
        tensors = self._model_tensors()
        tensors.update({f"shadow.{n}": p.data for n, p in self.shadow.items()})
        bank_state = self.bank.state()
        queue_ids = {}
        for rid, payload in bank_state["queues"].items():
            tensors[f"queue.{rid}"] = payload["vectors"]
            queue_ids[rid] = payload["ids"]
        state = self._base_state()
        state["queue_ids"] = queue_ids
        state["queue_next_id"] = bank_state["next_id"]
        state["epoch_losses"] = self._epoch_losses
        state["epoch_mean_losses"] = self.epoch_mean_losses
        save_checkpoint(path, tensors, state)

    @classmethod
    def resume(cls, path: str | Path, corpus: Corpus,
               on_record: Callable[[dict], None] | None = None) -> "Pretrainer":
        tensors, state = load_checkpoint(path)
        if state["stage"] != _PRETRAIN_STAGE:
            raise ValueError("checkpoint does not belong to the pretraining stage")
        model, vocab = _model_from_state(state, tensors)
        config = _config_from_json(state["config"])
        trainer = cls(corpus, vocab, config, model, on_record)
        trainer.optimizer.restore_tensors(tensors, state["opt_t"])
        trainer._restore_counters(state)
        for name, p in trainer.shadow.items():
            p.data = np.array(tensors[f"shadow.{name}"])
        trainer.bank.restore({
            "next_id": state["queue_next_id"],
            "queues": {
                rid: {"ids": ids, "vectors": tensors[f"queue.{rid}"]}
                for rid, ids in state["queue_ids"].items()
            },
        })
        trainer._epoch_losses = [float(x) for x in state["epoch_losses"]]
        trainer.epoch_mean_losses = [float(x) for x in state["epoch_mean_losses"]]
        return trainer


# ----------------------------------------------------------------------
def finetune(corpus: Corpus, vocab: Vocabulary, config: TrainConfig, model: Model,
             dev_corpus: Corpus | None = None,
             on_record: Callable[[dict], None] | None = None) -> FineTuner:
    """Run the full fine-tuning stage; returns the trainer (best model via
    ``best_model()``)."""
    trainer = FineTuner(corpus, vocab, config, model, dev_corpus, on_record)
    trainer.train()
    return trainer


def pretrain(corpus: Corpus, vocab: Vocabulary, config: TrainConfig, model: Model,
             on_record: Callable[[dict], None] | None = None) -> Pretrainer:
    """Run the full contrastive pretraining stage; returns the trainer."""
    trainer = Pretrainer(corpus, vocab, config, model, on_record)
    trainer.train()
    return trainer


def transfer_for_finetuning(pretrained: Model, seed: int = 0) -> Model:
    """Copy encoder and head parameters from a pretrained model into a fresh
    model; the pretraining projection stays behind (it is never used for
    relation prediction)."""
    fresh = Model(pretrained.config, pretrained.relations, seed=seed)
    fresh_params = fresh.parameters()
    for name, p in pretrained.parameters().items():
        if name.startswith("proj."):
            continue
        fresh_params[name].data = p.data.copy()
    return fresh
