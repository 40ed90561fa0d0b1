"""Momentum-contrast pretraining machinery.

Anchor relation vectors come from the online model through a two-layer
projection; key vectors come from a shadow copy of all trainable parameters,
updated as an exponential moving average and never by gradients. Keys are
stored in one FIFO queue per relation so positives and negatives can be
reused across steps without large batches.
"""

from __future__ import annotations

from collections import deque
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ProjectionParams",
    "project",
    "l2_normalize",
    "momentum_update",
    "RelationQueueBank",
    "infonce",
]

_NORM_EPS = 1e-12


class ProjectionParams:
    """Two-layer map from the concatenated fused pair vectors to the relation
    embedding used only during contrastive pretraining."""

    def __init__(self, dim: int, out_dim: int | None = None, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.dim = dim
        self.out_dim = out_dim if out_dim is not None else dim
        if self.out_dim <= 0:
            raise ValueError("projection output dimension must be positive")
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(seed)
            self.params = {
                "proj.w1": ad.parameter(rng.normal(0.0, 0.02, size=(2 * dim, dim))),
                "proj.b1": ad.parameter(np.zeros(dim)),
                "proj.w2": ad.parameter(rng.normal(0.0, 0.02, size=(dim, self.out_dim))),
                "proj.b2": ad.parameter(np.zeros(self.out_dim)),
            }

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def l2_normalize(x: Tensor, eps: float = _NORM_EPS) -> Tensor:
    """Unit-normalize along the last axis. An all-zero vector maps to zero
    (its similarity to anything is then 0), instead of dividing by zero."""
    sq = (x * x).sum(axis=-1, keepdims=True) if x.ndim > 1 else (x * x).sum()
    bump = np.maximum(eps * eps - sq.data, 0.0)
    return x / (sq + ad.constant(bump)).sqrt()


def project(h: Tensor, t: Tensor, params: ProjectionParams) -> Tensor:
    """relu(W2 (W1 [h:t] + b1) + b2), unit-normalized. Head comes first in
    the concatenation; the relu sits on the outer layer."""
    single = h.ndim == 1
    hr = h.reshape(1, -1) if single else h
    tr = t.reshape(1, -1) if single else t
    joined = ad.concat([hr, tr], axis=1)
    p = params.params
    z = (joined @ p["proj.w1"] + p["proj.b1"]) @ p["proj.w2"] + p["proj.b2"]
    out = l2_normalize(ad.relu(z))
    return out.reshape(-1) if single else out


def momentum_update(shadow: Mapping[str, Tensor], online: Mapping[str, Tensor],
                    momentum: float) -> None:
    """shadow <- momentum * shadow + (1 - momentum) * online, in place.

    The shadow tensors never require grad; the online model is untouched.
    """
    if shadow.keys() != online.keys():
        raise ValueError("parameter sets do not match")
    for name, target in shadow.items():
        source = online[name]
        if target.data.shape != source.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        target.data = momentum * target.data + (1.0 - momentum) * source.data


def make_shadow(online: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """A detached copy of every parameter, to be momentum-updated."""
    return {name: ad.constant(p.data.copy()) for name, p in online.items()}


class RelationQueueBank:
    """One bounded FIFO queue of key vectors per relation.

    A multi-label key is pushed to each of its relations' queues under one
    shared id, so unions across queues can deduplicate it; the same vector may
    still legitimately appear in both the positive and the negative union of
    a given anchor when it sits in queues on both sides.
    """

    def __init__(self, relations: Sequence[str], capacity: int, dim: int):
        if capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.relations = tuple(relations)
        self._queues: dict[str, deque] = {
            r: deque(maxlen=capacity) for r in self.relations
        }
        self._next_id = 0

    def enqueue(self, vector: np.ndarray, relations: Iterable[str]) -> None:
        """Push a detached copy of ``vector`` to every queue in ``relations``.
        Keys with no relation are not stored anywhere."""
        rels = sorted(set(relations))
        if not rels:
            return
        v = np.array(vector, dtype=np.float64, copy=True)
        if v.shape != (self.dim,):
            raise ValueError(f"expected a vector of dimension {self.dim}")
        key_id = self._next_id
        self._next_id += 1
        for r in rels:
            self._queues[r].append((key_id, v))

    def size(self, relation: str) -> int:
        return len(self._queues[relation])

    def gather(self, relations: Iterable[str]) -> np.ndarray:
        """Union of the given queues, deduplicated by key id."""
        seen: dict[int, np.ndarray] = {}
        for r in sorted(set(relations)):
            for key_id, v in self._queues[r]:
                seen.setdefault(key_id, v)
        if not seen:
            return np.zeros((0, self.dim))
        return np.stack([seen[k] for k in sorted(seen)])

    def positives(self, labels: Iterable[str]) -> np.ndarray:
        return self.gather(labels)

    def negatives(self, labels: Iterable[str]) -> np.ndarray:
        complement = set(self.relations) - set(labels)
        return self.gather(complement)

    # checkpoint support -------------------------------------------------
    def state(self) -> dict:
        return {
            "next_id": self._next_id,
            "queues": {
                r: {
                    "ids": [int(k) for k, _ in q],
                    "vectors": np.stack([v for _, v in q]) if q else np.zeros((0, self.dim)),
                }
                for r, q in self._queues.items()
            },
        }

    def restore(self, state: dict) -> None:
        self._next_id = int(state["next_id"])
        for r, payload in state["queues"].items():
            self._queues[r] = deque(
                zip(payload["ids"], [np.array(v) for v in payload["vectors"]]),
                maxlen=self.capacity,
            )


def infonce(x: Tensor, positives: np.ndarray, negatives: np.ndarray,
            tau: float) -> Tensor:
    """Temperature-scaled contrastive loss for one anchor.

    Each positive is softmaxed against itself plus ALL negatives (positives do
    not compete with each other). Empty positives give a zero loss by
    convention; inputs are assumed unit-normalized.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if len(positives) == 0:
        return ad.constant(0.0)
    pos_sims = ad.matvec(ad.constant(positives), x) * (1.0 / tau)
    if len(negatives) == 0:
        return ad.constant(0.0)
    neg_sims = ad.matvec(ad.constant(negatives), x) * (1.0 / tau)
    lse_neg = ad.logsumexp(neg_sims, axis=0)
    terms = ad.logaddexp(pos_sims, lse_neg) - pos_sims
    return terms.sum()
