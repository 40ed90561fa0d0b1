"""Build (head, context, tail) triple representations for entity pairs.

Entity vectors come from smooth-max pooling of marker rows; the pair context
is an attention-weighted average of token states, weighted by the elementwise
product of the two entities' attention distributions. Only the marker that
opens a mention span indexes the hidden states and the attention.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MarkedDocument
from .encoder import EncodingOutput, average_attention_heads

__all__ = [
    "ORIGINAL",
    "AUGMENTED",
    "TripleRepresentation",
    "entity_representation",
    "entity_attention",
    "pair_context",
    "build_triples",
]

ORIGINAL = "original"
AUGMENTED = "augmented"

# below this total mass the attention product is considered degenerate and the
# context falls back to uniform weights
ZERO_MASS_EPS = 1e-12


@dataclass(frozen=True)
class TripleRepresentation:
    head: int
    tail: int
    e_head: Tensor
    context: Tensor
    e_tail: Tensor
    pair_attention: Tensor  # unnormalized product, kept for augmentation
    labels: frozenset[str]
    origin: str = ORIGINAL

    def with_context(self, context: Tensor, origin: str) -> "TripleRepresentation":
        return replace(self, context=context, origin=origin)


def entity_representation(positions: Sequence[int], hidden: Tensor) -> Tensor:
    """Smooth-max (log-sum-exp) pooling of the entity's start-marker rows."""
    if len(positions) == 0:
        raise ValueError("entity has no marker positions")
    rows = ad.gather_rows(hidden, np.asarray(positions, dtype=np.intp))
    return ad.logsumexp(rows, axis=0)


def entity_attention(positions: Sequence[int], attention_avg: Tensor) -> Tensor:
    """Mean over the entity's mentions of their head-averaged attention rows.
    A mean of probability rows is itself a probability row."""
    if len(positions) == 0:
        raise ValueError("entity has no marker positions")
    rows = ad.gather_rows(attention_avg, np.asarray(positions, dtype=np.intp))
    return rows.mean(axis=0)


def _uniform_weights(length: int) -> Tensor:
    return ad.constant(np.full(length, 1.0 / length))


def pair_context(a_head: Tensor, a_tail: Tensor, hidden: Tensor,
                 eps: float = ZERO_MASS_EPS) -> tuple[Tensor, Tensor]:
    """Context vector for a pair plus the unnormalized attention product.

    When the two attention distributions have (numerically) disjoint support
    the product mass vanishes; rather than dividing by ~0, fall back to
    uniform weights over all tokens.
    """
    a_pair = a_head * a_tail
    total = a_pair.sum()
    if float(total.data) < eps:
        weights = _uniform_weights(hidden.shape[0])
    else:
        weights = a_pair / total
    context = ad.matvec(hidden.T, weights)
    return context, a_pair


def build_triples(encoding: EncodingOutput, marked: MarkedDocument,
                  pairs: Sequence[tuple[int, int, frozenset[str]]]) -> list[TripleRepresentation]:
    """One triple per ordered pair. Entity vectors and attention rows are
    computed once per entity and shared across its pairs."""
    n_entities = len(marked.entity_positions)
    needed = sorted({i for h, t, _ in pairs for i in (h, t)})
    for i in needed:
        if not 0 <= i < n_entities:
            raise ValueError(f"entity index {i} out of range for {marked.title!r}")

    hidden = encoding.hidden
    attention_avg = average_attention_heads(encoding.attention)
    e_vec = {i: entity_representation(marked.entity_positions[i], hidden) for i in needed}
    a_vec = {i: entity_attention(marked.entity_positions[i], attention_avg) for i in needed}

    triples = []
    for h, t, labels in pairs:
        context, a_pair = pair_context(a_vec[h], a_vec[t], hidden)
        triples.append(
            TripleRepresentation(
                head=h,
                tail=t,
                e_head=e_vec[h],
                context=context,
                e_tail=e_vec[t],
                pair_attention=a_pair,
                labels=labels,
                origin=ORIGINAL,
            )
        )
    return triples
