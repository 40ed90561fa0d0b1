"""Representation-level augmentation for low-frequency relations.

Instead of re-encoding perturbed text, pairs labeled with a relation from the
configured augment set get extra training copies whose context vector is
rebuilt from a randomly masked attention product. Entity vectors and labels
are shared with the original triple; only the context changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .relation_encoding import (
    AUGMENTED,
    ZERO_MASS_EPS,
    TripleRepresentation,
    _uniform_weights,
)

__all__ = ["EraConfig", "sample_mask", "perturb_context", "augment"]


@dataclass(frozen=True)
class EraConfig:
    """``drop_prob`` is the probability that a coordinate of the attention
    product is zeroed; ``num_augments`` is the number of masked copies
    emitted per qualifying pair."""

    drop_prob: float = 0.1
    num_augments: int = 2
    augment_set: frozenset[str] = frozenset()

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        if self.num_augments < 0:
            raise ValueError("augmentation count must be non-negative")


def sample_mask(length: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-mask: each coordinate is 0 with probability ``drop_prob``."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError("drop probability must lie in [0, 1]")
    return (rng.random(length) >= drop_prob).astype(np.float64)


def perturb_context(hidden: Tensor, pair_attention: Tensor, mask: np.ndarray,
                    eps: float = ZERO_MASS_EPS) -> Tensor:
    """Masked variant of the pair context.

    The denominator is the UNMASKED attention mass, so the masked weights sum
    to at most one; with an all-ones mask this reproduces the unperturbed
    context bit for bit. The zero-mass fallback mirrors pair_context, with the
    mask applied to the uniform weights.
    """
    mask_t = ad.constant(np.asarray(mask, dtype=np.float64))
    total = pair_attention.sum()
    if float(total.data) < eps:
        weights = mask_t * _uniform_weights(hidden.shape[0])
    else:
        weights = (mask_t * pair_attention) / total
    return ad.matvec(hidden.T, weights)


def augment(triples: Sequence[TripleRepresentation], hidden: Tensor,
            config: EraConfig, rng: np.random.Generator,
            ) -> tuple[list[TripleRepresentation], list[TripleRepresentation]]:
    """Emit ``num_augments`` masked copies of every triple whose label set
    intersects the augment set. Returns (augmented, original + augmented)."""
    augmented: list[TripleRepresentation] = []
    length = hidden.shape[0]
    for triple in triples:
        if not (triple.labels & config.augment_set):
            continue
        for _ in range(config.num_augments):
            mask = sample_mask(length, config.drop_prob, rng)
            context = perturb_context(hidden, triple.pair_attention, mask)
            augmented.append(triple.with_context(context, AUGMENTED))
    return augmented, [*triples, *augmented]
