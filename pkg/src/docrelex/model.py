"""The full model: encoder, scoring head, and the pretraining projection.

Parameters live in one flat name -> tensor dictionary so the optimizer,
momentum shadow, and checkpoints can treat them uniformly. Encoder parameters
form the "backbone" group; everything else is "other" (the two groups train
with different learning rates).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import relation_head as rh
from .autodiff import Tensor
from .corpus import MarkedDocument
from .encoder import Encoder, EncoderConfig
from .moco import ProjectionParams
from .relation_encoding import TripleRepresentation, build_triples

__all__ = ["ModelConfig", "Model", "stack_triples", "score_triples", "predict_pairs"]


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    bilinear_groups: int = 8
    proj_dim: int | None = None

    def __post_init__(self):
        if self.encoder.dim % self.bilinear_groups != 0:
            raise ValueError("model dimension must be divisible by the group count")


class Model:
    def __init__(self, config: ModelConfig, relations: Sequence[str], seed: int = 0,
                 params: Mapping[str, Tensor] | None = None):
        self.config = config
        self.relations = tuple(relations)
        dim = config.encoder.dim
        if params is None:
            self.encoder = Encoder(config.encoder, seed=seed)
            self.head = rh.HeadParams(dim, self.relations, config.bilinear_groups,
                                      seed=seed + 1)
            self.projection = ProjectionParams(dim, config.proj_dim, seed=seed + 2)
        else:
            enc = {k: v for k, v in params.items() if k.startswith(("emb.", "block"))}
            head = {k: v for k, v in params.items() if k.startswith("head.")}
            proj = {k: v for k, v in params.items() if k.startswith("proj.")}
            self.encoder = Encoder(config.encoder, params=enc)
            self.head = rh.HeadParams(dim, self.relations, config.bilinear_groups,
                                      params=head)
            self.projection = ProjectionParams(dim, config.proj_dim, params=proj)

    def parameters(self) -> dict[str, Tensor]:
        merged = {
            **self.encoder.parameters(),
            **self.head.parameters(),
            **self.projection.parameters(),
        }
        # canonical (sorted) order so norm reductions and checkpoints do not
        # depend on how the parameter dictionary was assembled
        return {name: merged[name] for name in sorted(merged)}

    def parameter_groups(self) -> dict[str, list[str]]:
        names = self.parameters()
        backbone = [n for n in names if n.startswith(("emb.", "block"))]
        other = [n for n in names if not n.startswith(("emb.", "block"))]
        return {"backbone": backbone, "other": other}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def stack_triples(triples: Sequence[TripleRepresentation]) -> tuple[Tensor, Tensor, Tensor]:
    from . import autodiff as ad

    e_head = ad.stack([t.e_head for t in triples])
    context = ad.stack([t.context for t in triples])
    e_tail = ad.stack([t.e_tail for t in triples])
    return e_head, context, e_tail


def score_triples(model: Model, triples: Sequence[TripleRepresentation]) -> Tensor:
    """Fused, grouped-bilinear scores for a stack of triples: (n, classes)."""
    e_head, context, e_tail = stack_triples(triples)
    h, t = rh.fuse(e_head, context, e_tail, model.head)
    return rh.score(h, t, model.head)


def predict_pairs(model: Model, marked: MarkedDocument,
                  pairs: Sequence[tuple[int, int, frozenset[str]]]
                  ) -> set[tuple[str, int, str, int]]:
    """Deterministic (eval-mode) predictions for the given pairs of one
    document, as (title, head, relation, tail) triples."""
    if not pairs:
        return set()
    encoding = model.encoder.encode(marked)
    triples = build_triples(encoding, marked, pairs)
    scores = score_triples(model, triples).data
    out = set()
    for row, triple in zip(scores, triples):
        for rid in rh.predict(row, model.head):
            out.add((marked.title, triple.head, rid, triple.tail))
    return out
