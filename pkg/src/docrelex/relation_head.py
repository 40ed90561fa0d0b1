"""Relation scoring and the adaptive-threshold objective.

Head and tail entity vectors are each fused with the pair context through a
tanh-activated linear map, then scored per class by a grouped bilinear form.
Classes are the relation ids plus one learned virtual threshold class; at
inference a relation is predicted iff it outscores the threshold class for
that pair.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["HeadParams", "fuse", "score", "atl_loss", "atl_loss_batch", "predict"]


class HeadParams:
    """Fusion matrices plus one bilinear block set per class.

    The threshold class occupies the last class index; it never appears in a
    label set but is scored and trained like any relation.
    """

    def __init__(self, dim: int, relations: Sequence[str], groups: int,
                 seed: int = 0, params: dict[str, Tensor] | None = None):
        if dim % groups != 0:
            raise ValueError("model dimension must be divisible by the group count")
        self.dim = dim
        self.relations = tuple(relations)
        self.groups = groups
        self.group_dim = dim // groups
        self.num_classes = len(self.relations) + 1
        self.th_index = len(self.relations)
        self._rel_index = {r: i for i, r in enumerate(self.relations)}
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(seed)
            w = lambda *s: ad.parameter(rng.normal(0.0, 0.02, size=s))
            self.params = {
                "head.wh": w(dim, dim),
                "head.wt": w(dim, dim),
                "head.wc1": w(dim, dim),
                "head.wc2": w(dim, dim),
                "head.bilinear": w(self.num_classes, groups * self.group_dim**2),
            }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def relation_indices(self, relations: Iterable[str]) -> list[int]:
        return [self._rel_index[r] for r in sorted(relations)]


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return x.reshape(1, -1), True
    return x, False


def fuse(e_head: Tensor, context: Tensor, e_tail: Tensor,
         params: HeadParams) -> tuple[Tensor, Tensor]:
    """Tanh fusion of entity vectors with the shared pair context. Accepts
    single vectors or row-stacked batches; no bias terms."""
    eh, single = _as_rows(e_head)
    c, _ = _as_rows(context)
    et, _ = _as_rows(e_tail)
    p = params.params
    h = ad.tanh(eh @ p["head.wh"] + c @ p["head.wc1"])
    t = ad.tanh(et @ p["head.wt"] + c @ p["head.wc2"])
    if single:
        return h.reshape(-1), t.reshape(-1)
    return h, t


def score(h: Tensor, t: Tensor, params: HeadParams) -> Tensor:
    """Grouped bilinear score for every class (relations, then threshold).

    Splitting into k groups and summing group bilinear forms equals a dense
    bilinear form with a block-diagonal matrix; parameters shrink from d^2 to
    d^2/k per class.
    """
    hr, single = _as_rows(h)
    tr, _ = _as_rows(t)
    if hr.shape[-1] != params.dim or tr.shape[-1] != params.dim:
        raise ValueError("vector dimension does not match head parameters")
    n = hr.shape[0]
    k, gd = params.groups, params.group_dim
    pairwise = hr.reshape(n, k, gd, 1) * tr.reshape(n, k, 1, gd)
    scores = pairwise.reshape(n, k * gd * gd) @ params.params["head.bilinear"].T
    if single:
        return scores.reshape(-1)
    return scores


def _positive_mask(params: HeadParams, positive_sets: Sequence[Iterable[str]]) -> np.ndarray:
    mask = np.zeros((len(positive_sets), params.num_classes))
    for i, rels in enumerate(positive_sets):
        for r in rels:
            mask[i, params._rel_index[r]] = 1.0
    return mask


def atl_loss_batch(scores: Tensor, positive_sets: Sequence[Iterable[str]],
                   params: HeadParams) -> tuple[Tensor, int]:
    """Sum of per-pair adaptive-threshold losses over a batch of score rows.

    Per pair: positives are pushed above the threshold class via a softmax
    over positives + TH, and TH is pushed above the negatives via a softmax
    over negatives + TH. Pairs with no positives contribute only the second
    term. Returns (summed loss, number of pairs).
    """
    n = scores.shape[0]
    pos = _positive_mask(params, positive_sets)
    th_col = np.zeros((1, params.num_classes))
    th_col[0, params.th_index] = 1.0

    pos_with_th = np.minimum(pos + th_col, 1.0)
    neg_with_th = np.minimum((1.0 - pos) * (1.0 - th_col) + th_col, 1.0)

    counts = pos.sum(axis=1)
    lse_pos = ad.masked_logsumexp(scores, pos_with_th, axis=1)
    lse_neg = ad.masked_logsumexp(scores, neg_with_th, axis=1)
    sum_pos_scores = (scores * ad.constant(pos)).sum(axis=1)
    th_scores = (scores * ad.constant(th_col)).sum(axis=1)

    per_pair = lse_pos * ad.constant(counts) - sum_pos_scores + lse_neg - th_scores
    return per_pair.sum(), n


def atl_loss(scores: Tensor, positives: Iterable[str], params: HeadParams) -> Tensor:
    """Adaptive-threshold loss for one pair's score vector."""
    total, _ = atl_loss_batch(scores.reshape(1, -1), [frozenset(positives)], params)
    return total


def predict(scores: Tensor | np.ndarray, params: HeadParams) -> set[str]:
    """Relations strictly above the threshold class; ties are excluded so the
    decision stays deterministic."""
    values = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    th = values[params.th_index]
    return {r for i, r in enumerate(params.relations) if values[i] > th}
