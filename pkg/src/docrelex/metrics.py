"""Evaluation metrics for document-level relation extraction.

Predictions and gold annotations are sets of (document id, head entity index,
relation id, tail entity index) triples. Alongside plain micro F1 there is a
variant discounting facts already seen in training, unweighted macro
averages, frequency-restricted macro averages for tail relations, and a
10-cluster breakdown of per-relation F1 ordered by training frequency.

Relations with neither gold nor predicted instances have no defined F1 and
are excluded from macro averages by default (reporting them as zero would
penalize splits that simply lack a tail relation); the exclusion is
switchable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, RawDocument

__all__ = [
    "Triple",
    "gold_triples",
    "train_fact_surfaces",
    "micro_f1",
    "ign_f1",
    "per_relation_scores",
    "macro_f1",
    "macro_at",
    "cluster_f1",
    "subsample",
    "MetricReport",
    "evaluate",
]

Triple = tuple[str, int, str, int]  # (document id, head, relation id, tail)


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def gold_triples(corpus: Corpus) -> set[Triple]:
    return {
        (doc.title, pair.head, rid, pair.tail)
        for doc in corpus.documents
        for pair in doc.labels
        for rid in pair.relations
    }


def train_fact_surfaces(corpus: Corpus) -> set[tuple[str, str, str]]:
    """(head name, relation, tail name) for every mention-name combination of
    every training label; used to spot facts shared with evaluation data."""
    facts = set()
    for doc in corpus.documents:
        for pair in doc.labels:
            heads = {m.surface for m in doc.entities[pair.head].mentions}
            tails = {m.surface for m in doc.entities[pair.tail].mentions}
            for rid in pair.relations:
                facts.update((h, rid, t) for h in heads for t in tails)
    return facts


def micro_f1(pred: set[Triple], gold: set[Triple]) -> float:
    """Set-level F1. With an empty side the corresponding rate is taken as 0."""
    return _prf(len(pred & gold), len(pred), len(gold))[2]


def _is_shared(triple: Triple, docs: Mapping[str, RawDocument],
               train_facts: set[tuple[str, str, str]]) -> bool:
    title, h, rid, t = triple
    doc = docs[title]
    return any(
        (hm.surface, rid, tm.surface) in train_facts
        for hm in doc.entities[h].mentions
        for tm in doc.entities[t].mentions
    )


def ign_f1(pred: set[Triple], gold: set[Triple],
           train_facts: set[tuple[str, str, str]], corpus: Corpus) -> float:
    """Micro F1 discounting correct predictions whose fact (by entity-name
    matching) already appears in the training data: they are dropped from the
    correct count and from the precision denominator, while recall keeps the
    full gold denominator."""
    docs = {doc.title: doc for doc in corpus.documents}
    correct = pred & gold
    shared_correct = sum(1 for x in correct if _is_shared(x, docs, train_facts))
    tp = len(correct) - shared_correct
    n_pred = len(pred) - shared_correct
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / len(gold) if gold else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def per_relation_scores(pred: set[Triple], gold: set[Triple]
                        ) -> dict[str, dict[str, float]]:
    """Precision/recall/F1 per relation id. Relations absent from both sides
    have no defined score and do not appear."""
    relations = {r for _, _, r, _ in pred} | {r for _, _, r, _ in gold}
    out = {}
    for rid in sorted(relations):
        p = {x for x in pred if x[2] == rid}
        g = {x for x in gold if x[2] == rid}
        precision, recall, f1 = _prf(len(p & g), len(p), len(g))
        out[rid] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": len(g),
        }
    return out


def _f1_map(per_relation: Mapping[str, Mapping[str, float] | float]) -> dict[str, float]:
    return {
        r: (v["f1"] if isinstance(v, Mapping) else float(v))
        for r, v in per_relation.items()
    }


def macro_f1(per_relation: Mapping, relations: Sequence[str] | None = None,
             absent_as_zero: bool = False) -> float | None:
    """Unweighted mean of per-relation F1. ``relations`` restricts (and, with
    ``absent_as_zero``, extends) the average to a relation universe."""
    f1s = _f1_map(per_relation)
    universe = list(relations) if relations is not None else sorted(f1s)
    values = [
        f1s.get(r, 0.0) if absent_as_zero else f1s[r]
        for r in universe
        if absent_as_zero or r in f1s
    ]
    return float(np.mean(values)) if values else None


def macro_at(per_relation: Mapping, train_freqs: Mapping[str, int], n: int,
             relations: Sequence[str] | None = None,
             absent_as_zero: bool = False) -> float | None:
    """Macro F1 restricted to relations with training frequency below ``n``."""
    if n <= 0:
        raise ValueError("frequency threshold must be positive")
    f1s = _f1_map(per_relation)
    universe = list(relations) if relations is not None else sorted(
        set(f1s) | set(train_freqs)
    )
    qualifying = [r for r in universe if train_freqs.get(r, 0) < n]
    return macro_f1(f1s, qualifying, absent_as_zero) if qualifying else None


def cluster_f1(per_relation: Mapping, train_freqs: Mapping[str, int],
               relations: Sequence[str], n_clusters: int = 10) -> list[float | None]:
    """Sort relations by training frequency (descending, ties by id), slice
    into ``n_clusters`` contiguous near-equal clusters (earlier clusters take
    the extra element), and average the defined F1 inside each."""
    if len(relations) < n_clusters:
        raise ValueError(f"need at least {n_clusters} relations")
    f1s = _f1_map(per_relation)
    ordered = sorted(relations, key=lambda r: (-train_freqs.get(r, 0), r))
    base, extra = divmod(len(ordered), n_clusters)
    sizes = [base + 1 if i < extra else base for i in range(n_clusters)]
    values: list[float | None] = []
    start = 0
    for size in sizes:
        chunk = ordered[start:start + size]
        start += size
        defined = [f1s[r] for r in chunk if r in f1s]
        values.append(float(np.mean(defined)) if defined else None)
    return values


def subsample(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Uniform document-level subsample of round(fraction * size) documents,
    preserving document order; deterministic in the seed."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(corpus.documents)
    size = int(round(fraction * n))
    if size >= n:
        return Corpus(list(corpus.documents), corpus.scheme)
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(n, size=size, replace=False))
    return Corpus([corpus.documents[i] for i in keep], corpus.scheme)


@dataclass
class MetricReport:
    micro: float
    ign: float | None
    macro: float | None
    macro_at_500: float | None
    macro_at_200: float | None
    macro_at_100: float | None
    per_relation: dict[str, dict[str, float]] = field(default_factory=dict)
    clusters: list[float | None] | None = None

    def to_json(self) -> dict:
        return {
            "micro_f1": self.micro,
            "ign_f1": self.ign,
            "macro_f1": self.macro,
            "macro_at_500": self.macro_at_500,
            "macro_at_200": self.macro_at_200,
            "macro_at_100": self.macro_at_100,
            "per_relation": self.per_relation,
            "cluster_f1": self.clusters,
        }


def evaluate(pred: set[Triple], gold: set[Triple], corpus: Corpus,
             train_freqs: Mapping[str, int],
             train_facts: set[tuple[str, str, str]] | None = None,
             relations: Sequence[str] | None = None,
             absent_as_zero: bool = False) -> MetricReport:
    """Assemble the full metric report for one prediction set."""
    relations = list(relations) if relations is not None else list(corpus.scheme.ids)
    per_rel = per_relation_scores(pred, gold)
    clusters = (
        cluster_f1(per_rel, train_freqs, relations)
        if len(relations) >= 10
        else None
    )
    return MetricReport(
        micro=micro_f1(pred, gold),
        ign=(
            ign_f1(pred, gold, train_facts, corpus)
            if train_facts is not None
            else None
        ),
        macro=macro_f1(per_rel, relations, absent_as_zero),
        macro_at_500=macro_at(per_rel, train_freqs, 500, relations, absent_as_zero),
        macro_at_200=macro_at(per_rel, train_freqs, 200, relations, absent_as_zero),
        macro_at_100=macro_at(per_rel, train_freqs, 100, relations, absent_as_zero),
        per_relation=per_rel,
        clusters=clusters,
    )
