"""Corpus handling: DocRED-format ingestion, entity markers, synthetic data.

A corpus is a list of documents, each a list of pre-tokenized sentences with
annotated entities (clusters of mentions) and labeled entity pairs. Documents
are flattened to one token sequence with a reserved marker token wrapped
around every mention before encoding.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "CorpusError",
    "ParseError",
    "ValidationError",
    "Mention",
    "Entity",
    "LabeledPair",
    "RawDocument",
    "RelationScheme",
    "Corpus",
    "Vocabulary",
    "MarkedDocument",
    "load_docred",
    "save_docred",
    "to_docred_records",
    "insert_markers",
    "strip_markers",
    "relation_frequencies",
    "select_augment_set",
    "document_pairs",
    "SynthSpec",
    "generate_synthetic",
]


class CorpusError(Exception):
    """Base class for corpus failures."""


class ParseError(CorpusError):
    """Input file does not conform to the expected JSON schema."""


class ValidationError(CorpusError):
    """Structurally parsed data violates a document invariant."""


# ----------------------------------------------------------------------
# domain types
@dataclass(frozen=True)
class Mention:
    """One surface occurrence of an entity: token span [start, end) in a sentence."""

    sentence_index: int
    start: int
    end: int
    surface: str = ""

    def __post_init__(self):
        if self.start >= self.end:
            raise ValidationError(f"mention span [{self.start}, {self.end}) is empty")


@dataclass(frozen=True)
class Entity:
    mentions: tuple[Mention, ...]
    entity_type: str = ""

    def __post_init__(self):
        if not self.mentions:
            raise ValidationError("entity with no mentions")


@dataclass(frozen=True)
class LabeledPair:
    head: int
    tail: int
    relations: frozenset[str]


@dataclass(frozen=True)
class RawDocument:
    title: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    labels: tuple[LabeledPair, ...]

    def validate(self, scheme: "RelationScheme | None" = None) -> None:
        for ei, entity in enumerate(self.entities):
            for mention in entity.mentions:
                if not 0 <= mention.sentence_index < len(self.sentences):
                    raise ValidationError(
                        f"document {self.title!r}: entity {ei} mention refers to "
                        f"sentence {mention.sentence_index} of {len(self.sentences)}"
                    )
                sent = self.sentences[mention.sentence_index]
                if not 0 <= mention.start < mention.end <= len(sent):
                    raise ValidationError(
                        f"document {self.title!r}: mention span [{mention.start}, "
                        f"{mention.end}) outside sentence of length {len(sent)}"
                    )
        for pair in self.labels:
            n = len(self.entities)
            if not (0 <= pair.head < n and 0 <= pair.tail < n):
                raise ValidationError(
                    f"document {self.title!r}: label entity index out of range"
                )
            if pair.head == pair.tail:
                raise ValidationError(f"document {self.title!r}: self-relation label")
            if not pair.relations:
                raise ValidationError(
                    f"document {self.title!r}: labeled pair with empty relation set"
                )
            if scheme is not None:
                unknown = pair.relations - set(scheme.ids)
                if unknown:
                    raise ValidationError(
                        f"document {self.title!r}: relations {sorted(unknown)} not in scheme"
                    )

    def tokens(self) -> list[str]:
        """The document flattened to one token sequence."""
        return [tok for sent in self.sentences for tok in sent]


@dataclass(frozen=True)
class RelationScheme:
    """The closed set of relation ids. The threshold class used at prediction
    time is virtual and never appears here."""

    ids: tuple[str, ...]
    names: Mapping[str, str] = field(default_factory=dict)
    augment_set: frozenset[str] = frozenset()

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate relation ids in scheme")
        if not self.augment_set <= set(self.ids):
            raise ValidationError("augment set contains ids outside the scheme")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, rid: str) -> bool:
        return rid in set(self.ids)

    def index(self, rid: str) -> int:
        return self.ids.index(rid)

    def with_augment_set(self, augment: Iterable[str]) -> "RelationScheme":
        return RelationScheme(self.ids, self.names, frozenset(augment))

    def name_of(self, rid: str) -> str:
        return self.names.get(rid, rid)


@dataclass
class Corpus:
    documents: list[RawDocument]
    scheme: RelationScheme

    def __len__(self) -> int:
        return len(self.documents)

    def validate(self) -> None:
        for doc in self.documents:
            doc.validate(self.scheme)


# ----------------------------------------------------------------------
# vocabulary and entity markers
class Vocabulary:
    """Closed token vocabulary. Id 0 is the reserved entity marker, id 1 the
    unknown token; ordinary tokens follow in a fixed order."""

    MARKER_TOKEN = "<mark>"
    UNK_TOKEN = "<unk>"
    MARKER_ID = 0
    UNK_ID = 1

    def __init__(self, tokens: Sequence[str]):
        self._tokens = [self.MARKER_TOKEN, self.UNK_TOKEN, *tokens]
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise ValidationError("vocabulary contains duplicate or reserved tokens")

    @classmethod
    def from_corpus(cls, corpus: Corpus, max_size: int | None = None) -> "Vocabulary":
        counts = Counter(tok for doc in corpus.documents for tok in doc.tokens())
        counts.pop(cls.MARKER_TOKEN, None)
        counts.pop(cls.UNK_TOKEN, None)
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - 2)]
        return cls([tok for tok, _ in ordered])

    def __len__(self) -> int:
        return len(self._tokens)

    def encode(self, token: str) -> int:
        return self._index.get(token, self.UNK_ID)

    def encode_all(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.encode(t) for t in tokens], dtype=np.intp)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def tokens(self) -> list[str]:
        """Ordinary tokens (without the two reserved slots), for serialization."""
        return list(self._tokens[2:])


@dataclass(frozen=True)
class MarkedDocument:
    """A document flattened and wrapped with entity markers.

    ``entity_positions[i]`` holds, per mention of entity i, the index of the
    marker token that opens the mention span.
    """

    title: str
    token_ids: np.ndarray
    entity_positions: tuple[tuple[int, ...], ...]
    vocab: Vocabulary
    source: RawDocument

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])


def insert_markers(doc: RawDocument, vocab: Vocabulary,
                   max_length: int | None = None) -> MarkedDocument:
    """Flatten ``doc`` and wrap every mention span in marker tokens.

    Overlapping or nested mention spans are rejected: with shared marker ids
    there would be no unambiguous reading of which marker opens which span.
    """
    doc.validate()
    sentence_offsets = np.cumsum([0] + [len(s) for s in doc.sentences])
    flat = doc.tokens()

    spans = []  # (global_start, global_end, entity_index, mention_slot)
    for ei, entity in enumerate(doc.entities):
        for mi, mention in enumerate(entity.mentions):
            base = int(sentence_offsets[mention.sentence_index])
            spans.append((base + mention.start, base + mention.end, ei, mi))
    spans.sort()
    for (s1, e1, *_), (s2, e2, *_) in zip(spans, spans[1:]):
        if s2 < e1:
            raise ValidationError(
                f"document {doc.title!r}: overlapping mention spans "
                f"[{s1}, {e1}) and [{s2}, {e2})"
            )

    out_tokens: list[int] = []
    marker_pos: dict[tuple[int, int], int] = {}
    cursor = 0
    for start, end, ei, mi in spans:
        out_tokens.extend(vocab.encode(t) for t in flat[cursor:start])
        marker_pos[(ei, mi)] = len(out_tokens)
        out_tokens.append(vocab.MARKER_ID)
        out_tokens.extend(vocab.encode(t) for t in flat[start:end])
        out_tokens.append(vocab.MARKER_ID)
        cursor = end
    out_tokens.extend(vocab.encode(t) for t in flat[cursor:])

    if max_length is not None and len(out_tokens) > max_length:
        raise ValidationError(
            f"document {doc.title!r}: marked length {len(out_tokens)} exceeds "
            f"encoder maximum {max_length}"
        )

    entity_positions = tuple(
        tuple(marker_pos[(ei, mi)] for mi in range(len(entity.mentions)))
        for ei, entity in enumerate(doc.entities)
    )
    return MarkedDocument(
        title=doc.title,
        token_ids=np.array(out_tokens, dtype=np.intp),
        entity_positions=entity_positions,
        vocab=vocab,
        source=doc,
    )


def strip_markers(marked: MarkedDocument) -> np.ndarray:
    """Remove marker tokens; inverts insert_markers up to vocabulary encoding."""
    ids = marked.token_ids
    return ids[ids != marked.vocab.MARKER_ID]


# ----------------------------------------------------------------------
# statistics
def relation_frequencies(corpus: Corpus) -> dict[str, int]:
    """Count labeled triples per relation id (a multi-relation pair counts once
    per relation, so the counts sum to the total triple count)."""
    counts: Counter[str] = Counter()
    for doc in corpus.documents:
        for pair in doc.labels:
            counts.update(pair.relations)
    return dict(counts)


def select_augment_set(freqs: Mapping[str, int], threshold: int,
                       relations: Iterable[str] | None = None,
                       explicit: Iterable[str] | None = None) -> frozenset[str]:
    """Relations whose frequency falls below ``threshold``.

    An explicit list, when given, wins over the threshold policy. Relations
    absent from ``freqs`` count as frequency zero when a relation universe is
    supplied.
    """
    if explicit is not None:
        return frozenset(explicit)
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    universe = freqs.keys() if relations is None else relations
    return frozenset(r for r in universe if freqs.get(r, 0) < threshold)


def document_pairs(doc: RawDocument, negative_ratio: float | None = None,
                   rng: np.random.Generator | None = None) -> list[tuple[int, int, frozenset[str]]]:
    """All ordered entity pairs of a document with their (possibly empty)
    relation sets. Unlabeled pairs form the negative pool; ``negative_ratio``
    caps them at ratio * max(1, #labeled), sampled without replacement."""
    labeled: dict[tuple[int, int], frozenset[str]] = {
        (p.head, p.tail): p.relations for p in doc.labels
    }
    n = len(doc.entities)
    negatives = [
        (h, t) for h in range(n) for t in range(n) if h != t and (h, t) not in labeled
    ]
    if negative_ratio is not None:
        keep = int(round(negative_ratio * max(1, len(labeled))))
        if keep < len(negatives):
            if rng is None:
                raise ValueError("negative sampling requires an rng")
            idx = rng.choice(len(negatives), size=keep, replace=False)
            negatives = [negatives[i] for i in sorted(idx)]
    pairs = [(h, t, rels) for (h, t), rels in sorted(labeled.items())]
    pairs.extend((h, t, frozenset()) for h, t in negatives)
    return pairs


# ----------------------------------------------------------------------
# DocRED-schema JSON
def _parse_record(record: dict, index: int) -> RawDocument:
    try:
        title = record["title"]
        sents = tuple(tuple(str(t) for t in sent) for sent in record["sents"])
        entities = []
        for vertex in record["vertexSet"]:
            mentions = tuple(
                Mention(
                    sentence_index=int(m["sent_id"]),
                    start=int(m["pos"][0]),
                    end=int(m["pos"][1]),
                    surface=str(m.get("name", "")),
                )
                for m in vertex
            )
            etype = vertex[0].get("type", "") if vertex else ""
            entities.append(Entity(mentions=mentions, entity_type=etype))
        merged: dict[tuple[int, int], set[str]] = {}
        for label in record.get("labels", []):
            merged.setdefault((int(label["h"]), int(label["t"])), set()).add(str(label["r"]))
        labels = tuple(
            LabeledPair(h, t, frozenset(rels)) for (h, t), rels in sorted(merged.items())
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ParseError(f"record {index}: malformed document object ({exc})") from exc
    return RawDocument(title=title, sentences=sents, entities=tuple(entities), labels=labels)


def load_docred(path: str | Path, scheme_path: str | Path | None = None) -> Corpus:
    """Load a DocRED-schema JSON file (a list of document records).

    Without a separate scheme file the relation scheme is derived from the
    label ids observed in the data.
    """
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(records, list):
        raise ParseError(f"{path}: expected a JSON array of documents")

    documents = [_parse_record(rec, i) for i, rec in enumerate(records)]

    if scheme_path is not None:
        names = json.loads(Path(scheme_path).read_text())
        if not isinstance(names, dict):
            raise ParseError(f"{scheme_path}: expected a JSON object of id -> name")
        scheme = RelationScheme(tuple(sorted(names)), dict(names))
    else:
        observed = sorted({r for d in documents for p in d.labels for r in p.relations})
        scheme = RelationScheme(tuple(observed))

    corpus = Corpus(documents, scheme)
    corpus.validate()
    return corpus


def to_docred_records(corpus: Corpus) -> list[dict]:
    records = []
    for doc in corpus.documents:
        vertex_set = [
            [
                {
                    "name": m.surface,
                    "sent_id": m.sentence_index,
                    "pos": [m.start, m.end],
                    "type": e.entity_type,
                }
                for m in e.mentions
            ]
            for e in doc.entities
        ]
        labels = [
            {"h": p.head, "t": p.tail, "r": r, "evidence": []}
            for p in doc.labels
            for r in sorted(p.relations)
        ]
        records.append(
            {
                "title": doc.title,
                "sents": [list(s) for s in doc.sentences],
                "vertexSet": vertex_set,
                "labels": labels,
            }
        )
    return records


def save_docred(corpus: Corpus, path: str | Path,
                scheme_path: str | Path | None = None) -> None:
    Path(path).write_text(json.dumps(to_docred_records(corpus)))
    if scheme_path is not None:
        Path(scheme_path).write_text(
            json.dumps({r: corpus.scheme.name_of(r) for r in corpus.scheme.ids})
        )


# ----------------------------------------------------------------------
# synthetic long-tailed corpora
@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated corpus. Relation labels follow a bounded power law
    over relation ranks. Every relation is expressed through a small set of
    cue tokens (lexical variants), sampled per sentence: the task stays
    learnable from surface evidence, but a low-frequency relation spreads its
    few examples across variants and is genuinely harder to pick up."""

    num_documents: int
    num_relations: int = 8
    zipf_exponent: float = 1.2
    entities_per_doc: int = 5
    vocab_size: int = 120
    pairs_per_doc: int = 3
    cues_per_relation: int = 3

    def __post_init__(self):
        if self.num_relations <= 0:
            raise ValueError("a synthetic corpus needs at least one relation")
        if self.entities_per_doc < 2:
            raise ValueError("need at least two entities per document")
        if self.cues_per_relation < 1:
            raise ValueError("each relation needs at least one cue token")
        # 2 reserved ids + cues + at least 4 fillers + an entity pool that can
        # cover one document
        minimum = (2 + self.num_relations * self.cues_per_relation + 4
                   + self.entities_per_doc)
        if self.vocab_size < minimum:
            raise ValueError(f"vocab_size must be at least {minimum}")


def _synth_lexicon(spec: SynthSpec) -> tuple[list[str], list[list[str]], list[str]]:
    cues = [
        [f"cue{k:02d}{chr(ord('a') + v)}" for v in range(spec.cues_per_relation)]
        for k in range(spec.num_relations)
    ]
    budget = spec.vocab_size - 2 - spec.num_relations * spec.cues_per_relation
    n_filler = max(4, budget // 4)
    n_entities = budget - n_filler
    fillers = [f"w{i:02d}" for i in range(n_filler)]
    names = [f"ent{i:03d}" for i in range(n_entities)]
    return names, cues, fillers


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    """Normalized bounded power law p_k proportional to (k+1)^-exponent."""
    weights = np.arange(1, n + 1, dtype=np.float64) ** (-exponent)
    return weights / weights.sum()


def generate_synthetic(spec: SynthSpec, seed: int) -> Corpus:
    """Deterministically generate a long-tailed corpus in DocRED form.

    Each labeled pair is expressed by a sentence placing the head name, the
    relation's cue token, and the tail name in order; unlabeled pairs get
    cue-free co-occurrence sentences so entity co-occurrence alone cannot
    separate the classes.
    """
    names_pool, cues, fillers = _synth_lexicon(spec)
    relation_ids = tuple(f"R{k:02d}" for k in range(spec.num_relations))
    names_map = {rid: f"synthetic relation {k}" for k, rid in enumerate(relation_ids)}
    probs = zipf_probabilities(spec.num_relations, spec.zipf_exponent)

    children = np.random.SeedSequence(seed).spawn(spec.num_documents)
    documents = []
    for di in range(spec.num_documents):
        rng = np.random.default_rng(children[di])
        n_ent = spec.entities_per_doc
        entity_names = [names_pool[i] for i in rng.choice(len(names_pool), n_ent, replace=False)]
        etypes = [["PER", "ORG", "LOC", "MISC"][i] for i in rng.integers(0, 4, n_ent)]

        ordered = [(h, t) for h in range(n_ent) for t in range(n_ent) if h != t]
        k_pairs = min(spec.pairs_per_doc, len(ordered))
        chosen = [ordered[i] for i in rng.choice(len(ordered), k_pairs, replace=False)]
        relations = [relation_ids[i] for i in rng.choice(spec.num_relations, k_pairs, p=probs)]

        sentences: list[list[str]] = []
        mention_log: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n_ent)}

        def say(parts: list[tuple[str, int | None]]):
            sent: list[str] = []
            for token, owner in parts:
                if owner is not None:
                    mention_log[owner].append((len(sentences), len(sent)))
                sent.append(token)
            sentences.append(sent)

        def filler(k: int = 1) -> list[tuple[str, None]]:
            return [(fillers[i], None) for i in rng.integers(0, len(fillers), k)]

        for (h, t), rid in zip(chosen, relations):
            variants = cues[relation_ids.index(rid)]
            cue = variants[rng.integers(0, len(variants))]
            if rng.random() < 0.5:
                say([*filler(1), (entity_names[h], h), (cue, None),
                     (entity_names[t], t), *filler(1)])
            else:
                say([(entity_names[h], h), *filler(1), (cue, None), *filler(1),
                     (entity_names[t], t)])

        unlabeled = [p for p in ordered if p not in chosen]
        for idx in rng.choice(len(unlabeled), min(2, len(unlabeled)), replace=False):
            h, t = unlabeled[idx]
            say([(entity_names[h], h), *filler(2), (entity_names[t], t), *filler(1)])

        for ei in range(n_ent):
            if rng.random() < 0.4:
                say([*filler(1), (entity_names[ei], ei), *filler(2)])
        say(filler(4))

        # entities with no sentence yet still need one mention each
        for ei in range(n_ent):
            if not mention_log[ei]:
                say([(entity_names[ei], ei), *filler(1)])

        entities = tuple(
            Entity(
                mentions=tuple(
                    Mention(sentence_index=si, start=pos, end=pos + 1,
                            surface=entity_names[ei])
                    for si, pos in mention_log[ei]
                ),
                entity_type=etypes[ei],
            )
            for ei in range(n_ent)
        )
        merged: dict[tuple[int, int], set[str]] = {}
        for (h, t), rid in zip(chosen, relations):
            merged.setdefault((h, t), set()).add(rid)
        labels = tuple(
            LabeledPair(h, t, frozenset(rels)) for (h, t), rels in sorted(merged.items())
        )
        documents.append(
            RawDocument(
                title=f"synth-{seed}-{di:05d}",
                sentences=tuple(tuple(s) for s in sentences),
                entities=entities,
                labels=labels,
            )
        )

    corpus = Corpus(documents, RelationScheme(relation_ids, names_map))
    corpus.validate()
    return corpus


def synthetic_vocabulary(spec: SynthSpec) -> Vocabulary:
    """The closed vocabulary shared by every corpus drawn from ``spec``."""
    names, cues, fillers = _synth_lexicon(spec)
    flat_cues = [c for variants in cues for c in variants]
    return Vocabulary([*names, *flat_cues, *fillers])
