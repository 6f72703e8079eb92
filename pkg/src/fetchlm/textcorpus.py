"""Corpus ingestion, tokenization, salient-span tagging and example generation.

Tokenization is whitespace splitting over a closed vocabulary built from the
corpus; the [CLS]/[SEP]/[MASK] protocol is kept. Salient spans come from a
gazetteer plus a date regex instead of a learned tagger, which is exact on
synthetic corpora where the entity inventory is known.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParseError

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
SPECIAL_IDS = frozenset(range(len(SPECIAL_TOKENS)))

NULL_DOC_ID = "<null>"

MONTHS = (
    "january february march april may june july august "
    "september october november december"
).split()
DEFAULT_DATE_PATTERN = r"\b(?:%s) \d{4}\b" % "|".join(MONTHS)


class Vocab:
    """Closed token vocabulary; ids 0..4 are reserved for specials."""

    def __init__(self, tokens: list[str]) -> None:
        self._id2tok = list(SPECIAL_TOKENS) + list(tokens)
        self._tok2id = {t: i for i, t in enumerate(self._id2tok)}
        if len(self._tok2id) != len(self._id2tok):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts) -> "Vocab":
        """Vocabulary from an iterable of strings, in first-seen order."""
        seen: dict[str, None] = {}
        for text in texts:
            for tok in text.split():
                if tok not in seen and tok not in SPECIAL_TOKENS:
                    seen[tok] = None
        return cls(list(seen))

    def __len__(self) -> int:
        return len(self._id2tok)

    def __contains__(self, token: str) -> bool:
        return token in self._tok2id

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self._tok2id.get(t, UNK) for t in text.split())

    def decode(self, ids) -> list[str]:
        return [self._id2tok[i] for i in ids]

    def to_text(self, ids) -> str:
        return " ".join(self.decode(ids))

    def id(self, token: str) -> int:
        return self._tok2id[token]


@dataclass(frozen=True)
class Document:
    """One knowledge-corpus entry; the latent variable of the model."""

    doc_id: str
    title: tuple[int, ...]
    body: tuple[int, ...]


NULL_DOC = Document(doc_id=NULL_DOC_ID, title=(), body=())


@dataclass(frozen=True)
class KnowledgeCorpus:
    docs: tuple[Document, ...]
    version: str
    vocab: Vocab

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {d.doc_id: d for d in self.docs})

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self):
        return iter(self.docs)

    def get(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id


@dataclass(frozen=True)
class MaskedExample:
    """Masked input x with target tokens y and its origin document."""

    input_tokens: tuple[int, ...]
    masked_positions: tuple[int, ...]
    targets: tuple[int, ...]
    source_doc_id: str


@dataclass(frozen=True)
class SalientSpanRules:
    """Entity gazetteer (token sequences) plus a date regex over surface text."""

    gazetteer: frozenset[tuple[str, ...]] = frozenset()
    date_pattern: str = DEFAULT_DATE_PATTERN

    def __post_init__(self):
        for entry in self.gazetteer:
            if not entry:
                raise DataError("gazetteer entries must be non-empty")


@dataclass(frozen=True)
class IctExample:
    """A sentence and the document it was taken from; the positive context
    view has the sentence removed 90% of the time so the objective cannot be
    solved purely by string overlap."""

    query: tuple[int, ...]
    positive_doc_id: str
    positive_view: Document


def read_corpus_records(path) -> tuple[list[tuple[str, str, str]], str]:
    """Raw (doc_id, title, body) records plus a content digest."""
    with open(path, "rb") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()[:16]
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(
                f"{path}: line {lineno}: expected doc_id<TAB>title<TAB>body, "
                f"got {len(parts)} field(s)"
            )
        doc_id, title, body = parts
        if doc_id in seen:
            raise DataError(f"{path}: line {lineno}: duplicate doc_id {doc_id!r}")
        if doc_id == NULL_DOC_ID:
            raise DataError(f"{path}: line {lineno}: doc_id {NULL_DOC_ID!r} is reserved")
        seen.add(doc_id)
        records.append((doc_id, title, body))
    return records, digest


def corpus_from_records(records, digest: str, vocab: Vocab,
                        max_chunk_len: int = 288) -> KnowledgeCorpus:
    docs = []
    for doc_id, title, body in records:
        body_ids = vocab.encode(body)[:max_chunk_len]
        docs.append(Document(doc_id=doc_id, title=vocab.encode(title), body=body_ids))
    return KnowledgeCorpus(docs=tuple(docs), version=digest, vocab=vocab)


def load_corpus(path, vocab: Vocab | None = None,
                max_chunk_len: int = 288) -> KnowledgeCorpus:
    """Load a tab-separated corpus file. When `vocab` is None a fresh closed
    vocabulary is built from this file alone; pass a shared one when several
    corpora must agree on token ids."""
    records, digest = read_corpus_records(path)
    if vocab is None:
        vocab = Vocab.build(t + " " + b for _, t, b in records)
    return corpus_from_records(records, digest, vocab, max_chunk_len)


def split_sentences(body: tuple[int, ...], vocab: Vocab) -> list[tuple[int, ...]]:
    """Period-delimited runs of tokens; periods are not part of any sentence."""
    period = vocab._tok2id.get(".")
    sentences: list[tuple[int, ...]] = []
    current: list[int] = []
    for tok in body:
        if period is not None and tok == period:
            if current:
                sentences.append(tuple(current))
            current = []
        else:
            current.append(tok)
    if current:
        sentences.append(tuple(current))
    return sentences


def tag_salient_spans(tokens, vocab: Vocab,
                      rules: SalientSpanRules) -> list[tuple[int, int]]:
    """Inclusive (start, end) spans matching the gazetteer or the date
    pattern. Longest match wins on overlap; output is disjoint and sorted."""
    if not tokens:
        raise DataError("tag_salient_spans needs a non-empty token sequence")
    surface = vocab.decode(tokens)
    candidates: list[tuple[int, int]] = []
    by_first: dict[str, list[tuple[str, ...]]] = {}
    for entry in rules.gazetteer:
        by_first.setdefault(entry[0], []).append(entry)
    for i, tok in enumerate(surface):
        for entry in by_first.get(tok, ()):
            if tuple(surface[i : i + len(entry)]) == entry:
                candidates.append((i, i + len(entry) - 1))
    if rules.date_pattern:
        text = " ".join(surface)
        starts = []
        pos = 0
        for tok in surface:
            starts.append(pos)
            pos += len(tok) + 1
        ends = [s + len(t) for s, t in zip(starts, surface)]
        for m in re.finditer(rules.date_pattern, text):
            if m.start() in starts and m.end() in ends:
                candidates.append((starts.index(m.start()), ends.index(m.end())))
    # longest-match-first, then leftmost; keep only disjoint spans
    chosen: list[tuple[int, int]] = []
    for start, end in sorted(candidates, key=lambda s: (-(s[1] - s[0]), s[0])):
        if all(end < c0 or start > c1 for c0, c1 in chosen):
            chosen.append((start, end))
    return sorted(chosen)


def _maskable_positions(tokens) -> list[int]:
    return [i for i, t in enumerate(tokens) if t not in SPECIAL_IDS]


def make_masked_example(
    tokens,
    scheme: str,
    rng_seed: int,
    *,
    vocab: Vocab,
    rules: SalientSpanRules | None = None,
    source_doc_id: str = "",
) -> MaskedExample | None:
    """Generate a masked-prediction example from one sentence.

    salient_span masks one uniformly chosen tagged span (returns None when
    the sentence has none, so callers can sample another sentence);
    random_span masks a geometric(0.2)-length span capped at 5 tokens;
    random_token masks each non-special token with probability 0.15,
    re-drawing until at least one is masked.
    """
    tokens = tuple(tokens)
    rng = np.random.default_rng(rng_seed)
    eligible = _maskable_positions(tokens)
    if scheme == "salient_span":
        if rules is None:
            raise ConfigError("salient_span masking needs SalientSpanRules")
        spans = tag_salient_spans(tokens, vocab, rules)
        if not spans:
            return None
        start, end = spans[rng.integers(len(spans))]
        positions = list(range(start, end + 1))
    elif scheme == "random_span":
        if not eligible:
            raise DataError("no maskable token in sentence")
        length = min(int(rng.geometric(0.2)), 5, len(eligible))
        lo = int(rng.integers(len(eligible) - length + 1))
        positions = eligible[lo : lo + length]
    elif scheme == "random_token":
        if not eligible:
            raise DataError("no maskable token in sentence")
        while True:
            picks = rng.random(len(eligible)) < 0.15
            if picks.any():
                break
        positions = [p for p, hit in zip(eligible, picks) if hit]
    else:
        raise ConfigError(f"unknown masking scheme {scheme!r}")
    targets = tuple(tokens[p] for p in positions)
    masked = list(tokens)
    for p in positions:
        masked[p] = MASK
    return MaskedExample(
        input_tokens=tuple(masked),
        masked_positions=tuple(positions),
        targets=targets,
        source_doc_id=source_doc_id,
    )


def make_ict_example(corpus: KnowledgeCorpus, rng_seed: int) -> IctExample:
    """Pick a sentence from a multi-sentence document; the sentence is the
    query and the document (usually with the sentence removed) is the
    positive retrieval target."""
    rng = np.random.default_rng(rng_seed)
    vocab = corpus.vocab
    eligible = [d for d in corpus.docs if len(split_sentences(d.body, vocab)) >= 2]
    if not eligible:
        raise ConfigError("ICT needs at least one document with >= 2 sentences")
    doc = eligible[rng.integers(len(eligible))]
    sentences = split_sentences(doc.body, vocab)
    idx = int(rng.integers(len(sentences)))
    query = sentences[idx]
    keep_sentence = rng.random() < 0.1
    if keep_sentence:
        view_body = doc.body
    else:
        remaining = [s for i, s in enumerate(sentences) if i != idx]
        period = (vocab.id("."),) if "." in vocab else ()
        joined: list[int] = []
        for s in remaining:
            joined.extend(s)
            joined.extend(period)
        view_body = tuple(joined)
    view = Document(doc_id=doc.doc_id, title=doc.title, body=view_body)
    return IctExample(query=query, positive_doc_id=doc.doc_id, positive_view=view)
