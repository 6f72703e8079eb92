"""Closed-world fact corpora for end-to-end experiments.

The world is a set of land -> currency facts. Each fact lives in exactly one
knowledge document, so answering a masked currency query requires retrieving
that document. Currencies are shared across lands (64 coins over 320 lands):
every held-out fact's answer token is a training target for some other land,
which means a reader that learned to copy from retrieved text can answer
held-out probes, while a no-retrieval model cannot do better than guessing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .textcorpus import (
    MASK,
    KnowledgeCorpus,
    MaskedExample,
    SalientSpanRules,
    Vocab,
    corpus_from_records,
)

_WORLD_STREAM = 41

# answers-field delimiter in QA files (multiple references per question)
QA_ANSWER_SEP = "\x1f"


@dataclass(frozen=True)
class FactWorld:
    lands: tuple[str, ...]  # one per fact
    coins: tuple[str, ...]  # one per fact, drawn from a smaller shared pool
    regions: tuple[str, ...]
    train_ids: tuple[int, ...]
    heldout_ids: tuple[int, ...]
    vocab: Vocab
    knowledge: KnowledgeCorpus  # Z: all facts, one doc each
    pretrain: KnowledgeCorpus  # X: training facts only, different doc ids
    knowledge_records: tuple[tuple[str, str, str], ...]
    pretrain_records: tuple[tuple[str, str, str], ...]
    rules: SalientSpanRules
    qa_train: tuple[tuple[str, tuple[str, ...]], ...]
    qa_heldout: tuple[tuple[str, tuple[str, ...]], ...]

    def knowledge_doc_id(self, fact: int) -> str:
        return f"z{fact:03d}"


def _knowledge_body(land: str, region: str, coin: str) -> str:
    return f"{land} is a land in {region} . the currency of {land} is {coin} ."


def _pretrain_body(land: str, coin: str) -> str:
    return (
        f"the currency of {land} is {coin} . "
        f"people in {land} pay with {coin} ."
    )


def _question(land: str) -> str:
    return f"what is the currency of {land}"


def make_fact_world(
    n_facts: int = 320,
    n_train: int = 256,
    n_coins: int = 64,
    n_regions: int = 16,
    seed: int = 0,
) -> FactWorld:
    """Deterministic world: coins assigned round-robin within shuffled blocks
    so every coin appears in the training split."""
    if not 0 < n_train < n_facts:
        raise ConfigError("need 0 < n_train < n_facts")
    if n_coins > n_facts or n_facts % n_coins:
        raise ConfigError("n_coins must divide n_facts")
    rng = np.random.default_rng([seed, _WORLD_STREAM])
    lands = tuple(f"land{i:03d}" for i in range(n_facts))
    coin_pool = tuple(f"coin{j:02d}" for j in range(n_coins))
    region_pool = tuple(f"region{j:02d}" for j in range(n_regions))
    coins = []
    for block in range(n_facts // n_coins):
        perm = rng.permutation(n_coins)
        coins.extend(coin_pool[p] for p in perm)
    coins = tuple(coins)
    regions = tuple(region_pool[int(rng.integers(n_regions))] for _ in range(n_facts))

    train_ids = tuple(range(n_train))
    heldout_ids = tuple(range(n_train, n_facts))

    knowledge_records = tuple(
        (f"z{i:03d}", lands[i], _knowledge_body(lands[i], regions[i], coins[i]))
        for i in range(n_facts)
    )
    pretrain_records = tuple(
        (f"x{i:03d}", lands[i], _pretrain_body(lands[i], coins[i]))
        for i in train_ids
    )
    questions = [_question(lands[i]) for i in range(n_facts)]
    vocab = Vocab.build(
        [t + " " + b for _, t, b in knowledge_records]
        + [b for _, _, b in pretrain_records]
        + questions
    )
    knowledge = corpus_from_records(knowledge_records, "v1", vocab)
    pretrain = corpus_from_records(pretrain_records, "x1", vocab)
    rules = SalientSpanRules(
        gazetteer=frozenset({(l,) for l in lands} | {(c,) for c in coin_pool})
    )
    qa_train = tuple(
        (_question(lands[i]), (coins[i],)) for i in train_ids
    )
    qa_heldout = tuple(
        (_question(lands[i]), (coins[i],)) for i in heldout_ids
    )
    return FactWorld(
        lands=lands,
        coins=coins,
        regions=regions,
        train_ids=train_ids,
        heldout_ids=heldout_ids,
        vocab=vocab,
        knowledge=knowledge,
        pretrain=pretrain,
        knowledge_records=knowledge_records,
        pretrain_records=pretrain_records,
        rules=rules,
        qa_train=qa_train,
        qa_heldout=qa_heldout,
    )


def currency_probe(world: FactWorld, fact: int) -> MaskedExample:
    """Masked query 'the currency of landN is [MASK]' whose oracle source
    document is the knowledge entry for that land.

    No trailing period: probes follow the same convention as pipeline
    queries, where sentence splitting drops the terminator. Appending one
    would shift every document position in the joint encoding by one slot
    relative to training queries.
    """
    land, coin = world.lands[fact], world.coins[fact]
    tokens = list(world.vocab.encode(f"the currency of {land} is {coin}"))
    pos = tokens.index(world.vocab.id(coin))
    target = tokens[pos]
    tokens[pos] = MASK
    return MaskedExample(
        input_tokens=tuple(tokens),
        masked_positions=(pos,),
        targets=(target,),
        source_doc_id=world.knowledge_doc_id(fact),
    )


def swapped_world_records(
    world: FactWorld, probe_facts, seed: int = 0
) -> tuple[tuple[tuple[str, str, str], ...], dict[int, str]]:
    """Knowledge records where each probe fact's currency is replaced by a
    different coin from the pool; everything else byte-identical."""
    rng = np.random.default_rng([seed, _WORLD_STREAM, 2])
    pool = sorted({c for c in world.coins})
    new_coins: dict[int, str] = {}
    for fact in probe_facts:
        old = world.coins[fact]
        alternatives = [c for c in pool if c != old]
        new_coins[fact] = alternatives[int(rng.integers(len(alternatives)))]
    records = []
    for i, (doc_id, title, _) in enumerate(world.knowledge_records):
        coin = new_coins.get(i, world.coins[i])
        records.append(
            (doc_id, title, _knowledge_body(world.lands[i], world.regions[i], coin))
        )
    return tuple(records), new_coins


def swapped_corpus(world: FactWorld, probe_facts, seed: int = 0):
    records, new_coins = swapped_world_records(world, probe_facts, seed)
    return corpus_from_records(records, "v2", world.vocab), new_coins


def write_corpus_file(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, title, body in records:
            fh.write(f"{doc_id}\t{title}\t{body}\n")


def write_qa_file(path, pairs) -> None:
    """One 'question<TAB>answers' line per example, answers delimited by the
    unit separator."""
    with open(path, "w", encoding="utf-8") as fh:
        for question, answers in pairs:
            fh.write(f"{question}\t{QA_ANSWER_SEP.join(answers)}\n")
