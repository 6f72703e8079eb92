"""Metrics and experiment harnesses.

Everything here is read-only over parameters and indexes and uses the plain
evaluation entry points, so measured numbers are independent of the training
graph construction (the two routes are cross-checked in the test suite).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .mipsindex import EXHAUSTIVE, Exhaustive, IndexSnapshot, Ivf, build_index, search_topk
from .reader import all_spans, join_reader, joint_encode, mlm_probability
from .retriever import (
    NULL_DOC,
    embed_doc,
    embed_input,
    relevance,
    retrieval_distribution,
)
from .textcorpus import Document, KnowledgeCorpus, MaskedExample
from .trainer import ParamStore, TrainConfig, finetune_run, pretrain_run

_ABLATION_AXES = ("masking_scheme", "staleness", "reset_retriever", "reset_encoder")


@dataclass(frozen=True)
class RetrievalUtilityRecord:
    example_id: str
    doc_id: str
    ru: float  # nats


def retrieval_utility(x: MaskedExample, z: Document, phi) -> float:
    """log p(y|z,x) − log p(y|∅,x); how much document z helps predict y.

    The null document maps to 0 by identity rather than subtraction, so the
    zero is exact even when the probabilities underflow.
    """
    if z.doc_id == NULL_DOC.doc_id:
        return 0.0
    p_z = mlm_probability(x, z, phi)
    p_null = mlm_probability(x, NULL_DOC, phi)
    if p_z == 0.0:
        return float("-inf")
    if p_null == 0.0:
        return float("inf")
    return float(np.log(p_z) - np.log(p_null))


def mean_utility(values) -> tuple[float, int]:
    """Mean over finite values plus the count of excluded sentinels."""
    vals = np.asarray(list(values), dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    excluded = int(vals.size - finite.size)
    mean = float(finite.mean()) if finite.size else float("nan")
    return mean, excluded


def top1_utility_records(
    probes, theta, phi, index: IndexSnapshot, corpus: KnowledgeCorpus
) -> list[RetrievalUtilityRecord]:
    out = []
    for i, x in enumerate(probes):
        res = search_topk(index, embed_input(x.input_tokens, theta), 1)
        z = corpus.get(res.doc_ids[0])
        out.append(
            RetrievalUtilityRecord(
                example_id=x.source_doc_id or f"probe{i}",
                doc_id=z.doc_id,
                ru=retrieval_utility(x, z, phi),
            )
        )
    return out


def _contains_tokens(doc: Document, needle: tuple[int, ...]) -> bool:
    hay = tuple(doc.title) + tuple(doc.body)
    n = len(needle)
    if n == 0:
        return False
    return any(hay[i : i + n] == needle for i in range(len(hay) - n + 1))


def recall_at_k(examples, theta, index: IndexSnapshot, k: int,
                oracle: str = "source_doc", corpus: KnowledgeCorpus | None = None) -> float:
    """Fraction of examples whose oracle target shows up in the top k.

    oracle=source_doc: examples are masked/plain sentences carrying their
    origin document id. oracle=answer_string: examples are (query tokens,
    reference strings) pairs; a hit means some reference occurs verbatim in
    a retrieved document.
    """
    examples = list(examples)
    if not examples:
        raise ContractViolation("recall needs at least one example")
    if oracle not in ("source_doc", "answer_string"):
        raise ConfigError(f"unknown recall oracle {oracle!r}")
    if oracle == "answer_string" and corpus is None:
        raise ConfigError("answer_string oracle needs the corpus for document text")
    k = min(k, len(index))
    hits = 0
    for ex in examples:
        if oracle == "source_doc":
            res = search_topk(index, embed_input(ex.input_tokens, theta), k)
            hits += ex.source_doc_id in res.doc_ids
        else:
            query, references = ex
            res = search_topk(index, embed_input(query, theta), k)
            docs = [corpus.get(i) for i in res.doc_ids]
            hits += any(
                _contains_tokens(d, corpus.vocab.encode(ref))
                for d in docs
                for ref in references
            )
    return hits / len(examples)


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def exact_match(prediction: str, references) -> bool:
    norm = _normalize(prediction)
    return any(norm == _normalize(r) for r in references)


# ---------------------------------------------------------------------
# argmax predictions under the mixture
# ---------------------------------------------------------------------


def masked_token_distribution(x: MaskedExample, z: Document, phi) -> np.ndarray:
    """p(y | z, x) over the whole vocabulary at the (single) masked slot."""
    if len(x.masked_positions) != 1:
        raise ContractViolation("token prediction needs exactly one masked slot")
    states = joint_encode(x.input_tokens, z, phi)
    hidden = states[1 + x.masked_positions[0]]
    logits = phi.tensors["w_mlm"] @ hidden
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def _prediction_candidates(x, store, index, cfg, corpus):
    """Top documents plus the configured null; no trivial-exclusion, since a
    probe's nominal source is the document holding the fact being tested."""
    n_docs = min(cfg.k - int(cfg.include_null), len(index))
    docs = []
    if n_docs > 0:
        res = search_topk(index, embed_input(x.input_tokens, store.theta), n_docs)
        docs = [corpus.get(i) for i in res.doc_ids]
    if cfg.include_null:
        docs.append(NULL_DOC)
    return docs


def marginal_token_distribution(
    x: MaskedExample, store: ParamStore, index: IndexSnapshot,
    cfg: TrainConfig, corpus: KnowledgeCorpus,
) -> tuple[np.ndarray, list[Document]]:
    """Mixture Σ_z p(z|x)·p(y|z,x) over the top-k candidate documents,
    with candidate scores recomputed from current parameters."""
    docs = _prediction_candidates(x, store, index, cfg, corpus)
    q = embed_input(x.input_tokens, store.theta)
    scores = [relevance(q, embed_doc(z, store.theta)) for z in docs]
    p_z = retrieval_distribution(scores)
    mix = np.zeros(len(corpus.vocab))
    for weight, z in zip(p_z, docs):
        mix += weight * masked_token_distribution(x, z, store.phi)
    return mix, docs

def predict_token(
    x: MaskedExample, store: ParamStore, index: IndexSnapshot,
    cfg: TrainConfig, corpus: KnowledgeCorpus,
) -> int:
    mix, _ = marginal_token_distribution(x, store, index, cfg, corpus)
    return int(np.argmax(mix))


def masked_argmax_accuracy(
    probes, store: ParamStore, index: IndexSnapshot,
    cfg: TrainConfig, corpus: KnowledgeCorpus,
) -> float:
    probes = list(probes)
    if not probes:
        raise ContractViolation("accuracy needs at least one probe")
    correct = sum(
        predict_token(x, store, index, cfg, corpus) == x.targets[0] for x in probes
    )
    return correct / len(probes)


def _span_distribution(x_tokens, z: Document, phi, max_answer_len: int = 5):
    """(span probabilities, spans, kept body) under the extractive head, or
    None for a document whose kept body is empty."""
    tokens, _, z_start, z_len, _ = join_reader(x_tokens, z, phi.max_len)
    spans = all_spans(z_len, max_answer_len)
    if not spans:
        return None
    states = joint_encode(x_tokens, z, phi)
    t = phi.tensors
    raw = np.empty(len(spans))
    for i, (s, e) in enumerate(spans):
        joined = np.concatenate([states[z_start + s], states[z_start + e]])
        hid = np.tanh(joined @ t["span_w1"] + t["span_b1"])
        raw[i] = hid @ t["span_w2"] + t["span_b2"]
    shifted = np.exp(raw - raw.max())
    return shifted / shifted.sum(), spans, tokens[z_start : z_start + z_len]


def predict_answer(
    question_tokens, store: ParamStore, index: IndexSnapshot,
    cfg: TrainConfig, corpus: KnowledgeCorpus,
) -> str:
    """argmax over answer strings of Σ_z p(z|x) p(y|z,x), with document-side
    scores taken from the snapshot as in fine-tuning."""
    n = min(cfg.finetune_k, len(index))
    q = embed_input(question_tokens, store.theta)
    res = search_topk(index, q, n)
    p_z = retrieval_distribution(res.scores)
    totals: dict[tuple[int, ...], float] = {}
    for weight, doc_id in zip(p_z, res.doc_ids):
        z = corpus.get(doc_id)
        dist = _span_distribution(question_tokens, z, store.phi, cfg.max_answer_len)
        if dist is None:
            continue
        probs, spans, body = dist
        for p, (s, e) in zip(probs, spans):
            answer = tuple(body[s : e + 1])
            totals[answer] = totals.get(answer, 0.0) + weight * float(p)
    if not totals:
        return ""
    best = max(sorted(totals), key=lambda a: totals[a])
    return corpus.vocab.to_text(best)


def qa_token_examples(qa_pairs, vocab) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """String pairs to token pairs; training extracts one span, so the first
    reference is the target."""
    out = []
    for question, references in qa_pairs:
        if not references:
            raise ContractViolation(f"question {question!r} has no reference answers")
        out.append((vocab.encode(question), vocab.encode(references[0])))
    return out


def evaluate_qa(
    qa_pairs, store: ParamStore, index: IndexSnapshot,
    cfg: TrainConfig, corpus: KnowledgeCorpus,
) -> dict:
    """Exact match plus a count of examples whose references never occur in
    the retrieved candidates (unanswerable at this k)."""
    qa_pairs = list(qa_pairs)
    if not qa_pairs:
        raise ContractViolation("evaluation needs at least one QA pair")
    em = 0
    unanswerable = 0
    for question, references in qa_pairs:
        q_tokens = corpus.vocab.encode(question)
        res = search_topk(index, embed_input(q_tokens, store.theta), min(cfg.finetune_k, len(index)))
        docs = [corpus.get(i) for i in res.doc_ids]
        if not any(
            _contains_tokens(d, corpus.vocab.encode(r)) for d in docs for r in references
        ):
            unanswerable += 1
        em += exact_match(predict_answer(q_tokens, store, index, cfg, corpus), references)
    return {
        "exact_match": em / len(qa_pairs),
        "n": len(qa_pairs),
        "unanswerable": unanswerable,
    }


# ---------------------------------------------------------------------
# corpus swap
# ---------------------------------------------------------------------


def _same_vocab(a: KnowledgeCorpus, b: KnowledgeCorpus) -> bool:
    if a.vocab is b.vocab:
        return True
    if len(a.vocab) != len(b.vocab):
        return False
    ids = range(len(a.vocab))
    return a.vocab.decode(ids) == b.vocab.decode(ids)


def corpus_swap_test(
    store: ParamStore,
    corpus_v1: KnowledgeCorpus,
    corpus_v2: KnowledgeCorpus,
    probes,
    cfg: TrainConfig,
    structure: Exhaustive | Ivf = EXHAUSTIVE,
    seed: int = 0,
) -> list[dict]:
    """Same parameters, index rebuilt per corpus version; reports the argmax
    prediction per probe under each version."""
    if not _same_vocab(corpus_v1, corpus_v2):
        raise ContractViolation("corpus versions must share one vocabulary")
    index_v1 = build_index(corpus_v1, store.theta, structure, seed)
    index_v2 = build_index(corpus_v2, store.theta, structure, seed)
    records = []
    for i, probe in enumerate(probes):
        pred1 = corpus_v1.vocab.to_text([predict_token(probe, store, index_v1, cfg, corpus_v1)])
        pred2 = corpus_v2.vocab.to_text([predict_token(probe, store, index_v2, cfg, corpus_v2)])
        records.append(
            {
                "example_id": probe.source_doc_id or f"probe{i}",
                "prediction_v1": pred1,
                "prediction_v2": pred2,
                "changed": pred1 != pred2,
            }
        )
    return records


# ---------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class AblationSpec:
    """One varying axis, everything else pinned by the base config."""

    axis: str
    levels: tuple
    base: TrainConfig
    seed: int = 0

    def __post_init__(self):
        if self.axis not in _ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}")
        if len(self.levels) < 2:
            raise ConfigError("an ablation needs at least two levels")


def run_ablation(
    spec: AblationSpec,
    pretrain_corpus: KnowledgeCorpus,
    knowledge_corpus: KnowledgeCorpus,
    rules,
    warm: ParamStore,
    *,
    probes=None,
    qa_train=None,
    qa_eval=None,
    recall_k: int = 5,
    finetune_steps: int = 50,
    structure: Exhaustive | Ivf = EXHAUSTIVE,
) -> list[dict]:
    """One seeded run per level from the same warm-start parameters.

    masking_scheme/staleness levels report final pre-training loss and
    zero-shot recall on the probes; reset_* levels continue into fine-tuning
    with θ or φ restored to the warm checkpoint first and report exact match.
    A failing level is annotated and the table still returned.
    """
    rows = []
    for level in spec.levels:
        try:
            rows.append(
                _run_level(
                    spec, level, pretrain_corpus, knowledge_corpus, rules, warm,
                    probes, qa_train, qa_eval, recall_k, finetune_steps, structure,
                )
            )
        except Exception as err:  # noqa: BLE001 - partial table is the contract
            rows.append({"level": _level_repr(level), "failed": f"{type(err).__name__}: {err}"})
    return rows


def _level_repr(level):
    return repr(level) if not isinstance(level, str) else level


def _run_level(
    spec, level, pretrain_corpus, knowledge_corpus, rules, warm,
    probes, qa_train, qa_eval, recall_k, finetune_steps, structure,
):
    cfg = dataclasses.replace(spec.base, seed=spec.seed)
    if spec.axis == "masking_scheme":
        cfg = dataclasses.replace(cfg, masking_scheme=level)
    elif spec.axis == "staleness":
        cfg = dataclasses.replace(cfg, refresh_interval=float(level))
    store = warm.copy()
    store.momentum = {}
    _, records = pretrain_run(
        store, pretrain_corpus, knowledge_corpus, cfg, rules, structure=structure
    )
    row = {"level": _level_repr(level), "final_loss": records[-1]["loss"] if records else float("nan")}
    final_index = build_index(knowledge_corpus, store.theta, structure, cfg.seed)
    if probes is not None:
        row[f"recall_at_{recall_k}"] = recall_at_k(
            probes, store.theta, final_index, recall_k
        )
    if spec.axis in ("reset_retriever", "reset_encoder"):
        if not (qa_train and qa_eval):
            raise ConfigError("reset ablations need QA train and eval sets")
        if level:
            restored = warm.copy()
            if spec.axis == "reset_retriever":
                store.theta = restored.theta
            else:
                store.phi = restored.phi
        ft_index = build_index(knowledge_corpus, store.theta, structure, cfg.seed)
        ft_records = finetune_run(
            store,
            qa_token_examples(qa_train, knowledge_corpus.vocab),
            ft_index,
            cfg,
            knowledge_corpus,
            steps=finetune_steps,
        )
        if ft_records:
            row["final_loss"] = ft_records[-1]["loss"]
        report = evaluate_qa(qa_eval, store, ft_index, cfg, knowledge_corpus)
        row["exact_match"] = report["exact_match"]
        row["unanswerable"] = report["unanswerable"]
    return row


def format_table(rows) -> str:
    """Plain-text table; one row per dict, union of keys as columns."""
    if not rows:
        return "(no rows)"
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)
    table = [[fmt(row.get(c, "")) for c in cols] for row in rows]
    widths = [max(len(c), *(len(line[i]) for line in table)) for i, c in enumerate(cols)]
    header = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    sep = "  ".join("-" * w for w in widths)
    body = [
        "  ".join(cell.ljust(w) for cell, w in zip(line, widths)) for line in table
    ]
    return "\n".join([header, sep, *body])
