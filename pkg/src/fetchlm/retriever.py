"""Dense retriever: two embedding towers, inner-product relevance, softmax
retrieval distribution, null document and trivial-candidate exclusion.

Towers are deliberately small: shared token table, mean pooling, one tanh
dense layer, then a linear projection down to the retrieval dimension d.
Both towers are built through the autodiff graph so the embeddings used for
index construction are bit-identical to the ones inside training graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffcore import Graph, register_leaves
from .errors import ContractViolation
from .textcorpus import CLS, NULL_DOC, NULL_DOC_ID, SEP, Document, MaskedExample

_INIT_STREAM = 11


_THETA_FIELDS = (
    "tok_emb",
    "q_dense_w",
    "q_dense_b",
    "d_dense_w",
    "d_dense_b",
    "w_input",
    "w_doc",
)


@dataclass
class RetrieverParams:
    """All retriever weights (θ). version is bumped by the optimizer."""

    tok_emb: np.ndarray  # (V, h) shared by both towers
    q_dense_w: np.ndarray  # (h, h)
    q_dense_b: np.ndarray  # (h,)
    d_dense_w: np.ndarray  # (h, h)
    d_dense_b: np.ndarray  # (h,)
    w_input: np.ndarray  # (h, d) query projection
    w_doc: np.ndarray  # (h, d) doc projection
    version: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        """Live name -> array view used by the optimizer and checkpoints."""
        return {f: getattr(self, f) for f in _THETA_FIELDS}

    def copy(self) -> "RetrieverParams":
        return replace(self, **{f: getattr(self, f).copy() for f in _THETA_FIELDS})


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray  # (d,)


@dataclass(frozen=True)
class DocEmbedding:
    vector: np.ndarray  # (d,)
    doc_id: str
    theta_version: int


def init_retriever_params(
    vocab_size: int, hidden: int = 64, dim: int = 16, seed: int = 0
) -> RetrieverParams:
    if dim > hidden:
        raise ContractViolation(f"projection dim {dim} exceeds hidden size {hidden}")
    rng = np.random.default_rng([seed, _INIT_STREAM])
    return RetrieverParams(
        tok_emb=rng.normal(0.0, 0.5, (vocab_size, hidden)),
        q_dense_w=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
        q_dense_b=np.zeros(hidden),
        d_dense_w=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden)),
        d_dense_b=np.zeros(hidden),
        w_input=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim)),
        w_doc=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dim)),
        version=0,
    )


def join_query(tokens) -> tuple[int, ...]:
    return (CLS,) + tuple(tokens) + (SEP,)


def join_doc(doc: Document) -> tuple[int, ...]:
    # the null document reduces to [CLS][SEP][SEP], which still embeds
    return (CLS,) + tuple(doc.title) + (SEP,) + tuple(doc.body) + (SEP,)


def _check_ids(tokens, vocab_size: int) -> None:
    for t in tokens:
        if not 0 <= t < vocab_size:
            raise ContractViolation(
                f"token id {t} outside vocab range [0, {vocab_size})"
            )


def query_tower_graph(g: Graph, leaf: dict[str, int], tokens) -> int:
    """Graph node holding Embed_input(tokens); differentiable w.r.t. θ leaves."""
    ids = join_query(tokens)
    _check_ids(ids, g.value(leaf["tok_emb"]).shape[0])
    emb = g.embedding(leaf["tok_emb"], ids)
    pooled = g.mean_pool(emb)
    hidden = g.tanh(g.add(g.matmul(pooled, leaf["q_dense_w"]), leaf["q_dense_b"]))
    return g.matmul(hidden, leaf["w_input"])


def doc_tower_graph(g: Graph, leaf: dict[str, int], doc: Document) -> int:
    ids = join_doc(doc)
    _check_ids(ids, g.value(leaf["tok_emb"]).shape[0])
    emb = g.embedding(leaf["tok_emb"], ids)
    pooled = g.mean_pool(emb)
    hidden = g.tanh(g.add(g.matmul(pooled, leaf["d_dense_w"]), leaf["d_dense_b"]))
    return g.matmul(hidden, leaf["w_doc"])


def embed_input(tokens, params: RetrieverParams) -> QueryEmbedding:
    g = Graph()
    leaf = register_leaves(g, params)
    vec = g.value(query_tower_graph(g, leaf, tokens))
    return QueryEmbedding(vector=vec)


def embed_doc(doc: Document, params: RetrieverParams) -> DocEmbedding:
    g = Graph()
    leaf = register_leaves(g, params)
    vec = g.value(doc_tower_graph(g, leaf, doc))
    return DocEmbedding(vector=vec, doc_id=doc.doc_id, theta_version=params.version)


def embed_corpus(corpus, params: RetrieverParams) -> tuple[np.ndarray, list[str]]:
    """All document embeddings as one (N, d) matrix, row order = corpus order."""
    rows = [embed_doc(doc, params).vector for doc in corpus]
    dim = params.w_doc.shape[1]
    mat = np.stack(rows) if rows else np.zeros((0, dim))
    return mat, [doc.doc_id for doc in corpus]


def relevance(x_emb: QueryEmbedding, z_emb: DocEmbedding) -> float:
    if x_emb.vector.shape != z_emb.vector.shape:
        raise ContractViolation(
            f"embedding dims disagree: {x_emb.vector.shape} vs {z_emb.vector.shape}"
        )
    return float(np.dot(x_emb.vector, z_emb.vector))


def retrieval_distribution(scores) -> np.ndarray:
    """softmax over relevance scores, numerically shifted by the max."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractViolation("retrieval_distribution needs >=1 score")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"non-finite relevance score in {arr}")
    shifted = np.exp(arr - arr.max())
    return shifted / shifted.sum()


def candidate_set(
    x: MaskedExample | None,
    top: list[Document],
    exclude_trivial: bool,
    include_null: bool,
) -> list[Document]:
    """Post-process retrieved documents into the marginalization set.

    Order is preserved; the source document of x is dropped when
    exclude_trivial is set; the null document goes last when include_null.
    """
    out = []
    for doc in top:
        if exclude_trivial and x is not None and doc.doc_id == x.source_doc_id:
            continue
        out.append(doc)
    if include_null:
        out.append(NULL_DOC)
    return out


__all__ = [
    "RetrieverParams",
    "QueryEmbedding",
    "DocEmbedding",
    "NULL_DOC",
    "NULL_DOC_ID",
    "init_retriever_params",
    "join_query",
    "join_doc",
    "query_tower_graph",
    "doc_tower_graph",
    "embed_input",
    "embed_doc",
    "embed_corpus",
    "relevance",
    "retrieval_distribution",
    "candidate_set",
]
