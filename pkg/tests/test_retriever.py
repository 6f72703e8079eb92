import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fetchlm.diffcore import Graph, finite_diff_check, register_leaves
from fetchlm.errors import ContractViolation
from fetchlm.retriever import (
    NULL_DOC,
    NULL_DOC_ID,
    DocEmbedding,
    QueryEmbedding,
    candidate_set,
    doc_tower_graph,
    embed_corpus,
    embed_doc,
    embed_input,
    init_retriever_params,
    join_doc,
    join_query,
    query_tower_graph,
    relevance,
    retrieval_distribution,
)
from fetchlm.textcorpus import CLS, SEP, Document, MaskedExample


def small_params(vocab_size=12, hidden=8, dim=4, seed=0):
    return init_retriever_params(vocab_size, hidden=hidden, dim=dim, seed=seed)


def doc(doc_id, title=(5, 6), body=(7, 8, 9)):
    return Document(doc_id=doc_id, title=tuple(title), body=tuple(body))


# ---------------------------------------------------------------- embeddings


def test_zero_token_table_gives_zero_vector():
    p = small_params()
    p.tok_emb[:] = 0.0
    for x in [(5,), (6, 7, 8), (9, 10, 11)]:
        assert np.array_equal(embed_input(x, p).vector, np.zeros(4))
        assert np.array_equal(embed_doc(doc("d", body=x), p).vector, np.zeros(4))


def test_embed_input_deterministic():
    p = small_params()
    a = embed_input((5, 6, 7), p).vector
    b = embed_input((5, 6, 7), p).vector
    assert a.tobytes() == b.tobytes()


def test_embed_input_gradients_finite_difference():
    p = small_params()
    rng = np.random.default_rng(3)
    g = Graph()
    leaf = register_leaves(g, p)
    vec = query_tower_graph(g, leaf, (5, 6, 7))
    c = g.leaf(rng.normal(size=4), name="c")
    loss = g.matmul(vec, c)
    for name, lid in leaf.items():
        assert finite_diff_check(g, loss, lid) <= 1e-6, name


def test_embed_doc_gradients_finite_difference():
    p = small_params()
    rng = np.random.default_rng(4)
    g = Graph()
    leaf = register_leaves(g, p)
    vec = doc_tower_graph(g, leaf, doc("d1"))
    c = g.leaf(rng.normal(size=4), name="c")
    loss = g.matmul(vec, c)
    for name, lid in leaf.items():
        assert finite_diff_check(g, loss, lid) <= 1e-6, name


def test_join_rules():
    assert join_query((8, 9)) == (CLS, 8, 9, SEP)
    assert join_doc(doc("d", title=(5,), body=(6, 7))) == (CLS, 5, SEP, 6, 7, SEP)
    assert join_doc(NULL_DOC) == (CLS, SEP, SEP)


def test_null_document_embeds():
    p = small_params()
    e = embed_doc(NULL_DOC, p)
    assert e.doc_id == NULL_DOC_ID
    assert e.vector.shape == (4,)
    assert np.all(np.isfinite(e.vector))


def test_identical_content_identical_embedding():
    p = small_params()
    a = embed_doc(doc("a"), p)
    b = embed_doc(doc("b"), p)
    assert np.array_equal(a.vector, b.vector)
    assert a.doc_id != b.doc_id


def test_theta_version_tag():
    p = small_params()
    p.version = 17
    assert embed_doc(doc("d"), p).theta_version == 17


def test_out_of_range_token_rejected():
    p = small_params(vocab_size=12)
    with pytest.raises(ContractViolation):
        embed_input((5, 12), p)
    with pytest.raises(ContractViolation):
        embed_doc(doc("d", body=(-1,)), p)


def test_embed_corpus_matches_single_calls():
    p = small_params()
    docs = [doc("a", body=(5,)), doc("b", body=(6, 7))]
    mat, ids = embed_corpus(docs, p)
    assert ids == ["a", "b"]
    assert np.array_equal(mat[0], embed_doc(docs[0], p).vector)
    assert np.array_equal(mat[1], embed_doc(docs[1], p).vector)
    empty_mat, empty_ids = embed_corpus([], p)
    assert empty_mat.shape == (0, 4) and empty_ids == []


# ---------------------------------------------------------------- relevance


def qe(v):
    return QueryEmbedding(vector=np.asarray(v, dtype=float))


def de(v, doc_id="d"):
    return DocEmbedding(vector=np.asarray(v, dtype=float), doc_id=doc_id, theta_version=0)


def test_relevance_examples():
    assert relevance(qe([1, 0]), de([1, 0])) == 1.0
    assert relevance(qe([1, 0]), de([0, 1])) == 0.0
    assert relevance(qe([2, 3]), de([4, -1])) == 5.0


def test_relevance_dim_mismatch():
    with pytest.raises(ContractViolation):
        relevance(qe([1, 0]), de([1, 0, 0]))


# ---------------------------------------------------------------- distribution


def test_distribution_examples():
    assert np.allclose(retrieval_distribution([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(retrieval_distribution([np.log(3.0), 0.0]), [0.75, 0.25])


def test_distribution_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = retrieval_distribution(rng.normal(scale=20, size=rng.integers(1, 9)))
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p > 0)


def test_distribution_shift_invariance_exact():
    # dyadic scores and shifts add exactly in binary floating point, so the
    # max-subtracted softmax must be bit-identical under the shift
    base = np.array([0.5, -1.25, 2.0, 0.0])
    for c in (3.0, -0.5, 1024.0, -7.75):
        assert np.array_equal(
            retrieval_distribution(base + c), retrieval_distribution(base)
        )


@settings(max_examples=200, deadline=None)
@given(
    scores=st.lists(
        st.integers(-64, 64).map(lambda n: n / 8.0), min_size=1, max_size=8
    ),
    shift=st.integers(-512, 512).map(lambda n: n / 4.0),
)
def test_distribution_shift_invariance_property(scores, shift):
    a = retrieval_distribution(np.array(scores))
    b = retrieval_distribution(np.array(scores) + shift)
    assert np.array_equal(a, b)


@settings(max_examples=200, deadline=None)
@given(
    # grid spacing 1e-3 keeps score gaps large enough to survive exp()
    scores=st.lists(
        st.integers(-30_000, 30_000).map(lambda n: n / 1000.0),
        min_size=2,
        max_size=8,
        unique=True,
    )
)
def test_ordering_by_p_equals_ordering_by_f(scores):
    arr = np.array(scores)
    p = retrieval_distribution(arr)
    assert np.array_equal(np.argsort(arr), np.argsort(p))


def test_distribution_rejects_empty_and_nonfinite():
    with pytest.raises(ContractViolation):
        retrieval_distribution([])
    with pytest.raises(ContractViolation):
        retrieval_distribution([0.0, np.inf])


# ---------------------------------------------------------------- candidates


def masked(source_doc_id):
    return MaskedExample(
        input_tokens=(4,), masked_positions=(0,), targets=(5,), source_doc_id=source_doc_id
    )


def test_candidate_set_excludes_source():
    d1, d_src, d3 = doc("d1"), doc("src"), doc("d3")
    x = masked("src")
    assert candidate_set(x, [d1, d_src, d3], True, False) == [d1, d3]
    got = candidate_set(x, [d1, d_src, d3], True, True)
    assert got == [d1, d3, NULL_DOC]


def test_candidate_set_no_id_match():
    docs = [doc("a"), doc("b")]
    x = masked("from-other-corpus")
    assert candidate_set(x, docs, True, True) == docs + [NULL_DOC]


def test_candidate_set_null_on_empty():
    assert candidate_set(masked("s"), [], True, True) == [NULL_DOC]
    assert candidate_set(None, [], False, True) == [NULL_DOC]


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_candidate_set_never_contains_source(data):
    ids = data.draw(st.lists(st.sampled_from("abcdefgh"), max_size=8, unique=True))
    docs = [doc(i) for i in ids]
    src = data.draw(st.sampled_from("abcdefgh"))
    out = candidate_set(masked(src), docs, True, data.draw(st.booleans()))
    assert src not in [d.doc_id for d in out]
    survivors = [d for d in docs if d.doc_id != src]
    assert [d for d in out if d.doc_id != NULL_DOC_ID] == survivors
