import numpy as np
import pytest

from fetchlm.diffcore import Graph, finite_diff_check, register_named_leaves
from fetchlm.errors import ConfigError, ContractViolation
from fetchlm.reader import (
    JointEncoding,
    SpanCandidate,
    all_spans,
    enumerate_spans,
    init_reader_params,
    join_reader,
    joint_encode,
    joint_encode_graph,
    mlm_log_probability_graph,
    mlm_probability,
    qa_log_probability_graph,
    qa_probability,
)
from fetchlm.textcorpus import CLS, MASK, NULL_DOC, SEP, Document, MaskedExample

V = 12


def tiny_phi(seed=0, max_len=24):
    return init_reader_params(
        V, hidden=8, heads=2, layers=1, max_len=max_len, span_hidden=4, seed=seed
    )


def doc(body, doc_id="d", title=()):
    return Document(doc_id=doc_id, title=tuple(title), body=tuple(body))


def masked(input_tokens, positions, targets, src="d"):
    return MaskedExample(
        input_tokens=tuple(input_tokens),
        masked_positions=tuple(positions),
        targets=tuple(targets),
        source_doc_id=src,
    )


# ---------------------------------------------------------------- joint encoder


def test_join_rule_and_null_doc():
    tokens, x_start, z_start, z_len, trunc = join_reader((5, 6), doc((7, 8)), 24)
    assert tokens == (CLS, 5, 6, SEP, 7, 8, SEP)
    assert (x_start, z_start, z_len, trunc) == (1, 4, 2, False)
    tokens, _, _, z_len, _ = join_reader((5, 6), NULL_DOC, 24)
    assert tokens == (CLS, 5, 6, SEP, SEP)
    assert z_len == 0


def test_truncation_cuts_doc_never_x():
    x = (5, 6, 7, 8)
    tokens, _, z_start, z_len, trunc = join_reader(x, doc(range(5, 11)), 10)
    assert trunc
    assert tokens[1:5] == x  # x intact
    assert z_len == 10 - (4 + 3) == 3
    assert len(tokens) == 10


def test_x_too_long_rejected():
    with pytest.raises(ContractViolation):
        join_reader(tuple(range(5, 11)), doc(()), 8)


def test_joint_encode_shapes_and_determinism():
    phi = tiny_phi()
    states = joint_encode((5, 6, 7), doc((8, 9)), phi)
    assert states.shape == (8, 8)  # [CLS] 3 [SEP] 2 [SEP] rows, h=8
    again = joint_encode((5, 6, 7), doc((8, 9)), phi)
    assert states.tobytes() == again.tobytes()
    null_states = joint_encode((5, 6, 7), NULL_DOC, phi)
    assert null_states.shape == (6, 8)
    assert np.all(np.isfinite(null_states))


def test_joint_encode_gradients():
    phi = tiny_phi(seed=3)
    g = Graph()
    leaf = register_named_leaves(g, phi.tensors)
    enc = joint_encode_graph(g, leaf, (5, 6), doc((7,)), phi)
    pooled = g.mean_pool(enc.node)
    c = g.leaf(np.random.default_rng(0).normal(size=8), name="c")
    loss = g.matmul(pooled, c)
    for name, lid in leaf.items():
        assert finite_diff_check(g, loss, lid) <= 1e-6, name


def test_heads_must_divide_hidden():
    with pytest.raises(ConfigError):
        init_reader_params(V, hidden=9, heads=2)


# ---------------------------------------------------------------- MLM head


def test_uniform_head_probability():
    phi = tiny_phi()
    phi.tensors["w_mlm"][:] = 0.0
    cases = [
        (masked((MASK, 6), (0,), (7,)), 1),
        (masked((MASK, 6, MASK), (0, 2), (7, 9)), 2),
    ]
    for ex, j in cases:
        p = mlm_probability(ex, doc((8, 9)), phi)
        assert p == pytest.approx((1 / V) ** j, rel=1e-12)


def test_saturated_head_probability():
    phi = tiny_phi()
    ex = masked((5, MASK, 6), (1,), (9,))
    states = joint_encode(ex.input_tokens, doc((8,)), phi)
    hidden = states[1 + 1]  # x starts at joint position 1
    w = np.zeros((V, 8))
    w[9] = 40.0 * hidden / (hidden @ hidden)
    phi.tensors["w_mlm"] = w
    p = mlm_probability(ex, doc((8,)), phi)
    assert 1.0 - 1e-12 < p <= 1.0


def test_mlm_null_doc_defined():
    phi = tiny_phi()
    p = mlm_probability(masked((MASK, 5), (0,), (6,)), NULL_DOC, phi)
    assert 0.0 < p <= 1.0


def test_mlm_probability_in_unit_interval_and_no_underflow():
    phi = tiny_phi(seed=5)
    body = (5, 6, 7, 8)
    tokens = tuple([MASK] * 8) + (5,)
    ex = masked(tokens, tuple(range(8)), (5, 6, 7, 8, 9, 10, 11, 5))
    p = mlm_probability(ex, doc(body), phi)
    assert 0.0 < p <= 1.0
    assert np.isfinite(np.log(p))


def test_masked_position_out_of_joint():
    phi = tiny_phi()
    bad = masked((MASK, 5), (5,), (6,))  # position 5 not inside the input
    with pytest.raises(ContractViolation):
        mlm_probability(bad, doc((7,)), phi)


def test_mlm_gradients():
    phi = tiny_phi(seed=7)
    g = Graph()
    leaf = register_named_leaves(g, phi.tensors)
    node = mlm_log_probability_graph(
        g, leaf, masked((MASK, 5, MASK), (0, 2), (6, 7)), doc((8, 9)), phi
    )
    for name, lid in leaf.items():
        if name.startswith("span_"):
            continue  # span head unused by this loss
        assert finite_diff_check(g, loss_id=node, leaf_id=lid) <= 1e-6, name


# ---------------------------------------------------------------- spans


def test_enumerate_spans_examples():
    a, b = 5, 6
    z = doc((a, b, a))
    assert [(s.start, s.end) for s in enumerate_spans(z, (a,))] == [(0, 0), (2, 2)]
    assert [(s.start, s.end) for s in enumerate_spans(z, (b, a))] == [(1, 2)]
    assert enumerate_spans(z, (a, b, a, b)) == []
    assert enumerate_spans(doc(()), (a,)) == []


def test_enumerate_spans_rejects_empty_answer():
    with pytest.raises(ContractViolation):
        enumerate_spans(doc((5,)), ())


def test_enumerate_spans_caps_length():
    z = doc((5, 5, 5, 5, 5, 5, 5))
    assert enumerate_spans(z, (5,) * 6) == []
    spans = enumerate_spans(z, (5,) * 5)
    assert all(s.end - s.start + 1 == 5 for s in spans)


def test_span_candidate_fields():
    s = enumerate_spans(doc((5, 6)), (6,))[0]
    assert s == SpanCandidate(start=1, end=1, answer=(6,))


def test_all_spans():
    assert all_spans(3, max_answer_len=2) == [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2)]
    assert all_spans(0) == []


# ---------------------------------------------------------------- QA head


def test_qa_single_candidate_probability_one():
    phi = tiny_phi()
    assert qa_probability((10,), doc((5,)), (5,), phi) == 1.0


def test_qa_absent_answer_probability_zero():
    phi = tiny_phi()
    assert qa_probability((10,), doc((5, 6)), (7,), phi) == 0.0
    assert qa_probability((10,), NULL_DOC, (7,), phi) == 0.0


def test_qa_equal_scores_symmetry():
    phi = tiny_phi()
    phi.tensors["span_w2"][:] = 0.0  # every span scores b2 = 0
    phi.tensors["span_b2"] = np.zeros(())
    p = qa_probability((10,), doc((5, 6, 5)), (5,), phi)
    assert p == pytest.approx(2 / 6, rel=1e-12)  # 2 matches of 6 candidate spans


def test_qa_sums_to_one_over_distinct_answers():
    phi = tiny_phi(seed=9)
    body = (5, 6, 5, 7)
    answers = {tuple(body[s : e + 1]) for s, e in all_spans(len(body))}
    total = sum(qa_probability((10, 11), doc(body), y, phi) for y in answers)
    assert abs(total - 1.0) <= 1e-10


def test_qa_gradients():
    phi = tiny_phi(seed=11)
    g = Graph()
    leaf = register_named_leaves(g, phi.tensors)
    node = qa_log_probability_graph(g, leaf, (10, 11), doc((5, 6, 5)), (5,), phi)
    assert node is not None
    for name, lid in leaf.items():
        if name == "w_mlm":
            continue  # MLM head unused by this loss
        assert finite_diff_check(g, loss_id=node, leaf_id=lid) <= 1e-6, name


def test_qa_match_beyond_truncation_is_zero():
    phi = tiny_phi(max_len=10)
    x = (10, 11, 9)  # budget leaves 10 - 6 = 4 body tokens
    body = (5, 5, 5, 5, 6)  # the 6 survives only without truncation
    assert qa_probability(x, doc(body), (6,), phi) == 0.0
