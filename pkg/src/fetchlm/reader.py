"""Knowledge-augmented encoder p(y|z,x): joint self-attention over the
concatenated input and document, a masked-token prediction head, and an
extractive span head for question answering.

All heads are exposed twice: as graph builders (for training, where they sit
inside a larger marginal-likelihood graph) and as plain evaluation functions
returning floats.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import Graph, register_named_leaves
from .errors import ConfigError, ContractViolation
from .textcorpus import CLS, SEP, Document, MaskedExample

logger = logging.getLogger(__name__)

_INIT_STREAM = 12


@dataclass
class ReaderParams:
    """All reader weights (φ), disjoint from the retriever's θ."""

    tensors: dict[str, np.ndarray]
    hidden: int
    heads: int
    layers: int
    max_len: int
    span_hidden: int
    version: int = 0

    def copy(self) -> "ReaderParams":
        return ReaderParams(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            hidden=self.hidden,
            heads=self.heads,
            layers=self.layers,
            max_len=self.max_len,
            span_hidden=self.span_hidden,
            version=self.version,
        )


@dataclass(frozen=True)
class SpanCandidate:
    start: int  # indices into z_body, inclusive
    end: int
    answer: tuple[int, ...]


@dataclass(frozen=True)
class JointEncoding:
    """Hidden states for one (x, z) pair plus the layout of the joined
    sequence, so heads can find masked positions and document offsets."""

    node: int  # graph node holding the (L, h) states
    tokens: tuple[int, ...]
    x_start: int  # position of the first x token
    z_start: int  # position of the first kept z_body token
    z_len: int  # number of z_body tokens kept after truncation
    truncated: bool


def init_reader_params(
    vocab_size: int,
    hidden: int = 64,
    heads: int = 2,
    layers: int = 2,
    max_len: int = 64,
    span_hidden: int = 32,
    seed: int = 0,
) -> ReaderParams:
    if hidden % heads:
        raise ConfigError(f"hidden={hidden} not divisible by heads={heads}")
    rng = np.random.default_rng([seed, _INIT_STREAM])
    dh = hidden // heads
    s = 1.0 / np.sqrt(hidden)
    t: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, 0.5, (vocab_size, hidden)),
        "pos_emb": rng.normal(0.0, 0.1, (max_len, hidden)),
        "w_mlm": rng.normal(0.0, s, (vocab_size, hidden)),
        "span_w1": rng.normal(0.0, 1.0 / np.sqrt(2 * hidden), (2 * hidden, span_hidden)),
        "span_b1": np.zeros(span_hidden),
        "span_w2": rng.normal(0.0, 1.0 / np.sqrt(span_hidden), span_hidden),
        "span_b2": np.zeros(()),
    }
    for i in range(layers):
        for j in range(heads):
            t[f"l{i}_wq{j}"] = rng.normal(0.0, s, (hidden, dh))
            t[f"l{i}_wk{j}"] = rng.normal(0.0, s, (hidden, dh))
            t[f"l{i}_wv{j}"] = rng.normal(0.0, s, (hidden, dh))
        t[f"l{i}_wo"] = rng.normal(0.0, s, (hidden, hidden))
        t[f"l{i}_ffn_w1"] = rng.normal(0.0, s, (hidden, hidden))
        t[f"l{i}_ffn_b1"] = np.zeros(hidden)
        t[f"l{i}_ffn_w2"] = rng.normal(0.0, s, (hidden, hidden))
        t[f"l{i}_ffn_b2"] = np.zeros(hidden)
    return ReaderParams(
        tensors=t,
        hidden=hidden,
        heads=heads,
        layers=layers,
        max_len=max_len,
        span_hidden=span_hidden,
        version=0,
    )


def join_reader(x_tokens, z: Document, max_len: int):
    """[CLS] x [SEP] z_body [SEP]; on overflow the document body is cut,
    never x (x carries the masked positions or the question)."""
    x_tokens = tuple(x_tokens)
    budget = max_len - (len(x_tokens) + 3)
    if budget < 0:
        raise ContractViolation(
            f"input of {len(x_tokens)} tokens cannot fit joint length {max_len}"
        )
    body = tuple(z.body)
    truncated = len(body) > budget
    if truncated:
        logger.info("truncating %s body from %d to %d tokens", z.doc_id, len(body), budget)
        body = body[:budget]
    tokens = (CLS,) + x_tokens + (SEP,) + body + (SEP,)
    return tokens, 1, len(x_tokens) + 2, len(body), truncated


def joint_encode_graph(
    g: Graph, leaf: dict[str, int], x_tokens, z: Document, phi: ReaderParams
) -> JointEncoding:
    tokens, x_start, z_start, z_len, truncated = join_reader(x_tokens, z, phi.max_len)
    L = len(tokens)
    h = g.embedding(leaf["tok_emb"], tokens)
    p = g.embedding(leaf["pos_emb"], range(L))
    states = g.add(h, p)
    for i in range(phi.layers):
        head_outs = []
        for j in range(phi.heads):
            q = g.matmul(states, leaf[f"l{i}_wq{j}"])
            k = g.matmul(states, leaf[f"l{i}_wk{j}"])
            v = g.matmul(states, leaf[f"l{i}_wv{j}"])
            head_outs.append(g.attention(q, k, v))
        attn = g.matmul(g.concat(*head_outs), leaf[f"l{i}_wo"])
        states = g.layernorm(g.add(states, attn))
        ffn = g.matmul(
            g.tanh(g.add(g.matmul(states, leaf[f"l{i}_ffn_w1"]), leaf[f"l{i}_ffn_b1"])),
            leaf[f"l{i}_ffn_w2"],
        )
        ffn = g.add(ffn, leaf[f"l{i}_ffn_b2"])
        states = g.layernorm(g.add(states, ffn))
    return JointEncoding(
        node=states,
        tokens=tokens,
        x_start=x_start,
        z_start=z_start,
        z_len=z_len,
        truncated=truncated,
    )


def joint_encode(x_tokens, z: Document, phi: ReaderParams) -> np.ndarray:
    g = Graph()
    leaf = register_named_leaves(g, phi.tensors)
    return g.value(joint_encode_graph(g, leaf, x_tokens, z, phi).node)


def _row(g: Graph, states: int, pos: int, length: int) -> int:
    onehot = np.zeros(length)
    onehot[pos] = 1.0
    return g.matmul(g.leaf(onehot, name=f"pick{pos}"), states)


def mlm_log_probability_graph(
    g: Graph, leaf: dict[str, int], x: MaskedExample, z: Document, phi: ReaderParams
) -> int:
    """Graph node holding log p(y|z,x) = Σ_j log softmax(w·h_{mask j})[y_j]."""
    if not x.masked_positions:
        raise ContractViolation("example has no masked positions")
    enc = joint_encode_graph(g, leaf, x.input_tokens, z, phi)
    L = len(enc.tokens)
    total = None
    for pos, target in zip(x.masked_positions, x.targets):
        joint_pos = enc.x_start + pos
        if not 0 <= pos < len(x.input_tokens) or joint_pos >= L:
            raise ContractViolation(
                f"masked position {pos} outside the joint sequence"
            )
        hidden = _row(g, enc.node, joint_pos, L)
        logits = g.matmul(leaf["w_mlm"], hidden)
        logp = g.log_softmax(logits)
        pick = np.zeros(g.value(leaf["w_mlm"]).shape[0])
        pick[target] = 1.0
        term = g.matmul(g.leaf(pick, name=f"target{target}"), logp)
        total = term if total is None else g.add(total, term)
    return total


def mlm_probability(x: MaskedExample, z: Document, phi: ReaderParams) -> float:
    g = Graph()
    leaf = register_named_leaves(g, phi.tensors)
    return float(np.exp(g.value(mlm_log_probability_graph(g, leaf, x, z, phi))))


def enumerate_spans(z: Document, y, max_answer_len: int = 5) -> list[SpanCandidate]:
    """Exact-match occurrences of y inside z_body, ascending by start."""
    y = tuple(y)
    if not y:
        raise ContractViolation("answer sequence must be non-empty")
    if len(y) > max_answer_len:
        return []
    body = tuple(z.body)
    out = []
    for s in range(len(body) - len(y) + 1):
        if body[s : s + len(y)] == y:
            out.append(SpanCandidate(start=s, end=s + len(y) - 1, answer=y))
    return out


def all_spans(z_len: int, max_answer_len: int = 5):
    """Every (start, end) with end - start + 1 <= max_answer_len."""
    return [
        (s, e)
        for s in range(z_len)
        for e in range(s, min(s + max_answer_len, z_len))
    ]


def qa_log_probability_graph(
    g: Graph,
    leaf: dict[str, int],
    x_tokens,
    z: Document,
    y,
    phi: ReaderParams,
    max_answer_len: int = 5,
) -> int | None:
    """Graph node for log p(y|z,x) under the span head, or None when y does
    not occur in z_body (probability exactly 0, no graph term)."""
    enc = joint_encode_graph(g, leaf, x_tokens, z, phi)
    kept_body = Document(doc_id=z.doc_id, title=z.title, body=enc.tokens[enc.z_start : enc.z_start + enc.z_len])
    matches = enumerate_spans(kept_body, y, max_answer_len)
    if not matches:
        return None
    L = len(enc.tokens)
    spans = all_spans(enc.z_len, max_answer_len)
    match_set = {(m.start, m.end) for m in matches}
    scores = []
    mask = np.zeros(len(spans))
    for idx, (s, e) in enumerate(spans):
        h_start = _row(g, enc.node, enc.z_start + s, L)
        h_end = _row(g, enc.node, enc.z_start + e, L)
        joined = g.concat(h_start, h_end)
        hid = g.tanh(g.add(g.matmul(joined, leaf["span_w1"]), leaf["span_b1"]))
        score = g.add(g.matmul(hid, leaf["span_w2"]), leaf["span_b2"])
        scores.append(score)
        if (s, e) in match_set:
            mask[idx] = 1.0
    vec = g.stack_rows(*scores)
    probs = g.softmax(vec)
    return g.log(g.matmul(g.leaf(mask, name="span_matches"), probs))


def qa_probability(
    x_tokens, z: Document, y, phi: ReaderParams, max_answer_len: int = 5
) -> float:
    g = Graph()
    leaf = register_named_leaves(g, phi.tensors)
    node = qa_log_probability_graph(g, leaf, x_tokens, z, y, phi, max_answer_len)
    if node is None:
        return 0.0
    return float(np.exp(g.value(node)))
