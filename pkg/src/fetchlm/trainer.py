"""Training loops for the retrieve-then-predict model.

Pre-training maximizes log p(y|x) = log Σ_z p(y|z,x) p(z|x) over the top-k
candidates of a possibly stale index, with candidate scores recomputed
against the current retriever inside one autodiff graph, so a single
backward pass yields both retriever and reader gradients. The closed-form
retriever gradient Σ_z r(z) ∇f(x,z) is implemented separately and kept as a
cross-check oracle against the autodiff route.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Graph, register_leaves, register_named_leaves
from .errors import ConfigError, ContractViolation, DataError, NumericError
from .mipsindex import (
    EXHAUSTIVE,
    AsyncIndexManager,
    Exhaustive,
    IndexSnapshot,
    Ivf,
    RefreshSchedule,
    search_topk,
    snapshot_from_matrix,
)
from .reader import (
    ReaderParams,
    mlm_log_probability_graph,
    mlm_probability,
    qa_log_probability_graph,
)
from .retriever import (
    NULL_DOC,
    RetrieverParams,
    candidate_set,
    embed_input,
    query_tower_graph,
    doc_tower_graph,
)
from .textcorpus import (
    Document,
    KnowledgeCorpus,
    MaskedExample,
    SalientSpanRules,
    make_ict_example,
    make_masked_example,
    split_sentences,
)

_SAMPLE_STREAM = 31
_ICT_STREAM = 33
_READER_WARM_STREAM = 35
_FINETUNE_STREAM = 37

_DOC_TOWER_FIELDS = ("d_dense_w", "d_dense_b", "w_doc")

_CKPT_MAGIC = b"FLMC"
_CKPT_HEADER = struct.Struct("<4sIQ")
_CKPT_FORMAT = 1


def derive_seed(*parts: int) -> int:
    """Stateless sub-stream seed: same parts, same seed, independent streams."""
    return int(np.random.default_rng(list(parts)).integers(2**62))


@dataclass(frozen=True)
class TrainConfig:
    k: int = 8  # marginalization set size, null included when include_null
    refresh_interval: float = 500
    learning_rate: float = 0.05
    steps: int = 100
    masking_scheme: str = "salient_span"
    exclude_trivial: bool = True
    include_null: bool = True
    seed: int = 0
    batch_size: int = 8
    build_latency: int = 0
    staleness_multiplier: int = 1
    momentum: float = 0.9
    grad_clip: float = 1.0
    finetune_k: int = 5
    max_answer_len: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ParamStore:
    """Everything the optimizer owns: θ, φ, momentum, and the step counter
    that doubles as the parameter version."""

    theta: RetrieverParams
    phi: ReaderParams
    step: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {f"theta/{n}": a for n, a in self.theta.tensors().items()}
        out.update({f"phi/{n}": a for n, a in self.phi.tensors.items()})
        return out

    @property
    def version(self) -> int:
        return self.step

    def copy(self) -> "ParamStore":
        return ParamStore(
            theta=self.theta.copy(),
            phi=self.phi.copy(),
            step=self.step,
            momentum={k: v.copy() for k, v in self.momentum.items()},
            skipped=self.skipped,
        )


def sgd_apply(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              momentum: float = 0.9, clip: float = 1.0,
              freeze: tuple[str, ...] = ()) -> None:
    """One SGD+momentum update over the named gradients; bumps the version.

    Gradient-norm clipping is global over the supplied tensors. Names in
    `freeze` are excluded entirely (their momentum is untouched too).
    """
    tensors = store.named_tensors()
    live = {n: g for n, g in grads.items() if n not in freeze}
    # sorted order keeps the norm reduction independent of dict history,
    # which the bit-identical-resume contract relies on
    names = sorted(live)
    sq = sum(float((live[n] * live[n]).sum()) for n in names)
    norm = np.sqrt(sq)
    scale = 1.0 if norm <= clip else clip / norm
    for name in names:
        grad = live[name]
        if name not in tensors:
            raise ContractViolation(f"gradient for unknown tensor {name!r}")
        buf = store.momentum.get(name)
        if buf is None:
            buf = store.momentum.setdefault(name, np.zeros_like(tensors[name]))
        buf *= momentum
        buf += grad * scale
        tensors[name] -= lr * buf
    store.step += 1
    store.theta.version = store.step
    store.phi.version = store.step


def marginal_stats(p_z, p_y_given_z) -> tuple[float, np.ndarray]:
    """p(y|x) and the leave-one-out weights r(z) from candidate terms."""
    p_z = np.asarray(p_z, dtype=np.float64)
    p_y_given_z = np.asarray(p_y_given_z, dtype=np.float64)
    if p_z.shape != p_y_given_z.shape or p_z.ndim != 1:
        raise ContractViolation("p(z|x) and p(y|z,x) must be equal-length vectors")
    p_y = float(np.dot(p_y_given_z, p_z))
    if p_y <= 0.0:
        raise ContractViolation("r(z) undefined at p(y|x) = 0")
    r = (p_y_given_z / p_y - 1.0) * p_z
    return p_y, r


@dataclass
class MarginalResult:
    candidates: list[Document]
    p_z: np.ndarray
    p_y_given_z: np.ndarray
    p_y: float
    r: np.ndarray
    # graph carry for gradient routes
    graph: Graph
    theta_leaf: dict[str, int]
    phi_leaf: dict[str, int]
    f_nodes: list[int]
    log_pz_node: int
    log_py_nodes: list[int | None]
    log_py_x_node: int


def _pick(g: Graph, vec_node: int, idx: int, length: int) -> int:
    onehot = np.zeros(length)
    onehot[idx] = 1.0
    return g.matmul(g.leaf(onehot, name=f"pick{idx}"), vec_node)


def marginal_forward(
    x,
    store: ParamStore,
    index: IndexSnapshot,
    cfg: TrainConfig,
    corpus: KnowledgeCorpus,
    *,
    graph: Graph | None = None,
    theta_leaf: dict[str, int] | None = None,
    phi_leaf: dict[str, int] | None = None,
) -> MarginalResult | None:
    """Top-k selection on the snapshot, fresh-parameter rescoring, reader
    conditionals, and the marginal — all inside one graph.

    x is a MaskedExample for pre-training or a (question_tokens,
    answer_tokens) pair for fine-tuning. Fine-tuning freezes the document
    side by scoring against the snapshot's embedding rows; it uses
    cfg.finetune_k candidates with no null and no trivial-exclusion.
    Returns None when every candidate gives the answer zero probability.
    """
    qa_mode = not isinstance(x, MaskedExample)
    g = graph if graph is not None else Graph()
    tleaf = theta_leaf if theta_leaf is not None else register_leaves(g, store.theta, prefix="theta/")
    fleaf = phi_leaf if phi_leaf is not None else register_named_leaves(g, store.phi.tensors, prefix="phi/")

    if qa_mode:
        question, answer = x
        query_tokens = tuple(question)
        n_docs = min(cfg.finetune_k, len(index))
        res = search_topk(index, embed_input(query_tokens, store.theta), n_docs)
        cands = [corpus.get(i) for i in res.doc_ids]
        rows = {i: r for i, r in zip(res.doc_ids, res.row_ids)}
    else:
        query_tokens = x.input_tokens
        target_docs = cfg.k - int(cfg.include_null)
        if target_docs > len(corpus):
            raise ConfigError(f"k={cfg.k} too large for a {len(corpus)}-doc corpus")
        cands = []
        if target_docs > 0:
            fetch = min(target_docs + int(cfg.exclude_trivial), len(index))
            res = search_topk(index, embed_input(query_tokens, store.theta), fetch)
            docs = [corpus.get(i) for i in res.doc_ids]
            cands = candidate_set(x, docs, cfg.exclude_trivial, include_null=False)
            cands = cands[:target_docs]
        if cfg.include_null:
            cands = cands + [NULL_DOC]

    qnode = query_tower_graph(g, tleaf, query_tokens)
    f_nodes = []
    for z in cands:
        if qa_mode:
            row = g.leaf(index.matrix[rows[z.doc_id]], name=f"snap/{z.doc_id}")
            f_nodes.append(g.matmul(qnode, row))
        else:
            f_nodes.append(g.matmul(qnode, doc_tower_graph(g, tleaf, z)))
    scores = g.stack_rows(*f_nodes)
    log_pz = g.log_softmax(scores)

    log_py_nodes: list[int | None] = []
    for z in cands:
        if qa_mode:
            node = qa_log_probability_graph(
                g, fleaf, query_tokens, z, answer, store.phi, cfg.max_answer_len
            )
        else:
            node = mlm_log_probability_graph(g, fleaf, x, z, store.phi)
        log_py_nodes.append(node)

    terms = []
    for i, lpy in enumerate(log_py_nodes):
        if lpy is None:
            continue
        terms.append(g.exp(g.add(_pick(g, log_pz, i, len(cands)), lpy)))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = g.add(total, t)
    log_py_x = g.log(total)

    p_z = np.exp(g.value(log_pz))
    p_y_given_z = np.array(
        [0.0 if n is None else float(np.exp(g.value(n))) for n in log_py_nodes]
    )
    p_y, r = marginal_stats(p_z, p_y_given_z)
    return MarginalResult(
        candidates=list(cands),
        p_z=p_z,
        p_y_given_z=p_y_given_z,
        p_y=p_y,
        r=r,
        graph=g,
        theta_leaf=tleaf,
        phi_leaf=fleaf,
        f_nodes=f_nodes,
        log_pz_node=log_pz,
        log_py_nodes=log_py_nodes,
        log_py_x_node=log_py_x,
    )


def retriever_gradient_explicit(result: MarginalResult, x=None, store=None) -> dict[str, np.ndarray]:
    """∇_θ log p(y|x) assembled as Σ_z r(z) ∇_θ f(x,z), without
    differentiating through the marginal itself. The result object carries
    the graph, so x and store are accepted only for call-site symmetry with
    marginal_forward."""
    g = result.graph
    total = None
    for f_node, r_z in zip(result.f_nodes, result.r):
        term = g.mul(f_node, g.leaf(np.asarray(float(r_z)), name="r_z"))
        total = term if total is None else g.add(total, term)
    grads = g.backward(total)
    return {f"theta/{n}": grads[lid] for n, lid in result.theta_leaf.items()}


def retriever_gradient_autodiff(result: MarginalResult) -> dict[str, np.ndarray]:
    """The oracle route: plain backward of log p(y|x) w.r.t. θ."""
    grads = result.graph.backward(result.log_py_x_node)
    return {f"theta/{n}": grads[lid] for n, lid in result.theta_leaf.items()}


# ---------------------------------------------------------------------
# example sampling (stateless per-step streams)
# ---------------------------------------------------------------------


def sample_masked_example(
    corpus: KnowledgeCorpus,
    scheme: str,
    rules: SalientSpanRules,
    seed: int,
    step: int,
    slot: int,
) -> MaskedExample:
    """Uniform document, uniform sentence, scheme-specific masking; sentences
    the scheme cannot use (no salient span) are skipped and redrawn."""
    for attempt in range(1000):
        rng = np.random.default_rng([seed, _SAMPLE_STREAM, step, slot, attempt])
        doc = corpus.docs[int(rng.integers(len(corpus)))]
        sents = split_sentences(doc.body, corpus.vocab)
        if not sents:
            continue
        sent = sents[int(rng.integers(len(sents)))]
        ex = make_masked_example(
            sent,
            scheme,
            int(rng.integers(2**62)),
            vocab=corpus.vocab,
            rules=rules,
            source_doc_id=doc.doc_id,
        )
        if ex is not None:
            return ex
    raise DataError(f"found no usable sentence for scheme {scheme!r} in 1000 draws")


# ---------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------


def pretrain_step(
    store: ParamStore,
    examples: list[MaskedExample],
    manager: AsyncIndexManager,
    cfg: TrainConfig,
    corpus: KnowledgeCorpus,
) -> dict:
    """One optimizer step over a batch: loss = −mean log p(y|x); gradients
    applied to θ and φ; refresh protocol advanced; metrics returned."""
    loss_terms = []
    losses = []
    ru_top1 = []
    try:
        g = Graph()
        tleaf = register_leaves(g, store.theta, prefix="theta/")
        fleaf = register_named_leaves(g, store.phi.tensors, prefix="phi/")
        for ex in examples:
            res = marginal_forward(
                ex, store, manager.active, cfg, corpus,
                graph=g, theta_leaf=tleaf, phi_leaf=fleaf,
            )
            loss_terms.append(res.log_py_x_node)
            losses.append(-float(g.value(res.log_py_x_node)))
            ru_top1.append(_top1_utility(res, ex, store))
        total = loss_terms[0]
        for t in loss_terms[1:]:
            total = g.add(total, t)
        loss_node = g.mul(total, g.leaf(np.asarray(-1.0 / len(examples)), name="scale"))
        grads = g.backward(loss_node)
    except NumericError as err:
        raise NumericError(
            f"non-finite loss at step {store.step + 1}; "
            f"examples from {[e.source_doc_id for e in examples]}: {err}"
        ) from err
    named = {f"theta/{n}": grads[lid] for n, lid in tleaf.items()}
    named.update({f"phi/{n}": grads[lid] for n, lid in fleaf.items()})
    sgd_apply(store, named, cfg.learning_rate, cfg.momentum, cfg.grad_clip)
    manager.handle("trainer_step", store.theta)
    return {
        "step": store.step,
        "loss": float(np.mean(losses)),
        "staleness": store.step - manager.active.theta_version,
        "ru_top1": float(np.mean(ru_top1)),
    }


def _top1_utility(res: MarginalResult, ex: MaskedExample, store: ParamStore) -> float:
    """log p(y|top-1,x) − log p(y|∅,x); 0 when the top candidate is ∅."""
    if not res.candidates or res.candidates[0].doc_id == NULL_DOC.doc_id:
        return 0.0
    null_idx = next(
        (i for i, z in enumerate(res.candidates) if z.doc_id == NULL_DOC.doc_id), None
    )
    if null_idx is not None:
        log_null = float(np.log(res.p_y_given_z[null_idx]))
    else:
        log_null = float(np.log(mlm_probability(ex, NULL_DOC, store.phi)))
    return float(np.log(res.p_y_given_z[0])) - log_null


def pretrain_run(
    store: ParamStore,
    pretrain_corpus: KnowledgeCorpus,
    knowledge_corpus: KnowledgeCorpus,
    cfg: TrainConfig,
    rules: SalientSpanRules,
    *,
    mode: str = "simulated",
    structure: Exhaustive | Ivf = EXHAUSTIVE,
    manager: AsyncIndexManager | None = None,
    start_step: int = 0,
    metrics_sink=None,
    evaluator=None,
    eval_every: int = 0,
    checkpoint_every: int = 0,
    checkpoint_path=None,
    stop_flag=None,
) -> tuple[AsyncIndexManager, list[dict]]:
    """Drive pretrain_step for cfg.steps optimizer steps.

    The step index both names the sampling streams and versions the
    parameters, so a resumed run continues the exact example sequence.
    """
    if manager is None:
        schedule = RefreshSchedule(
            refresh_interval=cfg.refresh_interval,
            mode=mode,
            staleness_multiplier=cfg.staleness_multiplier,
            build_latency=cfg.build_latency,
        )
        manager = AsyncIndexManager(
            knowledge_corpus, store.theta, schedule, structure, seed=cfg.seed
        )
        store.momentum = {}
    records = []
    for step in range(start_step + 1, cfg.steps + 1):
        examples = [
            sample_masked_example(
                pretrain_corpus, cfg.masking_scheme, rules, cfg.seed, step, i
            )
            for i in range(cfg.batch_size)
        ]
        record = pretrain_step(store, examples, manager, cfg, knowledge_corpus)
        if evaluator is not None and eval_every and step % eval_every == 0:
            record.update(evaluator(store, manager))
        records.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
        if checkpoint_every and checkpoint_path and step % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, store, cfg, manager)
        if stop_flag is not None and stop_flag():
            break
    return manager, records


# ---------------------------------------------------------------------
# warm starts
# ---------------------------------------------------------------------


def ict_warmstart(
    store: ParamStore,
    corpus: KnowledgeCorpus,
    cfg: TrainConfig,
    steps: int,
    batch: int = 32,
    metrics_sink=None,
) -> list[dict]:
    """Train θ to retrieve the document a sentence came from, against
    in-batch negatives. φ is untouched."""
    records = []
    for step in range(1, steps + 1):
        g = Graph()
        tleaf = register_leaves(g, store.theta, prefix="theta/")
        qnodes = []
        dnodes = []
        for i in range(batch):
            ex = make_ict_example(
                corpus, derive_seed(cfg.seed, _ICT_STREAM, step, i)
            )
            qnodes.append(query_tower_graph(g, tleaf, ex.query))
            dnodes.append(doc_tower_graph(g, tleaf, ex.positive_view))
        scores = g.matmul(g.stack_rows(*qnodes), g.transpose(g.stack_rows(*dnodes)))
        log_probs = g.log_softmax(scores)
        diag = g.leaf(np.eye(batch) / batch, name="diag")
        loss_node = g.mul(g.sum(g.mul(log_probs, diag)), g.leaf(np.asarray(-1.0)))
        grads = g.backward(loss_node)
        named = {f"theta/{n}": grads[lid] for n, lid in tleaf.items()}
        sgd_apply(store, named, cfg.learning_rate, cfg.momentum, cfg.grad_clip)
        record = {"step": store.step, "loss": float(g.value(loss_node))}
        records.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
    return records


def reader_mlm_warmstart(
    store: ParamStore,
    corpus: KnowledgeCorpus,
    cfg: TrainConfig,
    steps: int,
    rules: SalientSpanRules,
    metrics_sink=None,
) -> list[dict]:
    """Short no-retrieval masked-prediction training of φ (candidates = ∅
    only), breaking the cold-start circularity before joint training."""
    records = []
    for step in range(1, steps + 1):
        g = Graph()
        fleaf = register_named_leaves(g, store.phi.tensors, prefix="phi/")
        terms = []
        for i in range(cfg.batch_size):
            rng_step = derive_seed(cfg.seed, _READER_WARM_STREAM, step, i)
            ex = sample_masked_example(
                corpus, cfg.masking_scheme, rules, rng_step, 0, 0
            )
            terms.append(mlm_log_probability_graph(g, fleaf, ex, NULL_DOC, store.phi))
        total = terms[0]
        for t in terms[1:]:
            total = g.add(total, t)
        loss_node = g.mul(total, g.leaf(np.asarray(-1.0 / len(terms))))
        grads = g.backward(loss_node)
        named = {f"phi/{n}": grads[lid] for n, lid in fleaf.items()}
        sgd_apply(store, named, cfg.learning_rate, cfg.momentum, cfg.grad_clip)
        record = {"step": store.step, "loss": float(g.value(loss_node))}
        records.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
    return records


# ---------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------


def finetune_step(
    store: ParamStore,
    qa_example: tuple,
    index: IndexSnapshot,
    cfg: TrainConfig,
    corpus: KnowledgeCorpus,
) -> dict | None:
    """One QA update against the frozen snapshot. Returns None (and counts)
    when the answer is extractable from no candidate. Document-tower weights
    receive no gradient; the snapshot pins their output regardless."""
    res = marginal_forward(qa_example, store, index, cfg, corpus)
    if res is None:
        store.skipped += 1
        return None
    g = res.graph
    loss_node = g.mul(res.log_py_x_node, g.leaf(np.asarray(-1.0)))
    grads = g.backward(loss_node)
    named = {f"theta/{n}": grads[lid] for n, lid in res.theta_leaf.items()}
    named.update({f"phi/{n}": grads[lid] for n, lid in res.phi_leaf.items()})
    freeze = tuple(f"theta/{n}" for n in _DOC_TOWER_FIELDS)
    sgd_apply(store, named, cfg.learning_rate, cfg.momentum, cfg.grad_clip, freeze=freeze)
    return {
        "step": store.step,
        "loss": float(g.value(loss_node)),
        "staleness": 0,
        "skipped": store.skipped,
    }


def finetune_run(
    store: ParamStore,
    qa_examples: list[tuple],
    index: IndexSnapshot,
    cfg: TrainConfig,
    corpus: KnowledgeCorpus,
    steps: int,
    metrics_sink=None,
) -> list[dict]:
    """Sample uniformly from the training examples for `steps` updates.
    The index is built once by the caller and never refreshed here."""
    if not qa_examples:
        raise DataError("fine-tuning needs at least one QA example")
    store.momentum = {}
    records = []
    for step in range(1, steps + 1):
        rng = np.random.default_rng([cfg.seed, _FINETUNE_STREAM, step])
        ex = qa_examples[int(rng.integers(len(qa_examples)))]
        record = finetune_step(store, ex, index, cfg, corpus)
        if record is not None:
            records.append(record)
            if metrics_sink is not None:
                metrics_sink(record)
    return records


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------


def _manager_blob(manager: AsyncIndexManager | None) -> tuple[dict | None, dict]:
    if manager is None:
        return None, {}
    tensors = {"index/active_matrix": np.asarray(manager.active.matrix)}
    if manager._frozen_theta is not None:
        for n, a in manager._frozen_theta.tensors().items():
            tensors[f"frozen/{n}"] = a
    proto = {
        "phase": manager.phase,
        "countdown": manager.countdown,
        "steps_since_snapshot": manager.steps_since_snapshot,
        "pending_request": manager.pending_request,
        "active_version": manager.active.theta_version,
        "frozen_version": None
        if manager._frozen_theta is None
        else manager._frozen_theta.version,
    }
    return proto, tensors


def save_checkpoint(path, store: ParamStore, cfg: TrainConfig,
                    manager: AsyncIndexManager | None = None) -> None:
    """Manifest + packed little-endian float64 tensors; everything needed to
    resume bit-identically in simulated mode."""
    tensors = dict(store.named_tensors())
    tensors.update({f"momentum/{n}": a for n, a in store.momentum.items()})
    proto, extra = _manager_blob(manager)
    tensors.update(extra)
    table = []
    offset = 0
    blob_parts = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob_parts.append(arr.tobytes())  # C order, 0-d keeps its shape entry
        offset += arr.size
    manifest = {
        "format_version": _CKPT_FORMAT,
        "step": store.step,
        "config_digest": cfg.digest(),
        "skipped": store.skipped,
        "phi_meta": {
            "hidden": store.phi.hidden,
            "heads": store.phi.heads,
            "layers": store.phi.layers,
            "max_len": store.phi.max_len,
            "span_hidden": store.phi.span_hidden,
        },
        "protocol": proto,
        "tensors": table,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_FORMAT, len(payload)))
        fh.write(payload)
        for part in blob_parts:
            fh.write(part)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    """Rebuild the ParamStore; the second value carries the manifest plus
    any protocol tensors for restore_manager."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size or raw[:4] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    _, fmt, mlen = _CKPT_HEADER.unpack_from(raw)
    if fmt != _CKPT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {fmt}")
    manifest = json.loads(raw[_CKPT_HEADER.size : _CKPT_HEADER.size + mlen])
    base = _CKPT_HEADER.size + mlen
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=base + entry["offset"] * 8)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    theta_kw = {n[len("theta/"):]: a for n, a in arrays.items() if n.startswith("theta/")}
    theta = RetrieverParams(**theta_kw, version=manifest["step"])
    meta = manifest["phi_meta"]
    phi = ReaderParams(
        tensors={n[len("phi/"):]: a for n, a in arrays.items() if n.startswith("phi/")},
        version=manifest["step"],
        **meta,
    )
    store = ParamStore(
        theta=theta,
        phi=phi,
        step=manifest["step"],
        momentum={n[len("momentum/"):]: a for n, a in arrays.items() if n.startswith("momentum/")},
        skipped=manifest["skipped"],
    )
    extras = {
        "manifest": manifest,
        "active_matrix": arrays.get("index/active_matrix"),
        "frozen": {n[len("frozen/"):]: a for n, a in arrays.items() if n.startswith("frozen/")},
    }
    return store, extras


def restore_manager(
    corpus: KnowledgeCorpus,
    store: ParamStore,
    cfg: TrainConfig,
    extras: dict,
    mode: str = "simulated",
    structure: Exhaustive | Ivf = EXHAUSTIVE,
) -> AsyncIndexManager:
    """Reconstitute the refresh protocol exactly as checkpointed."""
    proto = extras["manifest"]["protocol"]
    if proto is None:
        raise DataError("checkpoint carries no refresh-protocol state")
    schedule = RefreshSchedule(
        refresh_interval=cfg.refresh_interval,
        mode=mode,
        staleness_multiplier=cfg.staleness_multiplier,
        build_latency=cfg.build_latency,
    )
    manager = AsyncIndexManager(corpus, store.theta, schedule, structure, seed=cfg.seed)
    manager.active = snapshot_from_matrix(
        extras["active_matrix"],
        [d.doc_id for d in corpus],
        proto["active_version"],
        structure,
        seed=cfg.seed,
    )
    manager.phase = proto["phase"]
    manager.countdown = proto["countdown"]
    manager.steps_since_snapshot = proto["steps_since_snapshot"]
    manager.pending_request = proto["pending_request"]
    if extras["frozen"]:
        manager._frozen_theta = RetrieverParams(
            **extras["frozen"], version=proto["frozen_version"]
        )
    return manager
