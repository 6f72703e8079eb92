"""Command-line surface: warmstart, pretrain, finetune, eval, inspect, ablate.

Every command is deterministic given (config file, input files, seed) in
simulated mode; wall-clock timestamps appear only on lines starting with
'#' so outputs stay comparable byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import signal
import sys

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DataError, NumericError, ParseError
from .evalkit import (
    AblationSpec,
    evaluate_qa,
    format_table,
    marginal_token_distribution,
    masked_token_distribution,
    qa_token_examples,
    recall_at_k,
    retrieval_utility,
    run_ablation,
)
from .mipsindex import build_index, search_topk
from .reader import init_reader_params
from .retriever import embed_doc, embed_input, init_retriever_params, relevance, retrieval_distribution
from .synth import QA_ANSWER_SEP
from .textcorpus import (
    MASK,
    MaskedExample,
    SalientSpanRules,
    Vocab,
    corpus_from_records,
    read_corpus_records,
    split_sentences,
)
from .trainer import (
    ParamStore,
    finetune_run,
    ict_warmstart,
    load_checkpoint,
    pretrain_run,
    reader_mlm_warmstart,
    restore_manager,
    save_checkpoint,
)

_WARMSTART_CKPT = "warmstart.ckpt"
_PRETRAIN_CKPT = "pretrain.ckpt"
_FINETUNE_CKPT = "finetune.ckpt"


def _now() -> str:
    return datetime.datetime.now().isoformat(timespec="seconds")


def _header(command: str, run: RunConfig) -> str:
    # the one line allowed to differ between reruns
    return f"# {command} started {_now()} config_digest {run.digest()}"


# ---------------------------------------------------------------------
# input loading
# ---------------------------------------------------------------------


def read_qa_file(path) -> list[tuple[str, tuple[str, ...]]]:
    """question<TAB>answers, answers delimited by the unit separator."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise DataError(f"cannot read QA file {path}: {err}") from err
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(
                f"{path}: line {lineno}: expected question<TAB>answers, "
                f"got {len(parts)} field(s)"
            )
        question, raw_answers = parts
        answers = tuple(a for a in raw_answers.split(QA_ANSWER_SEP) if a.strip())
        if not question.strip() or not answers:
            raise ParseError(f"{path}: line {lineno}: empty question or answer list")
        pairs.append((question, answers))
    if not pairs:
        raise DataError(f"{path}: no QA examples")
    return pairs


def _require(run: RunConfig, field: str) -> str:
    value = getattr(run, field)
    if not value:
        raise ConfigError(f"config field {field} is not set")
    return value


class Inputs:
    """All configured input files under one shared vocabulary.

    The vocabulary is built from every path the config names, not only the
    files the current command needs, so token ids (and embedding shapes)
    agree between a checkpoint and every later command that loads it."""

    def __init__(self, run: RunConfig, need_pretrain: bool, need_qa: bool):
        if need_pretrain:
            _require(run, "pretrain_corpus")
        if need_qa:
            _require(run, "qa_train")
            _require(run, "qa_eval")
        z_records, z_digest = read_corpus_records(_require(run, "knowledge_corpus"))
        texts = [t + " " + b for _, t, b in z_records]
        x_records, x_digest = [], ""
        if run.pretrain_corpus:
            x_records, x_digest = read_corpus_records(run.pretrain_corpus)
            texts += [t + " " + b for _, t, b in x_records]
        self.qa_train = read_qa_file(run.qa_train) if run.qa_train else []
        self.qa_eval = read_qa_file(run.qa_eval) if run.qa_eval else []
        for q, answers in self.qa_train + self.qa_eval:
            texts.append(q + " " + " ".join(answers))
        vocab = Vocab.build(texts)
        self.knowledge = corpus_from_records(z_records, z_digest, vocab)
        self.pretrain = (
            corpus_from_records(x_records, x_digest, vocab) if x_records else None
        )
        self.rules = _load_rules(run)

    @property
    def vocab(self) -> Vocab:
        return self.knowledge.vocab


def _load_rules(run: RunConfig) -> SalientSpanRules:
    if not run.gazetteer:
        return SalientSpanRules()
    try:
        with open(run.gazetteer, "r", encoding="utf-8") as fh:
            entries = [tuple(line.split()) for line in fh.read().splitlines() if line.strip()]
    except OSError as err:
        raise DataError(f"cannot read gazetteer {run.gazetteer}: {err}") from err
    return SalientSpanRules(gazetteer=frozenset(entries))


def _fresh_store(run: RunConfig, vocab_size: int) -> ParamStore:
    theta = init_retriever_params(
        vocab_size, hidden=run.retriever_hidden, dim=run.retriever_dim, seed=run.seed
    )
    phi = init_reader_params(
        vocab_size,
        hidden=run.reader_hidden,
        heads=run.reader_heads,
        layers=run.reader_layers,
        max_len=run.reader_max_len,
        span_hidden=run.reader_span_hidden,
        seed=run.seed,
    )
    return ParamStore(theta=theta, phi=phi)


def _load_store(path, what: str) -> tuple[ParamStore, dict]:
    if not os.path.exists(path):
        raise ConfigError(f"no {what} checkpoint at {path}")
    return load_checkpoint(path)


def _reset_phase(store: ParamStore) -> None:
    # a new training phase starts its own step/version clock
    store.step = 0
    store.theta.version = 0
    store.phi.version = 0
    store.momentum = {}
    store.skipped = 0


def _sentence_probes(corpus, cap: int = 64) -> list[MaskedExample]:
    """First sentence of each document as a query whose oracle answer is the
    document itself; used for quick retrieval recall summaries."""
    probes = []
    for doc in list(corpus)[:cap]:
        sentences = split_sentences(doc.body, corpus.vocab)
        if not sentences:
            continue
        probes.append(
            MaskedExample(
                input_tokens=sentences[0],
                masked_positions=(),
                targets=(),
                source_doc_id=doc.doc_id,
            )
        )
    if not probes:
        raise DataError(f"corpus {corpus.version} has no usable sentences")
    return probes


class MetricsFile:
    """Line-delimited records below a single timestamped header line."""

    def __init__(self, path, command: str, run: RunConfig):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(_header(command, run) + "\n")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------


def cmd_warmstart(run: RunConfig, out: str, args) -> int:
    inputs = Inputs(run, need_pretrain=True, need_qa=False)
    cfg = run.train_config()
    store = _fresh_store(run, len(inputs.vocab))
    print(_header("warmstart", run))
    ict_records = ict_warmstart(store, inputs.knowledge, cfg, steps=run.ict_steps)
    reader_records = reader_mlm_warmstart(
        store, inputs.pretrain, cfg, run.reader_steps, inputs.rules
    )
    path = os.path.join(out, _WARMSTART_CKPT)
    save_checkpoint(path, store, cfg)
    index = build_index(inputs.knowledge, store.theta, run.structure(), seed=run.seed)
    recall = recall_at_k(_sentence_probes(inputs.knowledge), store.theta, index, 1)
    if ict_records:
        print(f"ict loss {ict_records[0]['loss']:.4f} -> {ict_records[-1]['loss']:.4f}")
    if reader_records:
        print(f"reader loss {reader_records[0]['loss']:.4f} -> {reader_records[-1]['loss']:.4f}")
    print(f"recall@1 {recall:.4f}")
    print(f"checkpoint {path}")
    return 0


def cmd_pretrain(run: RunConfig, out: str, args) -> int:
    inputs = Inputs(run, need_pretrain=True, need_qa=False)
    cfg = run.train_config()
    manager = None
    start_step = 0
    if args.resume:
        store, extras = _load_store(args.resume, "resume")
        if extras["manifest"]["config_digest"] != cfg.digest():
            # legitimate when extending a finished run; the caller owns
            # compatibility of anything beyond the step budget
            print(
                f"warning: {args.resume} was written under a different config",
                file=sys.stderr,
            )
        manager = restore_manager(
            inputs.knowledge, store, cfg, extras, run.mode, run.structure()
        )
        start_step = store.step
    else:
        warm_path = os.path.join(out, _WARMSTART_CKPT)
        if os.path.exists(warm_path):
            store, _ = load_checkpoint(warm_path)
            _reset_phase(store)
        elif args.allow_cold:
            store = _fresh_store(run, len(inputs.vocab))
        else:
            raise ConfigError(
                f"no warm-start checkpoint at {warm_path}; "
                "run warmstart first or pass --allow-cold"
            )
    print(_header("pretrain", run))
    ckpt_path = os.path.join(out, _PRETRAIN_CKPT)
    metrics = MetricsFile(
        run.metrics_path or os.path.join(out, "pretrain_metrics.jsonl"), "pretrain", run
    )
    interrupted = {"flag": False}

    def on_sigint(signum, frame):
        interrupted["flag"] = True

    previous = signal.signal(signal.SIGINT, on_sigint)
    try:
        manager, records = pretrain_run(
            store,
            inputs.pretrain,
            inputs.knowledge,
            cfg,
            inputs.rules,
            mode=run.mode,
            structure=run.structure(),
            manager=manager,
            start_step=start_step,
            metrics_sink=metrics.write,
            checkpoint_every=run.checkpoint_every,
            checkpoint_path=ckpt_path,
            stop_flag=lambda: interrupted["flag"],
        )
    finally:
        signal.signal(signal.SIGINT, previous)
        metrics.close()
    save_checkpoint(ckpt_path, store, cfg, manager)
    if interrupted["flag"]:
        print(f"interrupted at step {store.step}; checkpoint written")
    if records:
        print(f"steps {len(records)} final_loss {records[-1]['loss']:.6f}")
    print(f"checkpoint {ckpt_path}")
    print(f"metrics {metrics.path}")
    return 0


def _check_disjoint(train_pairs, eval_pairs) -> None:
    overlap = {q for q, _ in train_pairs} & {q for q, _ in eval_pairs}
    if overlap:
        sample = sorted(overlap)[0]
        raise DataError(
            f"train and eval QA splits share {len(overlap)} question(s), "
            f"e.g. {sample!r}"
        )


def cmd_finetune(run: RunConfig, out: str, args) -> int:
    inputs = Inputs(run, need_pretrain=False, need_qa=True)
    _check_disjoint(inputs.qa_train, inputs.qa_eval)
    cfg = run.train_config()
    store, _ = _load_store(
        args.checkpoint or os.path.join(out, _PRETRAIN_CKPT), "pre-trained"
    )
    _reset_phase(store)
    print(_header("finetune", run))
    index = build_index(inputs.knowledge, store.theta, run.structure(), seed=run.seed)
    metrics = MetricsFile(
        run.metrics_path or os.path.join(out, "finetune_metrics.jsonl"), "finetune", run
    )
    try:
        records = finetune_run(
            store,
            qa_token_examples(inputs.qa_train, inputs.vocab),
            index,
            cfg,
            inputs.knowledge,
            steps=run.finetune_steps,
            metrics_sink=metrics.write,
        )
    finally:
        metrics.close()
    path = os.path.join(out, _FINETUNE_CKPT)
    save_checkpoint(path, store, cfg)
    report = evaluate_qa(inputs.qa_eval, store, index, cfg, inputs.knowledge)
    if records:
        print(f"updates {len(records)} final_loss {records[-1]['loss']:.6f}")
    print(f"skipped_unanswerable_updates {store.skipped}")
    _print_qa_report(report)
    print(f"checkpoint {path}")
    return 0


def cmd_eval(run: RunConfig, out: str, args) -> int:
    inputs = Inputs(run, need_pretrain=False, need_qa=True)
    _check_disjoint(inputs.qa_train, inputs.qa_eval)
    cfg = run.train_config()
    store, _ = _load_store(
        args.checkpoint or os.path.join(out, _FINETUNE_CKPT), "fine-tuned"
    )
    print(_header("eval", run))
    index = build_index(inputs.knowledge, store.theta, run.structure(), seed=run.seed)
    _print_qa_report(evaluate_qa(inputs.qa_eval, store, index, cfg, inputs.knowledge))
    return 0


def _print_qa_report(report: dict) -> None:
    print(
        f"exact_match {report['exact_match']:.4f} "
        f"n {report['n']} unanswerable {report['unanswerable']}"
    )


def cmd_inspect(run: RunConfig, out: str, args) -> int:
    inputs = Inputs(run, need_pretrain=False, need_qa=False)
    store, _ = _load_store(
        args.checkpoint or os.path.join(out, _PRETRAIN_CKPT), "inspect"
    )
    tokens = inputs.vocab.encode(args.query)
    if not tokens:
        raise ConfigError("query is empty")
    n_masks = tokens.count(MASK)
    if n_masks > 1:
        raise ConfigError("query may contain at most one [MASK]")
    print(_header("inspect", run))
    index = build_index(inputs.knowledge, store.theta, run.structure(), seed=run.seed)
    k = min(args.k, len(index))
    if n_masks == 1:
        cfg = dataclasses.replace(run.train_config(), k=k + 1, include_null=True)
        ex = MaskedExample(
            input_tokens=tokens,
            masked_positions=(tokens.index(MASK),),
            targets=(0,),
            source_doc_id="",
        )
        mix, cand = marginal_token_distribution(ex, store, index, cfg, inputs.knowledge)
        predicted = int(np.argmax(mix))
        ex = dataclasses.replace(ex, targets=(predicted,))
        print(
            f"predicted [MASK] = {inputs.vocab.to_text([predicted])} "
            f"p(y|x) {mix[predicted]:.6f}"
        )
        q = embed_input(ex.input_tokens, store.theta)
        scores = [relevance(q, embed_doc(z, store.theta)) for z in cand]
        p_z = retrieval_distribution(scores)
        rows = []
        for z, f_score, weight in zip(cand, scores, p_z):
            dist = masked_token_distribution(ex, z, store.phi)
            rows.append(
                {
                    "doc_id": z.doc_id,
                    "title": inputs.vocab.to_text(z.title) or "(null)",
                    "f": f_score,
                    "p(z|x)": float(weight),
                    "p(y|z,x)": float(dist[predicted]),
                    "RU": retrieval_utility(ex, z, store.phi),
                }
            )
        print(format_table(rows))
    else:
        q = embed_input(tokens, store.theta)
        res = search_topk(index, q, k)
        docs = [inputs.knowledge.get(i) for i in res.doc_ids]
        scores = [relevance(q, embed_doc(z, store.theta)) for z in docs]
        p_z = retrieval_distribution(scores)
        rows = [
            {
                "doc_id": z.doc_id,
                "title": inputs.vocab.to_text(z.title),
                "f": f_score,
                "p(z|x)": float(weight),
            }
            for z, f_score, weight in zip(docs, scores, p_z)
        ]
        print(format_table(rows))
    return 0


_LEVEL_PARSERS = {
    "masking_scheme": str,
    "staleness": float,
    "reset_retriever": lambda s: {"true": True, "false": False}[s],
    "reset_encoder": lambda s: {"true": True, "false": False}[s],
}


def _parse_levels(axis: str, raw: str) -> tuple:
    if axis not in _LEVEL_PARSERS:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    parse = _LEVEL_PARSERS[axis]
    try:
        return tuple(parse(part.strip()) for part in raw.split(","))
    except (ValueError, KeyError) as err:
        raise ConfigError(f"bad level list {raw!r} for axis {axis}: {err}") from err


def cmd_ablate(run: RunConfig, out: str, args) -> int:
    needs_qa = args.axis in ("reset_retriever", "reset_encoder")
    inputs = Inputs(run, need_pretrain=True, need_qa=needs_qa)
    if needs_qa:
        _check_disjoint(inputs.qa_train, inputs.qa_eval)
    cfg = run.train_config()
    warm, _ = _load_store(
        args.warm or os.path.join(out, _WARMSTART_CKPT), "warm-start"
    )
    _reset_phase(warm)
    spec = AblationSpec(
        axis=args.axis, levels=_parse_levels(args.axis, args.levels),
        base=cfg, seed=run.seed,
    )
    print(_header("ablate", run))
    rows = run_ablation(
        spec,
        inputs.pretrain,
        inputs.knowledge,
        inputs.rules,
        warm,
        probes=_sentence_probes(inputs.knowledge),
        qa_train=inputs.qa_train or None,
        qa_eval=inputs.qa_eval or None,
        finetune_steps=run.finetune_steps,
        structure=run.structure(),
    )
    metrics = MetricsFile(
        run.metrics_path or os.path.join(out, "ablation.jsonl"), "ablate", run
    )
    try:
        for row in rows:
            metrics.write(row)
    finally:
        metrics.close()
    print(format_table(rows))
    print(f"metrics {metrics.path}")
    return 0


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration file")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", default=None, help="override checkpoint directory")
    common.add_argument(
        "--mode", choices=("simulated", "threaded"), default=None,
        help="override refresh mode",
    )
    parser = argparse.ArgumentParser(
        prog="fetchlm",
        description="retrieve-then-predict language model laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("warmstart", parents=[common])

    p = sub.add_parser("pretrain", parents=[common])
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument(
        "--allow-cold", action="store_true",
        help="start from random parameters when no warm-start checkpoint exists",
    )

    p = sub.add_parser("finetune", parents=[common])
    p.add_argument("--checkpoint", default=None, help="pre-trained checkpoint")

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--checkpoint", default=None, help="fine-tuned checkpoint")

    p = sub.add_parser("inspect", parents=[common])
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--query", required=True, help="plain or single-[MASK] sentence")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("--axis", required=True)
    p.add_argument("--levels", required=True, help="comma-separated level list")
    p.add_argument("--warm", default=None, help="warm-start checkpoint")
    return parser


_COMMANDS = {
    "warmstart": cmd_warmstart,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = RunConfig.from_file(args.config)
        if args.seed is not None:
            run = dataclasses.replace(run, seed=args.seed)
        if args.mode is not None:
            run = dataclasses.replace(run, mode=args.mode)
        out = args.out or run.checkpoint_dir
        os.makedirs(out, exist_ok=True)
        return _COMMANDS[args.command](run, out, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
