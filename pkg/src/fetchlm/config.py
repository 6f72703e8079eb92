"""Run configuration: a single key=value file shared by every command.

The canonical serialization is stable (declaration order, one key per line),
so a config can be digested and the digest compared across runs, and a parsed
file always re-serializes to the same bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

from .errors import ConfigError
from .mipsindex import EXHAUSTIVE, Exhaustive, Ivf
from .trainer import TrainConfig

_TRAIN_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))


@dataclass(frozen=True)
class RunConfig:
    # optimization (mirrors TrainConfig)
    k: int = 8
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
    # input files
    pretrain_corpus: str = ""
    knowledge_corpus: str = ""
    qa_train: str = ""
    qa_eval: str = ""
    gazetteer: str = ""
    # outputs
    checkpoint_dir: str = "runs"
    metrics_path: str = ""
    checkpoint_every: int = 0
    # encoder shapes
    retriever_hidden: int = 64
    retriever_dim: int = 16
    reader_hidden: int = 64
    reader_heads: int = 2
    reader_layers: int = 2
    reader_max_len: int = 64
    reader_span_hidden: int = 32
    # retrieval index
    index_structure: str = "exhaustive"
    ivf_centroids: int = 32
    ivf_nprobe: int = 8
    # protocol
    mode: str = "simulated"
    # stage budgets
    ict_steps: int = 200
    reader_steps: int = 200
    finetune_steps: int = 100

    def __post_init__(self):
        # pin declared numeric types so the canonical text is independent of
        # whether a float field was given an integer literal
        for f in dataclasses.fields(self):
            if f.type == "float":
                object.__setattr__(self, f.name, float(getattr(self, f.name)))
        if self.index_structure not in ("exhaustive", "ivf"):
            raise ConfigError(f"unknown index_structure {self.index_structure!r}")
        if self.mode not in ("simulated", "threaded"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        self.train_config()  # surface optimization-field errors at parse time

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f: getattr(self, f) for f in _TRAIN_FIELDS})

    def structure(self) -> Exhaustive | Ivf:
        if self.index_structure == "ivf":
            return Ivf(c=self.ivf_centroids, nprobe=self.ivf_nprobe)
        return EXHAUSTIVE

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, raw = stripped.partition("=")
            if not sep:
                raise ConfigError(f"{source}: line {lineno}: expected key = value")
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
            values[key] = _parse(fields[key].type, key, raw.strip(), source, lineno)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.from_text(text, source=str(path))

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def _parse(ftype: str, key: str, raw: str, source: str, lineno: int):
    try:
        if ftype == "bool":
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)  # accepts inf
        return raw
    except ValueError as err:
        raise ConfigError(
            f"{source}: line {lineno}: bad value for {key}: {err}"
        ) from err
