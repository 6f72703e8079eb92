"""Inner-product search over document embeddings plus the snapshot ->
rebuild -> swap refresh protocol that keeps search available while the
trainer keeps moving.

Two structures: exhaustive (exact, the oracle) and IVF over k-means cells
(approximate recall, exact scores). Two protocol modes: `simulated`, where
builder latency is counted in trainer steps and everything is deterministic,
and `threaded`, a real background builder used only for smoke testing.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DataError
from .retriever import QueryEmbedding, RetrieverParams, embed_corpus

_KMEANS_STREAM = 23
_MAGIC = b"MIPX"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Exhaustive:
    pass


@dataclass(frozen=True)
class Ivf:
    c: int
    nprobe: int


EXHAUSTIVE = Exhaustive()


@dataclass(frozen=True)
class IvfTables:
    centroids: np.ndarray  # (C, d)
    assignments: np.ndarray  # (N,) row -> centroid id
    lists: tuple[tuple[int, ...], ...]
    nprobe: int


@dataclass(frozen=True)
class IndexSnapshot:
    matrix: np.ndarray  # (N, d), frozen
    doc_ids: tuple[str, ...]
    theta_version: int
    ivf: IvfTables | None  # None = exhaustive

    def __post_init__(self):
        self.matrix.flags.writeable = False

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class RetrievalResult:
    doc_ids: tuple[str, ...]
    row_ids: tuple[int, ...]
    scores: tuple[float, ...]  # inner products against the snapshot rows
    theta_version: int


def _kmeans(rows: np.ndarray, c: int, seed: int, iters: int = 20):
    """Plain k-means with k-means++ seeding; empty cells keep their centroid."""
    n = rows.shape[0]
    rng = np.random.default_rng([seed, _KMEANS_STREAM])
    first = int(rng.integers(n))
    centroids = np.empty((c, rows.shape[1]))
    centroids[0] = rows[first]
    d2 = np.full(n, np.inf)
    for j in range(1, c):
        d2 = np.minimum(d2, ((rows - centroids[j - 1]) ** 2).sum(axis=1))
        total = d2.sum()
        if total > 0:
            pick = int(rng.choice(n, p=d2 / total))
        else:
            pick = int(rng.integers(n))
        centroids[j] = rows[pick]
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dists = ((rows[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)  # argmin ties -> lower centroid id
        for j in range(c):
            members = rows[assign == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
    return centroids, assign


def _lists_from_assignments(assign: np.ndarray, c: int):
    return tuple(tuple(np.flatnonzero(assign == j).tolist()) for j in range(c))


def snapshot_from_matrix(
    matrix: np.ndarray,
    doc_ids,
    theta_version: int,
    structure: Exhaustive | Ivf = EXHAUSTIVE,
    seed: int = 0,
) -> IndexSnapshot:
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ConfigError("index needs a non-empty 2-D embedding matrix")
    if matrix.shape[0] != len(doc_ids):
        raise ContractViolation(
            f"{matrix.shape[0]} rows vs {len(doc_ids)} doc ids"
        )
    if not isinstance(structure, (Exhaustive, Ivf)):
        raise ConfigError(f"unknown index structure {structure!r}")
    ivf = None
    if isinstance(structure, Ivf):
        if not 1 <= structure.c <= matrix.shape[0]:
            raise ConfigError(
                f"IVF needs 1 <= C <= {matrix.shape[0]}, got C={structure.c}"
            )
        if structure.nprobe < 1:
            raise ConfigError("nprobe must be >= 1")
        centroids, assign = _kmeans(matrix, structure.c, seed)
        centroids.flags.writeable = False
        assign.flags.writeable = False
        ivf = IvfTables(
            centroids=centroids,
            assignments=assign,
            lists=_lists_from_assignments(assign, structure.c),
            nprobe=structure.nprobe,
        )
    return IndexSnapshot(
        matrix=matrix,
        doc_ids=tuple(doc_ids),
        theta_version=theta_version,
        ivf=ivf,
    )


def build_index(
    corpus,
    theta: RetrieverParams,
    structure: Exhaustive | Ivf = EXHAUSTIVE,
    seed: int = 0,
) -> IndexSnapshot:
    """Embed every document with θ and freeze the result into a snapshot."""
    matrix, doc_ids = embed_corpus(corpus, theta)
    if matrix.shape[0] == 0:
        raise ConfigError("cannot index an empty corpus")
    return snapshot_from_matrix(matrix, doc_ids, theta.version, structure, seed)


def _topk_rows(scores: np.ndarray, row_ids: np.ndarray, k: int):
    # stable sort on -scores keeps ties in ascending row order
    order = np.argsort(-scores, kind="stable")[:k]
    return row_ids[order], scores[order]


def search_topk(index: IndexSnapshot, q: QueryEmbedding, k: int) -> RetrievalResult:
    """Top-k rows by inner product. Exhaustive is exact; IVF scans only the
    nprobe lists whose centroids score highest, so recall can drop but every
    returned score is the true snapshot inner product."""
    n = len(index)
    if not 1 <= k <= n:
        raise ContractViolation(f"k={k} outside [1, {n}]")
    if q.vector.shape != (index.matrix.shape[1],):
        raise ContractViolation(
            f"query dim {q.vector.shape} vs index dim ({index.matrix.shape[1]},)"
        )
    all_scores = index.matrix @ q.vector
    if index.ivf is None:
        rows = np.arange(n)
    else:
        cent_scores = index.ivf.centroids @ q.vector
        probe = np.argsort(-cent_scores, kind="stable")[: index.ivf.nprobe]
        scanned = [r for j in probe for r in index.ivf.lists[j]]
        rows = np.array(sorted(scanned), dtype=np.int64)
        if rows.size == 0:
            return RetrievalResult((), (), (), index.theta_version)
    top_rows, top_scores = _topk_rows(all_scores[rows], rows, k)
    return RetrievalResult(
        doc_ids=tuple(index.doc_ids[r] for r in top_rows),
        row_ids=tuple(int(r) for r in top_rows),
        scores=tuple(float(s) for s in top_scores),
        theta_version=index.theta_version,
    )


def staleness(index: IndexSnapshot, current_version: int, version_log) -> int:
    """Optimizer steps between the snapshot's parameters and the current ones."""
    log = list(version_log)
    try:
        then = log.index(index.theta_version)
        now = log.index(current_version)
    except ValueError as exc:
        raise ContractViolation(f"version not in log: {exc}") from None
    return now - then


# ---------------------------------------------------------------------
# refresh protocol
# ---------------------------------------------------------------------


@dataclass
class RefreshSchedule:
    refresh_interval: float  # R in trainer steps; may be math.inf
    mode: str = "simulated"
    staleness_multiplier: int = 1
    build_latency: int = 0  # simulated-mode build duration in steps

    def __post_init__(self):
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1")
        if self.mode not in ("simulated", "threaded"):
            raise ConfigError(f"unknown refresh mode {self.mode!r}")
        if self.staleness_multiplier < 1:
            raise ConfigError("staleness_multiplier must be a positive integer")
        if self.build_latency < 0:
            raise ConfigError("build_latency must be >= 0")

    @property
    def effective_interval(self) -> float:
        return self.refresh_interval * self.staleness_multiplier


class AsyncIndexManager:
    """Owns the active snapshot and drives the builder job.

    The trainer calls handle("trainer_step", θ) after every optimizer step
    and reads .active for search; it never waits on a build. A snapshot
    request arriving while a build runs is coalesced: the running build
    finishes, then a fresh build starts from the newest parameters.
    """

    def __init__(self, corpus, theta: RetrieverParams, schedule: RefreshSchedule,
                 structure: Exhaustive | Ivf = EXHAUSTIVE, seed: int = 0):
        self._build = lambda th: build_index(corpus, th, structure, seed)
        self.schedule = schedule
        self.active: IndexSnapshot = self._build(theta)
        self.phase = "idle"  # or "building"
        self.pending_request = False
        self.steps_since_snapshot = 0
        self.countdown = 0
        self._frozen_theta: RetrieverParams | None = None
        self.events: list[str] = []
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._thread_result: list[IndexSnapshot] = []

    # -- event entry point -------------------------------------------------

    def handle(self, event: str, theta: RetrieverParams | None = None) -> None:
        if event == "trainer_step":
            self._on_trainer_step(theta)
        elif event == "snapshot_request":
            self._request(theta)
        elif event == "build_complete":
            self._complete(theta)
        else:
            raise ConfigError(f"unknown protocol event {event!r}")

    def _on_trainer_step(self, theta: RetrieverParams) -> None:
        self.steps_since_snapshot += 1
        if self.phase == "building":
            if self.schedule.mode == "threaded":
                self._poll_thread(theta)
            else:
                self.countdown -= 1
                if self.countdown <= 0:
                    self._complete(theta)
        if self.steps_since_snapshot >= self.schedule.effective_interval:
            self._request(theta)

    def _request(self, theta: RetrieverParams) -> None:
        self.steps_since_snapshot = 0
        if self.phase == "building":
            self.pending_request = True
            self.events.append(f"coalesced@v{theta.version}")
            return
        self._start_build(theta)

    def _start_build(self, theta: RetrieverParams) -> None:
        self.phase = "building"
        self._frozen_theta = theta.copy()
        self.events.append(f"snapshot@v{theta.version}")
        if self.schedule.mode == "threaded":
            self._thread_result = []
            self._thread = threading.Thread(
                target=lambda: self._thread_result.append(
                    self._build(self._frozen_theta)
                ),
                daemon=True,
            )
            self._thread.start()
        else:
            self.countdown = self.schedule.build_latency
            if self.countdown == 0:
                self._complete(theta)

    def _complete(self, theta: RetrieverParams | None) -> None:
        snapshot = self._build(self._frozen_theta)
        with self._lock:
            self.active = snapshot
        self.events.append(f"swap@v{snapshot.theta_version}")
        self.phase = "idle"
        self._frozen_theta = None
        if self.pending_request and theta is not None:
            self.pending_request = False
            self._start_build(theta)  # latest parameters win

    def _poll_thread(self, theta: RetrieverParams) -> None:
        if self._thread is not None and not self._thread.is_alive():
            self._thread.join()
            with self._lock:
                self.active = self._thread_result[0]
            self.events.append(f"swap@v{self.active.theta_version}")
            self._thread = None
            self.phase = "idle"
            self._frozen_theta = None
            if self.pending_request:
                self.pending_request = False
                self._start_build(theta)

    def finish(self, theta: RetrieverParams | None = None) -> None:
        """Block until any in-flight threaded build lands (tests only)."""
        if self._thread is not None:
            self._thread.join()
            self._poll_thread(theta if theta is not None else self._frozen_theta)


def refresh_protocol_step(manager: AsyncIndexManager, event: str,
                          theta: RetrieverParams | None = None) -> AsyncIndexManager:
    manager.handle(event, theta)
    return manager


# ---------------------------------------------------------------------
# snapshot persistence
# ---------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQQqQI")  # magic, fmt, N, d, C (-1 = exhaustive), θ-version, nprobe


def save_snapshot(path, index: IndexSnapshot) -> None:
    n, d = index.matrix.shape
    c = -1 if index.ivf is None else index.ivf.centroids.shape[0]
    nprobe = 0 if index.ivf is None else index.ivf.nprobe
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _FORMAT_VERSION, n, d, c, index.theta_version, nprobe))
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f8").tobytes())
        if index.ivf is not None:
            fh.write(np.ascontiguousarray(index.ivf.centroids, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(index.ivf.assignments, dtype="<u8").tobytes())


def load_snapshot(path, corpus) -> IndexSnapshot:
    """Rebuild a snapshot from disk; doc ids come from the corpus, whose
    order must match the saved row order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a snapshot file")
    magic, fmt, n, d, c, version, nprobe = _HEADER.unpack_from(raw)
    if fmt != _FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {fmt}")
    doc_ids = tuple(doc.doc_id for doc in corpus)
    if len(doc_ids) != n:
        raise DataError(f"{path}: snapshot has {n} rows, corpus has {len(doc_ids)}")
    off = _HEADER.size
    matrix = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
    off += n * d * 8
    ivf = None
    if c >= 0:
        centroids = np.frombuffer(raw, dtype="<f8", count=c * d, offset=off).reshape(c, d).copy()
        off += c * d * 8
        assign = np.frombuffer(raw, dtype="<u8", count=n, offset=off).astype(np.int64)
        centroids.flags.writeable = False
        assign.flags.writeable = False
        ivf = IvfTables(
            centroids=centroids,
            assignments=assign,
            lists=_lists_from_assignments(assign, c),
            nprobe=nprobe,
        )
    return IndexSnapshot(matrix=matrix, doc_ids=doc_ids, theta_version=version, ivf=ivf)
