import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fetchlm.errors import ConfigError, ContractViolation, DataError
from fetchlm.mipsindex import (
    EXHAUSTIVE,
    AsyncIndexManager,
    IndexSnapshot,
    Ivf,
    RefreshSchedule,
    build_index,
    load_snapshot,
    refresh_protocol_step,
    save_snapshot,
    search_topk,
    snapshot_from_matrix,
    staleness,
)
from fetchlm.retriever import QueryEmbedding, init_retriever_params
from fetchlm.textcorpus import Document


def q(v):
    return QueryEmbedding(vector=np.asarray(v, dtype=float))


def raw_index(rows, structure=EXHAUSTIVE, seed=0, version=0):
    rows = np.asarray(rows, dtype=float)
    ids = [f"d{i}" for i in range(rows.shape[0])]
    return snapshot_from_matrix(rows, ids, version, structure, seed)


def tiny_corpus(n=3):
    return [
        Document(doc_id=f"d{i}", title=(5,), body=(5 + i % 3, 6, 7)) for i in range(n)
    ]


# ---------------------------------------------------------------- exhaustive


def test_exhaustive_spec_example():
    idx = raw_index([[1, 0], [0, 1], [-1, 0]])
    res = search_topk(idx, q([1, 0]), 1)
    assert res.row_ids == (0,)
    assert res.scores == (1.0,)
    assert res.doc_ids == ("d0",)


def test_k_equals_corpus_size_sorted_descending():
    rows = np.random.default_rng(0).normal(size=(7, 3))
    idx = raw_index(rows)
    res = search_topk(idx, q([1.0, -0.5, 2.0]), 7)
    assert len(res.row_ids) == 7
    assert list(res.scores) == sorted(res.scores, reverse=True)
    assert set(res.row_ids) == set(range(7))


def test_single_doc_corpus():
    idx = raw_index([[0.3, 0.4]])
    res = search_topk(idx, q([1, 1]), 1)
    assert res.doc_ids == ("d0",)
    assert res.scores == (pytest.approx(0.7),)


def test_tie_broken_by_lower_row_id():
    idx = raw_index([[1, 0], [1, 0], [0, 1]])
    res = search_topk(idx, q([1, 0]), 2)
    assert res.row_ids == (0, 1)


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_exhaustive_equals_brute_force(data):
    n = data.draw(st.integers(1, 12))
    d = data.draw(st.integers(1, 4))
    # quantized entries so score ties actually occur
    rows = data.draw(
        st.lists(
            st.lists(st.integers(-3, 3).map(float), min_size=d, max_size=d),
            min_size=n,
            max_size=n,
        )
    )
    qv = data.draw(st.lists(st.integers(-3, 3).map(float), min_size=d, max_size=d))
    k = data.draw(st.integers(1, n))
    idx = raw_index(rows)
    res = search_topk(idx, q(qv), k)
    scores = np.asarray(rows) @ np.asarray(qv)
    oracle = sorted(range(n), key=lambda r: (-scores[r], r))[:k]
    assert list(res.row_ids) == oracle
    assert list(res.scores) == [scores[r] for r in oracle]


def test_k_out_of_range():
    idx = raw_index([[1, 0], [0, 1]])
    for bad in (0, 3, -1):
        with pytest.raises(ContractViolation):
            search_topk(idx, q([1, 0]), bad)


def test_query_dim_mismatch():
    idx = raw_index([[1, 0]])
    with pytest.raises(ContractViolation):
        search_topk(idx, q([1, 0, 0]), 1)


def test_snapshot_matrix_immutable():
    idx = raw_index([[1.0, 2.0]])
    with pytest.raises(ValueError):
        idx.matrix[0, 0] = 9.0


# ---------------------------------------------------------------- IVF


def test_ivf_degenerate_partition_equals_exhaustive():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(6, 3))
    ex = raw_index(rows)
    ivf = raw_index(rows, Ivf(c=6, nprobe=6))
    assert all(len(lst) == 1 for lst in ivf.ivf.lists)
    for _ in range(10):
        qe = q(rng.normal(size=3))
        a, b = search_topk(ex, qe, 4), search_topk(ivf, qe, 4)
        assert a.row_ids == b.row_ids
        assert a.scores == b.scores


def test_ivf_rebuild_bit_identical():
    corpus = tiny_corpus(5)
    theta = init_retriever_params(12, hidden=8, dim=4, seed=0)
    a = build_index(corpus, theta, Ivf(c=2, nprobe=1), seed=7)
    b = build_index(corpus, theta, Ivf(c=2, nprobe=1), seed=7)
    assert a.matrix.tobytes() == b.matrix.tobytes()
    assert a.ivf.centroids.tobytes() == b.ivf.centroids.tobytes()
    assert a.ivf.lists == b.ivf.lists
    assert a.doc_ids == b.doc_ids


def test_ivf_scores_exact_and_subset():
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(50, 4))
    idx = raw_index(rows, Ivf(c=8, nprobe=2))
    ex = raw_index(rows)
    for _ in range(20):
        qv = rng.normal(size=4)
        res = search_topk(idx, q(qv), 10)
        assert len(res.row_ids) <= 10
        full = search_topk(ex, q(qv), 50)
        exact = dict(zip(full.row_ids, full.scores))
        for r, s in zip(res.row_ids, res.scores):
            assert 0 <= r < 50
            assert s == exact[r]  # scores never approximated


def test_ivf_every_row_in_exactly_one_list():
    rows = np.random.default_rng(3).normal(size=(30, 4))
    idx = raw_index(rows, Ivf(c=5, nprobe=1))
    all_rows = [r for lst in idx.ivf.lists for r in lst]
    assert sorted(all_rows) == list(range(30))


def test_ivf_recall_small_scale():
    # same configuration as the full-size fidelity check, smaller corpus
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(1000, 8))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    ivf = raw_index(rows, Ivf(c=32, nprobe=8))
    ex = raw_index(rows)
    hits = 0
    for _ in range(200):
        qe = q(rng.normal(size=8))
        truth = set(search_topk(ex, qe, 10).row_ids)
        hits += len(truth & set(search_topk(ivf, qe, 10).row_ids))
    assert hits / 2000 >= 0.95


def test_ivf_c_too_large():
    with pytest.raises(ConfigError):
        raw_index(np.eye(3), Ivf(c=4, nprobe=1))


def test_empty_matrix_rejected():
    with pytest.raises(ConfigError):
        snapshot_from_matrix(np.zeros((0, 4)), [], 0)


# ---------------------------------------------------------------- staleness


def test_staleness_examples():
    idx = raw_index([[1.0]], version=100)
    log = list(range(200))
    assert staleness(idx, 100, log) == 0
    assert staleness(idx, 130, log) == 30
    with pytest.raises(ContractViolation):
        staleness(idx, 999, log)
    with pytest.raises(ContractViolation):
        staleness(raw_index([[1.0]], version=555), 100, log)


# ---------------------------------------------------------------- protocol


def make_manager(schedule, n_docs=2):
    corpus = tiny_corpus(n_docs)
    theta = init_retriever_params(12, hidden=4, dim=2, seed=0)
    return AsyncIndexManager(corpus, theta, schedule), theta


def test_protocol_r1_latency0_zero_staleness():
    mgr, theta = make_manager(RefreshSchedule(refresh_interval=1))
    assert mgr.active.theta_version == 0
    for step in range(1, 6):
        theta.version = step
        theta.tok_emb[0, 0] += 0.5  # parameters actually move
        mgr.handle("trainer_step", theta)
        assert mgr.active.theta_version == step


def test_protocol_never_refresh():
    mgr, theta = make_manager(RefreshSchedule(refresh_interval=math.inf))
    for step in range(1, 40):
        theta.version = step
        mgr.handle("trainer_step", theta)
    assert mgr.active.theta_version == 0


def test_protocol_r5_latency3_spec_trace():
    sched = RefreshSchedule(refresh_interval=5, build_latency=3)
    mgr, theta = make_manager(sched)
    versions = {}
    for step in range(1, 12):
        theta.version = step
        mgr.handle("trainer_step", theta)
        versions[step] = mgr.active.theta_version
    assert versions[5] == 0  # snapshot taken, build still running
    assert versions[7] == 0
    assert versions[8] == 5  # build of θ@5 lands after 3 steps
    assert versions[9] == 5  # the stated example
    assert versions[10] == 5


def test_protocol_coalesces_requests():
    sched = RefreshSchedule(refresh_interval=2, build_latency=5)
    mgr, theta = make_manager(sched)
    for step in range(1, 8):
        theta.version = step
        mgr.handle("trainer_step", theta)
    coalesced = [e for e in mgr.events if e.startswith("coalesced")]
    assert len(coalesced) == 2  # boundaries at steps 4 and 6 fell inside the build
    assert mgr.active.theta_version == 2
    assert mgr.phase == "building"  # follow-up build from the newest θ
    snapshots = [e for e in mgr.events if e.startswith("snapshot")]
    assert snapshots == ["snapshot@v2", "snapshot@v7"]


def test_protocol_staleness_multiplier():
    sched = RefreshSchedule(refresh_interval=2, staleness_multiplier=3)
    mgr, theta = make_manager(sched)
    for step in range(1, 13):
        theta.version = step
        mgr.handle("trainer_step", theta)
    swaps = [e for e in mgr.events if e.startswith("swap")]
    assert swaps == ["swap@v6", "swap@v12"]  # effective interval 6


def test_protocol_liveness():
    sched = RefreshSchedule(refresh_interval=3, build_latency=2)
    mgr, theta = make_manager(sched)
    seen = [0]
    for step in range(1, 120):
        theta.version = step
        mgr.handle("trainer_step", theta)
        if mgr.active.theta_version != seen[-1]:
            seen.append(mgr.active.theta_version)
    assert len(seen) > 15
    assert seen == sorted(seen)  # versions only advance


def test_protocol_functional_wrapper():
    mgr, theta = make_manager(RefreshSchedule(refresh_interval=1))
    theta.version = 1
    out = refresh_protocol_step(mgr, "trainer_step", theta)
    assert out is mgr and out.active.theta_version == 1
    with pytest.raises(ConfigError):
        refresh_protocol_step(mgr, "bogus_event", theta)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        RefreshSchedule(refresh_interval=0)
    with pytest.raises(ConfigError):
        RefreshSchedule(refresh_interval=1, mode="psychic")
    with pytest.raises(ConfigError):
        RefreshSchedule(refresh_interval=1, staleness_multiplier=0)


def test_threaded_smoke():
    sched = RefreshSchedule(refresh_interval=5, mode="threaded")
    mgr, theta = make_manager(sched)
    for step in range(1, 40):
        theta.version = step
        theta.tok_emb[0, 0] += 0.01
        mgr.handle("trainer_step", theta)
    mgr.finish(theta)
    assert mgr.active.theta_version > 0  # some refresh landed
    assert mgr.active.matrix.flags.writeable is False


# ---------------------------------------------------------------- persistence


def test_snapshot_round_trip_exhaustive(tmp_path):
    corpus = tiny_corpus(4)
    theta = init_retriever_params(12, hidden=8, dim=4, seed=1)
    theta.version = 42
    idx = build_index(corpus, theta)
    path = tmp_path / "snap.bin"
    save_snapshot(path, idx)
    back = load_snapshot(path, corpus)
    assert back.matrix.tobytes() == idx.matrix.tobytes()
    assert back.doc_ids == idx.doc_ids
    assert back.theta_version == 42
    assert back.ivf is None


def test_snapshot_round_trip_ivf(tmp_path):
    corpus = tiny_corpus(6)
    theta = init_retriever_params(12, hidden=8, dim=4, seed=1)
    idx = build_index(corpus, theta, Ivf(c=3, nprobe=2), seed=5)
    path = tmp_path / "snap.bin"
    save_snapshot(path, idx)
    back = load_snapshot(path, corpus)
    assert back.matrix.tobytes() == idx.matrix.tobytes()
    assert back.ivf.centroids.tobytes() == idx.ivf.centroids.tobytes()
    assert np.array_equal(back.ivf.assignments, idx.ivf.assignments)
    assert back.ivf.lists == idx.ivf.lists
    assert back.ivf.nprobe == 2
    rng = np.random.default_rng(0)
    qe = q(rng.normal(size=4))
    a, b = search_topk(idx, qe, 3), search_topk(back, qe, 3)
    assert a == b


def test_snapshot_bad_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a snapshot at all")
    with pytest.raises(DataError):
        load_snapshot(path, tiny_corpus(1))


def test_snapshot_corpus_mismatch(tmp_path):
    corpus = tiny_corpus(3)
    theta = init_retriever_params(12, hidden=8, dim=4, seed=1)
    path = tmp_path / "snap.bin"
    save_snapshot(path, build_index(corpus, theta))
    with pytest.raises(DataError):
        load_snapshot(path, tiny_corpus(5))
