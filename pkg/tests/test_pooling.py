import math

import numpy as np
import pytest

from constbert import pooling, synth
from constbert.pooling import (
    PoolingError,
    ProjectionWeights,
    TrainConfig,
    TrainingDiverged,
    grad_score_wrt_w,
    init_weights,
    load_weights,
    pad_or_truncate,
    pool,
    save_weights,
    score_pooled,
    train_pool,
)
from constbert.scoring import ShapeError, maxsim


def flat_pool(doc, W, c):
    """Entry-by-entry W^T x in float64."""
    x = np.asarray(doc, np.float64).reshape(-1)
    W = np.asarray(W, np.float64)
    return np.array([sum(x[r] * W[r, col] for r in range(W.shape[0])) for col in range(W.shape[1])]).reshape(c, -1)


def fd_grad(q, doc, W, c, h=1e-3, normalize=False):
    q = np.asarray(q, np.float64)
    x = np.asarray(doc, np.float64).reshape(-1)
    W = np.asarray(W, np.float64)

    def s(Wp):
        P = (x @ Wp).reshape(c, -1)
        if normalize:
            P = P / np.linalg.norm(P, axis=1, keepdims=True)
        return (q @ P.T).max(axis=1).sum()

    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        up, dn = W.copy(), W.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (s(up) - s(dn)) / (2 * h)
    return g


def min_margin(q, P):
    sims = np.sort(np.asarray(q, np.float64) @ np.asarray(P, np.float64).T, axis=1)
    return np.inf if sims.shape[1] < 2 else float((sims[:, -1] - sims[:, -2]).min())


# ---------------------------------------------------------------- pad/truncate


def test_pad_or_truncate_identity():
    d = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(pad_or_truncate(d, 3), d)


def test_pad_adds_zero_rows():
    d = np.ones((2, 4), np.float32)
    out = pad_or_truncate(d, 4)
    assert out.shape == (4, 4)
    np.testing.assert_array_equal(out[2:], 0)
    np.testing.assert_array_equal(out[:2], d)


def test_truncate_keeps_head():
    d = np.arange(24, dtype=np.float32).reshape(6, 4)
    np.testing.assert_array_equal(pad_or_truncate(d, 4), d[:4])


# ---------------------------------------------------------------- pool


def test_identity_pool_is_exact(rng):
    d = rng.normal(size=(5, 3)).astype(np.float32)
    np.testing.assert_array_equal(pool(d, ProjectionWeights.identity(5, 3)), d)


def test_zero_weights_pool_to_zero(rng):
    w = ProjectionWeights(4, 2, 3, np.zeros((12, 6)))
    np.testing.assert_array_equal(pool(rng.normal(size=(4, 3)), w), 0)


def test_selection_matrix():
    wt = np.array([[1, 0, 0, 0], [0, 0, 0, 1]], np.float32)
    w = ProjectionWeights(2, 1, 2, wt.T)
    np.testing.assert_array_equal(pool([[1, 2], [3, 4]], w), [[1, 4]])


def test_pool_matches_entrywise_oracle(rng):
    w = init_weights(6, 2, 4, seed=42)
    d = rng.normal(size=(6, 4)).astype(np.float32)
    np.testing.assert_allclose(pool(d, w), flat_pool(d, w.data, 2), atol=1e-6)


def test_pool_many_matches_pool(rng):
    w = init_weights(5, 2, 3, seed=1)
    docs = rng.normal(size=(9, 5, 3)).astype(np.float32)
    many = pooling.pool_many(docs, w, chunk=4)
    for i in range(9):
        np.testing.assert_allclose(many[i], pool(docs[i], w), atol=1e-6)


def test_pool_linearity(rng):
    w = init_weights(4, 2, 3, seed=9)
    d1, d2 = rng.normal(size=(2, 4, 3))
    a, b = 0.7, -1.3
    lhs = pool(a * d1 + b * d2, w)
    rhs = a * pool(d1, w) + b * pool(d2, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_normalized_pool_rows(rng):
    w = init_weights(6, 3, 4, seed=2)
    out = pool(rng.normal(size=(6, 4)), w, normalize=True)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)
    zero = pool(np.zeros((6, 4)), w, normalize=True)
    np.testing.assert_array_equal(zero, 0)


def test_pool_fixed_cardinality(rng):
    w = init_weights(8, 3, 4, seed=0)
    for n in (1, 5, 8, 20):
        assert pool(pad_or_truncate(rng.normal(size=(n, 4)), 8), w).shape == (3, 4)


def test_pool_rejects_shape_mismatch():
    w = init_weights(4, 2, 3, seed=0)
    with pytest.raises(ShapeError):
        pool(np.ones((5, 3)), w)
    with pytest.raises(ShapeError):
        pool(np.ones((4, 2)), w)


def test_pool_rejects_overflow():
    w = ProjectionWeights(2, 1, 1, np.full((2, 1), 3e38))
    with pytest.raises(PoolingError, match="non-finite"):
        pool([[3e38], [3e38]], w)


def test_weights_invariants():
    with pytest.raises(ShapeError):
        ProjectionWeights(2, 3, 1, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        ProjectionWeights(2, 1, 1, np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        ProjectionWeights(2, 1, 1, np.array([[np.nan], [0]]))


# ---------------------------------------------------------------- init


def test_init_deterministic():
    a = init_weights(4, 2, 2, seed=1)
    b = init_weights(4, 2, 2, seed=1)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, init_weights(4, 2, 2, seed=2).data)


def test_init_distribution():
    m, c, k = 4, 2, 2
    w = init_weights(m, c, k, seed=7)
    bound = math.sqrt(6 / (m * k + c * k))
    sigma = bound / math.sqrt(3)
    n = m * k * c * k
    assert abs(float(w.data.mean())) < 3 * sigma / math.sqrt(n)
    assert np.all(np.abs(w.data) <= bound)


def test_init_rejects_zero_dims():
    with pytest.raises(ValueError):
        init_weights(0, 1, 1, seed=0)


# ---------------------------------------------------------------- score_pooled


def test_score_pooled_identity_equals_maxsim(rng):
    q = rng.normal(size=(3, 4)).astype(np.float32)
    d = rng.normal(size=(5, 4)).astype(np.float32)
    assert score_pooled(q, d, ProjectionWeights.identity(5, 4)) == pytest.approx(maxsim(q, d), abs=1e-6)


def test_score_pooled_zero_weights():
    w = ProjectionWeights(3, 1, 2, np.zeros((6, 2)))
    assert score_pooled(np.ones((2, 2)), np.ones((3, 2)), w) == 0.0


def test_score_pooled_composes_oracles():
    rng = np.random.default_rng(42)
    n, m, c, k = 3, 6, 2, 4
    q = rng.uniform(-1, 1, size=(n, k)).astype(np.float32)
    d = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
    w = init_weights(m, c, k, seed=42)
    P = flat_pool(d, w.data, c).astype(np.float32)
    expected = sum(max(float(np.dot(qi.astype(np.float64), p.astype(np.float64))) for p in P) for qi in q)
    assert score_pooled(q, d, w) == pytest.approx(expected, abs=1e-6)


# ---------------------------------------------------------------- gradient


def test_grad_scalar_chain_rule():
    w = ProjectionWeights(1, 1, 1, [[0.5]])
    np.testing.assert_allclose(grad_score_wrt_w([[2.0]], [[3.0]], w), [[6.0]])


def test_grad_unassigned_vectors_get_zero():
    # identity pooling; doc rows orthogonal to the single query row
    k = 3
    w = ProjectionWeights.identity(2, k)
    q = np.array([[1.0, 0, 0]])
    d = np.array([[0, 1.0, 0], [0, 0, 1.0]])
    g = grad_score_wrt_w(q, d, w)
    # argmax ties at 0 -> vector 0 is assigned, vector 1 is not
    np.testing.assert_array_equal(g[:, k:], 0)
    assert np.any(g[:, :k] != 0)


def test_grad_closed_form(rng):
    m, c, k = 4, 2, 3
    w = init_weights(m, c, k, seed=5)
    q = rng.normal(size=(5, k))
    d = rng.normal(size=(m, k))
    P = flat_pool(d, w.data, c)
    assign = (q @ P.T).argmax(axis=1)
    x = d.reshape(-1)
    expected = np.zeros_like(w.data, dtype=np.float64)
    for r in range(m * k):
        for j in range(c):
            for cc in range(k):
                expected[r, j * k + cc] = x[r] * sum(q[i, cc] for i in range(len(q)) if assign[i] == j)
    np.testing.assert_allclose(grad_score_wrt_w(q, d, w), expected, atol=1e-5)


def _tie_free(seed, normalize=False):
    attempt = 0
    while True:
        r = np.random.default_rng([seed, attempt])
        attempt += 1
        m, c, k, n = int(r.integers(2, 7)), int(r.integers(1, 4)), int(r.integers(1, 5)), int(r.integers(1, 5))
        c = min(c, m)
        q = r.uniform(-1, 1, size=(n, k))
        d = r.uniform(-1, 1, size=(m, k))
        w = init_weights(m, c, k, seed=int(r.integers(2**31)))
        P = flat_pool(d, w.data, c)
        if normalize:
            P = P / np.linalg.norm(P, axis=1, keepdims=True)
        if min_margin(q, P) >= 1e-3:
            return q, d, w


@pytest.mark.parametrize("seed", [11, 12, 13, 14, 15])
def test_grad_matches_finite_differences(seed):
    q, d, w = _tie_free(seed)
    a = grad_score_wrt_w(q, d, w)
    f = fd_grad(q, d, w.data, w.c_vectors)
    assert np.max(np.abs(a - f)) / np.max(np.abs(f)) < 1e-4


@pytest.mark.parametrize("seed", [21, 22, 23])
def test_normalized_grad_matches_finite_differences(seed):
    q, d, w = _tie_free(seed, normalize=True)
    a = grad_score_wrt_w(q, d, w, normalize=True)
    f = fd_grad(q, d, w.data, w.c_vectors, h=1e-5, normalize=True)
    assert np.max(np.abs(a - f)) / np.max(np.abs(f)) < 1e-4


# ---------------------------------------------------------------- training


def toy_triplets(rng, n=32, m=4, k=3):
    out = []
    for _ in range(n):
        q = rng.normal(size=(2, k)).astype(np.float32)
        pos = rng.normal(size=(m, k)).astype(np.float32)
        neg = rng.normal(size=(m, k)).astype(np.float32)
        out.append((q, pos, [neg]))
    return out


def test_zero_epochs_returns_init(rng):
    res = train_pool(toy_triplets(rng), TrainConfig(epochs=0, seed=4), m_tokens=4, c_vectors=2)
    assert res.weights.data.tobytes() == init_weights(4, 2, 3, seed=4).data.tobytes()
    assert res.loss_trace == []


def test_tiny_learning_rate_leaves_weights(rng):
    res = train_pool(toy_triplets(rng), TrainConfig(epochs=5, learning_rate=1e-30, seed=4), m_tokens=4, c_vectors=2)
    np.testing.assert_allclose(res.weights.data, res.initial.data, atol=1e-6)
    assert len(res.loss_trace) == 5


@pytest.mark.parametrize("loss", ["in_batch_softmax", "margin_triplet"])
def test_training_is_deterministic(rng, loss):
    trip = toy_triplets(rng)
    cfg = TrainConfig(epochs=3, seed=8, loss=loss, batch_size=8)
    a = train_pool(trip, cfg, m_tokens=4, c_vectors=2)
    b = train_pool(trip, cfg, m_tokens=4, c_vectors=2)
    assert a.weights.data.tobytes() == b.weights.data.tobytes()
    assert a.loss_trace == b.loss_trace


def test_margin_loss_decreases(rng):
    res = train_pool(toy_triplets(rng, n=64), TrainConfig(epochs=10, seed=1, loss="margin_triplet", batch_size=8,
                                                          learning_rate=0.01), m_tokens=4, c_vectors=2)
    assert res.loss_trace[-1] < res.loss_trace[0]


def test_synthetic_task_loss_decreases():
    cfg = synth.SynthConfig(seed=3)
    corpus = synth.gen_corpus(cfg)
    triplets = synth.training_triplets(corpus)
    assert len(triplets) == 2000
    res = train_pool(triplets, TrainConfig(epochs=10, seed=3), m_tokens=cfg.m_tokens, c_vectors=cfg.m_tokens // 2)
    assert len(res.loss_trace) == 10
    assert res.loss_trace[9] < res.loss_trace[0]


def test_divergence_reports_epoch(rng):
    with pytest.raises(TrainingDiverged) as err:
        train_pool(toy_triplets(rng), TrainConfig(epochs=5, learning_rate=1e300, seed=0), m_tokens=4, c_vectors=2)
    assert err.value.epoch >= 1


def test_empty_training_set():
    with pytest.raises(ValueError, match="empty"):
        train_pool([], TrainConfig(), m_tokens=4, c_vectors=2)


def test_unpadded_docs_rejected(rng):
    trip = [(np.ones((2, 3)), np.ones((3, 3)), [])]
    with pytest.raises(ShapeError, match="pad"):
        train_pool(trip, TrainConfig(epochs=1), m_tokens=4, c_vectors=2)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    TrainConfig(batch_size=1, loss="margin_triplet")


# ---------------------------------------------------------------- serialization


def test_weights_round_trip(tmp_path):
    w = init_weights(5, 3, 4, seed=3)
    save_weights(tmp_path / "w.cbpw", w)
    raw = (tmp_path / "w.cbpw").read_bytes()
    assert raw[:4] == b"CBPW"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert [int.from_bytes(raw[6 + 4 * i : 10 + 4 * i], "little") for i in range(3)] == [5, 3, 4]
    assert len(raw) == 18 + 4 * 5 * 4 * 3 * 4
    back = load_weights(tmp_path / "w.cbpw")
    assert back.data.tobytes() == w.data.tobytes()
    assert (back.m_tokens, back.c_vectors, back.dim) == (5, 3, 4)


def test_weights_bad_files(tmp_path):
    w = init_weights(2, 1, 2, seed=3)
    save_weights(tmp_path / "w.cbpw", w)
    raw = (tmp_path / "w.cbpw").read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-1])
    (tmp_path / "version").write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    for name, msg in (("magic", "magic"), ("short", "bytes"), ("version", "version")):
        with pytest.raises(ValueError, match=msg):
            load_weights(tmp_path / name)
