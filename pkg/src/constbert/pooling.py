"""Learned pooling of M token embeddings into C document vectors.

A document's token matrix (M x k) is flattened row-major into ``x`` and
projected with a dense ``(M*k, C*k)`` matrix ``W``; ``W.T @ x`` reshaped to
``(C, k)`` gives the pooled vectors.  ``W`` is trained with plain mini-batch
SGD through the MaxSim scorer.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .scoring import ShapeError, as_embeddings, maxsim

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"CBPW"
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER = struct.Struct("<4sHIII")


class PoolingError(ValueError):
    """Non-finite or otherwise unusable pooling output."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class ProjectionWeights:
    m_tokens: int
    c_vectors: int
    dim: int
    data: np.ndarray  # (m_tokens*dim, c_vectors*dim) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        want = (self.m_tokens * self.dim, self.c_vectors * self.dim)
        if min(self.m_tokens, self.c_vectors, self.dim) < 1:
            raise ShapeError(f"weights dimensions must be >= 1, got M={self.m_tokens} C={self.c_vectors} k={self.dim}")
        if self.data.shape != want:
            raise ShapeError(f"weights data has shape {self.data.shape}, expected {want}")
        if self.c_vectors > self.m_tokens:
            raise ShapeError(f"C={self.c_vectors} must not exceed M={self.m_tokens}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("weights contain non-finite entries")

    @classmethod
    def identity(cls, m_tokens: int, dim: int) -> "ProjectionWeights":
        n = m_tokens * dim
        return cls(m_tokens, m_tokens, dim, np.eye(n, dtype=np.float32))

    def copy(self) -> "ProjectionWeights":
        return ProjectionWeights(self.m_tokens, self.c_vectors, self.dim, self.data.copy())


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    normalize_pooled: bool = False
    loss: Literal["in_batch_softmax", "margin_triplet"] = "in_batch_softmax"
    margin: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss not in ("in_batch_softmax", "margin_triplet"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or (self.loss == "in_batch_softmax" and self.batch_size < 2):
            raise ValueError(f"batch_size {self.batch_size} too small for loss {self.loss}")


@dataclass
class TrainResult:
    weights: ProjectionWeights
    initial: ProjectionWeights
    loss_trace: list[float] = field(default_factory=list)


def pad_or_truncate(doc, m_tokens: int) -> np.ndarray:
    d = as_embeddings(doc, name="doc")
    if m_tokens < 1:
        raise ValueError(f"m_tokens must be >= 1, got {m_tokens}")
    out = np.zeros((m_tokens, d.shape[1]), dtype=np.float32)
    n = min(m_tokens, d.shape[0])
    out[:n] = d[:n]
    return out


def _normalize_rows(y: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    return np.divide(y, norms, out=np.zeros_like(y), where=norms > 0)


def pool(doc, w: ProjectionWeights, normalize: bool = False) -> np.ndarray:
    """Project ``doc`` (exactly ``w.m_tokens`` rows) to a ``(C, k)`` float32 matrix."""
    d = as_embeddings(doc, name="doc")
    if d.shape != (w.m_tokens, w.dim):
        raise ShapeError(f"doc shape {d.shape} does not match weights (M={w.m_tokens}, k={w.dim})")
    x = d.astype(np.float64).reshape(-1)
    with np.errstate(over="ignore", invalid="ignore"):
        y = (x @ w.data.astype(np.float64)).reshape(w.c_vectors, w.dim)
        if normalize:
            y = _normalize_rows(y)
        out = y.astype(np.float32)
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise PoolingError(
            f"pooled output is non-finite at vector {bad[0]}, coordinate {bad[1]} "
            f"(max |x|={np.abs(x).max():.3g}, max |W|={np.abs(w.data).max():.3g})"
        )
    return out


def pool_many(docs: np.ndarray, w: ProjectionWeights, normalize: bool = False, chunk: int = 4096) -> np.ndarray:
    """Vectorised ``pool`` over a ``(n, M, k)`` stack of padded documents."""
    docs = np.asarray(docs, dtype=np.float32)
    if docs.ndim != 3 or docs.shape[1:] != (w.m_tokens, w.dim):
        raise ShapeError(f"docs shape {docs.shape} does not match weights (n, {w.m_tokens}, {w.dim})")
    W = w.data.astype(np.float64)
    out = np.empty((docs.shape[0], w.c_vectors, w.dim), dtype=np.float32)
    for lo in range(0, docs.shape[0], chunk):
        X = docs[lo : lo + chunk].reshape(-1, w.m_tokens * w.dim).astype(np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            Y = (X @ W).reshape(-1, w.c_vectors, w.dim)
            if normalize:
                Y = _normalize_rows(Y)
            out[lo : lo + chunk] = Y
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out))[0][0])
        raise PoolingError(f"pooled output is non-finite for document {bad}")
    return out


def init_weights(m_tokens: int, c_vectors: int, dim: int, seed: int) -> ProjectionWeights:
    """Glorot-uniform weights, bound ``sqrt(6 / (M*k + C*k))``."""
    if min(m_tokens, c_vectors, dim) < 1:
        raise ValueError(f"dimensions must be >= 1, got M={m_tokens} C={c_vectors} k={dim}")
    fan_in, fan_out = m_tokens * dim, c_vectors * dim
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    data = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    return ProjectionWeights(m_tokens, c_vectors, dim, data)


def score_pooled(query, doc, w: ProjectionWeights, normalize: bool = False) -> float:
    return maxsim(query, pool(doc, w, normalize=normalize))


# --------------------------------------------------------------------------
# batched forward/backward shared by the gradient and the trainer
# --------------------------------------------------------------------------


def _forward(Q: np.ndarray, X: np.ndarray, W: np.ndarray, C: int, k: int, normalize: bool):
    """Scores of every query in ``Q`` (A, N, k) against every flattened doc in ``X`` (B, M*k).

    Zero query rows are padding: they score 0 against every vector and
    receive no gradient.
    """
    Y = (X @ W).reshape(X.shape[0], C, k)
    P = _normalize_rows(Y) if normalize else Y
    sims = np.einsum("anc,bjc->abnj", Q, P)
    assign = sims.argmax(axis=3)
    best = np.take_along_axis(sims, assign[..., None], axis=3)[..., 0]
    scores = np.zeros(best.shape[:2])
    for i in range(best.shape[2]):
        scores += best[:, :, i]
    return scores, assign, Y, P


def _backward(Q, X, coef, assign, Y, P, C: int, k: int, normalize: bool) -> np.ndarray:
    """d(sum_ab coef[a,b] * score[a,b]) / dW with the argmax held fixed."""
    onehot = (assign[..., None] == np.arange(C)).astype(np.float64)  # (A,B,N,C)
    dP = np.einsum("ab,abnj,anc->bjc", coef, onehot, Q)
    if normalize:
        norms = np.linalg.norm(Y, axis=-1, keepdims=True)
        radial = np.sum(P * dP, axis=-1, keepdims=True)
        dY = np.divide(dP - P * radial, norms, out=np.zeros_like(dP), where=norms > 0)
    else:
        dY = dP
    return X.T @ dY.reshape(X.shape[0], C * k)


def _flat_doc(doc, w: ProjectionWeights) -> np.ndarray:
    d = as_embeddings(doc, name="doc")
    if d.shape != (w.m_tokens, w.dim):
        raise ShapeError(f"doc shape {d.shape} does not match weights (M={w.m_tokens}, k={w.dim})")
    return d.astype(np.float64).reshape(1, -1)


def grad_score_wrt_w(query, doc, w: ProjectionWeights, normalize: bool = False) -> np.ndarray:
    """Subgradient of ``score_pooled`` w.r.t. every entry of ``W``.

    Argmax assignments are held fixed (lowest index on ties).  With
    ``normalize=False`` entry ``[a*k+b, j*k+c]`` equals
    ``x[a*k+b] * sum(q_i[c] for i assigned to j)``.
    """
    q = as_embeddings(query, name="query")
    if q.shape[1] != w.dim:
        raise ShapeError(f"query dim {q.shape[1]} != weights dim {w.dim}")
    X = _flat_doc(doc, w)
    Q = q.astype(np.float64)[None]
    W = w.data.astype(np.float64)
    _, assign, Y, P = _forward(Q, X, W, w.c_vectors, w.dim, normalize)
    return _backward(Q, X, np.ones((1, 1)), assign, Y, P, w.c_vectors, w.dim, normalize)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _log_softmax(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=1, keepdims=True))


def _batch_loss_and_coef(scores: np.ndarray, neg_slices, cfg: TrainConfig):
    A = scores.shape[0]
    coef = np.zeros_like(scores)
    if cfg.loss == "in_batch_softmax":
        logp = _log_softmax(scores)
        loss = -float(np.mean(logp[np.arange(A), np.arange(A)]))
        coef = np.exp(logp)
        coef[np.arange(A), np.arange(A)] -= 1.0
        coef /= A
        return loss, coef
    terms = []
    for a, (lo, hi) in enumerate(neg_slices):
        for b in range(lo, hi):
            terms.append((a, b, cfg.margin - scores[a, a] + scores[a, b]))
    if not terms:
        return 0.0, coef
    for a, b, t in terms:
        if t > 0:
            coef[a, a] -= 1.0 / len(terms)
            coef[a, b] += 1.0 / len(terms)
    loss = float(np.mean([max(0.0, t) for _, _, t in terms]))
    return loss, coef


Triplet = tuple  # (query (N,k), positive (M,k), negatives sequence of (M,k))


def _stack_triplets(triplets: Sequence[Triplet], m_tokens: int, dim: int):
    if len(triplets) == 0:
        raise ValueError("empty training set")
    n_max = 0
    queries, pos, negs = [], [], []
    for t, (q, p, ns) in enumerate(triplets):
        q = as_embeddings(q, name=f"triplets[{t}].query")
        if q.shape[1] != dim:
            raise ShapeError(f"triplets[{t}].query has dim {q.shape[1]}, expected {dim}")
        docs = [as_embeddings(p, name=f"triplets[{t}].positive")]
        docs += [as_embeddings(n, name=f"triplets[{t}].negative") for n in ns]
        for d in docs:
            if d.shape != (m_tokens, dim):
                raise ShapeError(f"triplets[{t}]: document shape {d.shape}, expected ({m_tokens}, {dim}); pad first")
        n_max = max(n_max, q.shape[0])
        queries.append(q)
        pos.append(docs[0].reshape(-1))
        negs.append([d.reshape(-1) for d in docs[1:]])
    Q = np.zeros((len(queries), n_max, dim), dtype=np.float64)
    for t, q in enumerate(queries):
        Q[t, : q.shape[0]] = q
    return Q, np.asarray(pos, dtype=np.float64), negs


def train_pool(
    triplets: Sequence[Triplet],
    config: TrainConfig,
    *,
    m_tokens: int,
    c_vectors: int,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit ``W`` by mini-batch SGD on (query, positive, negatives) triplets.

    Batches are drawn from a per-epoch permutation seeded by ``config.seed``.
    For ``in_batch_softmax`` each query is scored against every positive and
    negative in its batch and the loss is cross-entropy on its own positive.
    For ``margin_triplet`` the loss is the mean hinge
    ``max(0, margin - s_pos + s_neg)`` over that query's negatives.
    """
    if len(triplets) == 0:
        raise ValueError("empty training set")
    dim = as_embeddings(triplets[0][0], name="triplets[0].query").shape[1]
    Q, POS, NEGS = _stack_triplets(triplets, m_tokens, dim)
    init = init_weights(m_tokens, c_vectors, dim, config.seed)
    result = TrainResult(weights=init.copy(), initial=init)
    if config.epochs == 0:
        return result

    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    W = init.data.astype(np.float64)
    n = Q.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            docs = [POS[idx]]
            neg_slices, cursor = [], len(idx)
            for t in idx:
                neg_slices.append((cursor, cursor + len(NEGS[t])))
                cursor += len(NEGS[t])
                if NEGS[t]:
                    docs.append(np.asarray(NEGS[t]))
            X = np.concatenate(docs, axis=0)
            Qb = Q[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                scores, assign, Y, P = _forward(Qb, X, W, c_vectors, dim, config.normalize_pooled)
                loss, coef = _batch_loss_and_coef(scores, neg_slices, config)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            grad = _backward(Qb, X, coef, assign, Y, P, c_vectors, dim, config.normalize_pooled)
            W = W - config.learning_rate * grad
            total += loss * len(idx)
            seen += len(idx)
        mean_loss = total / seen
        if not (math.isfinite(mean_loss) and np.all(np.isfinite(W))):
            raise TrainingDiverged(epoch, mean_loss)
        result.loss_trace.append(mean_loss)
        logger.info("epoch %d mean loss %.6f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    with np.errstate(over="ignore"):
        W32 = W.astype(np.float32)
    if not np.all(np.isfinite(W32)):
        raise TrainingDiverged(config.epochs, float("inf"))
    result.weights = ProjectionWeights(m_tokens, c_vectors, dim, W32)
    return result


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def save_weights(path, w: ProjectionWeights) -> None:
    """Write ``CBPW`` v1: magic, u16 version, u32 M, C, k, then float32 data (all little-endian)."""
    header = _WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, w.m_tokens, w.c_vectors, w.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(w.data.astype("<f4", copy=False).tobytes(order="C"))


def load_weights(path) -> ProjectionWeights:
    raw = Path(path).read_bytes()
    if len(raw) < _WEIGHTS_HEADER.size:
        raise ValueError(f"{path}: too short for a weights header")
    magic, version, m, c, k = _WEIGHTS_HEADER.unpack_from(raw)
    if magic != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    n = m * k * c * k
    if len(raw) != _WEIGHTS_HEADER.size + 4 * n:
        raise ValueError(f"{path}: expected {_WEIGHTS_HEADER.size + 4 * n} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_WEIGHTS_HEADER.size)
    return ProjectionWeights(m, c, k, data.reshape(m * k, c * k).astype(np.float32))
