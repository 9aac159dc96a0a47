"""Late-interaction (MaxSim) relevance scoring.

Token embeddings are plain 2-D ``float32`` numpy arrays, one row per token.
Scores are dot products; any unit-normalisation is the caller's job.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when embedding matrices have incompatible or empty shapes."""


def as_embeddings(x, *, name: str = "embeddings", normalized: bool = False) -> np.ndarray:
    """Validate and coerce ``x`` to a C-contiguous ``(rows, dim)`` float32 array.

    With ``normalized=True`` every row must already have unit L2 norm
    (tolerance 1e-5).
    """
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name}: empty matrix of shape {arr.shape}")
    if normalized:
        norms = np.linalg.norm(arr.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-5)
        if bad.size:
            raise ShapeError(
                f"{name}: row {int(bad[0])} has norm {norms[bad[0]]:.6f}, expected unit norm"
            )
    return arr


def _check_pair(query, doc) -> tuple[np.ndarray, np.ndarray]:
    q = as_embeddings(query, name="query")
    d = as_embeddings(doc, name="doc")
    if q.shape[1] != d.shape[1]:
        raise ShapeError(f"dimension mismatch: query dim {q.shape[1]} != doc dim {d.shape[1]}")
    return q, d


def maxsim(query, doc) -> float:
    """Sum over query tokens of the best dot product against any doc row."""
    q, d = _check_pair(query, doc)
    return float(_kernels.backend.maxsim(q, d))


def argmax_assignments(query, doc) -> list[int]:
    """Index of the best-matching doc row for each query token (lowest index on ties)."""
    q, d = _check_pair(query, doc)
    return [int(j) for j in _kernels.backend.argmax(q, d)]


def batch_maxsim(query, docs: Sequence) -> list[float]:
    q = as_embeddings(query, name="query")
    checked = []
    for idx, doc in enumerate(docs):
        try:
            d = as_embeddings(doc, name=f"docs[{idx}]")
        except ShapeError as exc:
            raise ShapeError(f"batch rejected at document {idx}: {exc}") from exc
        if d.shape[1] != q.shape[1]:
            raise ShapeError(
                f"batch rejected at document {idx}: dim {d.shape[1]} != query dim {q.shape[1]}"
            )
        checked.append(d)
    return [float(_kernels.backend.maxsim(q, d)) for d in checked]
