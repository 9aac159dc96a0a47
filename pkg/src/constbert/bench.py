"""Timing comparison of the numba and numpy scoring backends."""

from __future__ import annotations

import time

import numpy as np

from . import _kernels


def _best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmarks(
    num_docs: int = 10_000,
    c_vectors: int = 32,
    dim: int = 16,
    query_len: int = 8,
    pairs: int = 2_000,
    repeat: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Time each kernel under every available backend; returns one row per (kernel, backend)."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((query_len, dim)).astype(np.float32)
    docs = rng.standard_normal((num_docs, c_vectors, dim)).astype(np.float32)
    lengths = rng.integers(c_vectors // 2, c_vectors + 1, size=num_docs)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    tokens = rng.standard_normal((int(offsets[-1]), dim)).astype(np.float32)
    small = [(rng.standard_normal((query_len, dim)).astype(np.float32),
              rng.standard_normal((c_vectors, dim)).astype(np.float32)) for _ in range(pairs)]

    rows = []
    reference = {}
    for name, be in _kernels.available_backends().items():
        # warm-up also triggers JIT compilation
        be.scan_fixed(q, docs[:2])
        be.scan_ragged(q, tokens, offsets[:3])
        be.maxsim(*small[0])
        cases = {
            f"scan_fixed ({num_docs} docs x {c_vectors} vecs)": lambda: be.scan_fixed(q, docs),
            f"scan_ragged ({num_docs} docs, {int(offsets[-1])} tokens)": lambda: be.scan_ragged(q, tokens, offsets),
            f"maxsim ({pairs} small pairs)": lambda: [be.maxsim(a, b) for a, b in small],
        }
        fixed = be.scan_fixed(q, docs)
        reference.setdefault("fixed", fixed)
        agree = float(np.max(np.abs(fixed - reference["fixed"])))
        for case, fn in cases.items():
            rows.append({"kernel": case, "backend": name, "seconds": _best_of(fn, repeat), "max_abs_diff": agree})
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'kernel':<48} {'backend':<8} {'ms':>10} {'max|diff|':>10}"]
    for r in rows:
        lines.append(f"{r['kernel']:<48} {r['backend']:<8} {1e3 * r['seconds']:>10.2f} {r['max_abs_diff']:>10.2e}")
    return "\n".join(lines)


if __name__ == "__main__":
    print(format_table(run_benchmarks()))
