"""Compare the numba and numpy scoring kernels.

Run ``CONSTBERT_DISABLE_NUMBA=1`` to confirm the fallback is what the
engine picks up; the table always times every available backend.
"""

import argparse

from constbert.bench import format_table, run_benchmarks


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--docs", type=int, default=10_000)
    ap.add_argument("--C", type=int, default=32)
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(format_table(run_benchmarks(num_docs=args.docs, c_vectors=args.C, dim=args.k, repeat=args.repeat)))


if __name__ == "__main__":
    main()
