"""Compare compiled and pure-Python polymer growth.

Run with ``python3 benchmarks/bench_core.py``.
"""

from __future__ import annotations

import argparse
import time

from blockspin import polymers


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--side", type=int, default=6)
    ap.add_argument("--cap", type=int, default=6)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    cx = polymers.CubeComplex.grid((args.side, args.side))
    weights = [1] * cx.n_cubes
    py = lambda: polymers.grow_connected_py(cx.neighbors, weights, args.cap)
    count = len(py())
    t_py = _time(py, args.repeats)
    print(f"grid {args.side}x{args.side}, cap {args.cap}: {count} connected sets")
    print(f"python  {t_py * 1e3:9.2f} ms")
    if polymers._grow_compiled is None:
        print("cython  unavailable (extension not built)")
        return
    cy = lambda: polymers._grow_compiled(cx.neighbors, weights, args.cap)
    assert sorted(cy()) == sorted(py())
    t_cy = _time(cy, args.repeats)
    print(f"cython  {t_cy * 1e3:9.2f} ms  ({t_py / t_cy:.1f}x)")


if __name__ == "__main__":
    main()
