"""Time the hot kernels on the numpy path and the numba path.

Both backends run in one process: the plain functions are timed as-is,
and the same bodies are compiled with ``@njit`` here, regardless of the
``STREAMTEMP_NUMBA`` setting, so the comparison never depends on how the
package itself was imported.  Compilation happens in the warmup pass and
is excluded from the timings.  The script also reports the largest
absolute disagreement between the two paths on identical inputs, which
should sit at the one-ULP level for the transcendental-heavy kernels and
at exactly zero for the split scan.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --hidden 120 --time-steps 365 --repeats 7
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from streamtemp.kernels import (
    best_split_scan_py,
    lstm_layer_backward_py,
    lstm_layer_forward_py,
)

try:
    from numba import njit
except ImportError:
    njit = None


def _flatten(result):
    if isinstance(result, tuple):
        out = []
        for part in result:
            out.extend(_flatten(part))
        return out
    return [np.asarray(result, dtype=np.float64)]


def max_abs_difference(a, b) -> float:
    parts_a, parts_b = _flatten(a), _flatten(b)
    return max(
        float(np.max(np.abs(x - y))) if x.size else 0.0
        for x, y in zip(parts_a, parts_b)
    )


def bench(fn, args, repeats: int, inner: int) -> float:
    """Best-of-N wall time per call, in seconds."""
    times = timeit.repeat(lambda: fn(*args), number=inner, repeat=repeats)
    return min(times) / inner


def make_cases(args, rng):
    T, B, D, H = args.time_steps, args.batch, args.features, args.hidden
    x = rng.standard_normal((T, B, D))
    w_x = rng.standard_normal((4 * H, D)) * 0.2
    w_h = rng.standard_normal((4 * H, H)) * 0.2
    b = rng.standard_normal(4 * H) * 0.1
    forward_args = (x, np.ascontiguousarray(w_x.T), np.ascontiguousarray(w_h.T), b)
    h, c, gates = lstm_layer_forward_py(*forward_args)
    dh_out = rng.standard_normal((T, B, H))
    backward_args = (x, h, c, gates, w_x, w_h, dh_out)

    n = args.rows
    values = np.sort(rng.standard_normal(n))
    y = values * 0.7 + rng.standard_normal(n)
    scan_args = (values, y, 20)

    return [
        (f"lstm_forward  T={T} B={B} D={D} H={H}", lstm_layer_forward_py, forward_args, 1),
        (f"lstm_backward T={T} B={B} D={D} H={H}", lstm_layer_backward_py, backward_args, 1),
        (f"split_scan    n={n}", best_split_scan_py, scan_args, 20),
    ]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--time-steps", type=int, default=200)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--features", type=int, default=11)
    parser.add_argument("--hidden", type=int, default=80)
    parser.add_argument("--rows", type=int, default=100_000, help="split scan length")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    cases = make_cases(args, rng)

    if njit is None:
        print("numba is not installed; timing the numpy path only")
    header = f"{'kernel':34} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}"
    print(header)
    print("-" * len(header))
    for label, fn, fn_args, inner in cases:
        base = fn(*fn_args)
        t_np = bench(fn, fn_args, args.repeats, inner)
        if njit is None:
            print(f"{label:34} {t_np * 1e3:10.3f} {'-':>10} {'-':>8} {'-':>11}")
            continue
        jitted = njit(cache=True)(fn)
        jit_result = jitted(*fn_args)  # compile + first run
        diff = max_abs_difference(base, jit_result)
        t_nb = bench(jitted, fn_args, args.repeats, inner)
        print(
            f"{label:34} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f}"
            f" {t_np / t_nb:7.2f}x {diff:11.2e}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
