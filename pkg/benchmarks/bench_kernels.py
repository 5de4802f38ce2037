"""Compare the compiled LSTM/Adam kernels against the pure-numpy fallback.

Run:  python3 benchmarks/bench_kernels.py [--batch 16] [--hidden 128]
"""

import argparse
import time

import numpy as np

from audiomorph.kernels import _pure

try:
    from audiomorph.kernels import _ckernels
except ImportError:
    _ckernels = None


def time_call(fn, *args, repeats=200, warmup=20):
    for _ in range(warmup):
        fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e6)  # microseconds


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    b, h = args.batch, args.hidden
    pre = rng.standard_normal((b, 4 * h)).astype(np.float32)
    c_prev = rng.standard_normal((b, h)).astype(np.float32)
    h_out, c_out, gates = _pure.lstm_gates_forward(pre, c_prev)
    dh = rng.standard_normal((b, h)).astype(np.float32)
    dc = rng.standard_normal((b, h)).astype(np.float32)

    n = 1 << 17
    param = rng.standard_normal(n).astype(np.float32)
    grad = rng.standard_normal(n).astype(np.float32)
    m = np.zeros_like(param)
    v = np.zeros_like(param)

    cases = [
        ("lstm_gates_forward", (pre, c_prev)),
        ("lstm_gates_backward", (gates, c_out, c_prev, dh, dc)),
        ("adam_update", (param, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)),
    ]

    print(f"batch={b} hidden={h} adam_n={n}  (median of {args.repeats} runs)")
    print(f"{'kernel':<22}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for name, call_args in cases:
        pure_us = time_call(getattr(_pure, name), *call_args, repeats=args.repeats)
        if _ckernels is None:
            print(f"{name:<22}{pure_us:>12.1f}{'n/a':>12}{'n/a':>10}")
            continue
        cy_us = time_call(getattr(_ckernels, name), *call_args,
                          repeats=args.repeats)
        print(f"{name:<22}{pure_us:>12.1f}{cy_us:>12.1f}{pure_us / cy_us:>9.2f}x")
    if _ckernels is None:
        print("compiled backend not available; reinstall with a C compiler")


if __name__ == "__main__":
    main()
