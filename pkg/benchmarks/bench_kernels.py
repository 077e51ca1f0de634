"""Time the numba kernels against the pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is compiled (first call) before timing. Reports the best of N
runs per backend and the speed-up, and checks that both backends agree.
"""

import argparse
import time

import numpy as np

from aaustereo import _kernels


def best_time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    x = rng.standard_normal((2, 48, 60, 80))
    dw = rng.standard_normal((48, 1, 3, 3))
    dense = rng.standard_normal((16, 48, 3, 3))
    b48, b16 = rng.standard_normal(48), rng.standard_normal(16)
    g_dw = rng.standard_normal((2, 48, 60, 80))
    rows = rng.standard_normal((20000, 96))
    gamma, beta = rng.uniform(0.5, 1.5, 96), rng.standard_normal(96)
    y, xhat, rstd = _kernels.layer_norm_forward(rows, gamma, beta, 1e-5)
    sm = _kernels.softmax_forward(rows)
    return {
        "conv2d depthwise 3x3 fwd": lambda: _kernels.conv2d_forward(x, dw, b48, 1, 1, 48),
        "conv2d depthwise 3x3 bwd": lambda: _kernels.conv2d_backward(g_dw, x, dw, 1, 1, 48),
        "conv2d dense 48->16 fwd": lambda: _kernels.conv2d_forward(x, dense, b16, 1, 1, 1),
        "layer_norm fwd": lambda: _kernels.layer_norm_forward(rows, gamma, beta, 1e-5),
        "layer_norm bwd": lambda: _kernels.layer_norm_backward(rows, xhat, rstd, gamma),
        "softmax fwd": lambda: _kernels.softmax_forward(rows),
        "softmax bwd": lambda: _kernels.softmax_backward(rows, sm),
    }


def _flatten(out):
    return np.concatenate([np.ravel(o) for o in out]) if isinstance(out, tuple) else np.ravel(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    table = cases(rng)
    prev = _kernels.get_backend()
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}  max |diff|")
    try:
        for name, fn in table.items():
            res = {}
            for backend in ("numpy", "numba"):
                _kernels.set_backend(backend)
                res[backend] = (best_time(fn, args.repeat), _flatten(fn()))
            diff = np.abs(res["numpy"][1] - res["numba"][1]).max()
            t_np, t_nb = res["numpy"][0], res["numba"][0]
            print(f"{name:28s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.2f}x  {diff:.1e}")
    finally:
        _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
