"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and shape with the median time of each backend
and the speed-up, after checking that both backends agree.
"""
import argparse
import timeit

import numpy as np

from m3rpd.tensor import _kernels_py

try:
    from m3rpd.tensor import _kernels
except ImportError:  # extension not built
    _kernels = None

# (batch, size, channels, kernel) roughly matching the default backbone's layers
CASES = [(16, 64, 3, 5), (16, 32, 8, 5), (16, 16, 16, 3), (16, 16, 16, 5)]


def _median(fn, repeat):
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def run(repeat=20):
    rng = np.random.default_rng(0)
    rows = []
    for n, s, c, k in CASES:
        x = rng.standard_normal((n, s, s, c)).astype(np.float32)
        pad = k // 2
        cols_ref = _kernels_py.im2col(x, k, k, 1, pad)
        impls = {"numpy": _kernels_py}
        if _kernels is not None:
            impls["cython"] = _kernels
            assert np.array_equal(_kernels.im2col(x, k, k, 1, pad), cols_ref)
        times = {nm: _median(lambda m=m: m.im2col(x, k, k, 1, pad), repeat) for nm, m in impls.items()}
        rows.append((f"im2col {n}x{s}x{s}x{c} k{k}", times))
        times = {nm: _median(lambda m=m: m.col2im(cols_ref, x.shape, k, k, 1, pad), repeat) for nm, m in impls.items()}
        rows.append((f"col2im {n}x{s}x{s}x{c} k{k}", times))
        y = rng.standard_normal((n, s, s, max(c, 8))).astype(np.float32)
        times = {nm: _median(lambda m=m: m.maxpool2_forward(y), repeat) for nm, m in impls.items()}
        rows.append((f"maxpool {n}x{s}x{s}x{max(c, 8)}", times))
    for name, t in rows:
        line = f"{name:28s} numpy {t['numpy'] * 1e3:8.3f} ms"
        if "cython" in t:
            line += f"   cython {t['cython'] * 1e3:8.3f} ms   speed-up x{t['numpy'] / t['cython']:.1f}"
        print(line)
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    run(ap.parse_args().repeat)
