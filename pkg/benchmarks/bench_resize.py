"""Time the compiled bilinear kernel against the numpy fallback.

    python3 benchmarks/bench_resize.py [--repeat N]

Both backends are checked for bit-identical output before timing.
"""
import argparse
import timeit

import numpy as np

from streetlight_fl import _resize_py

try:
    from streetlight_fl import _resize_ext
except ImportError:
    _resize_ext = None

CASES = [
    ("desk image -> 32x32", (48, 64, 3), 32, 32),
    ("camera crop -> 32x32", (768, 768, 3), 32, 32),
    ("camera frame -> 256x256", (768, 1024, 3), 256, 256),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _resize_ext is None:
        print("compiled kernel not built; only the fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'case':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, shape, oh, ow in CASES:
        src = rng.uniform(0, 255, shape)
        py = lambda: _resize_py.resize_bilinear(src, oh, ow)  # noqa: E731
        n = max(1, int(2000 // (shape[0] * shape[1] / 3072 + 1)))
        t_py = min(timeit.repeat(py, number=n, repeat=args.repeat)) / n * 1e3
        if _resize_ext is None:
            print(f"{name:<26}{t_py:>10.3f}{'-':>11}{'-':>9}")
            continue
        ext = lambda: _resize_ext.resize_bilinear(src, oh, ow)  # noqa: E731
        if not np.array_equal(py(), np.asarray(ext())):
            raise SystemExit(f"{name}: backends disagree")
        t_ext = min(timeit.repeat(ext, number=n, repeat=args.repeat)) / n * 1e3
        print(f"{name:<26}{t_py:>10.3f}{t_ext:>11.3f}{t_py / t_ext:>8.1f}x")


if __name__ == "__main__":
    main()
