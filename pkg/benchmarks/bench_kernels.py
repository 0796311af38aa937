"""Compiled vs numpy-fallback timing of the two hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat N] [--pixels N]

Prints one line per kernel with the best-of-N time for each backend, the
speedup, and whether both backends returned identical results.
"""
import argparse
import timeit

import numpy as np

from fwl import _kernels_py

try:
    from fwl import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def waveforms(n: int, T: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=float)
    x = rng.poisson(0.02, (n, T)).astype(float)
    for i in range(n):
        for _ in range(rng.integers(1, 5)):
            x[i] += rng.uniform(2, 200) * np.exp(-(t - rng.uniform(0, T)) ** 2 / (2 * 2.0 ** 2))
    return x


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.array_equal(np.asarray(u), np.asarray(v)) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def bench(name, call, repeat):
    out = {}
    for label, mod in (("cython", _compiled), ("python", _kernels_py)):
        if mod is None:
            continue
        res = call(mod)
        best = min(timeit.repeat(lambda: call(mod), number=1, repeat=repeat))
        out[label] = (best, res)
    line = f"{name:16s}"
    for label, (t, _) in out.items():
        line += f"  {label} {t * 1e3:9.2f} ms"
    if len(out) == 2:
        (tc, rc), (tp, rp) = out["cython"], out["python"]
        line += f"  speedup {tp / tc:6.1f}x  identical={same(rc, rp)}"
    print(line)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--pixels", type=int, default=32 * 32, help="waveforms per call (toy frame = 1024)")
    ap.add_argument("--bins", type=int, default=128)
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace` for a comparison")
    x = waveforms(args.pixels, args.bins)
    bench("detect_peaks", lambda m: m.detect_peaks_batch(x, 0.5), args.repeat)
    pixel, pos, amp, wid = (np.asarray(a) for a in _kernels_py.detect_peaks_batch(x, 0.5))
    lab = (np.arange(len(pos)) % 3).astype(np.uint8)
    bench("expand_labels", lambda m: m.expand_labels(pixel.astype(np.int64), pos, wid, lab, args.pixels,
                                                      args.bins, 3), args.repeat)


if __name__ == "__main__":
    main()
