"""Time the numba kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--size 512] [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from clanet import _accel
from clanet.segmentation import label_regions
from clanet.texture import lbp_codes


def _time(fn, repeat):
    fn()  # warm up (triggers JIT compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ns = ap.parse_args(argv)

    gen = np.random.default_rng(ns.seed)
    image = gen.integers(0, 256, (ns.size, ns.size), dtype=np.uint8)
    mask = gen.random((ns.size, ns.size)) < 0.55

    cases = {"label_regions": lambda: label_regions(mask), "lbp_codes": lambda: lbp_codes(image)}
    backends = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])
    print(f"{'kernel':<14} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    saved = _accel.USE_NUMBA
    try:
        for name, fn in cases.items():
            times = {}
            for b in backends:
                _accel.USE_NUMBA = b == "numba"
                times[b] = _time(fn, ns.repeat)
            ratio = times["numpy"] / times["numba"] if "numba" in times else float("nan")
            print(f"{name:<14} " + " ".join(f"{times[b] * 1e3:>8.2f}ms" for b in backends) + f"   {ratio:6.1f}x")
    finally:
        _accel.USE_NUMBA = saved


if __name__ == "__main__":
    main()
