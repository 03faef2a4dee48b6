"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel runs on both backends with identical inputs; outputs are checked
for agreement before timing. The last row times a full CNN loss+gradient.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from gatedmeta import kernels, nets
from gatedmeta.core_math import GroupLayout


def _cases(rng):
    x1 = rng.normal(size=(200, 3, 8, 8))
    w1 = rng.normal(size=(8, 3, 3, 3))
    b1 = rng.normal(size=8)
    x2 = rng.normal(size=(200, 8, 4, 4))
    w2 = rng.normal(size=(16, 8, 3, 3))
    b2 = rng.normal(size=16)
    dy2 = rng.normal(size=(200, 16, 4, 4))
    xp = rng.normal(size=(200, 8, 8, 8))
    _, idx = kernels._npkernels.maxpool2_forward(xp)
    dp = rng.normal(size=(200, 8, 4, 4))
    v = rng.normal(size=16 * 17 * 20)
    layout = GroupLayout.contiguous([17] * 320)
    starts, stops, weights = layout.arrays()

    def shrink(mod):
        u = v.copy()
        mod.group_shrink(u, starts, stops, weights, 0.3)
        return u

    return {
        "conv fwd 200x3x8x8 -> 8": lambda m: m.conv3x3_forward(x1, w1, b1),
        "conv fwd 200x8x4x4 -> 16": lambda m: m.conv3x3_forward(x2, w2, b2),
        "conv bwd 200x8x4x4 -> 16": lambda m: m.conv3x3_backward(x2, w2, dy2),
        "maxpool fwd 200x8x8x8": lambda m: m.maxpool2_forward(xp),
        "maxpool bwd 200x8x8x8": lambda m: m.maxpool2_backward(dp, idx, xp.shape),
        "group shrink 320 groups": shrink,
    }


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def _time(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the NumPy fallback only")
    rng = np.random.default_rng(0)
    mods = {"numpy": kernels._npkernels, "cython": kernels._ckernels}
    rows = []
    for name, fn in _cases(rng).items():
        row = {"kernel": name}
        ref = fn(mods["numpy"])
        for b in backends:
            if b != "numpy" and not _agree(ref, fn(mods[b])):
                raise SystemExit(f"{name}: {b} output disagrees with numpy")
            row[b] = _time(lambda: fn(mods[b]), args.repeat)
        rows.append(row)

    net = nets.small_cnn(gated=True, seed=0)
    batch = nets.Batch(rng.normal(size=(200, 3, 8, 8)), rng.integers(0, 10, size=200))
    row = {"kernel": "cnn loss+grad, 200 images"}
    previous = kernels.BACKEND
    for b in backends:
        kernels.use_backend(b)
        row[b] = _time(lambda: nets.loss_and_grad(net, batch), args.repeat)
    kernels.use_backend(previous)
    rows.append(row)

    width = max(len(r["kernel"]) for r in rows)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{b + ' ms':>10}" for b in backends)
    if "cython" in backends:
        header += f"  {'speedup':>8}"
    print(header)
    for r in rows:
        line = f"{r['kernel']:<{width}}  " + "  ".join(f"{r[b]:>10.3f}" for b in backends)
        if "cython" in backends:
            line += f"  {r['numpy'] / r['cython']:>7.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
