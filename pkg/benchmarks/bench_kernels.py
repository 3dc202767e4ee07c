"""Compare the numba and pure-numpy backends of the conv / pool kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on both backends (numba timings exclude the first,
compiling call) and the outputs are checked for agreement.
"""

import argparse
import json
import time

import numpy as np

from partscope import _kernels as K
from partscope import tensor as T
from partscope.layers import ConvSpec, conv2d

SHAPES = [
    # (batch, height, width, channels, f, s)
    (16, 128, 128, 3, 3, 1),
    (16, 64, 64, 16, 3, 2),
    (16, 32, 32, 32, 3, 1),
    (16, 16, 16, 64, 2, 2),
]


def _time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(n, h, w, c, f, s, rng):
    x = rng.standard_normal((n, h, w, c)).astype(np.float32)
    p = (f - 1) // 2 if f % 2 else 0
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    ho, wo = K.out_size(h, f, s, p), K.out_size(w, f, s, p)
    cols = K.im2col(xp, f, s)
    pooled, arg = K.maxpool(x, f, s)
    g = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "im2col": lambda: K.im2col(xp, f, s),
        "col2im": lambda: K.col2im(cols, xp.shape, f, s),
        "maxpool": lambda: K.maxpool(x, f, s),
        "maxpool_backward": lambda: K.maxpool_backward(g, arg, x.shape, f, s),
        "avgpool": lambda: K.avgpool(x, f, s),
        "avgpool_backward": lambda: K.avgpool_backward(g, x.shape, f, s),
    }, (ho, wo)


def conv_layer_case(n, h, w, c, rng):
    spec = ConvSpec(3, 1, "same", c, 2 * c, activation="leaky_relu", rng=rng)
    x = T.Tensor(rng.standard_normal((n, h, w, c)).astype(np.float32), requires_grad=True)

    def step():
        x.grad = None
        out = conv2d(x, spec)
        out.sum().backward()

    return step


def _first(result):
    return result[0] if isinstance(result, tuple) else result


def run(repeat=5):
    rng = np.random.default_rng(0)
    rows = []
    for n, h, w, c, f, s in SHAPES:
        cases, _ = kernel_cases(n, h, w, c, f, s, rng)
        cases["conv3x3 fwd+bwd"] = conv_layer_case(n, h, w, c, rng)
        for name, fn in cases.items():
            times, outs = {}, {}
            for backend in ((True, False) if K.HAVE_NUMBA else (False,)):
                prev = K.use_numba(backend)
                try:
                    times[backend] = _time(fn, repeat)
                    outs[backend] = fn()
                finally:
                    K.use_numba(prev)
            if len(outs) == 2 and outs[True] is not None:
                np.testing.assert_allclose(_first(outs[True]), _first(outs[False]), rtol=1e-5, atol=1e-5)
            rows.append({
                "kernel": name, "shape": f"{n}x{h}x{w}x{c} f{f} s{s}",
                "numpy_ms": 1e3 * times[False],
                "numba_ms": 1e3 * times[True] if True in times else None,
            })
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args()
    rows = run(args.repeat)
    print(f"{'kernel':<20} {'shape':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for r in rows:
        nb = r["numba_ms"]
        speed = f"{r['numpy_ms'] / nb:7.2f}x" if nb else "     n/a"
        nb_txt = f"{nb:10.2f}" if nb else "       n/a"
        print(f"{r['kernel']:<20} {r['shape']:<22} {r['numpy_ms']:10.2f} {nb_txt} {speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
