"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N wall time for each backend and
the speed ratio. Outputs of the two backends are checked for agreement first.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from dynssd import _fallback

try:
    from dynssd import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng: np.random.Generator) -> dict:
    x = rng.standard_normal((16, 16, 32, 32))
    cols = _fallback.im2col(x, 3, 3, 2, 1)
    img = rng.random((128, 128, 3))
    xy = rng.uniform(0, 100, (500, 2))
    wh = rng.uniform(5, 40, (500, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    scores = rng.random(500)
    return {
        "im2col 16x16x32x32 k3 s2": ("im2col", (x, 3, 3, 2, 1)),
        "col2im 16x16x32x32 k3 s2": ("col2im", (cols, 16, 16, 32, 32, 3, 3, 2, 1)),
        "bicubic 128->64": ("resize_bicubic", (img, 64, 64)),
        "bicubic 32->64": ("resize_bicubic", (img[:32, :32].copy(), 64, 64)),
        "nms 500 boxes": ("nms", (boxes, scores, 0.45)),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=10)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not available; build with `pip install -e .`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, (name, inputs) in cases(rng).items():
        py, cy = getattr(_fallback, name), getattr(_kernels, name)
        a, b = np.asarray(py(*inputs)), np.asarray(cy(*inputs))
        if not np.allclose(a, b, atol=1e-9):
            raise SystemExit(f"{label}: backends disagree")
        t_py = min(timeit.repeat(lambda: py(*inputs), number=args.number, repeat=args.repeat)) / args.number
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=args.number, repeat=args.repeat)) / args.number
        print(f"{label:28s} {t_py * 1e3:10.3f} {t_cy * 1e3:10.3f} {t_py / t_cy:8.2f}")


if __name__ == "__main__":
    main()
