"""Time the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Both
implementations are imported directly, so the result does not depend on
which backend the package selected at import.
"""

import argparse
import timeit

import numpy as np

from layerpos import _pykernels

try:
    from layerpos import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng, n=128, width=128, rank=8):
    H = rng.standard_normal((n, width))
    W0 = rng.standard_normal((width, width))
    b = rng.standard_normal(width)
    A = rng.standard_normal((rank, width))
    B = rng.standard_normal((width, rank))
    dZ = rng.standard_normal((n, width))
    HA = H @ A.T
    E = rng.standard_normal((n, 32))
    U, norms = _pykernels.normalize_rows_forward(E)
    t = rng.standard_normal(32)
    cos, cn = _pykernels.cosine_rows_forward(E, t)
    g = rng.standard_normal(n)
    return {
        "lora_forward": lambda k: k.lora_forward(H, W0, b, A, B, 0.7),
        "lora_backward": lambda k: k.lora_backward(dZ, H, HA, W0, A, B, 0.7, True, False),
        "lora_backward_full": lambda k: k.lora_backward(dZ, H, HA, W0, A, B, 0.7, True, True),
        "normalize_rows_forward": lambda k: k.normalize_rows_forward(E),
        "normalize_rows_backward": lambda k: k.normalize_rows_backward(E, U, norms),
        "cosine_rows_forward": lambda k: k.cosine_rows_forward(E, t),
        "cosine_rows_backward": lambda k: k.cosine_rows_backward(g, E, t, cos, cn),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=2000)
    args = parser.parse_args()
    impls = [("python", _pykernels)] + ([("compiled", _ckernels)] if _ckernels else [])
    print(f"{'kernel':26s}" + "".join(f"{name:>14s}" for name, _ in impls) + "   speedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = [min(timeit.repeat(lambda: fn(k), number=args.repeat, repeat=3)) / args.repeat * 1e6
                 for _, k in impls]
        speed = f"{times[0] / times[1]:9.2f}x" if len(times) > 1 else "      n/a"
        print(f"{name:26s}" + "".join(f"{t:12.1f}us" for t in times) + speed)


if __name__ == "__main__":
    main()
