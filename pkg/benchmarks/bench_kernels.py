"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from lsplab import _fallback, kernels
from lsplab.classifier import Classifier

CASES = {
    "conv fwd 64x28x28x1->16": lambda m, a: m.conv2d_forward(*a["conv1"], 1),
    "conv bwd 64x28x28x1->16": lambda m, a: m.conv2d_backward(a["conv1"][0], a["conv1"][1], a["dout1"], 1, True, True),
    "conv fwd 64x14x14x16->32": lambda m, a: m.conv2d_forward(*a["conv2"], 1),
    "conv bwd 64x14x14x16->32": lambda m, a: m.conv2d_backward(a["conv2"][0], a["conv2"][1], a["dout2"], 1, True, True),
    "maxpool fwd 64x28x28x16": lambda m, a: m.maxpool2_forward(a["pool"]),
}


def _arrays(rng):
    def conv(h, c, f):
        return rng.normal(size=(64, h, h, c)), rng.normal(size=(3, 3, c, f)), rng.normal(size=f)
    a = {"conv1": conv(28, 1, 16), "conv2": conv(14, 16, 32), "pool": rng.normal(size=(64, 28, 28, 16))}
    a["dout1"] = rng.normal(size=(64, 28, 28, 16))
    a["dout2"] = rng.normal(size=(64, 14, 14, 32))
    return a


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if "cython" not in kernels.available_backends():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    from lsplab import _kernels

    arrays = _arrays(np.random.default_rng(0))
    print(f"{'case':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in CASES.items():
        tp = _best(lambda: fn(_fallback, arrays), args.repeat) * 1e3
        tc = _best(lambda: fn(_kernels, arrays), args.repeat) * 1e3
        print(f"{name:<28}{tp:>12.2f}{tc:>12.2f}{tp / tc:>9.2f}x")

    # one full training step of the default network
    model = Classifier((28, 28, 1), 10, seed=0)
    rng = np.random.default_rng(1)
    x, y = rng.random((64, 28, 28, 1)), np.eye(10)[rng.integers(0, 10, 64)]
    times = {}
    for b in ("python", "cython"):
        kernels.set_backend(b)
        times[b] = _best(lambda: model.loss_and_grads(x, y), args.repeat) * 1e3
    print(f"{'train step (batch 64)':<28}{times['python']:>12.2f}{times['cython']:>12.2f}"
          f"{times['python'] / times['cython']:>9.2f}x")


if __name__ == "__main__":
    main()
