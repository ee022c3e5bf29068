"""Compare the compiled and numpy kernel backends on training-sized batches.

Run ``python3 benchmarks/bench_kernels.py [--batch 128] [--repeat 5]``.
Each kernel (conv, max-pool, train-mode batch norm) is timed as the minimum
over ``--repeat`` calls; a full model training step (forward + backward) is
timed the same way. Results go to stdout as a small table and, with
``--json``, to a file.
"""

from __future__ import annotations

import argparse
import json
import platform
import timeit

import numpy as np

from miattn.model import ModelConfig, MultiInputModel
from miattn.nn import kernels


def kernel_cases(batch: int, rng: np.random.Generator) -> dict:
    x1 = (rng.random((batch, 1, 150, 42)) < 0.05).astype(np.float64)
    w1 = rng.uniform(-0.3, 0.3, (6, 1, 3, 3))
    g1 = rng.standard_normal((batch, 6, 148, 40))
    x2 = rng.standard_normal((batch, 6, 74, 20))
    w2 = rng.uniform(-0.1, 0.1, (16, 6, 3, 3))
    g2 = rng.standard_normal((batch, 16, 72, 18))
    p1 = rng.standard_normal((batch, 6, 148, 40))
    _, idx1 = kernels.maxpool2d_forward(p1)
    gp1 = rng.standard_normal((batch, 6, 74, 20))
    gamma, beta = rng.standard_normal(6), rng.standard_normal(6)
    _, xhat1, _, _, inv_std1 = kernels.batchnorm_train_forward(g1, gamma, beta, 1e-5)
    return {
        "conv1 forward": lambda: kernels.conv2d_forward(x1, w1),
        # the first layer never needs an input gradient
        "conv1 backward": lambda: kernels.conv2d_backward(x1, w1, g1, input_grad=False),
        "conv2 forward": lambda: kernels.conv2d_forward(x2, w2),
        "conv2 backward": lambda: kernels.conv2d_backward(x2, w2, g2),
        "pool1 forward": lambda: kernels.maxpool2d_forward(p1),
        "pool1 backward": lambda: kernels.maxpool2d_backward(gp1, idx1, p1.shape),
        "bn1 forward": lambda: kernels.batchnorm_train_forward(p1, gamma, beta, 1e-5),
        "bn1 backward": lambda: kernels.batchnorm_backward(g1, xhat1, gamma, inv_std1),
    }


def training_step(batch: int, rng: np.random.Generator):
    model = MultiInputModel(ModelConfig(dropout=0.5, seed=0))
    R = (rng.random((batch, 150, 42)) < 0.05).astype(np.float64)
    D = rng.standard_normal((batch, 24))
    y = (rng.random(batch) < 0.3).astype(np.float64)

    def step():
        model.forward(R, D, train=True)
        model.backward(y)
        model.zero_grad()

    return step


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    results: dict[str, dict[str, float]] = {}
    for backend in backends:
        with kernels.use_backend(backend):
            rng = np.random.default_rng(0)
            cases = kernel_cases(args.batch, rng)
            cases["training step"] = training_step(args.batch, rng)
            results[backend] = {name: best_of(fn, args.repeat) for name, fn in cases.items()}

    names = list(next(iter(results.values())))
    header = f"{'case':<16}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(f"batch={args.batch} repeat={args.repeat} python={platform.python_version()} numpy={np.__version__}")
    print(header)
    for name in names:
        line = f"{name:<16}" + "".join(f"{results[b][name]:>11.4f}s" for b in backends)
        if len(backends) == 2:
            line += f"{results['numpy'][name] / results['cython'][name]:>9.2f}x"
        print(line)
    if len(backends) == 1:
        print("compiled backend unavailable; only numpy was timed")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"batch": args.batch, "repeat": args.repeat, "seconds": results}, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
