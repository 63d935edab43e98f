"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Times each kernel on MNIST-sized tensors, then a full forward/backward pass of
the default 28x28 network on a 200-image minibatch, once per backend.
"""
import argparse
import timeit

import numpy as np

from qbdc import _kernels_py, kernels, nn

try:
    from qbdc import _ckernels
except ImportError:
    _ckernels = None


def kernel_cases(rng):
    x1 = rng.random((200, 1, 28, 28), dtype=np.float32)
    x2 = rng.random((200, 20, 13, 13), dtype=np.float32)
    h1 = rng.random((200, 20, 26, 26), dtype=np.float32)
    cols = rng.random((200 * 11 * 11, 20 * 9), dtype=np.float32)
    out, arg = _kernels_py.maxpool_forward(h1, 2)
    return {
        "im2col 1x28x28": lambda m: m.im2col(x1, 3, 3),
        "im2col 20x13x13": lambda m: m.im2col(x2, 3, 3),
        "col2im 20x13x13": lambda m: m.col2im(cols, x2.shape, 3, 3),
        "maxpool fwd 20x26x26": lambda m: m.maxpool_forward(h1, 2),
        "maxpool bwd 20x26x26": lambda m: m.maxpool_backward(out, arg, h1.shape, 2),
    }


def train_step(net, x, y):
    _, trace = nn.forward(net, x)
    nn.backward(net, trace, y)


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    backends = {"numpy": _kernels_py, "cython": _ckernels}

    print(f"{'case':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in kernel_cases(rng).items():
        t = {b: best(lambda: fn(m), args.repeat) for b, m in backends.items()}
        print(f"{name:28s} {1e3 * t['numpy']:10.2f} {1e3 * t['cython']:10.2f} {t['numpy'] / t['cython']:7.2f}x")

    net = nn.Network.build(nn.mnist_layers(), (1, 28, 28), rng)
    x = rng.random((200, 1, 28, 28), dtype=np.float32)
    y = rng.integers(0, 10, 200)
    saved = kernels._impl
    t = {}
    try:
        for b, m in backends.items():
            kernels._impl = m
            t[b] = best(lambda: train_step(net, x, y), args.repeat)
    finally:
        kernels._impl = saved
    print(f"{'forward+backward, batch 200':28s} {1e3 * t['numpy']:10.2f} {1e3 * t['cython']:10.2f} "
          f"{t['numpy'] / t['cython']:7.2f}x")


if __name__ == "__main__":
    main()
