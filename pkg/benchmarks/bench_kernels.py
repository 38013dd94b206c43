"""Time each hot kernel under the numba and numpy backends and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--step]

``--step`` also times one full forward/backward training step per backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mhcaf import _kernels as K


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (includes JIT compilation on first use)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x = rng.normal(size=(32, 34, 34, 64))
    k = rng.normal(size=(3, 3, 64))
    g = rng.normal(size=(32, 32, 32, 64))
    xs = rng.normal(size=(32, 18, 18, 32))
    img = rng.integers(0, 256, size=(128, 128)).astype(np.float64)
    u8 = rng.integers(0, 256, size=(128, 128), dtype=np.uint8)
    ys, xx = np.nonzero(rng.random((128, 128)) < 0.1)
    th = np.radians(90.0 - np.arange(-90, 91) * 0.5)
    sy = rng.uniform(-2, 130, size=(128, 128))
    sx = rng.uniform(-2, 130, size=(128, 128))
    a = rng.normal(size=(32, 64, 512))
    cdf = K.gelu_forward(a)[1]
    s = K.swish_forward(a)[1]
    gk = rng.normal(size=(5, 5))
    return {
        "im2col 3x3": lambda: K.im2col(xs, 3, 3, 1, 16, 16),
        "col2im 3x3": lambda: K.col2im(np.ones((32 * 16 * 16, 9 * 32)), xs.shape, 3, 3, 1, 16, 16),
        "depthwise fwd": lambda: K.depthwise_forward(x, k, 1, 32, 32),
        "depthwise bwd": lambda: K.depthwise_backward(x, k, g, 1),
        "min filter 3x3": lambda: K.min_filter(u8, 3),
        "gaussian 5x5": lambda: K.correlate_reflect(img, gk),
        "hough": lambda: K.hough_accumulate(xx, ys, th, 183),
        "bilinear": lambda: K.bilinear_sample(img, sy, sx, 255.0),
        "gelu fwd": lambda: K.gelu_forward(a),
        "gelu bwd": lambda: K.gelu_backward(a, cdf, a),
        "swish bwd": lambda: K.swish_backward(a, s, a),
    }


def max_diff(r1, r2) -> float:
    if isinstance(r1, tuple):
        return max(max_diff(u, v) for u, v in zip(r1, r2))
    return float(np.max(np.abs(np.asarray(r1, dtype=np.float64) - np.asarray(r2, dtype=np.float64))))


def train_step_time(repeat: int) -> float:
    from mhcaf import ops
    from mhcaf.config import ModelConfig
    from mhcaf.model import MHCAFNet

    rng = np.random.default_rng(0)
    model = MHCAFNet(ModelConfig(num_classes=8))
    x = rng.random((32, 128, 128, 3))
    y = np.arange(32) % 8

    def step():
        model.zero_grad()
        ops.softmax_cross_entropy(model(x), y).backward()

    return best_of(step, repeat)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    fns = cases(rng)
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in fns.items():
        K.set_backend("numba")
        t_nb = best_of(fn, args.repeat)
        r_nb = fn()
        K.set_backend("numpy")
        t_np = best_of(fn, args.repeat)
        r_np = fn()
        print(f"{name:<16}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>9.2f}{max_diff(r_nb, r_np):>12.2e}")
    if args.step:
        for backend in ("numba", "numpy"):
            K.set_backend(backend)
            print(f"train step (batch 32) {backend}: {train_step_time(max(1, args.repeat // 2)):.3f} s")
    K.set_backend("numba")


if __name__ == "__main__":
    main()
