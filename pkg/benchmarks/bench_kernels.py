"""Compare the compiled and numpy kernel backends.

Times every hot kernel on training-sized arrays, checks that both backends
return identical bits, and optionally times one full training step with each
backend swapped in.

    python benchmarks/bench_kernels.py [--repeat 5] [--step]
"""

import argparse
import time

import numpy as np

from iaunet.nn import kernels

KERNEL_NAMES = ["im2col", "col2im", "maxpool2x2_forward", "maxpool2x2_backward",
                "upsample2x_forward", "upsample2x_backward", "rmsprop_update"]


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def kernel_cases(rng, dtype):
    x = rng.standard_normal((4, 64, 64, 64)).astype(dtype)
    cols_shape = (64 * 9, 4 * 64 * 64)
    cols = rng.standard_normal(cols_shape).astype(dtype)
    pooled, idx = kernels.get_backend("numpy").maxpool2x2_forward(x)
    g_pool = rng.standard_normal(pooled.shape).astype(dtype)
    g_up = rng.standard_normal((4, 64, 128, 128)).astype(dtype)
    n = 4_000_000
    opt = [rng.standard_normal(n).astype(dtype) for _ in range(4)]
    opt[2] = np.abs(opt[2])

    def rmsprop(mod):
        arrays = [a.copy() for a in opt]
        mod.rmsprop_update(*arrays, 1e-4, 0.99, 0.9, 1e-8, 1e-8)
        return arrays[0]

    return {
        "im2col": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool2x2_forward": lambda m: m.maxpool2x2_forward(x)[0],
        "maxpool2x2_backward": lambda m: m.maxpool2x2_backward(g_pool, idx),
        "upsample2x_forward": lambda m: m.upsample2x_forward(x),
        "upsample2x_backward": lambda m: m.upsample2x_backward(g_up),
        "rmsprop_update": rmsprop,
    }


def bench_kernels(repeat, dtype=np.float32):
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng, dtype)
    py = kernels.get_backend("numpy")
    cy = kernels.get_backend("cython")
    rows = []
    for name in KERNEL_NAMES:
        fn = cases[name]
        same = np.array_equal(fn(py), fn(cy))
        t_py = _median_time(lambda: fn(py), repeat)
        t_cy = _median_time(lambda: fn(cy), repeat)
        rows.append((name, t_py, t_cy, same))
    return rows


def bench_step(repeat):
    from iaunet.model import IAUNet, ModelConfig
    from iaunet.trainer import TrainConfig, TripletBatch, train_step

    rng = np.random.default_rng(0)
    batch = TripletBatch(rng.random((1, 3, 64, 64), dtype=np.float32),
                         (rng.random((1, 1, 64, 64)) > 0.5).astype(np.float32),
                         rng.random((1, 3, 64, 64), dtype=np.float32),
                         rng.random((1, 3, 64, 64), dtype=np.float32))
    cfg = TrainConfig()
    out = {}
    for backend in ("numpy", "cython"):
        mod = kernels.get_backend(backend)
        saved = {n: getattr(kernels, n) for n in KERNEL_NAMES}
        for n in KERNEL_NAMES:
            setattr(kernels, n, getattr(mod, n))
        try:
            model, state = IAUNet(ModelConfig()), {}
            train_step(model, batch, cfg, state)  # warm-up allocates optimizer state
            out[backend] = _median_time(lambda: train_step(model, batch, cfg, state), repeat)
        finally:
            for n, f in saved.items():
                setattr(kernels, n, f)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--step", action="store_true",
                        help="also time a default-model training step per backend")
    args = parser.parse_args(argv)

    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<22} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}  identical")
    for name, t_py, t_cy, same in bench_kernels(args.repeat):
        print(f"{name:<22} {t_py * 1e3:>10.2f} {t_cy * 1e3:>10.2f} {t_py / t_cy:>7.2f}x  {same}")
    if args.step:
        step = bench_step(max(1, args.repeat // 2))
        print(f"train step (default model, 64x64, batch 1): numpy {step['numpy']:.3f}s, "
              f"cython {step['cython']:.3f}s, speedup {step['numpy'] / step['cython']:.2f}x")


if __name__ == "__main__":
    main()
