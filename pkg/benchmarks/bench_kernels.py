"""Compiled kernels against the numpy fallback.

Times each kernel on the shapes a training step feeds it, then one full
train-mode forward/backward of the default network under each backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--points 512] [--batch 5]
"""

import argparse
import timeit

import numpy as np

from pcad import _kernels_py, kernels
from pcad.backbone import BackboneConfig, LossGrad, backward, forward, init_params

NAMES = ("max_pool", "bn_train", "bn_eval", "bn_backward", "adam_update")


def kernel_cases(rows, rng):
    z = rng.standard_normal((rows, 1024)).astype(np.float32)
    g = rng.uniform(0.5, 1.5, 1024).astype(np.float32)
    b = rng.standard_normal(1024).astype(np.float32)
    y, xhat, inv, mu, var = _kernels_py.bn_train(z, g, b, 1e-5, True)
    dy = rng.standard_normal(z.shape).astype(np.float32)
    pooled = rng.standard_normal((rows // 512 or 1, 512, 2048)).astype(np.float32)
    n = 1_000_000
    w, gr, m, v = (rng.standard_normal(n).astype(np.float32) for _ in range(4))
    v = np.abs(v)
    return {
        "max_pool": lambda k: k.max_pool(pooled),
        "bn_train": lambda k: k.bn_train(z, g, b, 1e-5, True),
        "bn_eval": lambda k: k.bn_eval(z, mu, var, g, b, 1e-5, True),
        "bn_backward": lambda k: k.bn_backward(dy, y, xhat, g, inv, True),
        "adam_update": lambda k: k.adam_update(w, gr, m, v, 1e-4, 0.9, 0.999, 0.5, 1e-8),
    }


def step_case(batch, points, rng):
    params = init_params(BackboneConfig(), 0)
    pts = rng.uniform(-1, 1, (batch, points, 3)).astype(np.float32)
    up = LossGrad(taps=[rng.standard_normal((batch, w)).astype(np.float32) for w in params.config.tap_widths])

    def run(_):
        backward(params, forward(params, pts, "train"), up)

    return run


def best(fn, impl, repeat):
    return min(timeit.repeat(lambda: fn(impl), number=1, repeat=repeat))


def use(impl):
    for name in NAMES:
        setattr(kernels, name, getattr(impl, name))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=512)
    ap.add_argument("--batch", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels not built; run pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    rows = args.batch * args.points
    impls = (("python", kernels.python_backend), ("compiled", kernels.compiled_backend))

    print(f"{'case':<24}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    cases = kernel_cases(rows, rng)
    cases["train step"] = step_case(args.batch, args.points, rng)
    for name, fn in cases.items():
        t = {}
        for label, impl in impls:
            use(impl)
            fn(impl)  # warm up
            t[label] = best(fn, impl, args.repeat)
        print(f"{name:<24}{t['python'] * 1e3:>12.2f}{t['compiled'] * 1e3:>14.2f}{t['python'] / t['compiled']:>9.1f}x")
    use(kernels.compiled_backend if kernels.BACKEND == "compiled" else kernels.python_backend)


if __name__ == "__main__":
    main()
