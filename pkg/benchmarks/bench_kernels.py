"""Compare the compiled and NumPy convolution backends.

Run with ``python3 benchmarks/bench_kernels.py``. Prints the median time per
call for each backend on shapes taken from the desk-scale denoiser, plus one
full training step through each backend.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mbdiff.kernels import available_backends

SHAPES = [  # (batch, c_in, c_out, length, taps)
    (16, 1, 4, 512, 5),
    (16, 4, 4, 512, 5),
    (16, 16, 16, 128, 5),
    (16, 64, 64, 32, 5),
    (16, 32, 32, 512, 5),
]


def _median(fn, repeat: int) -> float:
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return float(np.median(timeit.repeat(fn, number=number, repeat=repeat)) / number)


def bench_conv(repeat: int = 7) -> list[dict]:
    rng = np.random.default_rng(0)
    backends = available_backends()
    rows = []
    for B, cin, cout, L, K in SHAPES:
        x = rng.standard_normal((B, cin, L))
        w = rng.standard_normal((cout, cin, K))
        b = rng.standard_normal(cout)
        g = rng.standard_normal((B, cout, L))
        row = {"shape": f"B{B} {cin}->{cout} L{L} K{K}"}
        for name, mod in backends.items():
            row[f"{name}_fwd"] = _median(lambda: mod.conv1d(x, w, b), repeat)
            row[f"{name}_bwd"] = _median(lambda: mod.conv1d_grad(x, w, g), repeat)
        rows.append(row)
    return rows


def bench_train_step(repeat: int = 5) -> dict:
    from mbdiff import denoiser, kernels
    from mbdiff.audio import RngStream
    from mbdiff.config import PipelineConfig

    dcfg = PipelineConfig().denoiser
    params = denoiser.init(dcfg, RngStream(0))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((16, 512))
    eps = rng.standard_normal((16, 512))
    t = rng.integers(1, dcfg.T + 1, 16)
    cond = rng.standard_normal((16, 32, dcfg.cond_dim))
    out = {}
    saved = kernels.conv1d, kernels.conv1d_grad
    try:
        for name, mod in available_backends().items():
            kernels.conv1d, kernels.conv1d_grad = mod.conv1d, mod.conv1d_grad
            out[name] = _median(lambda: denoiser.loss_and_grad(params, x, t, eps, cond), repeat)
    finally:
        kernels.conv1d, kernels.conv1d_grad = saved
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    rows = bench_conv(args.repeat)
    names = [k[:-4] for k in rows[0] if k.endswith("_fwd")]
    head = f"{'shape':<26}" + "".join(f"{n + ' fwd':>14}{n + ' bwd':>14}" for n in names)
    if "cython" in names:
        head += f"{'speedup':>10}"
    print(head)
    for r in rows:
        line = f"{r['shape']:<26}" + "".join(f"{r[n + '_fwd'] * 1e3:>12.3f}ms{r[n + '_bwd'] * 1e3:>12.3f}ms" for n in names)
        if "cython" in names:
            tot = lambda n: r[n + "_fwd"] + r[n + "_bwd"]  # noqa: E731
            line += f"{tot('python') / tot('cython'):>9.2f}x"
        print(line)
    step = bench_train_step(max(3, args.repeat // 2))
    print("training step (batch 16, 512 samples): " + ", ".join(f"{k} {v * 1e3:.1f} ms" for k, v in step.items()))


if __name__ == "__main__":
    main()
