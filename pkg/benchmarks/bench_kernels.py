"""Time the compiled depthwise kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--json out.json]

Shapes cover the widest depthwise layer of the default model on a batch of
10 x 10 windows plus two smaller layers. Each figure is the best of
``--repeats`` single calls.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from hsiwin import kernels

CASES = [
    # (N, C, H, W) of the depthwise input before padding
    (64, 160, 10, 10),
    (64, 48, 8, 8),
    (16, 256, 12, 12),
]


def bench_case(be, shape, repeats, rng):
    n, c, h, w = shape
    xp = rng.normal(size=(n, c, h + 2, w + 2)).astype(np.float32)
    k = rng.normal(size=(c, 3, 3)).astype(np.float32)
    g = rng.normal(size=(n, c, h, w)).astype(np.float32)
    ops = {
        "forward": lambda: be.dw_forward(xp, k, 1),
        "grad_input": lambda: be.dw_grad_input(g, k, 1, h + 2, w + 2),
        "grad_kernel": lambda: be.dw_grad_kernel(g, xp, 3, 3, 1),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeats)) for name, fn in ops.items()}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--json", help="write raw timings here")
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "native" not in backends:
        print("compiled kernels are not built; only the fallback can be timed", file=sys.stderr)
    results = []
    for shape in CASES:
        row = {"shape": list(shape)}
        for name in backends:
            row[name] = bench_case(kernels.get_backend(name), shape, args.repeats, np.random.Generator(np.random.PCG64(0)))
        results.append(row)

    print(f"{'shape':>20} {'op':>12} " + " ".join(f"{b + ' ms':>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for row in results:
        for op in ("forward", "grad_input", "grad_kernel"):
            times = [row[b][op] * 1e3 for b in backends]
            line = f"{'x'.join(map(str, row['shape'])):>20} {op:>12} " + " ".join(f"{t:12.3f}" for t in times)
            if len(times) > 1:
                line += f"   {times[1] / times[0]:6.2f}x"
            print(line)

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"backends": backends, "results": results}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
