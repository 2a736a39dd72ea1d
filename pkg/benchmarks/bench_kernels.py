"""Compare the compiled and pure-Python DP kernels.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from speechllm import kernels


def ctc_case(rng, T, L, V):
    logits = rng.standard_normal((T, V + 1))
    logp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    target = rng.integers(0, V, size=L).astype(np.int64)
    return np.ascontiguousarray(logp), target, V


def edit_case(rng, n, m, V=20):
    return rng.integers(0, V, size=n).astype(np.int64), rng.integers(0, V, size=m).astype(np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the Python fallback is timed")
    cases = [
        ("ctc T=120 L=30", kernels.ctc_forward_backward, ctc_case(rng, 120, 30, 23), "ctc_forward_backward"),
        ("ctc T=500 L=100", kernels.ctc_forward_backward, ctc_case(rng, 500, 100, 23), "ctc_forward_backward"),
        ("edit 30x30", kernels.edit_ops, edit_case(rng, 30, 30), "edit_ops"),
        ("edit 200x200", kernels.edit_ops, edit_case(rng, 200, 200), "edit_ops"),
    ]
    print(f"{'case':<18}" + "".join(f"{name:>14}" for name in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, _, inputs, fn_name in cases:
        times = {}
        for name, mod in backends.items():
            fn = getattr(mod, fn_name)
            n = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*inputs), number=1), 1e-6)))
            times[name] = min(timeit.repeat(lambda: fn(*inputs), number=n, repeat=args.repeat)) / n
        line = f"{label:<18}" + "".join(f"{1e3 * t:>12.3f}ms" for t in times.values())
        if len(times) > 1:
            line += f"{times['python'] / times['cython']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
