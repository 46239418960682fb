"""Numba vs numpy timings for the hot kernels and for one training step.

    python3 benchmarks/bench_kernels.py [--repeat N] [--no-step]

Kernel timings call the ``*_nb`` and ``*_np`` implementations directly, after
one warm-up call so JIT compilation is excluded. The step timing runs a fresh
interpreter per backend with ``SIGMA_MATCH_NUMBA`` set accordingly.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sigma_match import _kernels as K

STEP_SNIPPET = """
import time
from sigma_match.config import RunConfig
from sigma_match.engine import TrainState, train_step
st = TrainState.create(RunConfig(seed=0))
for _ in range(3):
    st, _ = train_step(st, st.next_batch())
t = time.perf_counter()
for _ in range({n}):
    st, _ = train_step(st, st.next_batch())
print((time.perf_counter() - t) / {n})
"""


def cases(rng):
    for n in (9, 40, 100):
        x = rng.standard_normal((n, n))
        out, hist = K.sinkhorn_forward_np(x, 20)
        g = rng.standard_normal((n, n))
        yield f"sinkhorn fwd {n}x{n}", (K.sinkhorn_forward_nb, K.sinkhorn_forward_np), (x, 20)
        yield f"sinkhorn bwd {n}x{n}", (K.sinkhorn_backward_nb, K.sinkhorn_backward_np), (g, out, hist)
    for n, h in ((40, 64), (100, 64)):
        a, b = rng.standard_normal((n, h)), rng.standard_normal((n, h))
        w, g = rng.standard_normal(h), rng.standard_normal((n, n))
        yield f"pairwise mlp fwd {n}x{n}x{h}", (K.pairwise_mlp_forward_nb, K.pairwise_mlp_forward_np), (a, b, w, 0.1)
        yield f"pairwise mlp bwd {n}x{n}x{h}", (K.pairwise_mlp_backward_nb, K.pairwise_mlp_backward_np), (g, a, b, w)
    for n in (9, 100):
        c = rng.random((n, n))
        yield f"hungarian {n}x{n}", (K.hungarian_nb, K.hungarian_np), (c,)


def best_of(fn, args, repeat):
    fn(*args)
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def step_time(numba_on, n):
    env = dict(os.environ, SIGMA_MATCH_NUMBA="1" if numba_on else "0")
    res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--no-step", action="store_true")
    args = p.parse_args(argv)
    if not K._HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    print(f"{'kernel':32s} {'numba':>11s} {'numpy':>11s} {'speedup':>8s}")
    for name, (nb, npf), a in cases(np.random.default_rng(0)):
        t_nb, t_np = best_of(nb, a, args.repeat), best_of(npf, a, args.repeat)
        print(f"{name:32s} {t_nb * 1e6:9.1f}us {t_np * 1e6:9.1f}us {t_np / t_nb:7.1f}x")
    if not args.no_step:
        t_nb, t_np = step_time(True, args.steps), step_time(False, args.steps)
        print(f"{'train step (defaults)':32s} {t_nb * 1e3:9.1f}ms {t_np * 1e3:9.1f}ms {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
