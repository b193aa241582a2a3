"""Compare the numba and numpy kernel paths.

Per-kernel timings call both namespaces in one process.  The end-to-end case
(taped forward + backward of the default model) runs once per path in a
subprocess, since the active path is fixed at import by COSTATE_LAB_ACCEL.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from costate_lab import _accel

SHAPES = [(32, 16), (512, 32), (4096, 128)]

E2E = r"""
import timeit, numpy as np
from costate_lab import transformer as tf, _accel
from costate_lab import autodiff as ad
ck = tf.init_checkpoint(tf.ModelConfig(), np.random.default_rng(0))
tokens = np.random.default_rng(1).integers(0, 16, (16, 12))
def step():
    with ad.Tape() as tape:
        P = tf.bind(ck, tape)
        lp, _ = tf.sequence_logprobs(P, ck.config, tokens)
        loss = lp.sum()
    tape.backward(loss, wrt=list(P.values()))
step()
print(_accel.K.name, min(timeit.repeat(step, number=3, repeat=%d)) / 3)
"""


def _cases(shape, rng):
    x = rng.standard_normal(shape)
    g = rng.standard_normal(shape)
    gamma, beta = rng.standard_normal(shape[1]), rng.standard_normal(shape[1])
    return {
        "softmax": lambda K: K.softmax(x, None),
        "softmax_bwd": lambda K: K.softmax_bwd(x, g),
        "log_softmax": lambda K: K.log_softmax(x),
        "layernorm": lambda K: K.layernorm(x, gamma, beta, 1e-5),
        "gelu": lambda K: K.gelu(x),
        "gelu_bwd": lambda K: K.gelu_bwd(x, g),
        "rank_average": lambda K: K.rank_average(x.ravel()),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        print("numba not importable; nothing to compare")
        return 1
    nb, npk = _accel.select("numba"), _accel.select("numpy")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'shape':<14}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for shape in SHAPES:
        for name, fn in _cases(shape, rng).items():
            fn(nb)  # compile outside the timing
            n = max(1, 20000 // shape[0])
            t_np = min(timeit.repeat(lambda: fn(npk), number=n, repeat=args.repeat)) / n
            t_nb = min(timeit.repeat(lambda: fn(nb), number=n, repeat=args.repeat)) / n
            print(f"{name:<14}{str(shape):<14}{1e6 * t_np:>12.1f}{1e6 * t_nb:>12.1f}{t_np / t_nb:>10.2f}")
    print("\nend to end: taped forward + backward, default model, batch 16 x 12")
    for path in ("numpy", "numba"):
        env = dict(os.environ, COSTATE_LAB_ACCEL=path)
        out = subprocess.run([sys.executable, "-c", E2E % args.repeat], env=env, capture_output=True, text=True, check=True)
        name, sec = out.stdout.split()
        print(f"  {name:<6} {1e3 * float(sec):8.2f} ms / step")
    return 0


if __name__ == "__main__":
    sys.exit(main())
