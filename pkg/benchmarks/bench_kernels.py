"""Time the numba and numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--repeat N] [--e2e]

Prints a table of median call times per kernel. ``--e2e`` also times one
PFedBA toy experiment under each backend (run in subprocesses, since the
backend is fixed at import time).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pflsim import _kernels as K
from pflsim.models import MlpConfig, init_model


def _cases(rng):
    cfg = MlpConfig(16, (32, 32), 4)
    sizes = np.asarray(cfg.sizes, dtype=np.int64)
    p = init_model(cfg, 0)
    Xb, yb = rng.random((16, 16)), rng.integers(0, 4, 16)
    Xp, yp = rng.random((340, 16)), rng.integers(0, 4, 340)
    Xq = rng.random((340, 16))
    V = rng.normal(size=(10, cfg.num_params))
    return [
        ("logits (16 rows)", K.np_logits, K.nb_logits, (p, sizes, Xb)),
        ("loss_grad (16 rows)", K.np_loss_grad, K.nb_loss_grad, (p, sizes, Xb, yb)),
        ("per_example_grads (16)", K.np_per_example_grads, K.nb_per_example_grads, (p, sizes, Xb, yb)),
        ("input_grad (340 rows)", K.np_input_grad, K.nb_input_grad, (p, sizes, Xp, yp)),
        ("grad_diff_norms (340)", K.np_grad_diff_norms, K.nb_grad_diff_norms, (p, sizes, Xq, yp, Xp, yp)),
        ("pairwise_sq_dists (10)", K.np_pairwise_sq_dists, K.nb_pairwise_sq_dists, (V,)),
    ]


def _median_time(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    number = 20
    times = timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)
    return float(np.median(times)) / number


def _e2e(numba_on):
    env = dict(os.environ, PFLSIM_NUMBA="1" if numba_on else "0")
    code = ("import time; from pflsim.config import ExperimentConfig; from pflsim.experiment import run_experiment; "
            "cfg = ExperimentConfig().with_overrides({'attack.kind': 'pfedba'}); run_experiment(cfg); "
            "t = time.perf_counter(); run_experiment(cfg); print(time.perf_counter() - t)")
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--e2e", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'numpy':>12s} {'numba':>12s} {'speedup':>8s}")
    for name, f_np, f_nb, fargs in _cases(rng):
        a, b = f_np(*fargs), f_nb(*fargs)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.allclose(u, v, rtol=1e-9, atol=1e-12), name
        t_np = _median_time(f_np, fargs, args.repeat)
        t_nb = _median_time(f_nb, fargs, args.repeat)
        print(f"{name:26s} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us {t_np / t_nb:7.2f}x")
    if args.e2e:
        t_np, t_nb = _e2e(False), _e2e(True)
        print(f"{'pfedba toy run (e2e)':26s} {t_np:11.2f}s {t_nb:11.2f}s {t_np / t_nb:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
