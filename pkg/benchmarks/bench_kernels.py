"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py            # per-kernel timings
    python benchmarks/bench_kernels.py --steps 200  # also time learned-head training steps per backend
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from riskmeta import _kernels as K

_STEP_SNIPPET = """
import time
import numpy as np
from riskmeta import _kernels, data, models, risk, trainer
ds = data.gen_blobs(0, 5000, 10, 20, 1.2)
view = data.split_90_5_5(ds, 0).training_view()
spec = models.MlpSpec([20, 64, 10])
cfg = trainer.TrainerConfig(total_steps={steps}, early_stopping=False)
ev = risk.RiskFunctional("expected_value")
trainer.train_learned(spec, models.init_params(spec), view, ev, trainer.TrainerConfig(total_steps=2, early_stopping=False))
t = time.perf_counter()
trainer.train_learned(spec, models.init_params(spec), view, ev, cfg)
print(_kernels.backend(), (time.perf_counter() - t) / {steps})
"""


def _time(fn, *args, number):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=5)) / number


def kernel_table():
    rng = np.random.default_rng(0)
    cases = [
        ("logsumexp_rows 32x10", "logsumexp_rows", (rng.normal(size=(32, 10)),)),
        ("logsumexp_rows 1000x10", "logsumexp_rows", (rng.normal(size=(1000, 10)),)),
        ("cross_entropy_rows 256x10", "cross_entropy_rows",
         (rng.normal(size=(256, 10)), rng.integers(0, 10, size=256))),
        ("argsort_desc 32", "argsort_desc", (rng.exponential(size=32),)),
        ("argsort_desc 256", "argsort_desc", (rng.exponential(size=256),)),
        ("max_ranks 1000", "max_ranks", (rng.exponential(size=1000),)),
        ("argmax_rows 1000x10", "argmax_rows", (rng.normal(size=(1000, 10)),)),
    ]
    print(f"{'kernel':28s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, name, args in cases:
        t_np = _time(getattr(K, "_np_" + name), *args, number=2000)
        if K.HAS_NUMBA:
            t_nb = _time(getattr(K, "_nb_" + name), *args, number=2000)
            print(f"{label:28s} {1e6 * t_np:10.2f} {1e6 * t_nb:10.2f} {t_np / t_nb:7.2f}x")
        else:
            print(f"{label:28s} {1e6 * t_np:10.2f} {'n/a':>10s}")


def step_table(steps):
    for disable in ("0", "1"):
        env = dict(os.environ, RISKMETA_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", _STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"learned-head step, {out[0]:5s} backend: {1e3 * float(out[1]):.2f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--steps", type=int, default=0, help="also time this many learned-head training steps")
    args = p.parse_args()
    kernel_table()
    if args.steps:
        step_table(args.steps)


if __name__ == "__main__":
    main()
