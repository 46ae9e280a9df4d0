"""Compare the compiled im2col/col2im kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times each kernel on the activation shapes of a 32x32 training batch, then a
full training step with each backend swapped in.
"""
import argparse
import time
import timeit

import numpy as np

from dualdiff import _core
from dualdiff._core import _fallback
from dualdiff.config import TrainingConfig
from dualdiff.data import synth_dataset
from dualdiff.pipeline import AdamWState, build_model, schedule_for, substream, train_step

SHAPES = [(9, 8, 32, 32), (24, 8, 32, 32), (16, 8, 16, 16), (32, 8, 8, 8)]


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        x = rng.standard_normal(shape)
        cols = rng.standard_normal((shape[0] * 9, shape[1] * shape[2] * shape[3]))
        for name, fast, slow, args in (
            ("im2col", _core.im2col3x3, _fallback.im2col3x3, (x,)),
            ("col2im", _core.col2im3x3, _fallback.col2im3x3, (cols, *shape)),
        ):
            t_fast = best(lambda: fast(*args), repeat)
            t_slow = best(lambda: slow(*args), repeat)
            rows.append((name, shape, t_fast, t_slow))
    return rows


def train_step_times(rounds, backends):
    """Best step time per backend, alternating backends each round to cancel drift.

    Also returns the share of each step spent inside the two kernels.
    """
    cfg = TrainingConfig(learning_rate=2e-3)
    model = build_model(cfg)
    opt = AdamWState.zeros(model.params.size)
    batch = synth_dataset(cfg.batch_size, 32, 0)
    sched = schedule_for(cfg)
    saved = _core.im2col3x3, _core.col2im3x3
    times = {name: [] for name in backends}
    share = {name: [] for name in backends}
    try:
        for r in range(rounds):
            for name, (im2col, col2im) in backends.items():
                spent = [0.0]

                def timed(fn):
                    def wrapper(*args):
                        t0 = time.perf_counter()
                        out = fn(*args)
                        spent[0] += time.perf_counter() - t0
                        return out
                    return wrapper

                _core.im2col3x3, _core.col2im3x3 = timed(im2col), timed(col2im)
                rng = substream(r, "train")
                t0 = time.perf_counter()
                train_step(batch, model, opt, cfg, sched, rng)
                elapsed = time.perf_counter() - t0
                times[name].append(elapsed)
                share[name].append(spent[0] / elapsed)
    finally:
        _core.im2col3x3, _core.col2im3x3 = saved
    return {name: (min(times[name]), float(np.median(share[name]))) for name in backends}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    print(f"backend selected at import: {_core.BACKEND}")
    if _core.BACKEND != "compiled":
        print("compiled extension unavailable; both columns use the fallback")
    print(f"{'kernel':8} {'shape (C,N,H,W)':18} {'compiled ms':>12} {'fallback ms':>12} {'speedup':>8}")
    for name, shape, t_fast, t_slow in kernel_table(args.repeat):
        print(f"{name:8} {str(shape):18} {1e3 * t_fast:12.3f} {1e3 * t_slow:12.3f} {t_slow / t_fast:8.2f}")
    res = train_step_times(args.repeat, {
        "compiled": (_core.im2col3x3, _core.col2im3x3),
        "fallback": (_fallback.im2col3x3, _fallback.col2im3x3),
    })
    (fast, fast_share), (slow, slow_share) = res["compiled"], res["fallback"]
    print(f"train step (batch 8, 32x32): compiled {1e3 * fast:.1f} ms ({100 * fast_share:.0f}% in kernels), "
          f"fallback {1e3 * slow:.1f} ms ({100 * slow_share:.0f}% in kernels), speedup {slow / fast:.2f}")


if __name__ == "__main__":
    main()
