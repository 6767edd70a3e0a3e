"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 200]

Shapes match the default experiment: batch 32, hidden 32, a 2x2 antenna
layout (16 real inputs per frame), 8-frame windows.
"""

import argparse
import timeit

import numpy as np

from clchan import channel as ch
from clchan import harness as hn
from clchan import kernels

B, I, H = 32, 16, 32


def kernel_cases(k, rng):
    x, h, c = rng.standard_normal((B, I)), rng.standard_normal((B, H)), rng.standard_normal((B, H))
    Wg, Ug, bg = rng.standard_normal((I, 3 * H)) * 0.3, rng.standard_normal((H, 3 * H)) * 0.3, np.zeros(3 * H)
    Wl, Ul, bl = rng.standard_normal((I, 4 * H)) * 0.3, rng.standard_normal((H, 4 * H)) * 0.3, np.zeros(4 * H)
    gru = k.gru_forward(x, h, Wg, Ug, bg)
    lstm = k.lstm_forward(x, h, c, Wl, Ul, bl)
    dh = rng.standard_normal((B, H))
    omega, phase, amp = rng.uniform(-600, 600, (256, 16)), rng.uniform(0, 6.3, (256, 16)), rng.random((256, 16))
    t = np.arange(9) * 1e-3
    theta, anchors, weights = rng.standard_normal(9000), rng.standard_normal((4, 9000)), rng.random((4, 9000))
    return {
        "gru_forward": lambda: k.gru_forward(x, h, Wg, Ug, bg),
        "gru_backward": lambda: k.gru_backward(dh, x, h, Wg, Ug, *gru[1:]),
        "lstm_forward": lambda: k.lstm_forward(x, h, c, Wl, Ul, bl),
        "lstm_backward": lambda: k.lstm_backward(dh, dh, x, h, c, Wl, Ul, *lstm[2:]),
        "sos_synthesize": lambda: k.sos_synthesize(omega, phase, amp, t),
        "quad_penalty": lambda: k.quad_penalty(theta, anchors, weights, 0.5),
    }


def best_us(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e6


def training_step_us(backend, backbone, repeat):
    ds = hn.make_task_sequence([ch.preset("umi-compact")], 256, 8, 8, seed=0)[0].train
    cfg = hn.TrainConfig(regimen="si", backbone=backbone, epochs=1, batch_size=B, eta=0.01)
    prev = kernels.set_backend(backend)
    try:
        times = []
        for _ in range(repeat):
            from clchan import predictors as pr

            p = pr.predictor_for(ds.scenario, backbone, H, 8, seed=0)
            state = hn.make_regimen_state(cfg, p)
            t0 = timeit.default_timer()
            log = hn.train_task(p, ds, state, cfg)
            times.append((timeit.default_timer() - t0) / log.steps)
        return min(times) * 1e6
    finally:
        kernels.set_backend(prev)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()

    names = [n for n in ("python", "compiled") if n in kernels.available()]
    if "compiled" not in names:
        print("compiled extension not built; only the python backend is timed")
    rows = {}
    for name in names:
        cases = kernel_cases(kernels.get(name), np.random.default_rng(0))
        for case, fn in cases.items():
            rows.setdefault(case, {})[name] = best_us(fn, args.repeat, args.number)
        for backbone in ("gru", "lstm"):
            rows.setdefault(f"train_step[{backbone}]", {})[name] = training_step_us(name, backbone, args.repeat)

    print(f"{'case':<20}" + "".join(f"{n + ' (us)':>16}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for case, r in rows.items():
        line = f"{case:<20}" + "".join(f"{r[n]:>16.1f}" for n in names)
        if len(names) == 2:
            line += f"{r['python'] / r['compiled']:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
