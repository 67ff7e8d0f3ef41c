"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--number 2000]

Reports the best per-call time for the policy forward pass, the
vector-Jacobian product, one box-QP solve and one training epoch on the
bundled 13-bus fixture, for every backend that can be imported.
"""

import argparse
import timeit

import numpy as np

from varnet import _kernels
from varnet.baselines import QPInstance
from varnet.feeder import FeederModel, ieee13
from varnet.policy import Architecture, init_params, inverter_setpoints, vjp
from varnet.scenarios import PEAK_SCALE_FACTOR, AugmentConfig, InputMap, augment, hour_window, measured_scenarios, synthetic_traces
from varnet.trainer import TrainConfig, train


def fixture():
    topo = ieee13()
    model = FeederModel.from_topology(topo)
    imap = InputMap(topo, (2, 3, 7))
    traces = synthetic_traces(topo, seed=0)
    for tr in traces:
        tr.p_load *= PEAK_SCALE_FACTOR
        tr.p_solar *= PEAK_SCALE_FACTOR
    measured = measured_scenarios(traces, imap, *hour_window(13))
    data = augment(measured, AugmentConfig(4, 0.1, 0), imap).scenarios
    return topo, model, data


def use_backend(mod):
    for name in ("forward", "vjp", "box_qp"):
        setattr(_kernels, name, getattr(mod, name))


def bench(fn, number, repeat):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=2000, help="calls per timing for the per-call kernels")
    args = ap.parse_args(argv)

    topo, model, data = fixture()
    arch = Architecture.for_feeder(topo)
    params = init_params(arch, seed=0)
    s = data[0]
    cot = np.array([0.3, -0.2])
    inst = QPInstance.from_scenario(model, s.z)
    lam = np.zeros(2 * model.n)
    lam[10] = 1.5
    c = inst.linear_term(lam)
    hi = inst.qbar[inst.active]
    x0 = np.zeros(inst.active.size)

    cases = {
        "forward": (lambda: inverter_setpoints(params, s.w_u, s.w_local), args.number),
        "vjp": (lambda: vjp(params, s.w_u, s.w_local, cot), args.number),
        "box_qp": (lambda: _kernels.box_qp(inst.H, c, -hi, hi, x0, inst.step, 1e-8, 100_000), max(args.number // 20, 1)),
        "train epoch": (lambda: train(data, arch, model, TrainConfig(epochs=1, dual_step=10.0)), 1),
    }
    backends = _kernels.available_backends()
    results = {}
    for name, mod in sorted(backends.items()):
        use_backend(mod)
        results[name] = {case: bench(fn, n, args.repeat) for case, (fn, n) in cases.items()}
    use_backend(backends[_kernels.BACKEND])

    names = sorted(results)
    print(f"{'kernel':12s}" + "".join(f"{n:>14s}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for case in cases:
        row = f"{case:12s}" + "".join(f"{results[n][case] * 1e6:12.1f}us" for n in names)
        if len(names) == 2:
            row += f"{results['python'][case] / results['cython'][case]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
