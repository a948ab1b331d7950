"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Uses the bundled IEEE 39-bus operating point for the network kernels.
"""
import argparse
import timeit

import numpy as np

from stochmargin import kernels
from stochmargin.integrator import System
from stochmargin.io import scenario_from_case
from stochmargin.network import _kernel_args


def network_args():
    sys_ = System(scenario_from_case("ieee39_reduced.json"))
    st, _, _ = sys_.initial_state(0)
    pvpq, pq = st.inj.index_sets()
    return _kernel_args(st.Y, st.inj, st.y, pvpq, pq)


def bench(fn, args, repeat, copy_vm=False):
    if copy_vm:
        # newton updates the voltages in place
        def call():
            a = list(args)
            a[2], a[3] = a[2].copy(), a[3].copy()
            fn(*a)
    else:
        def call():
            fn(*args)
    call()  # compile / warm up
    return min(timeit.repeat(call, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    n = ap.parse_args().repeat

    rng = np.random.default_rng(0)
    normals = rng.standard_normal(200_000)
    ou = (0.1, 0.95, 0.05 * np.sqrt(2 * 0.05), normals)
    net = network_args()
    flat = net[:2] + tuple(a.copy() for a in net[2:4]) + net[4:]
    # a flat start so Newton has real work to do
    flat[2][:] = 1.0
    flat[3][:] = 0.0
    newton = net + (1e-8, 20)

    cases = [
        ("ou_path (2e5 steps)", kernels.ou_path_numba, kernels.ou_path_numpy, ou, False),
        ("mismatch (39 bus)", kernels.mismatch_numba, kernels.mismatch_numpy, net, False),
        ("jacobian (39 bus)", kernels.jacobian_numba, kernels.jacobian_numpy, net, False),
        ("newton, warm start", kernels.newton_numba, kernels.newton_numpy, newton, True),
        ("newton, flat start", kernels.newton_numba, kernels.newton_numpy, flat + (1e-8, 20), True),
    ]
    print(f"{'kernel':<22}{'numba [us]':>12}{'numpy [us]':>12}{'speed-up':>10}")
    for name, fa, fb, args, inplace in cases:
        ta = bench(fa, args, n, inplace)
        tb = bench(fb, args, n, inplace)
        print(f"{name:<22}{ta * 1e6:12.1f}{tb * 1e6:12.1f}{tb / ta:10.1f}")


if __name__ == "__main__":
    main()
