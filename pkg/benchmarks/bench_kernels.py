"""Numba loops vs pure-numpy fallbacks for the three hot kernels.

Both implementations are imported side by side from
``kernels.IMPLEMENTATIONS``, checked for equal output, then timed on
workloads shaped like the default configuration. ``--end-to-end`` also
times a whole ``run`` under each value of BEVFUSE_DISABLE_NUMBA.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]
"""
import argparse
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from bevfuse import _accel, geometry, kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads(seed=0):
    g = np.random.default_rng(seed)
    # ~15k points into ~12k voxels, 128 channels
    vals = g.normal(size=(15000, 128))
    grp = g.integers(0, 12000, 15000)
    yield "scatter_max", (vals, grp, 12000)
    # window populations like a 360x360 grid cut into 30x30 windows
    counts = g.integers(0, 400, 144).astype(np.int64)
    yield "dsp_slots", (counts, 90)
    # one view of the default pseudo depth table, one query per image patch
    rig = geometry.ring_rig()
    table = geometry.cached_table((360, 360, 20), (-54, -54, -5, 54, 54, 3), rig)
    qx = (np.arange(88) + 0.5) * 8
    qy = (np.arange(32) + 0.5) * 8
    qx, qy = np.meshgrid(qx, qy)
    yield "nn_query", table.index[0].kernel_args(qx.ravel(), qy.ravel())


def end_to_end(config):
    rows = []
    for flag in ("0", "1"):
        env = dict(os.environ, BEVFUSE_DISABLE_NUMBA=flag)
        with tempfile.TemporaryDirectory() as tmp:
            t0 = time.perf_counter()
            subprocess.run([sys.executable, "-m", "bevfuse", "run", "--config", config, "--out", tmp],
                           env=env, check=True, capture_output=True)
            rows.append(("numpy" if flag == "1" else "numba", time.perf_counter() - t0))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    ap.add_argument("--config", default="default")
    args = ap.parse_args(argv)

    print(f"numba available: {_accel.numba is not None}, active path: {'numba' if _accel.USE_NUMBA else 'numpy'}")
    print(f"{'kernel':<12} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, call in workloads():
        loop, vec = kernels.IMPLEMENTATIONS[name]
        a, b = loop(*call), vec(*call)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        assert all(np.array_equal(x, y) for x, y in zip(a, b)), name
        t_loop = best_of(lambda: loop(*call), args.repeat)
        t_vec = best_of(lambda: vec(*call), args.repeat)
        print(f"{name:<12} {t_loop * 1e3:>10.2f} {t_vec * 1e3:>10.2f} {t_vec / t_loop:>7.1f}x")
    if args.end_to_end:
        for label, sec in end_to_end(args.config):
            print(f"run --config {args.config} [{label}]: {sec:.2f}s (includes interpreter start and jit/cache load)")


if __name__ == "__main__":
    main()
