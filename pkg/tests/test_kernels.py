import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings, strategies as st

from bevfuse import _accel, kernels


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 400), min_size=1, max_size=30), st.integers(1, 100))
def test_dsp_slots_agree(counts, tau):
    c = np.array(counts, dtype=np.int64)
    loop, vec = kernels.IMPLEMENTATIONS["dsp_slots"]
    for a, b in zip(loop(c, tau), vec(c, tau)):
        assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_scatter_max_agrees(n, groups, seed):
    g = np.random.default_rng(seed)
    v = g.normal(size=(n, 5))
    grp = g.integers(0, groups, n)
    loop, vec = kernels.IMPLEMENTATIONS["scatter_max"]
    assert np.array_equal(loop(v, grp, groups), vec(v, grp, groups))


def test_numpy_fallback_flag():
    code = ("from bevfuse import _accel, kernels;"
            "print(_accel.USE_NUMBA, kernels.dsp_slots is kernels.IMPLEMENTATIONS['dsp_slots'][1])")
    env = dict(os.environ, BEVFUSE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]


def test_fallback_run_matches(tmp_path):
    # same BEV bytes from both kernel paths on the small preset
    outs = []
    for flag in ("0", "1"):
        d = tmp_path / flag
        env = dict(os.environ, BEVFUSE_DISABLE_NUMBA=flag)
        subprocess.run([sys.executable, "-m", "bevfuse", "run", "--config", "small", "--out", str(d)],
                       env=env, check=True, capture_output=True)
        outs.append((d / "bev.utr").read_bytes())
    assert outs[0] == outs[1]
    assert _accel.USE_NUMBA in (True, False)
