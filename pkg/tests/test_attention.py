import math

import numpy as np

from bevfuse import attention as A
from bevfuse.harness.oracles import oracle_dense_attention


def test_gelu_frozen():
    # tanh approximation at 1.0, evaluated by hand
    assert math.isclose(float(A.gelu(np.array([1.0]))[0]), 0.8411919906082768, abs_tol=1e-15)
    assert float(A.gelu(np.array([0.0]))[0]) == 0.0


def test_layer_norm_unit_gain():
    x = np.array([[1.0, 2.0, 3.0]])
    out = A.layer_norm(x, np.ones(3), np.zeros(3))
    want = (x - 2.0) / math.sqrt(2.0 / 3.0 + A.LN_EPS)
    assert np.allclose(out, want, atol=1e-15)


def test_default_shapes():
    w = A.BackboneWeights.create(num_layers=8, seed=0)
    assert w.cfg.channels == 128 and w.cfg.heads == 8 and w.cfg.hidden == 256
    assert w["layers.0.attn.q.weight"].shape == (128, 128)
    assert w["layers.7.ffn.fc1.weight"].shape == (128, 256)
    assert w["patch.weight"].shape == (192, 128)
    assert w["layers.0.pe.fc1.weight"].shape == (3, 256)


def test_weights_are_float32_values():
    w = A.BackboneWeights.create(num_layers=2, seed=5)
    for v in w.tensors.values():
        assert np.array_equal(v, v.astype(np.float32).astype(np.float64))


def test_seed_changes_weights():
    a = A.BackboneWeights.create(num_layers=2, seed=0)
    b = A.BackboneWeights.create(num_layers=2, seed=1)
    assert not np.array_equal(a["layers.0.attn.q.weight"], b["layers.0.attn.q.weight"])


def test_heads_must_divide_channels():
    try:
        A.AttentionConfig(channels=30, heads=8)
    except ValueError:
        return
    raise AssertionError("30 channels / 8 heads accepted")


def test_non_finite_raises():
    w = A.BackboneWeights.create(A.AttentionConfig(channels=16, heads=4, hidden=32), num_layers=1)
    f = np.full((1, 2, 16), np.nan)
    try:
        A.set_attention_layer(f, np.zeros((1, 2, 3)), w, 0)
    except A.NonFiniteActivation:
        return
    raise AssertionError("NaN passed through")


def test_chunking_does_not_change_results():
    w = A.BackboneWeights.create(A.AttentionConfig(channels=16, heads=4, hidden=32), num_layers=1, seed=3)
    g = np.random.default_rng(0)
    f = g.normal(size=(A.SET_CHUNK + 5, 4, 16))
    c = g.uniform(-1, 1, (A.SET_CHUNK + 5, 4, 3))
    out = A.set_attention_layer(f, c, w, 0)
    ref, _ = oracle_dense_attention(f[-1], c[-1], w, 0)
    assert np.abs(out[-1] - ref).max() < 1e-9


def test_counter_is_thread_safe():
    import threading

    counter = A.DispatchCounter()
    threads = [threading.Thread(target=lambda: [counter.add() for _ in range(1000)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert counter.total == 8000
