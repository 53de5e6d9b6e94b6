"""Named invariant checks behind ``bevfuse check``.

Every check is a zero-argument function that raises AssertionError on a
violation. ``tests/test_invariants.py`` runs the same registry under
pytest, so each invariant has one named case in both places.
"""
import functools
import io
import json
import os
import tempfile
import time
import traceback
import warnings
from contextlib import redirect_stdout

import numpy as np

from .. import attention, backbone, geometry, kernels, partition, rng, tensorio, tokenizers
from ..config import ConfigError, from_dict, load
from ..tokens import IMAGE, LIDAR, TokenSequence
from . import acceptance, oracles
from .scene import generate_scene, reference_projection, scene_for

REGISTRY = {}


def check(name):
    def wrap(fn):
        if name in REGISTRY:
            raise ValueError(f"duplicate check {name}")
        REGISTRY[name] = fn
        return fn
    return wrap


def near(a, b, tol, what=""):
    err = float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))) if np.size(a) else 0.0
    assert err <= tol, f"{what} max|diff| {err:.3e} > {tol:.0e}"


# -- shared fixtures ---------------------------------------------------------

@functools.lru_cache(maxsize=None)
def small_cfg():
    return load("small")


@functools.lru_cache(maxsize=None)
def small_scene(seed=0):
    return scene_for(small_cfg(), seed)


@functools.lru_cache(maxsize=None)
def small_weights(seed=0):
    cfg = small_cfg()
    return attention.BackboneWeights.create(cfg.attention, cfg.blocks.num_layers, seed=seed)


@functools.lru_cache(maxsize=None)
def small_table():
    cfg = small_cfg()
    return geometry.cached_table(cfg.pseudo_grid, cfg.bounds, small_scene().rig, bucket_size=cfg.bucket_size)


@functools.lru_cache(maxsize=None)
def small_run():
    """Backbone over the small scene, per-block inputs and outputs kept."""
    cfg = small_cfg()
    sc = small_scene()
    model = backbone.Backbone(cfg, small_weights(), sc.rig, small_table())
    tokens = model.tokenize(sc.cloud, sc.images)
    model.forward(tokens, keep=True)
    return model, tokens


def tiny_weights(channels=16, heads=4, hidden=32, layers=2, seed=0, init="uniform"):
    cfg = attention.AttentionConfig(channels=channels, heads=heads, hidden=hidden, init=init)
    return attention.BackboneWeights.create(cfg, num_layers=layers, seed=seed)


def pinhole_rig(views=1, size=(100, 100)):
    k = np.eye(3)
    return geometry.CameraRig(tuple(geometry.CameraView(k, np.eye(4), size) for _ in range(views)))


def random_rig(gen, views=3, size=(120, 160), spread=None):
    """Random rigid cameras; ``spread`` keeps them near the identity pose."""
    out = []
    for _ in range(views):
        if spread is None:
            q, _ = np.linalg.qr(gen.normal(size=(3, 3)))
        else:
            q, r = np.linalg.qr(np.eye(3) + spread * gen.normal(size=(3, 3)))
            q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        e = np.eye(4)
        e[:3, :3] = q
        e[:3, 3] = gen.normal(0, 2 if spread is None else spread, 3)
        f = gen.uniform(60, 200)
        k = np.array([[f, 0, size[1] / 2], [0, f * gen.uniform(0.9, 1.1), size[0] / 2], [0, 0, 1]])
        out.append(geometry.CameraView(k, e, size))
    return geometry.CameraRig(tuple(out))


def random_coords(gen, n, span=(90, 90, 2)):
    return np.stack([gen.integers(0, s, n) for s in span], axis=1)


# -- tensor container --------------------------------------------------------

@check("tensorio.roundtrip")
def _():
    gen = rng.stream(0, "check.tensorio")
    tensors = {
        "scalar": np.array(3.5, dtype=np.float32),
        "empty": np.zeros((0, 4), dtype=np.int64),
        "bytes": gen.integers(0, 255, (3, 2, 5)).astype(np.uint8),
        "ünïcode": gen.normal(size=(7,)).astype(np.float32),
        "ints": gen.integers(-2**40, 2**40, (4, 4)),
    }
    back = tensorio.loads(tensorio.dumps(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes(), k


@check("tensorio.rejects_corruption")
def _():
    blob = tensorio.dumps({"a": np.arange(6, dtype=np.int64)})
    for bad in (b"XXXX" + blob[4:], blob[:-3], blob + b"\0"):
        try:
            tensorio.loads(bad)
        except tensorio.ContainerError:
            continue
        raise AssertionError("corrupt container accepted")


# -- kernels -----------------------------------------------------------------

@check("kernels.loop_equals_numpy")
def _():
    gen = rng.stream(0, "check.kernels")
    vals = gen.normal(size=(500, 8))
    grp = gen.integers(0, 60, 500)
    loop, vec = kernels.IMPLEMENTATIONS["scatter_max"]
    assert np.array_equal(loop(vals, grp, 60), vec(vals, grp, 60))
    counts = gen.integers(0, 300, 40)
    loop, vec = kernels.IMPLEMENTATIONS["dsp_slots"]
    for tau in (1, 7, 90):
        for a, b in zip(loop(counts, tau), vec(counts, tau)):
            assert np.array_equal(a, b)
    tab = small_table()
    qx, qy = gen.uniform(0, 176, 400), gen.uniform(0, 64, 400)
    bucket = tab.index[0]
    loop, vec = kernels.IMPLEMENTATIONS["nn_query"]
    args = bucket.kernel_args(qx, qy)
    for a, b in zip(loop(*args), vec(*args)):
        assert np.array_equal(a, b)


# -- geometry ----------------------------------------------------------------

@check("geometry.pinhole_identity")
def _():
    rig = pinhole_rig()
    hit = geometry.project_to_first_hit([0.0, 0.0, 5.0], rig)
    assert hit is not None and (hit.x, hit.y, hit.view, hit.depth) == (0.0, 0.0, 0, 5.0), hit
    assert np.allclose(geometry.unproject(0.0, 0.0, 0, 5.0, rig), [0, 0, 5], atol=0)


@check("geometry.behind_all_cameras")
def _():
    rig = geometry.ring_rig(6)
    # straight below the rig: depth in every view is ~0 or negative
    assert geometry.project_to_first_hit([0.0, 0.0, -2.0], rig) is None
    assert geometry.project_to_first_hit([0.0, 0.0, -2.0], pinhole_rig()) is None


@check("geometry.first_hit_lowest_view")
def _():
    k = np.array([[50.0, 0, 50], [0, 50, 50], [0, 0, 1]])
    away = np.diag([1.0, -1.0, -1.0, 1.0])  # looks along -z
    views = [geometry.CameraView(k, away if b not in (1, 3) else np.eye(4), (100, 100)) for b in range(6)]
    rig = geometry.CameraRig(tuple(views))
    hit = geometry.project_to_first_hit([0.1, 0.2, 4.0], rig)
    assert hit is not None and hit.view == 1, hit


@check("geometry.first_hit_permutation_invariant")
def _():
    gen = rng.stream(1, "check.perm")
    rig = geometry.ring_rig(6)
    pts = gen.uniform(-30, 30, (2000, 3))
    perm = gen.permutation(len(pts))
    _, _, v, _ = geometry.project_first_hit(pts, rig)
    _, _, vp, _ = geometry.project_first_hit(pts[perm], rig)
    assert np.array_equal(v[perm], vp)
    rv, _, _, _ = reference_projection(pts, rig)
    assert np.array_equal(v, rv)


@check("geometry.roundtrip_random_rigs")
def _():
    gen = rng.stream(2, "check.roundtrip")
    worst = 0.0
    for _ in range(5):
        rig = random_rig(gen)
        pts = gen.uniform(-20, 20, (4000, 3))
        x, y, v, d = geometry.project_first_hit(pts, rig)
        ok = v >= 0
        back = geometry.unproject_batch(x[ok], y[ok], v[ok], d[ok], rig)
        worst = max(worst, float(np.abs(back - pts[ok]).max()))
    assert worst < 1e-6, worst


@check("geometry.reprojection_100")
def _():
    gen = rng.stream(3, "check.reproject")
    for _ in range(100):
        rig = random_rig(gen, views=2)
        b = int(gen.integers(2))
        h, w = rig.views[b].image_size
        x, y, d = gen.uniform(0, w), gen.uniform(0, h), gen.uniform(0.5, 80)
        p = geometry.unproject(x, y, b, d, rig)
        px, py, pd, ok = rig.views[b].project(p[None])
        assert ok[0] and abs(px[0] - x) < 1e-6 and abs(py[0] - y) < 1e-6 and abs(pd[0] - d) < 1e-6


@check("geometry.table_single_cell")
def _():
    k = np.array([[10.0, 0, 5], [0, 10, 5], [0, 0, 1]])
    rig = geometry.CameraRig((geometry.CameraView(k, np.eye(4), (10, 10)),))
    table = geometry.build_pseudo_depth_table((1, 1, 1), (-1, -1, 2, 1, 1, 4), rig)
    assert table.num_points == 1 and float(table.depth[0]) == 3.0


@check("geometry.table_bruteforce_count")
def _():
    gen = rng.stream(4, "check.table")
    rig = random_rig(gen, views=2, size=(60, 80), spread=0.3)
    bounds = (-3, -3, 2, 3, 3, 6)
    table = geometry.build_pseudo_depth_table((4, 4, 2), bounds, rig)
    count = 0
    for i in range(4):
        for j in range(4):
            for k in range(2):
                c = np.array([-3 + (i + 0.5) * 1.5, -3 + (j + 0.5) * 1.5, 2 + (k + 0.5) * 2.0])
                for cam in rig.views:
                    z = cam.extrinsics[2, :3] @ c + cam.extrinsics[2, 3]
                    pc = cam.extrinsics[:3, :3] @ c + cam.extrinsics[:3, 3]
                    u = cam.intrinsics[0] @ pc / z if z > 1e-6 else -1
                    v = cam.intrinsics[1] @ pc / z if z > 1e-6 else -1
                    if z > 1e-6 and 0 <= np.float32(u) < 80 and 0 <= np.float32(v) < 60:
                        count += 1
    assert table.num_points == count, (table.num_points, count)
    assert 0 < table.num_points < 4 * 4 * 2 * 2


@check("geometry.table_points_in_bounds")
def _():
    t = small_table()
    for b, (h, w) in enumerate(t.image_sizes):
        sel = t.view == b
        assert np.all((t.x[sel] >= 0) & (t.x[sel] < w) & (t.y[sel] >= 0) & (t.y[sel] < h))
    assert np.all(t.depth > 0)
    assert t.num_points <= int(np.prod(t.grid_shape)) * len(t.image_sizes)


@check("geometry.table_deterministic_bytes")
def _():
    cfg = small_cfg()
    rig = small_scene().rig
    a = geometry.build_pseudo_depth_table(cfg.pseudo_grid, cfg.bounds, rig, cfg.bucket_size)
    b = geometry.build_pseudo_depth_table(cfg.pseudo_grid, cfg.bounds, rig, cfg.bucket_size)
    assert a.to_bytes() == b.to_bytes()
    back = geometry.PseudoDepthTable.from_tensors(tensorio.loads(a.to_bytes()))
    assert back.to_bytes() == a.to_bytes() and back.matches(cfg.pseudo_grid, cfg.bounds, rig)


@check("geometry.empty_view_warns")
def _():
    k = np.array([[10.0, 0, 5], [0, 10, 5], [0, 0, 1]])
    away = np.diag([1.0, -1.0, -1.0, 1.0])
    rig = geometry.CameraRig((geometry.CameraView(k, np.eye(4), (10, 10)), geometry.CameraView(k, away, (10, 10))))
    with warnings.catch_warnings(record=True) as got:
        warnings.simplefilter("always")
        table = geometry.build_pseudo_depth_table((2, 2, 2), (-1, -1, 2, 1, 1, 4), rig)
    assert any(issubclass(w.category, geometry.EmptyTable) for w in got)
    assert table.empty_views == [1]
    assert geometry.nearest_depth(5.0, 5.0, 1, table) is None


@check("geometry.nearest_exact_hit")
def _():
    t = small_table()
    for i in rng.stream(5, "check.exact").choice(t.num_points, 50, replace=False):
        d, dist = geometry.nearest_depth(float(t.x[i]), float(t.y[i]), int(t.view[i]), t)
        assert dist == 0.0
        _, _, j = oracles.oracle_nearest(t, float(t.x[i]), float(t.y[i]), int(t.view[i]))
        assert d == float(t.depth[j])


@check("geometry.nearest_vs_oracle_500")
def _():
    gen = rng.stream(6, "check.nn500")
    t = small_table()
    keep = np.sort(gen.choice(t.num_points, 500, replace=False))
    sub = geometry.PseudoDepthTable(t.grid_shape, t.bounds, t.rig_hash, t.image_sizes, t.x[keep], t.y[keep],
                                    t.depth[keep], t.view[keep], t.source[keep], t.bucket_size)
    for _ in range(300):
        b = int(gen.integers(len(t.image_sizes)))
        h, w = t.image_sizes[b]
        x, y = gen.uniform(-5, w + 5), gen.uniform(-5, h + 5)
        got = geometry.nearest_depth(x, y, b, sub)
        ref = oracles.oracle_nearest(sub, x, y, b)
        assert got == ref[:2], (got, ref)


@check("geometry.nearest_vs_oracle_1e5")
def _():
    gen = rng.stream(7, "check.nn1e5")
    rig = geometry.ring_rig(2, (64, 176))
    n = 100_000
    x = gen.uniform(0, 176, n).astype(np.float32)
    y = gen.uniform(0, 64, n).astype(np.float32)
    # quantised coordinates make exact ties common
    x[: n // 2] = np.round(x[: n // 2])
    y[: n // 2] = np.round(y[: n // 2])
    view = gen.integers(0, 2, n)
    t = geometry.PseudoDepthTable((1, 1, 1), (0, 0, 0, 1, 1, 1), rig.digest(), ((64, 176), (64, 176)), x, y,
                                  gen.uniform(1, 50, n).astype(np.float32), view, np.arange(n), 8.0)
    qv = gen.integers(0, 2, 400)
    qx = np.round(gen.uniform(0, 176, 400) * 2) / 2
    qy = np.round(gen.uniform(0, 64, 400) * 2) / 2
    fast = geometry.nearest_depth_batch(qx, qy, qv, t)
    ref = oracles.oracle_nearest_many(t, qx, qy, qv)
    for a, b in zip(fast, ref):
        assert np.array_equal(a, b)


# -- tokenizers --------------------------------------------------------------

@check("tokenizers.single_point_voxel")
def _():
    w = tiny_weights()
    tok = tokenizers.voxelize(np.array([[0.15, 0.15, 0.0, 0.5]]), (0.3, 0.3, 8.0), (0, 0, -4, 3, 3, 4), w)
    assert len(tok) == 1 and tok.coords[0].tolist() == [0, 0, 0]


@check("tokenizers.voxel_max_reduction")
def _():
    w = tiny_weights()
    pts = np.array([[0.05, 0.10, 1.0, 0.2], [0.25, 0.01, -3.0, 0.9]])
    bounds = (0, 0, -4, 3, 3, 4)
    tok = tokenizers.voxelize(pts, (0.3, 0.3, 8.0), bounds, w)
    centre = np.array([0.15, 0.15, 0.0])
    inp = np.concatenate([pts[:, :3] - centre, pts[:, 3:]], axis=1)
    emb = inp @ w["vfe.weight"] + w["vfe.bias"]
    near(tok.features[0], np.maximum(emb[0], emb[1]), 1e-12, "voxel max")


@check("tokenizers.voxel_order_invariance")
def _():
    cfg = small_cfg()
    cloud = small_scene().cloud
    w = small_weights()
    a = tokenizers.voxelize(cloud, cfg.voxel_size, cfg.bounds, w)
    perm = rng.stream(8, "check.voxperm").permutation(len(cloud))
    b = tokenizers.voxelize(cloud[perm], cfg.voxel_size, cfg.bounds, w)
    assert np.array_equal(a.coords, b.coords) and np.array_equal(a.features, b.features)


@check("tokenizers.voxel_count_hashset")
def _():
    cfg = small_cfg()
    cloud = small_scene().cloud
    tok = tokenizers.voxelize(cloud, cfg.voxel_size, cfg.bounds, small_weights())
    lo = np.asarray(cfg.bounds[:3])
    seen = set()
    for p in cloud:
        idx = tuple(int(v) for v in np.floor((p[:3] - lo) / np.asarray(cfg.voxel_size)))
        seen.add(idx)
    assert len(tok) == len(seen)
    assert len({tuple(c) for c in tok.coords.tolist()}) == len(tok), "duplicate voxel"


@check("tokenizers.empty_cloud")
def _():
    try:
        tokenizers.voxelize(np.array([[100.0, 0, 0, 0]]), (0.3, 0.3, 8), (0, 0, -4, 3, 3, 4), tiny_weights())
    except tokenizers.EmptyCloud:
        return
    raise AssertionError("EmptyCloud not raised")


@check("tokenizers.patch_shapes")
def _():
    imgs = np.zeros((6, 256, 704, 3))
    vec, shape = tokenizers.patch_vectors(imgs, 8)
    assert vec.shape == (6 * 32 * 88, 192) and shape == (6, 32, 88)


@check("tokenizers.patch_constant_color")
def _():
    w = tiny_weights()
    imgs = np.ones((2, 16, 24, 3)) * np.array([0.2, 0.5, 0.9])
    tok = tokenizers.patchify(imgs, 8, w)
    assert len(tok) == 2 * 2 * 3
    assert np.all(tok.features == tok.features[0])
    assert tok.coords[:, 2].tolist() == [0] * 6 + [1] * 6


@check("tokenizers.patch_bijection")
def _():
    imgs = rng.stream(9, "check.patch").uniform(0, 1, (3, 24, 40, 3))
    vec, shape = tokenizers.patch_vectors(imgs, 8)
    assert np.array_equal(tokenizers.unpatch(vec, shape, 8), imgs)


@check("tokenizers.patch_bad_shape")
def _():
    try:
        tokenizers.patchify(np.zeros((1, 20, 24, 3)), 8, tiny_weights())
    except tokenizers.BadShape:
        return
    raise AssertionError("BadShape not raised")


@check("tokenizers.point_cloud_file_roundtrip")
def _():
    cloud = small_scene().cloud[:100]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.bin")
        tokenizers.write_point_cloud(path, cloud)
        assert np.array_equal(tokenizers.read_point_cloud(path, extra=1), cloud)


# -- partition ---------------------------------------------------------------

@check("partition.window_examples")
def _():
    lid = partition.WindowSpec((30, 30, 1), partition.LIDAR_3D)
    w = partition.assign_windows([[0, 0, 0], [29, 29, 0], [30, 0, 0], [29, 0, 0]], lid)
    assert w[0] == w[1] and w[2] != w[3]
    img = partition.WindowSpec((30, 30, 1), partition.IMAGE_2D)
    w = partition.assign_windows([[4, 4, 0], [4, 4, 1]], img)
    assert w[0] != w[1]


@check("partition.rank_examples")
def _():
    c = np.array([[0, 5, 0], [1, 0, 0]])
    win = np.zeros(2, dtype=np.int64)
    assert partition.inner_window_order(c, win, partition.X_MAJOR).tolist() == [0, 1]
    assert partition.inner_window_order(c, win, partition.Y_MAJOR).tolist() == [1, 0]
    one = np.array([[3, 3, 0]])
    for order in (partition.X_MAJOR, partition.Y_MAJOR):
        assert partition.inner_window_order(one, np.zeros(1, np.int64), order).tolist() == [0]


@check("partition.rank_sort_oracle")
def _():
    gen = rng.stream(10, "check.rank")
    spec = partition.WindowSpec((10, 10, 1))
    c = random_coords(gen, 400, (40, 40, 1))
    win = partition.assign_windows(c, spec)
    for order, key in ((partition.X_MAJOR, (0, 1, 2)), (partition.Y_MAJOR, (1, 0, 2))):
        rank = partition.inner_window_order(c, win, order)
        for w in np.unique(win):
            members = sorted(np.flatnonzero(win == w), key=lambda i: tuple(c[i, list(key)]) + (i,))
            assert [int(rank[i]) for i in members] == list(range(len(members)))


@check("partition.set_counts")
def _():
    spec = partition.WindowSpec((1000, 1000, 1))
    c = np.stack([np.arange(90), np.zeros(90, np.int64), np.zeros(90, np.int64)], axis=1)
    p = partition.dynamic_set_partition(c, spec, 90)
    assert p.sets.shape == (1, 90) and p.sets[0].tolist() == list(range(90)) and p.canonical.all()
    c = np.stack([np.arange(250), np.zeros(250, np.int64), np.zeros(250, np.int64)], axis=1)
    p = partition.dynamic_set_partition(c, spec, 90)
    assert p.sets.shape == (3, 90) and int((~p.canonical).sum()) == 20
    empty = partition.dynamic_set_partition(np.zeros((0, 3), np.int64), spec, 90)
    assert empty.num_sets == 0


@check("partition.slot_oracle")
def _():
    gen = rng.stream(11, "check.slots")
    for tau in (1, 7, 90):
        c = random_coords(gen, 1500, (70, 70, 2))
        spec = partition.WindowSpec((12, 12, 1))
        for order in (partition.X_MAJOR, partition.Y_MAJOR):
            p = partition.dynamic_set_partition(c, spec, tau, order)
            sets, canon = oracles.oracle_partition_slots(c, spec, tau, order)
            assert np.array_equal(p.sets, sets) and np.array_equal(p.canonical, canon)


@check("partition.coverage_and_size")
def _():
    gen = rng.stream(12, "check.coverage")
    for n in (1, 17, 3000):
        c = random_coords(gen, n)
        spec = partition.WindowSpec((30, 30, 1))
        p = partition.dynamic_set_partition(c, spec, 90)
        assert np.array_equal(np.sort(p.sets[p.canonical]), np.arange(n))
        assert set(np.unique(p.sets)) == set(range(n))
        win = partition.assign_windows(c, spec)
        assert np.all(win[p.sets] == p.set_window[:, None])
        assert np.array_equal(np.bincount(p.set_window), -(-np.bincount(win) // 90))


@check("partition.rotation_consistency")
def _():
    c = random_coords(rng.stream(13, "check.rot"), 2000)
    spec = partition.WindowSpec((30, 30, 1))
    x = partition.dynamic_set_partition(c, spec, 90, partition.X_MAJOR)
    y = partition.dynamic_set_partition(c, spec, 90, partition.Y_MAJOR)
    assert np.array_equal(x.set_window, y.set_window) and np.array_equal(x.window_counts, y.window_counts)
    assert not np.array_equal(x.sets, y.sets)


@check("partition.determinism")
def _():
    c = random_coords(rng.stream(14, "check.det"), 2000)
    spec = partition.WindowSpec((30, 30, 1))
    assert partition.dynamic_set_partition(c, spec, 90).to_bytes() == partition.dynamic_set_partition(c, spec, 90).to_bytes()


@check("partition.gather_identity")
def _():
    gen = rng.stream(15, "check.gather")
    c = np.stack([np.arange(16), np.zeros(16, np.int64), np.zeros(16, np.int64)], axis=1)
    f = gen.normal(size=(16, 5))
    p = partition.dynamic_set_partition(c, partition.WindowSpec((100, 100, 1)), 16)
    assert np.array_equal(partition.gather(p, f)[0], f)
    p = partition.dynamic_set_partition(c[:10], partition.WindowSpec((100, 100, 1)), 16)
    g = partition.gather(p, f[:10])[0]
    dup = np.flatnonzero(~p.canonical[0])[0]
    first = int(np.flatnonzero(p.sets[0] == p.sets[0, dup])[0])
    assert np.array_equal(g[dup], g[first])
    try:
        partition.gather(p, f[:5])
    except partition.IndexOutOfRange:
        return
    raise AssertionError("IndexOutOfRange not raised")


@check("partition.scatter_roundtrip_and_garbage")
def _():
    gen = rng.stream(16, "check.scatter")
    c = random_coords(gen, 700)
    f = gen.normal(size=(700, 6))
    p = partition.dynamic_set_partition(c, partition.WindowSpec((30, 30, 1)), 7)
    g = partition.gather(p, f)
    assert np.array_equal(partition.scatter_canonical(p, g), f)
    g[~p.canonical] = 1e9
    assert np.array_equal(partition.scatter_canonical(p, g), f)
    try:
        partition.scatter_canonical(p, g[:-1])
    except partition.ShapeMismatch:
        return
    raise AssertionError("ShapeMismatch not raised")


@check("partition.scatter_sequential_10k")
def _():
    gen = rng.stream(17, "check.scatter10k")
    c = random_coords(gen, 10_000, (300, 300, 1))
    p = partition.dynamic_set_partition(c, partition.WindowSpec((12, 12, 1)), 7, partition.Y_MAJOR)
    out = gen.normal(size=p.sets.shape + (4,))
    assert np.array_equal(partition.scatter_canonical(p, out), oracles.oracle_scatter(p, out))


@check("partition.merged_2d_mixes_modalities")
def _():
    model, tokens = small_run()
    trace = model.traces[1]
    assert trace.kind == "inter2d" and trace.mixed_sets() > 0
    assert model.traces[0].mixed_sets() == 0


# -- attention ---------------------------------------------------------------

@check("attention.pe_zero_and_window_relative")
def _():
    w = tiny_weights()
    pe = attention.positional_encode(np.zeros((3, 3)), w, 0)
    bias = attention.gelu(w["layers.0.pe.fc1.bias"]) @ w["layers.0.pe.fc2.weight"] + w["layers.0.pe.fc2.bias"]
    assert np.all(pe == pe[0]) and np.allclose(pe[0], bias, atol=1e-12)
    spec = partition.WindowSpec((30, 30, 1))
    rel = partition.window_relative([[3, 4, 0], [33, 64, 0]], spec)
    assert np.array_equal(rel[0], rel[1])


@check("attention.pe_finite_difference")
def _():
    w = tiny_weights()
    gen = rng.stream(18, "check.fd")
    for _ in range(20):
        x = gen.uniform(-1, 1, 3)
        jac = attention.pe_jacobian(x, w, 1)
        for a in range(3):
            d = np.zeros(3)
            d[a] = 1e-6
            fd = (attention.positional_encode(x + d, w, 1) - attention.positional_encode(x - d, w, 1)) / 2e-6
            assert np.abs(fd - jac[:, a]).max() <= 1e-4 * max(np.abs(jac).max(), 1e-12)


@check("attention.tau_one")
def _():
    w = tiny_weights()
    f = rng.stream(19, "check.tau1").normal(size=(1, 1, 16))
    c = np.zeros((1, 1, 3))
    out, probs = attention.set_attention_layer(f, c, w, 0, return_probs=True)
    assert np.all(probs == 1.0)
    ref, oprobs = oracles.oracle_dense_attention(f[0], c[0], w, 0)
    assert np.all(oprobs == 1.0)
    near(out[0], ref, 1e-12, "tau=1")


@check("attention.identical_tokens")
def _():
    w = tiny_weights()
    f = np.tile(rng.stream(20, "check.ident").normal(size=16), (1, 9, 1))
    c = np.full((1, 9, 3), 0.25)
    out, probs = attention.set_attention_layer(f, c, w, 0, return_probs=True)
    assert np.abs(out[0] - out[0, 0]).max() == 0.0
    near(probs, 1.0 / 9, 1e-15, "uniform")


@check("attention.dense_oracle")
def _():
    w = tiny_weights(channels=32, heads=4, hidden=64)
    gen = rng.stream(21, "check.dense")
    f = gen.normal(size=(6, 8, 32))
    c = gen.uniform(-1, 1, (6, 8, 3))
    out, probs = attention.set_attention_layer(f, c, w, 1, return_probs=True)
    for s in range(6):
        ref, rp = oracles.oracle_dense_attention(f[s], c[s], w, 1)
        near(out[s], ref, 1e-6, "dense")
        near(probs[s], rp, 1e-12, "probs")
    near(probs.sum(axis=-1), 1.0, 1e-6, "row sums")


@check("attention.set_locality")
def _():
    w = tiny_weights()
    gen = rng.stream(22, "check.locality")
    f = gen.normal(size=(4, 10, 16))
    c = gen.uniform(-1, 1, (4, 10, 3))
    base = attention.set_attention_layer(f, c, w, 0)
    g = f.copy()
    g[1:] = 0.0
    assert np.array_equal(attention.set_attention_layer(g, c, w, 0)[0], base[0])


@check("attention.permutation_equivariance")
def _():
    w = tiny_weights()
    gen = rng.stream(23, "check.perm_eq")
    f = gen.normal(size=(1, 12, 16))
    c = gen.uniform(-1, 1, (1, 12, 3))
    perm = gen.permutation(12)
    a = attention.set_attention_layer(f, c, w, 0)
    b = attention.set_attention_layer(f[:, perm], c[:, perm], w, 0)
    near(a[:, perm], b, 1e-12, "permuted")


@check("attention.batched_equals_separate")
def _():
    w = tiny_weights()
    gen = rng.stream(24, "check.batched")
    lb = (gen.normal(size=(5, 6, 16)), gen.uniform(-1, 1, (5, 6, 3)))
    ib = (gen.normal(size=(3, 6, 16)), gen.uniform(-1, 1, (3, 6, 3)))
    counter = attention.DispatchCounter()
    lo, io_ = attention.batched_layer_over_modalities(lb, ib, w, 0, counter)
    assert counter.total == 1
    near(lo, attention.set_attention_layer(*lb, w, 0), 1e-12, "lidar")
    near(io_, attention.set_attention_layer(*ib, w, 0), 1e-12, "image")
    empty = (np.zeros((0, 6, 16)), np.zeros((0, 6, 3)))
    lo, io_ = attention.batched_layer_over_modalities(lb, empty, w, 0, counter)
    assert io_.shape == (0, 6, 16) and np.array_equal(lo, attention.set_attention_layer(*lb, w, 0))
    try:
        attention.batched_layer_over_modalities(lb, (np.zeros((1, 5, 16)), np.zeros((1, 5, 3))), w, 0, counter)
    except attention.TauMismatch:
        return
    raise AssertionError("TauMismatch not raised")


@check("attention.intra_dispatch_2_vs_4")
def _():
    cfg = small_cfg().replace(blocks={"sequence": ["intra"]})
    sc = small_scene()
    for serial, want in ((False, 2), (True, 4)):
        counter = attention.DispatchCounter()
        backbone.run_backbone(sc.cloud, sc.images, sc.rig, small_weights(), cfg, serial=serial, counter=counter)
        assert counter.total == want, (serial, counter.total)


@check("attention.no_modality_names")
def _():
    w = small_weights()
    for name in w.tensors:
        low = name.lower()
        assert not any(tag in low for tag in ("lidar", "image", "camera", "point_only", "modality")), name


@check("attention.hygiene_20_layers")
def _():
    out = acceptance.criterion_8(quick=True)
    assert out.passed, out.detail


@check("attention.weights_roundtrip")
def _():
    w = small_weights()
    with tempfile.TemporaryDirectory() as tmp:
        path, man = os.path.join(tmp, "w.utr"), os.path.join(tmp, "w.json")
        w.save(path, man)
        back = attention.BackboneWeights.load(path, man)
        with open(man) as fh:
            meta = json.load(fh)
    assert meta["seed"] == w.seed and len(meta["tensors"]) == len(w.tensors)
    for k in w.tensors:
        assert np.array_equal(back[k], w[k]), k


# -- backbone ----------------------------------------------------------------

@check("backbone.token_conservation")
def _():
    model, tokens = small_run()
    for out in model.outputs:
        assert len(out) == len(tokens)
        assert np.array_equal(out.modality, tokens.modality)
        assert np.array_equal(out.coords, tokens.coords)


@check("backbone.passthrough_exact")
def _():
    out = acceptance.criterion_5(quick=True)
    assert out.passed, out.detail


@check("backbone.lidar_empty_intra")
def _():
    cfg = small_cfg().replace(blocks={"sequence": ["intra"]})
    sc = small_scene()
    w = small_weights()
    model = backbone.Backbone(cfg, w, sc.rig)
    image = tokenizers.patchify(sc.images, cfg.patch, w)
    tokens = TokenSequence.concat(TokenSequence.empty(w.cfg.channels), image)
    out = model.forward(tokens)
    assert out.num_image == image.num_image and out.num_lidar == 0


@check("backbone.inter2d_shared_set_and_ablation")
def _():
    model, tokens = small_run()
    before = model.outputs[0]
    trace = model.traces[1]
    li, lc, vis = model.lidar_to_patches(before)
    ii = before.image_idx
    idx = np.concatenate([li[vis], ii])
    coords = np.concatenate([lc[vis], before.coords[ii]])
    spec = model.image_spec
    win = partition.assign_windows(coords, spec)
    lidar_windows = set(win[: int(vis.sum())].tolist())
    part = trace.partitions[0][1]
    mods = before.modality[idx][part.sets]
    assert ((mods == LIDAR).any(axis=1) & (mods == IMAGE).any(axis=1)).any()
    zeroed = before.features.copy()
    zeroed[before.lidar_idx] = 0.0
    a = model.inter2d_block(before, 2).features
    b = model.inter2d_block(before.with_features(zeroed), 2).features
    img_win = win[int(vis.sum()):]
    shared = np.isin(img_win, list(lidar_windows))
    assert np.any(a[ii[shared]] != b[ii[shared]]), "lidar had no influence"
    assert np.array_equal(a[ii[~shared]], b[ii[~shared]]), "leak into image-only windows"


@check("backbone.inter3d_depth_oracle_and_offset")
def _():
    model, tokens = small_run()
    t = model.table
    ii = tokens.image_idx
    c = tokens.coords[ii]
    p = model.cfg.patch
    px, py = (c[:, 0] + 0.5) * p, (c[:, 1] + 0.5) * p
    fast = geometry.nearest_depth_batch(px, py, c[:, 2], t)
    ref = oracles.oracle_nearest_many(t, px, py, c[:, 2])
    for a, b in zip(fast, ref):
        assert np.array_equal(a, b)
    w = model.weights
    bias = attention.gelu(w["offset.fc1.bias"]) @ w["offset.fc2.weight"] + w["offset.fc2.bias"]
    near(attention.offset_features([0.0], w)[0], bias, 1e-12, "offset bias path")
    trace = model.traces[-1]
    assert trace.kind == "inter3d" and trace.mixed_sets() > 0


@check("backbone.depthless_passthrough")
def _():
    model, tokens = small_run()
    t = model.table
    keep = t.view != 0  # view 0 loses every virtual point
    table = geometry.PseudoDepthTable(t.grid_shape, t.bounds, t.rig_hash, t.image_sizes, t.x[keep], t.y[keep],
                                      t.depth[keep], t.view[keep], t.source[keep], t.bucket_size)
    assert table.empty_views == [0]
    m = backbone.Backbone(model.cfg, model.weights, model.rig, table)
    before = model.outputs[2]
    ii, _, _, ok = m.image_to_voxels(before)
    skip = ii[~ok]
    assert len(skip) >= int((before.coords[ii, 2] == 0).sum()) > 0
    after = m.inter3d_block(before, 6)
    assert np.array_equal(after.features[skip], before.features[skip])
    assert not np.array_equal(after.features[ii[ok]], before.features[ii[ok]])


@check("backbone.bev_pool")
def _():
    tok = TokenSequence(np.arange(4.0).reshape(1, 4), np.array([[3, 5, 0]]), np.array([LIDAR], np.uint8),
                        np.array([3 * 10 + 5]))
    grid = backbone.bev_pool(tok, (0.3, 0.3, 8.0), (0, 0, -4, 3, 3, 4))
    assert grid.features.shape == (10, 10, 4) and grid.mask.sum() == 1
    assert np.array_equal(grid.features[3, 5], np.arange(4.0))
    grid.features[3, 5] = 0
    assert not grid.features.any()
    dup = TokenSequence(np.zeros((2, 4)), np.array([[3, 5, 0], [3, 5, 1]]), np.zeros(2, np.uint8), np.array([35, 35]))
    try:
        backbone.bev_pool(dup, (0.3, 0.3, 4.0), (0, 0, -4, 3, 3, 4))
    except backbone.DuplicateCell:
        pass
    else:
        raise AssertionError("DuplicateCell not raised")
    model, tokens = small_run()
    bev = model.bev(model.outputs[-1])
    assert int(bev.mask.sum()) == tokens.num_lidar
    assert not bev.features[~bev.mask].any()


@check("backbone.dispatch_8_and_alt_config")
def _():
    cfg = small_cfg()
    sc = small_scene()
    counter = attention.DispatchCounter()
    a, _ = backbone.run_backbone(sc.cloud, sc.images, sc.rig, small_weights(), cfg, small_table(), counter=counter)
    assert counter.total == 8 == backbone.expected_dispatches(cfg.blocks)["parallel"]
    alt = cfg.replace(blocks={"sequence": ["intra", "inter3d", "inter2d", "inter2d"]})
    b, _ = backbone.run_backbone(sc.cloud, sc.images, sc.rig, small_weights(), alt, small_table())
    assert not np.array_equal(a.features, b.features)
    c, _ = backbone.run_backbone(sc.cloud, sc.images, sc.rig, small_weights(), cfg, small_table())
    assert a.to_bytes() == c.to_bytes()


@check("backbone.serial_equivalence")
def _():
    cfg = small_cfg()
    sc = small_scene(1)
    w = small_weights(1)
    counter = attention.DispatchCounter()
    a, _ = backbone.run_backbone(sc.cloud, sc.images, sc.rig, w, cfg, counter=counter)
    b, total = oracles.oracle_serial_backbone(sc.cloud, sc.images, sc.rig, w, cfg)
    near(a.features, b.features, 1e-6, "serial")
    assert np.array_equal(a.mask, b.mask)
    assert total == backbone.expected_dispatches(cfg.blocks)["serial"] and counter.total == 8
    s, _ = backbone.run_backbone(sc.cloud, sc.images, sc.rig, w, cfg, serial=True)
    near(a.features, s.features, 1e-6, "serial mode")


@check("backbone.lidar_only_serial_identical")
def _():
    cfg = small_cfg()
    sc = small_scene()
    imgs = sc.images[:0]
    a, _ = backbone.run_backbone(sc.cloud, imgs, sc.rig, small_weights(), cfg, small_table())
    b, _ = backbone.run_backbone(sc.cloud, imgs, sc.rig, small_weights(), cfg, small_table(), serial=True)
    assert a.to_bytes() == b.to_bytes()


# -- harness -----------------------------------------------------------------

@check("harness.scene_deterministic")
def _():
    a = generate_scene(0, 800, 3, 40, 2, (32, 88), (-20, -20, -5, 20, 20, 3))
    b = generate_scene(0, 800, 3, 40, 2, (32, 88), (-20, -20, -5, 20, 20, 3))
    assert a.cloud.tobytes() == b.cloud.tobytes() and a.images.tobytes() == b.images.tobytes()
    assert a.images.shape == (2, 32, 88, 3)


@check("harness.scene_truth_reverified")
def _():
    sc = small_scene()
    x, y, v, d = geometry.project_first_hit(sc.cloud[:, :3], sc.rig)
    assert np.array_equal(v, sc.truth_view)
    ok = v >= 0
    near(x[ok], sc.truth_x[ok], 1e-6, "x")
    near(y[ok], sc.truth_y[ok], 1e-6, "y")
    near(d[ok], sc.truth_depth[ok], 1e-6, "depth")


@check("harness.scene_save_load")
def _():
    sc = small_scene()
    with tempfile.TemporaryDirectory() as tmp:
        sc.save(tmp)
        from .scene import load_scene
        back = load_scene(tmp)
    assert np.array_equal(back.cloud, sc.cloud) and np.array_equal(back.images, sc.images)
    assert back.rig.digest() == sc.rig.digest()


@check("harness.config_rejects_unknown_keys")
def _():
    for bad in ({"tokenizer": {"voxel": 1}}, {"extra": {}}, {"rig": {"num_views": 0}}):
        try:
            from_dict(bad, "small")
        except ConfigError:
            continue
        raise AssertionError(f"accepted {bad}")


@check("harness.cli_run_and_stats")
def _():
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        with redirect_stdout(io.StringIO()):
            assert main(["run", "--config", "small", "--out", tmp]) == 0
        with open(os.path.join(tmp, "manifest.json")) as fh:
            man = json.load(fh)
        assert man["dispatches"]["total"] == 8 == man["dispatches"]["expected"]["parallel"]
        buf = io.StringIO()
        with redirect_stdout(buf):
            assert main(["stats", "--config", "small"]) == 0
    report = json.loads(buf.getvalue())
    model, _ = small_run()
    for rep, trace in zip(report, model.traces):
        slots = sum(p.num_sets * p.tau for _, p, _ in trace.partitions)
        count = sum(p.num_tokens for _, p, _ in trace.partitions)
        assert abs(rep["duplication_rate"] - (slots - count) / count) < 1e-12
    with redirect_stdout(io.StringIO()), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        import contextlib
        with contextlib.redirect_stderr(io.StringIO()):
            assert main(["run", "--bogus"]) == 2
            assert main(["run", "--config", "small", "--blocks", "nope", "--out", "unused"]) == 2


# -- runner ------------------------------------------------------------------

def run_checks(names=None, quick=False, acceptance_too=True, out=print):
    """Run the registry (and the acceptance criteria); 1 on any failure."""
    selected = list(REGISTRY) if not names else [n for n in REGISTRY if any(n.startswith(s) for s in names)]
    if names and not selected and not any(s.startswith("acceptance") for s in names):
        out(f"no check matches {names}")
        return 2
    failed = 0
    t_all = time.perf_counter()
    for name in selected:
        t0 = time.perf_counter()
        try:
            REGISTRY[name]()
            out(f"PASS {name} ({time.perf_counter() - t0:.2f}s)")
        except Exception as exc:  # report and keep going
            failed += 1
            msg = str(exc) or type(exc).__name__
            out(f"FAIL {name}: {msg}")
            if not isinstance(exc, AssertionError):
                out(traceback.format_exc().rstrip())
    if acceptance_too and (not names or any(s.startswith("acceptance") for s in names)):
        for crit in acceptance.CRITERIA:
            kwargs = {"quick": quick}
            if crit is acceptance.criterion_3:
                # the check suite asserts the manifest's own per-block accounting
                kwargs["serial_expected"] = backbone.expected_dispatches(load("default").blocks)["serial"]
            res = crit(**kwargs)
            out(f"{'PASS' if res.passed else 'FAIL'} acceptance.{res.number} ({res.seconds:.2f}s) {res.detail}")
            failed += not res.passed
    out(f"{len(selected)} checks{' + acceptance' if acceptance_too else ''}, {failed} failed, "
        f"{time.perf_counter() - t_all:.1f}s")
    return 1 if failed else 0
