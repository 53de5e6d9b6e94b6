import math

import numpy as np
from hypothesis import given, settings, strategies as st

from bevfuse import geometry as G
from bevfuse.harness.scene import reference_projection


def test_ring_rig_focal_frozen():
    # 704 px wide, 70 degree field of view: f = 352 / tan(35 deg)
    rig = G.ring_rig()
    assert rig.count == 6
    assert math.isclose(rig.views[0].intrinsics[0, 0], 502.70809837322435, rel_tol=0, abs_tol=1e-9)


def test_view_zero_faces_plus_x():
    hit = G.project_to_first_hit([10.0, 0.0, 0.0], G.ring_rig())
    assert hit.view == 0 and hit.depth == 10.0
    assert abs(hit.x - 352) < 1e-9 and abs(hit.y - 128) < 1e-9


def test_bad_rotation_rejected():
    e = np.eye(4)
    e[0, 0] = -1.0  # det -1
    for ext in (e, np.diag([2.0, 1, 1, 1])):
        try:
            G.CameraView(np.eye(3), ext, (10, 10))
        except ValueError:
            continue
        raise AssertionError("non-rigid extrinsic accepted")


def test_bad_focal_rejected():
    try:
        G.CameraView(np.diag([0.0, 1.0, 1.0]), np.eye(4), (10, 10))
    except ValueError:
        return
    raise AssertionError("zero focal accepted")


def test_rig_dict_roundtrip():
    rig = G.ring_rig(4, (64, 176))
    assert G.CameraRig.from_dict(rig.to_dict()).digest() == rig.digest()


@settings(max_examples=80, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-4, 2))
def test_projection_matches_reference(x, y, z):
    rig = G.ring_rig()
    p = np.array([[x, y, z]])
    px, py, v, d = G.project_first_hit(p, rig)
    rv, rx, ry, rd = reference_projection(p, rig)
    assert v[0] == rv[0]
    if v[0] >= 0:
        assert abs(px[0] - rx[0]) < 1e-6 and abs(py[0] - ry[0]) < 1e-6 and abs(d[0] - rd[0]) < 1e-6
        back = G.unproject(px[0], py[0], v[0], d[0], rig)
        assert np.abs(back - p[0]).max() < 1e-6


def test_disk_cache_reuses_table(tmp_path):
    rig = G.ring_rig(2, (32, 88))
    a = G.cached_table((10, 10, 4), (-10, -10, -2, 10, 10, 2), rig, cache_dir=str(tmp_path))
    G._TABLE_CACHE.clear()
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    b = G.cached_table((10, 10, 4), (-10, -10, -2, 10, 10, 2), rig, cache_dir=str(tmp_path))
    assert a.to_bytes() == b.to_bytes()
    other = G.ring_rig(3, (32, 88))
    assert not b.matches((10, 10, 4), (-10, -10, -2, 10, 10, 2), other)
