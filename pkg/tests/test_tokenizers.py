import numpy as np
from hypothesis import given, settings, strategies as st

from bevfuse import attention, tokenizers as T

W = attention.BackboneWeights.create(attention.AttentionConfig(channels=16, heads=4, hidden=32), num_layers=2)
BOUNDS = (-3.0, -3.0, -2.0, 3.0, 3.0, 2.0)
VOX = (0.3, 0.3, 4.0)


def test_grid_dims_default():
    assert T.grid_dims((0.3, 0.3, 8.0), (-54, -54, -5, 54, 54, 3)) == (360, 360, 1)


def test_out_of_range_points_dropped():
    pts = np.array([[0.0, 0.0, 0.0, 1.0], [9.0, 0.0, 0.0, 1.0], [0.0, 0.0, 2.0, 1.0]])
    tok = T.voxelize(pts, VOX, BOUNDS, W)
    assert len(tok) == 1  # upper bound is exclusive


def test_bev_index_layout():
    pts = np.array([[-2.9, -2.0, 0.0, 0.1]])
    tok = T.voxelize(pts, VOX, BOUNDS, W)
    x, y, _ = tok.coords[0]
    assert tok.bev_index[0] == x * 20 + y


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-2.99, 2.99), st.floats(-2.99, 2.99), st.floats(-1.99, 1.99),
                          st.floats(0, 1)), min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_voxelize_order_invariant(pts, rnd):
    a = np.array(pts)
    b = a.copy()
    idx = list(range(len(b)))
    rnd.shuffle(idx)
    b = b[idx]
    ta, tb = T.voxelize(a, VOX, BOUNDS, W), T.voxelize(b, VOX, BOUNDS, W)
    assert np.array_equal(ta.coords, tb.coords)
    assert np.array_equal(ta.features, tb.features)
    assert len(ta) == len({tuple(np.floor((p[:3] - np.array(BOUNDS[:3])) / VOX).astype(int)) for p in a})


def test_patch_vector_layout():
    img = np.zeros((1, 8, 16, 3))
    img[0, 1, 9, 2] = 1.0  # second patch, row 1, col 1, blue
    vec, shape = T.patch_vectors(img, 8)
    assert shape == (1, 1, 2)
    assert np.flatnonzero(vec[1]).tolist() == [(1 * 8 + 1) * 3 + 2]


def test_patch_coords_are_col_row_view():
    tok = T.patchify(np.zeros((2, 16, 24, 3)), 8, W)
    assert tok.coords[:4].tolist() == [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]
    assert tok.coords[-1].tolist() == [2, 1, 1]
