"""Voxel and patch tokenizers."""
import numpy as np

from . import kernels
from .tokens import IMAGE, LIDAR, TokenSequence


class EmptyCloud(ValueError):
    pass


class BadShape(ValueError):
    pass


def grid_dims(voxel_size, bounds):
    lo = np.asarray(bounds[:3], dtype=np.float64)
    hi = np.asarray(bounds[3:], dtype=np.float64)
    return tuple(int(v) for v in np.round((hi - lo) / np.asarray(voxel_size, dtype=np.float64)))


def voxel_indices(xyz, voxel_size, bounds):
    """Integer voxel index per point and an in-range mask."""
    lo = np.asarray(bounds[:3], dtype=np.float64)
    size = np.asarray(voxel_size, dtype=np.float64)
    dims = np.asarray(grid_dims(voxel_size, bounds))
    idx = np.floor((xyz - lo) / size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    return idx, inside


def voxelize(points, voxel_size, bounds, weights):
    """Dynamic voxel encoding: linear embedding per point, max per voxel.

    ``points`` is ``(n, 3 + K)``: xyz in metres then K extra features.
    Tokens come out sorted by flat voxel index (z slowest, x fastest).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 3:
        raise BadShape("points must be (n, 3 + K)")
    idx, inside = voxel_indices(points[:, :3], voxel_size, bounds)
    if not inside.any():
        raise EmptyCloud("no point falls inside the range")
    points, idx = points[inside], idx[inside]
    gx, gy, _ = grid_dims(voxel_size, bounds)
    flat = (idx[:, 2] * gy + idx[:, 1]) * gx + idx[:, 0]
    keys, group = np.unique(flat, return_inverse=True)

    lo = np.asarray(bounds[:3], dtype=np.float64)
    size = np.asarray(voxel_size, dtype=np.float64)
    centre = lo + (idx + 0.5) * size
    local = np.concatenate([points[:, :3] - centre, points[:, 3:]], axis=1)
    w, b = weights["vfe.weight"], weights["vfe.bias"]
    if w.shape[0] != local.shape[1]:
        raise BadShape(f"embedding expects {w.shape[0]} inputs, points carry {local.shape[1]}")
    # column-wise accumulation keeps every row independent of batch layout
    emb = np.broadcast_to(b, (len(local), len(b))).copy()
    for i in range(local.shape[1]):
        emb += local[:, i:i + 1] * w[i]
    feats = kernels.scatter_max(np.ascontiguousarray(emb), group.astype(np.int64), len(keys))

    coords = np.stack([keys % gx, (keys // gx) % gy, keys // (gx * gy)], axis=1)
    bev = coords[:, 0] * gy + coords[:, 1]
    return TokenSequence(feats, coords, np.full(len(keys), LIDAR), bev)


def patch_vectors(images, patch):
    """(B, H, W, 3) -> (B * H/p * W/p, p*p*3) raw patch vectors, view-major."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise BadShape("images must be (B, H, W, 3)")
    nb, h, w, _ = images.shape
    if h % patch or w % patch:
        raise BadShape(f"image {h}x{w} is not divisible by patch size {patch}")
    rows, cols = h // patch, w // patch
    blocks = images.reshape(nb, rows, patch, cols, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(nb * rows * cols, patch * patch * 3), (nb, rows, cols)


def unpatch(vectors, shape, patch):
    nb, rows, cols = shape
    blocks = np.asarray(vectors).reshape(nb, rows, cols, patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(nb, rows * patch, cols * patch, 3)


def patchify(images, patch, weights):
    raw, (nb, rows, cols) = patch_vectors(images, patch)
    feats = raw @ weights["patch.weight"] + weights["patch.bias"]
    b, r, c = np.meshgrid(np.arange(nb), np.arange(rows), np.arange(cols), indexing="ij")
    coords = np.stack([c.ravel(), r.ravel(), b.ravel()], axis=1)
    n = len(coords)
    return TokenSequence(feats, coords, np.full(n, IMAGE), np.full(n, -1))


def read_point_cloud(path, extra=1):
    """Flat little-endian float32 records of (x, y, z, extras...)."""
    data = np.fromfile(path, dtype="<f4")
    width = 3 + extra
    if data.size % width:
        raise BadShape(f"{path}: {data.size} floats is not a multiple of {width}")
    return data.reshape(-1, width).astype(np.float64)


def write_point_cloud(path, points):
    np.ascontiguousarray(points, dtype="<f4").tofile(path)
