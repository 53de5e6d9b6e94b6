"""Camera rig, LiDAR-to-image projection, pseudo depth table, unprojection.

Conventions: pixel ``x`` is the column and ``y`` the row, origin at the
top-left corner. Extrinsics map world to camera; the camera looks along +z.
"""
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels, tensorio

DEPTH_EPS = 1e-6


class EmptyTable(UserWarning):
    """A camera view received no pseudo grid points."""


class ImagePlanePoint(NamedTuple):
    x: float
    y: float
    view: int
    depth: float


@dataclass(frozen=True, eq=False)
class CameraView:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple  # (height, width)

    def __post_init__(self):
        k = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        e = np.array(self.extrinsics, dtype=np.float64).reshape(4, 4)
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(k[2], [0.0, 0.0, 1.0]):
            raise ValueError("intrinsics last row must be (0, 0, 1)")
        rot = e[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("extrinsic rotation is not orthonormal with det +1")
        if not np.allclose(e[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("extrinsics last row must be (0, 0, 0, 1)")
        h, w = (int(v) for v in self.image_size)
        if h <= 0 or w <= 0:
            raise ValueError("image size must be positive")
        k.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", e)
        object.__setattr__(self, "image_size", (h, w))

    @property
    def rotation(self):
        return self.extrinsics[:3, :3]

    @property
    def translation(self):
        return self.extrinsics[:3, 3]

    def project(self, points):
        """Project world points; returns ``(x, y, depth, valid)`` arrays."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.rotation.T + self.translation
        depth = cam[:, 2]
        front = depth > DEPTH_EPS
        safe = np.where(front, depth, 1.0)
        k = self.intrinsics
        x = (k[0, 0] * cam[:, 0] + k[0, 1] * cam[:, 1]) / safe + k[0, 2]
        y = (k[1, 1] * cam[:, 1]) / safe + k[1, 2]
        h, w = self.image_size
        valid = front & (x >= 0) & (x < w) & (y >= 0) & (y < h)
        return x, y, depth, valid

    def unproject(self, x, y, depth):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        d = np.asarray(depth, dtype=np.float64)
        k = self.intrinsics
        yc = (y - k[1, 2]) / k[1, 1]
        xc = (x - k[0, 2] - k[0, 1] * yc) / k[0, 0]
        cam = np.stack([xc * d, yc * d, d], axis=-1)
        return (cam - self.translation) @ self.rotation


@dataclass(frozen=True, eq=False)
class CameraRig:
    views: tuple

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ValueError("a rig needs at least one view")
        object.__setattr__(self, "views", views)

    @property
    def count(self):
        return len(self.views)

    def __len__(self):
        return len(self.views)

    def to_dict(self):
        return {
            "views": [
                {
                    "intrinsics": v.intrinsics.tolist(),
                    "extrinsics": v.extrinsics.tolist(),
                    "image_size": list(v.image_size),
                }
                for v in self.views
            ]
        }

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(
            CameraView(np.array(v["intrinsics"]), np.array(v["extrinsics"]), tuple(v["image_size"]))
            for v in data["views"]
        ))

    def digest(self):
        h = hashlib.sha256()
        for v in self.views:
            h.update(v.intrinsics.astype("<f8").tobytes())
            h.update(v.extrinsics.astype("<f8").tobytes())
            h.update(np.asarray(v.image_size, dtype="<i8").tobytes())
        return h.hexdigest()


def ring_rig(num_views=6, image_size=(256, 704), fov_deg=70.0, height=0.0, radius=0.0):
    """Cameras evenly spaced in yaw, optical axes horizontal, view 0 facing +x."""
    h, w = image_size
    f = (w / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    k = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    views = []
    for b in range(num_views):
        yaw = 2.0 * np.pi * b / num_views
        c, s = np.cos(yaw), np.sin(yaw)
        # rows: camera right, camera down, camera forward (in world axes)
        rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        centre = np.array([radius * c, radius * s, height])
        ext = np.eye(4)
        ext[:3, :3] = rot
        ext[:3, 3] = -rot @ centre
        views.append(CameraView(k, ext, (h, w)))
    return CameraRig(tuple(views))


def project_first_hit(points, rig):
    """Vectorised first-hit projection.

    Returns ``(x, y, view, depth)``; ``view`` is -1 where no camera sees the
    point, and the other fields are NaN there.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    x = np.full(n, np.nan)
    y = np.full(n, np.nan)
    d = np.full(n, np.nan)
    view = np.full(n, -1, dtype=np.int64)
    for b, cam in enumerate(rig.views):
        px, py, pd, ok = cam.project(pts)
        take = ok & (view < 0)
        x[take], y[take], d[take] = px[take], py[take], pd[take]
        view[take] = b
    return x, y, view, d


def project_to_first_hit(coords, rig):
    x, y, view, d = project_first_hit(np.asarray(coords, dtype=np.float64)[None], rig)
    if view[0] < 0:
        return None
    return ImagePlanePoint(float(x[0]), float(y[0]), int(view[0]), float(d[0]))


def unproject(x, y, view, depth, rig):
    if depth <= 0:
        raise ValueError("depth must be positive")
    return rig.views[int(view)].unproject(x, y, depth)


def unproject_batch(x, y, view, depth, rig):
    x = np.asarray(x, dtype=np.float64)
    out = np.full(x.shape + (3,), np.nan)
    view = np.asarray(view)
    for b, cam in enumerate(rig.views):
        sel = view == b
        if sel.any():
            out[sel] = cam.unproject(x[sel], np.asarray(y)[sel], np.asarray(depth)[sel])
    return out


@dataclass
class BucketIndex:
    """Points of one view sorted into square pixel buckets (CSR layout)."""

    xs: np.ndarray
    ys: np.ndarray
    ids: np.ndarray
    starts: np.ndarray
    nbx: int
    nby: int
    size: float

    @classmethod
    def build(cls, x, y, ids, image_size, size):
        h, w = image_size
        nbx = max(1, int(np.ceil(w / size)))
        nby = max(1, int(np.ceil(h / size)))
        bx = np.clip(np.floor(x / size), 0, nbx - 1).astype(np.int64)
        by = np.clip(np.floor(y / size), 0, nby - 1).astype(np.int64)
        key = by * nbx + bx
        order = np.argsort(key, kind="stable")
        starts = np.searchsorted(key[order], np.arange(nbx * nby + 1)).astype(np.int64)
        return cls(x[order].copy(), y[order].copy(), ids[order].copy(), starts, nbx, nby, float(size))

    def kernel_args(self, qx, qy):
        qx = np.ascontiguousarray(qx, dtype=np.float64)
        qy = np.ascontiguousarray(qy, dtype=np.float64)
        return qx, qy, self.xs, self.ys, self.ids, self.starts, self.nbx, self.nby, self.size

    def query(self, qx, qy):
        return kernels.nn_query(*self.kernel_args(qx, qy))


@dataclass
class PseudoDepthTable:
    grid_shape: tuple
    bounds: tuple  # (xmin, ymin, zmin, xmax, ymax, zmax)
    rig_hash: str
    image_sizes: tuple
    x: np.ndarray  # float32, pixel column
    y: np.ndarray  # float32, pixel row
    depth: np.ndarray  # float32, metres
    view: np.ndarray  # int64
    source: np.ndarray  # int64, flat index of the grid cell
    bucket_size: float = 8.0
    index: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.index is None:
            self.index = {}
            for b, size in enumerate(self.image_sizes):
                sel = np.flatnonzero(self.view == b)
                self.index[b] = BucketIndex.build(
                    self.x[sel].astype(np.float64), self.y[sel].astype(np.float64),
                    sel.astype(np.int64), size, self.bucket_size)

    @property
    def num_points(self):
        return len(self.x)

    @property
    def empty_views(self):
        return [b for b, idx in self.index.items() if len(idx.ids) == 0]

    def header(self):
        return {
            "grid_shape": list(self.grid_shape),
            "range": list(self.bounds),
            "rig_hash": self.rig_hash,
            "image_sizes": [list(s) for s in self.image_sizes],
            "bucket_size": self.bucket_size,
        }

    def to_tensors(self):
        head = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        return {
            "header": np.frombuffer(head, dtype=np.uint8),
            "x": self.x,
            "y": self.y,
            "depth": self.depth,
            "view": self.view,
            "source": self.source,
        }

    def to_bytes(self):
        return tensorio.dumps(self.to_tensors())

    @classmethod
    def from_tensors(cls, t):
        head = json.loads(bytes(t["header"]).decode("utf-8"))
        return cls(
            tuple(head["grid_shape"]), tuple(head["range"]), head["rig_hash"],
            tuple(tuple(s) for s in head["image_sizes"]),
            t["x"], t["y"], t["depth"], t["view"], t["source"], head["bucket_size"],
        )

    def matches(self, grid_shape, bounds, rig):
        return (tuple(self.grid_shape) == tuple(int(g) for g in grid_shape)
                and tuple(self.bounds) == tuple(float(b) for b in bounds)
                and self.rig_hash == rig.digest())


def grid_centres(grid_shape, bounds):
    """Cell centres of an L x W x H grid over ``bounds``, C order over (L, W, H)."""
    lo = np.asarray(bounds[:3], dtype=np.float64)
    hi = np.asarray(bounds[3:], dtype=np.float64)
    axes = [lo[a] + (np.arange(grid_shape[a]) + 0.5) * (hi[a] - lo[a]) / grid_shape[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def build_pseudo_depth_table(grid_shape, bounds, rig, bucket_size=8.0):
    grid_shape = tuple(int(g) for g in grid_shape)
    bounds = tuple(float(b) for b in bounds)
    if min(grid_shape) <= 0:
        raise ValueError("grid_shape must be positive")
    if not all(bounds[a + 3] > bounds[a] for a in range(3)):
        raise ValueError("range is degenerate")
    centres = grid_centres(grid_shape, bounds)
    flat = np.arange(len(centres), dtype=np.int64)
    parts = {k: [] for k in ("x", "y", "depth", "view", "source")}
    for b, cam in enumerate(rig.views):
        px, py, pd, ok = cam.project(centres)
        px32 = px[ok].astype(np.float32)
        py32 = py[ok].astype(np.float32)
        pd32 = pd[ok].astype(np.float32)
        h, w = cam.image_size
        # rounding to float32 may push a coordinate onto the far border
        keep = (px32 < w) & (py32 < h) & (px32 >= 0) & (py32 >= 0) & (pd32 > DEPTH_EPS)
        parts["x"].append(px32[keep])
        parts["y"].append(py32[keep])
        parts["depth"].append(pd32[keep])
        parts["view"].append(np.full(int(keep.sum()), b, dtype=np.int64))
        parts["source"].append(flat[ok][keep])
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    table = PseudoDepthTable(
        grid_shape, bounds, rig.digest(), tuple(v.image_size for v in rig.views),
        cat["x"], cat["y"], cat["depth"], cat["view"], cat["source"], float(bucket_size),
    )
    for b in table.empty_views:
        warnings.warn(f"view {b} has no pseudo depth points", EmptyTable, stacklevel=2)
    return table


def nearest_depth_batch(x, y, view, table):
    """Nearest virtual point per query in the same view.

    Returns ``(depth, distance, point_index)``; index -1 and NaN fields when
    the view holds no points.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    view = np.asarray(view, dtype=np.int64)
    n = len(x)
    depth = np.full(n, np.nan)
    dist = np.full(n, np.nan)
    idx = np.full(n, -1, dtype=np.int64)
    for b, bucket in table.index.items():
        sel = np.flatnonzero(view == b)
        if sel.size == 0 or len(bucket.ids) == 0:
            continue
        hit, d2 = bucket.query(x[sel], y[sel])
        idx[sel] = hit
        dist[sel] = np.sqrt(d2)
        depth[sel] = table.depth[hit].astype(np.float64)
    return depth, dist, idx


def nearest_depth(x, y, view, table):
    if view not in table.index:
        raise ValueError(f"view {view} is not in the table")
    depth, dist, idx = nearest_depth_batch([x], [y], [view], table)
    if idx[0] < 0:
        return None
    return float(depth[0]), float(dist[0])


def save_table(path, table):
    tensorio.save(path, table.to_tensors())


def load_table(path):
    return PseudoDepthTable.from_tensors(tensorio.load(path))


_TABLE_CACHE = {}


def cached_table(grid_shape, bounds, rig, cache_dir=None, bucket_size=8.0):
    """Build a table once per (grid, range, rig); optionally persist to disk."""
    import os

    key = (tuple(int(g) for g in grid_shape), tuple(float(b) for b in bounds), rig.digest(), float(bucket_size))
    if key in _TABLE_CACHE:
        return _TABLE_CACHE[key]
    path = None
    if cache_dir is not None:
        name = hashlib.sha256(repr(key).encode()).hexdigest()[:16]
        path = os.path.join(cache_dir, f"pseudo_depth_{name}.utr")
        if os.path.exists(path):
            table = load_table(path)
            if table.matches(grid_shape, bounds, rig):
                _TABLE_CACHE[key] = table
                return table
    table = build_pseudo_depth_table(grid_shape, bounds, rig, bucket_size)
    if path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        save_table(path, table)
    _TABLE_CACHE[key] = table
    return table
