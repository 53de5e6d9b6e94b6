"""Block sequence (intra, inter-2D, inter-3D) and BEV pooling."""
import time
from dataclasses import dataclass, field

import numpy as np

from . import attention, geometry, partition, tensorio
from .partition import IMAGE_2D, LIDAR_3D, WindowSpec, X_MAJOR, Y_MAJOR
from .tokenizers import grid_dims, patchify, voxel_indices, voxelize
from .tokens import TokenSequence


class DuplicateCell(ValueError):
    pass


@dataclass
class BevGrid:
    features: np.ndarray  # (gx, gy, C), indexed [x, y]
    mask: np.ndarray      # (gx, gy) bool
    cell_size: tuple
    origin: tuple

    def to_tensors(self):
        return {
            "features": self.features.astype(np.float32),
            "mask": self.mask.astype(np.uint8),
            "cell_size": np.asarray(self.cell_size, dtype=np.float32),
            "origin": np.asarray(self.origin, dtype=np.float32),
        }

    def to_bytes(self):
        return tensorio.dumps(self.to_tensors())


@dataclass
class BlockTrace:
    """What one block did: partitions, dispatches, mixed sets, timing."""

    kind: str
    dispatches: int = 0
    partitions: list = field(default_factory=list)  # (label, SetPartition, modality per token)
    seconds: float = 0.0

    def mixed_sets(self):
        total = 0
        for _, part, modality in self.partitions:
            if part.num_sets:
                m = modality[part.sets]
                total += int((m.min(axis=1) != m.max(axis=1)).sum())
        return total


def layer_order(i):
    return X_MAJOR if i % 2 == 0 else Y_MAJOR


def expected_dispatches(blocks):
    """Dispatch totals a block config should issue: parallel and serial reference."""
    lpb = blocks.layers_per_block
    return {
        "parallel": lpb * len(blocks.sequence),
        "serial": sum(2 * lpb if k == "intra" else lpb for k in blocks.sequence),
    }


def lidar_centres(coords, voxel_size, bounds):
    lo = np.asarray(bounds[:3], dtype=np.float64)
    return lo + (np.asarray(coords, dtype=np.float64) + 0.5) * np.asarray(voxel_size, dtype=np.float64)


class Backbone:
    """Runs a configured block sequence on a token sequence.

    ``serial=True`` is the reference path: intra blocks dispatch each
    modality on its own instead of fusing both into one call.
    """

    def __init__(self, cfg, weights, rig, table=None, serial=False, counter=None):
        self.cfg = cfg
        self.weights = weights
        self.rig = rig
        self.table = table
        self.serial = serial
        self.counter = counter or attention.DispatchCounter()
        b = cfg.blocks
        self.lidar_spec = WindowSpec(b.lidar_window, LIDAR_3D)
        self.image_spec = WindowSpec(b.image_window, IMAGE_2D)
        self.traces = []
        self._trace = None
        if weights.num_layers < b.num_layers:
            raise ValueError(f"weights hold {weights.num_layers} layers, blocks need {b.num_layers}")

    # -- tokenization -------------------------------------------------------

    def tokenize(self, points, images):
        lidar = voxelize(points, self.cfg.voxel_size, self.cfg.bounds, self.weights)
        image = patchify(images, self.cfg.patch, self.weights)
        return TokenSequence.concat(lidar, image)

    # -- shared layer loop --------------------------------------------------

    def _dispatch(self, feats, coords, layer):
        self.counter.add(1)
        self._trace.dispatches += 1
        return attention.set_attention_layer(feats, coords, self.weights, layer)

    def _run_groups(self, features, groups, first_layer, label):
        """Attention layers over one or more token groups.

        ``groups`` is a list of (token index array, coords, WindowSpec).
        Parallel mode fuses all groups' sets into one dispatch per layer;
        serial mode dispatches each group separately.
        """
        tau = self.cfg.blocks.tau
        if self._trace is None:
            # block called on its own, outside forward()
            self._trace = BlockTrace(label)
        feats = features.copy()
        for i in range(self.cfg.blocks.layers_per_block):
            order = layer_order(i)
            layer = first_layer + i
            blocks = []
            for idx, coords, spec in groups:
                part = partition.dynamic_set_partition(coords, spec, tau, order)
                self._trace.partitions.append((f"{label}/{order}", part, self._modality[idx]))
                f, c = partition.gather(part, feats[idx], partition.window_relative(coords, spec))
                blocks.append((idx, part, f, c))
            if self.serial or len(blocks) == 1:
                outs = [self._dispatch(f, c, layer) for _, _, f, c in blocks]
            elif len(blocks) == 2:
                outs = attention.batched_layer_over_modalities(
                    blocks[0][2:], blocks[1][2:], self.weights, layer, self.counter)
                self._trace.dispatches += 1
            else:
                fused = self._dispatch(np.concatenate([b[2] for b in blocks]),
                                       np.concatenate([b[3] for b in blocks]), layer)
                cuts = np.cumsum([len(b[2]) for b in blocks])[:-1]
                outs = np.split(fused, cuts)
            for (idx, part, _, _), out in zip(blocks, outs):
                feats[idx] = partition.scatter_canonical(part, out)
        return feats

    # -- blocks -------------------------------------------------------------

    def intra_block(self, tokens, first_layer):
        self._modality = tokens.modality
        li, ii = tokens.lidar_idx, tokens.image_idx
        groups = [(li, tokens.coords[li], self.lidar_spec), (ii, tokens.coords[ii], self.image_spec)]
        feats = self._run_groups(tokens.features, groups, first_layer, "intra")
        return tokens.with_features(feats)

    def lidar_to_patches(self, tokens):
        """Patch-grid (col, row, view) of every lidar token, and its visibility."""
        li = tokens.lidar_idx
        xyz = lidar_centres(tokens.coords[li], self.cfg.voxel_size, self.cfg.bounds)
        px, py, view, _ = geometry.project_first_hit(xyz, self.rig)
        vis = view >= 0
        p = self.cfg.patch
        coords = np.zeros((len(li), 3), dtype=np.int64)
        coords[vis, 0] = np.floor(px[vis] / p)
        coords[vis, 1] = np.floor(py[vis] / p)
        coords[vis, 2] = view[vis]
        return li, coords, vis

    def inter2d_block(self, tokens, first_layer):
        self._modality = tokens.modality
        li, lcoords, vis = self.lidar_to_patches(tokens)
        ii = tokens.image_idx
        idx = np.concatenate([li[vis], ii])
        coords = np.concatenate([lcoords[vis], tokens.coords[ii]])
        feats = self._run_groups(tokens.features, [(idx, coords, self.image_spec)], first_layer, "inter2d")
        return tokens.with_features(feats)

    def image_to_voxels(self, tokens):
        """Depth, 3D voxel coords, planar offset and usability of image tokens."""
        ii = tokens.image_idx
        c = tokens.coords[ii]
        p = self.cfg.patch
        px = (c[:, 0] + 0.5) * p
        py = (c[:, 1] + 0.5) * p
        depth, dist, _ = geometry.nearest_depth_batch(px, py, c[:, 2], self.table)
        found = np.isfinite(depth) & (depth > geometry.DEPTH_EPS)
        xyz = np.full((len(ii), 3), np.nan)
        xyz[found] = geometry.unproject_batch(px[found], py[found], c[found, 2], depth[found], self.rig)
        vox = np.zeros((len(ii), 3), dtype=np.int64)
        ok = found.copy()
        if found.any():
            v, inside = voxel_indices(xyz[found], self.cfg.voxel_size, self.cfg.bounds)
            vox[found] = np.where(inside[:, None], v, 0)
            ok[found] = inside
        offset = dist / p if self.cfg.offset_units == "patch" else dist
        return ii, vox, offset, ok

    def inter3d_block(self, tokens, first_layer):
        if self.table is None:
            raise ValueError("inter3d block needs a pseudo depth table")
        self._modality = tokens.modality
        li = tokens.lidar_idx
        ii, vox, offset, ok = self.image_to_voxels(tokens)
        feats = tokens.features.copy()
        feats[ii[ok]] += attention.offset_features(offset[ok], self.weights)
        idx = np.concatenate([li, ii[ok]])
        coords = np.concatenate([tokens.coords[li], vox[ok]])
        out = self._run_groups(feats, [(idx, coords, self.lidar_spec)], first_layer, "inter3d")
        # depthless image tokens stay exactly as they came in
        out[ii[~ok]] = tokens.features[ii[~ok]]
        return tokens.with_features(out)

    # -- driver -------------------------------------------------------------

    def forward(self, tokens, keep=False):
        """Run every block; with ``keep`` the per-block outputs land in ``self.outputs``."""
        self.traces = []
        self.outputs = []
        lpb = self.cfg.blocks.layers_per_block
        run = {"intra": self.intra_block, "inter2d": self.inter2d_block, "inter3d": self.inter3d_block}
        for b, kind in enumerate(self.cfg.blocks.sequence):
            self._trace = BlockTrace(kind)
            t0 = time.perf_counter()
            tokens = run[kind](tokens, b * lpb)
            self._trace.seconds = time.perf_counter() - t0
            self.traces.append(self._trace)
            self._trace = None
            if keep:
                self.outputs.append(tokens)
        return tokens

    def bev(self, tokens):
        return bev_pool(tokens, self.cfg.voxel_size, self.cfg.bounds)


def bev_pool(tokens, voxel_size, bounds):
    gx, gy, _ = grid_dims(voxel_size, bounds)
    li = tokens.lidar_idx
    c = tokens.coords[li]
    if len(c) and (c[:, 0].min() < 0 or c[:, 1].min() < 0 or c[:, 0].max() >= gx or c[:, 1].max() >= gy):
        raise IndexError("lidar token outside the BEV grid")
    cell = c[:, 0] * gy + c[:, 1]
    if len(np.unique(cell)) != len(cell):
        raise DuplicateCell("two lidar tokens share a BEV cell")
    feats = np.zeros((gx * gy, tokens.channels))
    mask = np.zeros(gx * gy, dtype=bool)
    feats[cell] = tokens.features[li]
    mask[cell] = True
    return BevGrid(feats.reshape(gx, gy, -1), mask.reshape(gx, gy),
                   tuple(float(v) for v in voxel_size[:2]), tuple(float(v) for v in bounds[:2]))


def run_backbone(points, images, rig, weights, cfg, table=None, serial=False, counter=None):
    """Tokenize, run every block, pool to BEV. Returns (BevGrid, Backbone)."""
    if table is None and "inter3d" in cfg.blocks.sequence:
        table = geometry.cached_table(cfg.pseudo_grid, cfg.bounds, rig, bucket_size=cfg.bucket_size)
    model = Backbone(cfg, weights, rig, table, serial, counter)
    tokens = model.tokenize(points, images)
    out = model.forward(tokens)
    return model.bev(out), model
