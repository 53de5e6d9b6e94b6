"""Slow, obvious reference implementations used to check the fast paths.

None of these call the numeric kernels they check; they only share the
weight store and primitive numpy arithmetic.
"""
import math

import numpy as np

from .. import attention, geometry, partition
from ..backbone import BevGrid, lidar_centres
from ..tokenizers import grid_dims, patchify, voxelize
from ..tokens import TokenSequence


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


def _norm(x, gain, bias, eps=attention.LN_EPS):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = row.sum() / len(row)
        var = ((row - mu) ** 2).sum() / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps) * gain + bias
    return out


def oracle_dense_attention(features, coords, weights, layer):
    """One set (tau, C) through PE, per-head attention, norms and FFN.

    Returns ``(outputs, probs)`` with ``probs`` of shape (heads, tau, tau).
    """
    lw = weights.layer(layer)
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(coords, dtype=np.float64)
    tau, ch = f.shape
    heads = weights.cfg.heads
    dh = ch // heads

    pe = _gelu(c @ lw["pe.fc1.weight"] + lw["pe.fc1.bias"]) @ lw["pe.fc2.weight"] + lw["pe.fc2.bias"]
    x = f + pe
    q = x @ lw["attn.q.weight"] + lw["attn.q.bias"]
    k = x @ lw["attn.k.weight"] + lw["attn.k.bias"]
    v = x @ lw["attn.v.weight"] + lw["attn.v.bias"]
    concat = np.zeros((tau, ch))
    probs = np.zeros((heads, tau, tau))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        for i in range(tau):
            row = np.exp(scores[i] - scores[i].max())
            probs[h, i] = row / row.sum()
        concat[:, sl] = probs[h] @ v[:, sl]
    o = concat @ lw["attn.out.weight"] + lw["attn.out.bias"]
    x = _norm(x + o, lw["norm1.weight"], lw["norm1.bias"])
    ff = _gelu(x @ lw["ffn.fc1.weight"] + lw["ffn.fc1.bias"]) @ lw["ffn.fc2.weight"] + lw["ffn.fc2.bias"]
    return _norm(x + ff, lw["norm2.weight"], lw["norm2.bias"]), probs


def oracle_nearest(table, x, y, view):
    """Exhaustive scan: (depth, distance, index) or None for an empty view."""
    cand = np.flatnonzero(table.view == view)
    if cand.size == 0:
        return None
    dx = table.x[cand].astype(np.float64) - x
    dy = table.y[cand].astype(np.float64) - y
    d2 = dx * dx + dy * dy
    j = int(np.argmin(d2))  # first minimum -> lowest index on ties
    return float(table.depth[cand[j]]), math.sqrt(d2[j]), int(cand[j])


def oracle_nearest_many(table, x, y, view):
    """Exhaustive scan for many queries, one at a time over reused buffers."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    view = np.asarray(view)
    depth = np.full(len(x), np.nan)
    dist = np.full(len(x), np.nan)
    idx = np.full(len(x), -1, dtype=np.int64)
    for b in np.unique(view):
        cand = np.flatnonzero(table.view == b)
        if cand.size == 0:
            continue
        px = table.x[cand].astype(np.float64)
        py = table.y[cand].astype(np.float64)
        dx = np.empty_like(px)
        dy = np.empty_like(py)
        for q in np.flatnonzero(view == b):
            np.subtract(px, x[q], out=dx)
            np.subtract(py, y[q], out=dy)
            dx *= dx
            dy *= dy
            dx += dy
            j = int(dx.argmin())  # first minimum -> lowest index on ties
            idx[q] = cand[j]
            dist[q] = math.sqrt(dx[j])
            depth[q] = table.depth[cand[j]]
    return depth, dist, idx


def oracle_partition_slots(coords, spec, tau, order):
    """Evaluate the slot formula directly, window by window, with a sort."""
    c = np.asarray(coords, dtype=np.int64)
    cell = c // np.asarray(spec.shape)
    keyed = {}
    for i, (cx, cy, cz) in enumerate(cell):
        keyed.setdefault((cz, cy, cx), []).append(i)
    sets, canon = [], []
    for wkey in sorted(keyed):
        members = keyed[wkey]
        if order == partition.X_MAJOR:
            members = sorted(members, key=lambda i: (c[i, 0], c[i, 1], c[i, 2], i))
        else:
            members = sorted(members, key=lambda i: (c[i, 1], c[i, 0], c[i, 2], i))
        t = len(members)
        s = -(-t // tau)
        seen = set()
        for j in range(s):
            row, crow = [], []
            for k in range(tau):
                tok = members[((j * tau + k) * t) // (s * tau)]
                row.append(tok)
                crow.append(tok not in seen)
                seen.add(tok)
            sets.append(row)
            canon.append(crow)
    return np.array(sets, dtype=np.int64).reshape(-1, tau), np.array(canon, dtype=bool).reshape(-1, tau)


def oracle_scatter(part, set_outputs):
    """Loop tokens, read each one's canonical slot."""
    where = {}
    for s in range(part.sets.shape[0]):
        for k in range(part.sets.shape[1]):
            if part.canonical[s, k]:
                where[int(part.sets[s, k])] = (s, k)
    out = np.zeros((part.num_tokens,) + set_outputs.shape[2:], dtype=set_outputs.dtype)
    for tok in range(part.num_tokens):
        s, k = where[tok]
        out[tok] = set_outputs[s, k]
    return out


class _Serial:
    """Block-by-block reference with one dispatch per modality per layer."""

    def __init__(self, cfg, weights, rig, table, counter):
        self.cfg, self.weights, self.rig, self.table = cfg, weights, rig, table
        self.counter = counter
        b = cfg.blocks
        self.lspec = partition.WindowSpec(b.lidar_window, partition.LIDAR_3D)
        self.ispec = partition.WindowSpec(b.image_window, partition.IMAGE_2D)

    def layers(self, feats, groups, first):
        for i in range(self.cfg.blocks.layers_per_block):
            order = partition.X_MAJOR if i % 2 == 0 else partition.Y_MAJOR
            for idx, coords, spec in groups:
                part = partition.dynamic_set_partition(coords, spec, self.cfg.blocks.tau, order)
                rel = partition.window_relative(coords, spec)
                out = attention.dispatch(feats[idx][part.sets], rel[part.sets], self.weights,
                                         first + i, self.counter)
                sub = feats[idx]
                sub[part.sets[part.canonical]] = out[part.canonical]
                feats[idx] = sub
        return feats

    def run(self, tokens):
        lpb = self.cfg.blocks.layers_per_block
        feats = tokens.features.copy()
        li, ii = tokens.lidar_idx, tokens.image_idx
        p = self.cfg.patch
        for b, kind in enumerate(self.cfg.blocks.sequence):
            first = b * lpb
            if kind == "intra":
                groups = [(li, tokens.coords[li], self.lspec), (ii, tokens.coords[ii], self.ispec)]
                feats = self.layers(feats, groups, first)
            elif kind == "inter2d":
                xyz = lidar_centres(tokens.coords[li], self.cfg.voxel_size, self.cfg.bounds)
                px, py, view, _ = geometry.project_first_hit(xyz, self.rig)
                vis = view >= 0
                lc = np.stack([np.floor(px[vis] / p), np.floor(py[vis] / p), view[vis]], axis=1).astype(np.int64)
                idx = np.concatenate([li[vis], ii])
                coords = np.concatenate([lc, tokens.coords[ii]])
                feats = self.layers(feats, [(idx, coords, self.ispec)], first)
            else:
                c = tokens.coords[ii]
                px, py = (c[:, 0] + 0.5) * p, (c[:, 1] + 0.5) * p
                ok = np.zeros(len(ii), dtype=bool)
                vox = np.zeros((len(ii), 3), dtype=np.int64)
                dist = np.zeros(len(ii))
                lo = np.asarray(self.cfg.bounds[:3])
                size = np.asarray(self.cfg.voxel_size)
                dims = np.asarray(grid_dims(self.cfg.voxel_size, self.cfg.bounds))
                for j in range(len(ii)):
                    hit = geometry.nearest_depth(px[j], py[j], int(c[j, 2]), self.table)
                    if hit is None:
                        continue
                    d, dist[j] = hit
                    world = geometry.unproject(px[j], py[j], int(c[j, 2]), d, self.rig)
                    v = np.floor((world - lo) / size).astype(np.int64)
                    if np.all((v >= 0) & (v < dims)):
                        ok[j] = True
                        vox[j] = v
                off = dist / p if self.cfg.offset_units == "patch" else dist
                before = feats[ii[~ok]].copy()
                feats[ii[ok]] += attention.offset_features(off[ok], self.weights)
                idx = np.concatenate([li, ii[ok]])
                coords = np.concatenate([tokens.coords[li], vox[ok]])
                feats = self.layers(feats, [(idx, coords, self.lspec)], first)
                feats[ii[~ok]] = before
        return feats


def oracle_serial_backbone(points, images, rig, weights, cfg, table=None, counter=None):
    """Serial reference of the whole pipeline. Returns (BevGrid, dispatches)."""
    counter = counter or attention.DispatchCounter()
    if table is None and "inter3d" in cfg.blocks.sequence:
        table = geometry.cached_table(cfg.pseudo_grid, cfg.bounds, rig, bucket_size=cfg.bucket_size)
    tokens = TokenSequence.concat(voxelize(points, cfg.voxel_size, cfg.bounds, weights),
                                  patchify(images, cfg.patch, weights))
    feats = _Serial(cfg, weights, rig, table, counter).run(tokens)
    gx, gy, _ = grid_dims(cfg.voxel_size, cfg.bounds)
    grid = np.zeros((gx, gy, feats.shape[1]))
    mask = np.zeros((gx, gy), dtype=bool)
    for row, tok in enumerate(tokens.lidar_idx):
        x, y, _ = tokens.coords[tok]
        grid[x, y] = feats[tok]
        mask[x, y] = True
    return BevGrid(grid, mask, tuple(cfg.voxel_size[:2]), tuple(cfg.bounds[:2])), counter.total
