"""Hot loops, each with a numba loop version and a numpy version.

The module-level names (``scatter_max``, ``dsp_slots``, ``nn_query``) are
bound to one implementation at import time, see ``_accel``.
"""
import numpy as np

from ._accel import njit, pick


# --- per-group element-wise max -------------------------------------------

@njit
def _scatter_max_loop(values, group, n_groups):
    n, c = values.shape
    out = np.full((n_groups, c), -np.inf)
    for i in range(n):
        g = group[i]
        for j in range(c):
            v = values[i, j]
            if v > out[g, j]:
                out[g, j] = v
    return out


def _scatter_max_numpy(values, group, n_groups):
    out = np.full((n_groups, values.shape[1]), -np.inf)
    np.maximum.at(out, group, values)
    return out


# --- dynamic set partition slot map ---------------------------------------

@njit
def _dsp_slots_loop(counts, tau):
    nw = counts.shape[0]
    total_sets = 0
    for w in range(nw):
        total_sets += (counts[w] + tau - 1) // tau
    pos = np.empty(total_sets * tau, np.int64)
    canon = np.empty(total_sets * tau, np.bool_)
    set_win = np.empty(total_sets, np.int64)
    s = 0
    start = 0
    for w in range(nw):
        t = counts[w]
        n_sets = (t + tau - 1) // tau
        prev = -1
        for j in range(n_sets):
            set_win[s] = w
            for k in range(tau):
                r = ((j * tau + k) * t) // (n_sets * tau)
                pos[s * tau + k] = start + r
                canon[s * tau + k] = r != prev
                prev = r
            s += 1
        start += t
    return pos, canon, set_win


def _dsp_slots_numpy(counts, tau):
    counts = np.asarray(counts, dtype=np.int64)
    n_sets = (counts + tau - 1) // tau
    slots = n_sets * tau
    total = int(slots.sum())
    win = np.repeat(np.arange(len(counts), dtype=np.int64), slots)
    slot_off = np.concatenate(([0], np.cumsum(slots)[:-1])).astype(np.int64)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    local = np.arange(total, dtype=np.int64) - slot_off[win]
    rank = (local * counts[win]) // slots[win]
    canon = np.ones(total, dtype=bool)
    canon[1:] = (rank[1:] != rank[:-1]) | (win[1:] != win[:-1])
    set_win = np.repeat(np.arange(len(counts), dtype=np.int64), n_sets)
    return starts[win] + rank, canon, set_win


# --- bucketed nearest neighbour in the image plane ------------------------

@njit
def _nn_query_loop(qx, qy, px, py, pidx, starts, nbx, nby, bs):
    n = qx.shape[0]
    out_i = np.full(n, -1, np.int64)
    out_d2 = np.full(n, np.inf)
    max_ring = max(nbx, nby)
    for q in range(n):
        x0 = qx[q]
        y0 = qy[q]
        fx = np.floor(x0 / bs)
        fy = np.floor(y0 / bs)
        inside = fx >= 0 and fy >= 0 and fx < nbx and fy < nby
        cx = min(max(int(fx), 0), nbx - 1)
        cy = min(max(int(fy), 0), nby - 1)
        best = np.inf
        bi = -1
        for r in range(max_ring + 1):
            for oy in range(-r, r + 1):
                y = cy + oy
                if y < 0 or y >= nby:
                    continue
                step = 1 if (oy == -r or oy == r) else 2 * r
                if step == 0:
                    step = 1
                for ox in range(-r, r + 1, step):
                    x = cx + ox
                    if x < 0 or x >= nbx:
                        continue
                    b = y * nbx + x
                    for t in range(starts[b], starts[b + 1]):
                        dx = px[t] - x0
                        dy = py[t] - y0
                        d2 = dx * dx + dy * dy
                        if d2 < best or (d2 == best and pidx[t] < bi):
                            best = d2
                            bi = pidx[t]
            # ring r+1 cannot beat r*bs when the query sits in its own cell
            if inside and bi >= 0 and best < (r * bs) * (r * bs):
                break
        out_i[q] = bi
        out_d2[q] = best
    return out_i, out_d2


def _ring_offsets(r):
    if r == 0:
        return np.zeros((1, 2), dtype=np.int64)
    side = np.arange(-r, r + 1, dtype=np.int64)
    top = np.stack([side, np.full_like(side, -r)], axis=1)
    bot = np.stack([side, np.full_like(side, r)], axis=1)
    mid = np.arange(-r + 1, r, dtype=np.int64)
    left = np.stack([np.full_like(mid, -r), mid], axis=1)
    right = np.stack([np.full_like(mid, r), mid], axis=1)
    return np.concatenate([top, bot, left, right])


def _nn_query_numpy(qx, qy, px, py, pidx, starts, nbx, nby, bs):
    n = qx.shape[0]
    out_i = np.full(n, -1, np.int64)
    out_d2 = np.full(n, np.inf)
    fx = np.floor(qx / bs)
    fy = np.floor(qy / bs)
    inside = (fx >= 0) & (fy >= 0) & (fx < nbx) & (fy < nby)
    cx = np.clip(fx, 0, nbx - 1).astype(np.int64)
    cy = np.clip(fy, 0, nby - 1).astype(np.int64)
    active = np.arange(n)
    for r in range(max(nbx, nby) + 1):
        if active.size == 0:
            break
        offs = _ring_offsets(r)
        x = cx[active][:, None] + offs[None, :, 0]
        y = cy[active][:, None] + offs[None, :, 1]
        q = np.broadcast_to(active[:, None], x.shape)
        ok = (x >= 0) & (x < nbx) & (y >= 0) & (y < nby)
        q, b = q[ok], (y * nbx + x)[ok]
        lo, hi = starts[b], starts[b + 1]
        cnt = hi - lo
        if cnt.sum() > 0:
            qi = np.repeat(q, cnt)
            base = np.repeat(lo - np.concatenate(([0], np.cumsum(cnt)[:-1])), cnt)
            ti = base + np.arange(qi.size)
            dx = px[ti] - qx[qi]
            dy = py[ti] - qy[qi]
            d2 = dx * dx + dy * dy
            cand = pidx[ti]
            order = np.lexsort((cand, d2, qi))
            qi, d2, cand = qi[order], d2[order], cand[order]
            first = np.ones(qi.size, dtype=bool)
            first[1:] = qi[1:] != qi[:-1]
            qi, d2, cand = qi[first], d2[first], cand[first]
            cur_d2, cur_i = out_d2[qi], out_i[qi]
            better = (d2 < cur_d2) | ((d2 == cur_d2) & (cand < cur_i))
            out_d2[qi[better]] = d2[better]
            out_i[qi[better]] = cand[better]
        bound = float(r * bs) ** 2
        done = inside[active] & (out_i[active] >= 0) & (out_d2[active] < bound)
        active = active[~done]
    return out_i, out_d2


scatter_max = pick(_scatter_max_loop, _scatter_max_numpy)
dsp_slots = pick(_dsp_slots_loop, _dsp_slots_numpy)
nn_query = pick(_nn_query_loop, _nn_query_numpy)

IMPLEMENTATIONS = {
    "scatter_max": (_scatter_max_loop, _scatter_max_numpy),
    "dsp_slots": (_dsp_slots_loop, _dsp_slots_numpy),
    "nn_query": (_nn_query_loop, _nn_query_numpy),
}
