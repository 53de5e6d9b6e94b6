"""Window assignment, rotated inner-window ordering and size-equivalent sets."""
from dataclasses import dataclass

import numpy as np

from . import kernels

LIDAR_3D = "lidar-3d"
IMAGE_2D = "image-2d"

X_MAJOR = "x"
Y_MAJOR = "y"


class IndexOutOfRange(IndexError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    shape: tuple
    space: str = LIDAR_3D

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError("window shape must be three positive integers")
        if self.space not in (LIDAR_3D, IMAGE_2D):
            raise ValueError(f"unknown space {self.space!r}")
        if self.space == IMAGE_2D and shape[2] != 1:
            raise ValueError("image windows are one view deep")
        object.__setattr__(self, "shape", shape)


@dataclass
class SetPartition:
    sets: np.ndarray        # (S, tau) token indices
    canonical: np.ndarray   # (S, tau) True at each token's write-back slot
    set_window: np.ndarray  # (S,) window id
    window_counts: np.ndarray  # tokens per window, window-id order
    order: str
    tau: int
    num_tokens: int

    @property
    def num_sets(self):
        return len(self.sets)

    def to_bytes(self):
        parts = [
            np.asarray([self.tau, self.num_tokens, ord(self.order)], dtype="<i8"),
            self.sets.astype("<i8"), self.canonical.astype("u1"),
            self.set_window.astype("<i8"), self.window_counts.astype("<i8"),
        ]
        return b"".join(p.tobytes() for p in parts)


def _coords(tokens):
    c = tokens.coords if hasattr(tokens, "coords") else tokens
    return np.asarray(c, dtype=np.int64).reshape(-1, 3)


def window_cells(coords, spec):
    """Per-token (wx, wy, wz) window cell."""
    c = _coords(coords)
    if c.size and c.min() < 0:
        raise ValueError("coordinates must be non-negative")
    return c // np.asarray(spec.shape, dtype=np.int64)


def assign_windows(coords, spec):
    """Dense window ids, numbered row-major over (wz, wy, wx)."""
    cell = window_cells(coords, spec)
    if len(cell) == 0:
        return np.zeros(0, dtype=np.int64)
    ext = cell.max(axis=0) + 1
    key = (cell[:, 2] * ext[1] + cell[:, 1]) * ext[0] + cell[:, 0]
    _, ids = np.unique(key, return_inverse=True)
    return ids.astype(np.int64).reshape(-1)


def window_relative(coords, spec):
    """Coordinates inside the window, scaled to (-1, 1) on cell centres."""
    c = _coords(coords)
    shape = np.asarray(spec.shape, dtype=np.float64)
    rel = c % np.asarray(spec.shape, dtype=np.int64)
    return (2.0 * rel + 1.0) / shape - 1.0


def _sorted_order(coords, win, order):
    c = _coords(coords)
    tie = np.arange(len(c))
    if order == X_MAJOR:
        keys = (tie, c[:, 2], c[:, 1], c[:, 0], win)
    elif order == Y_MAJOR:
        keys = (tie, c[:, 2], c[:, 0], c[:, 1], win)
    else:
        raise ValueError(f"unknown order {order!r}")
    return np.lexsort(keys)


def inner_window_order(coords, win, order):
    """Rank of every token inside its window; ties fall back to token index."""
    win = np.asarray(win, dtype=np.int64)
    perm = _sorted_order(coords, win, order)
    counts = np.bincount(win, minlength=int(win.max()) + 1 if len(win) else 0)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.empty(len(win), dtype=np.int64)
    rank[perm] = np.arange(len(win)) - starts[win[perm]]
    return rank


def dynamic_set_partition(tokens, spec, tau, order=X_MAJOR):
    """Split every window's T tokens into ceil(T / tau) sets of tau slots.

    Slot k of set j holds the token of inner-window rank
    floor((j * tau + k) * T / (S * tau)), so sets are filled evenly and
    duplicates appear only when T is not a multiple of tau.
    """
    tau = int(tau)
    if tau < 1:
        raise ValueError("tau must be at least 1")
    coords = _coords(tokens)
    n = len(coords)
    if n == 0:
        return SetPartition(np.zeros((0, tau), np.int64), np.zeros((0, tau), bool),
                            np.zeros(0, np.int64), np.zeros(0, np.int64), order, tau, 0)
    win = assign_windows(coords, spec)
    perm = _sorted_order(coords, win, order)
    counts = np.bincount(win).astype(np.int64)
    pos, canon, set_win = kernels.dsp_slots(counts, tau)
    sets = perm[pos].reshape(-1, tau)
    return SetPartition(sets.astype(np.int64), canon.reshape(-1, tau), set_win, counts, order, tau, n)


def gather(part, features, coords=None):
    features = np.asarray(features)
    if part.sets.size and (part.sets.max() >= len(features) or part.sets.min() < 0):
        raise IndexOutOfRange("partition references a token outside the sequence")
    f = features[part.sets]
    if coords is None:
        return f
    return f, np.asarray(coords)[part.sets]


def scatter_canonical(part, set_outputs, out=None):
    """Write each token's row from its canonical slot only."""
    set_outputs = np.asarray(set_outputs)
    if set_outputs.shape[:2] != part.sets.shape:
        raise ShapeMismatch(f"outputs {set_outputs.shape[:2]} vs partition {part.sets.shape}")
    if out is None:
        out = np.zeros((part.num_tokens,) + set_outputs.shape[2:], dtype=set_outputs.dtype)
    out[part.sets[part.canonical]] = set_outputs[part.canonical]
    return out


def partition_stats(part):
    counts = part.window_counts
    nonempty = counts[counts > 0]
    sets_per_window = (nonempty + part.tau - 1) // part.tau
    slots = int(sets_per_window.sum()) * part.tau
    total = int(nonempty.sum())
    hist_edges = [1, 2, 5, 10, 20, 50, 90, 180, 360, 900]
    hist, _ = np.histogram(nonempty, bins=hist_edges + [np.iinfo(np.int64).max])
    return {
        "tokens": total,
        "windows": int(len(nonempty)),
        "sets": int(part.num_sets),
        "tau": part.tau,
        "slots": slots,
        "duplicates": slots - total,
        "duplication_rate": (slots - total) / total if total else 0.0,
        "occupancy_histogram": {
            (f"{lo}-{hi - 1}" if hi - 1 > lo else str(lo)) if i + 1 < len(hist_edges) else f">={lo}": int(h)
            for i, (lo, hi, h) in enumerate(zip(hist_edges, hist_edges[1:] + [0], hist))
        },
    }
