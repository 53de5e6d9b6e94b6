"""Shared set-attention core: weights, positional encoding, attention layers.

A single ``BackboneWeights`` store serves both modalities; no tensor name
mentions a modality. Math runs in float64; stored values are float32 so the
store survives a trip through the tensor container unchanged.
"""
import json
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import rng, tensorio

LN_EPS = 1e-5
SET_CHUNK = 128


class NonFiniteActivation(FloatingPointError):
    pass


class TauMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    channels: int = 128
    heads: int = 8
    hidden: int = 256
    point_features: int = 1
    patch: int = 8
    init: str = "uniform"
    init_std: float = 0.02

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.init not in ("uniform", "normal"):
            raise ValueError(f"unknown init {self.init!r}")


def _shapes(cfg, num_layers):
    c, h = cfg.channels, cfg.hidden
    shapes = {
        "vfe.weight": (3 + cfg.point_features, c),
        "vfe.bias": (c,),
        "patch.weight": (cfg.patch * cfg.patch * 3, c),
        "patch.bias": (c,),
        "offset.fc1.weight": (1, h),
        "offset.fc1.bias": (h,),
        "offset.fc2.weight": (h, c),
        "offset.fc2.bias": (c,),
    }
    for i in range(num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "pe.fc1.weight": (3, h), p + "pe.fc1.bias": (h,),
            p + "pe.fc2.weight": (h, c), p + "pe.fc2.bias": (c,),
        })
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attn.{proj}.weight"] = (c, c)
            shapes[p + f"attn.{proj}.bias"] = (c,)
        shapes.update({
            p + "ffn.fc1.weight": (c, h), p + "ffn.fc1.bias": (h,),
            p + "ffn.fc2.weight": (h, c), p + "ffn.fc2.bias": (c,),
            p + "norm1.weight": (c,), p + "norm1.bias": (c,),
            p + "norm2.weight": (c,), p + "norm2.bias": (c,),
        })
    return shapes


class BackboneWeights:
    """Named float tensors plus the seed and config that produced them."""

    def __init__(self, tensors, cfg, num_layers, seed):
        self.tensors = tensors
        self.cfg = cfg
        self.num_layers = num_layers
        self.seed = seed

    @classmethod
    def create(cls, cfg=None, num_layers=8, seed=0):
        cfg = cfg or AttentionConfig()
        tensors = {}
        shapes = _shapes(cfg, num_layers)
        for name, shape in shapes.items():
            gen = rng.substream(seed, "weights", name)
            if cfg.init == "normal":
                # every tensor, norms included, drawn at the small scale
                val = gen.normal(0.0, cfg.init_std, size=shape)
            elif name.split(".")[-2].startswith("norm"):
                val = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
            else:
                # biases share the bound of their weight matrix
                wname = name[:-4] + "weight" if name.endswith("bias") else name
                fan_in = shapes[wname][0]
                bound = 1.0 / math.sqrt(fan_in)
                val = gen.uniform(-bound, bound, size=shape)
            tensors[name] = val.astype(np.float32).astype(np.float64)
        return cls(tensors, cfg, num_layers, seed)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def layer(self, i):
        if not 0 <= i < self.num_layers:
            raise KeyError(f"layer {i} not in store of {self.num_layers} layers")
        p = f"layers.{i}."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def manifest(self):
        return {
            "seed": int(self.seed),
            "num_layers": self.num_layers,
            "config": self.cfg.__dict__,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.tensors.items()],
        }

    def save(self, path, manifest_path=None):
        tensorio.save(path, {k: v.astype(np.float32) for k, v in self.tensors.items()})
        if manifest_path:
            with open(manifest_path, "w") as fh:
                json.dump(self.manifest(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, manifest_path):
        with open(manifest_path) as fh:
            man = json.load(fh)
        raw = tensorio.load(path)
        tensors = {k: v.astype(np.float64) for k, v in raw.items()}
        return cls(tensors, AttentionConfig(**man["config"]), man["num_layers"], man["seed"])


_GELU_C = 0.7978845608028654


def gelu(x):
    """tanh-approximated GELU."""
    t = x * x
    t *= 0.044715 * _GELU_C
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def mlp2(x, w1, b1, w2, b2):
    return gelu(x @ w1 + b1) @ w2 + b2


def positional_encode(coords, weights, layer):
    """Window-relative coords in (-1, 1) -> C-dim encoding."""
    p = f"layers.{layer}.pe."
    return mlp2(np.asarray(coords, dtype=np.float64), weights[p + "fc1.weight"], weights[p + "fc1.bias"],
                weights[p + "fc2.weight"], weights[p + "fc2.bias"])


def pe_jacobian(coord, weights, layer):
    """d PE / d coord for a single coordinate, shape (C, 3)."""
    p = f"layers.{layer}.pe."
    w1, b1, w2 = weights[p + "fc1.weight"], weights[p + "fc1.bias"], weights[p + "fc2.weight"]
    h = np.asarray(coord, dtype=np.float64) @ w1 + b1
    return ((w1 * gelu_grad(h)) @ w2).T


def offset_features(distance, weights):
    d = np.asarray(distance, dtype=np.float64).reshape(-1, 1)
    return mlp2(d, weights["offset.fc1.weight"], weights["offset.fc1.bias"],
                weights["offset.fc2.weight"], weights["offset.fc2.bias"])


def _softmax(scores):
    """Row softmax over the last axis, in place, max-subtracted."""
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def _attend(x, lw, heads, return_probs):
    s, tau, c = x.shape
    dh = c // heads

    def split(t):
        return t.reshape(s, tau, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ lw["attn.q.weight"] + lw["attn.q.bias"])
    k = split(x @ lw["attn.k.weight"] + lw["attn.k.bias"])
    v = split(x @ lw["attn.v.weight"] + lw["attn.v.bias"])
    scores = q @ k.transpose(0, 1, 3, 2)
    scores *= 1.0 / math.sqrt(dh)
    probs = _softmax(scores)
    o = (probs @ v).transpose(0, 2, 1, 3).reshape(s, tau, c)
    o = o @ lw["attn.out.weight"] + lw["attn.out.bias"]
    return o, (probs if return_probs else None)


def set_attention_layer(features, coords, weights, layer, return_probs=False):
    """One post-norm set-attention layer over a (S, tau, C) batch.

    ``coords`` are window-relative and already scaled to (-1, 1).
    """
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(coords, dtype=np.float64)
    if f.ndim != 3 or c.shape != f.shape[:2] + (3,):
        raise ValueError(f"bad set batch shapes {f.shape} / {c.shape}")
    lw = weights.layer(layer)
    heads = weights.cfg.heads
    out = np.empty_like(f)
    all_probs = [] if return_probs else None
    # window-relative coords take few distinct values; encode each once
    uniq, inv = np.unique(c.reshape(-1, 3), axis=0, return_inverse=True)
    pe = mlp2(uniq, lw["pe.fc1.weight"], lw["pe.fc1.bias"], lw["pe.fc2.weight"], lw["pe.fc2.bias"])
    pe = pe[inv.reshape(-1)].reshape(f.shape)
    for lo in range(0, len(f), SET_CHUNK):
        x = f[lo:lo + SET_CHUNK] + pe[lo:lo + SET_CHUNK]
        o, probs = _attend(x, lw, heads, return_probs)
        x = layer_norm(x + o, lw["norm1.weight"], lw["norm1.bias"])
        ff = mlp2(x, lw["ffn.fc1.weight"], lw["ffn.fc1.bias"], lw["ffn.fc2.weight"], lw["ffn.fc2.bias"])
        out[lo:lo + SET_CHUNK] = layer_norm(x + ff, lw["norm2.weight"], lw["norm2.bias"])
        if return_probs:
            all_probs.append(probs)
    if not np.isfinite(out).all():
        raise NonFiniteActivation(f"layer {layer} produced NaN or Inf")
    if return_probs:
        probs = np.concatenate(all_probs) if all_probs else np.zeros((0, heads) + f.shape[1:2] * 2)
        return out, probs
    return out


class DispatchCounter:
    """Counts attention kernel invocations; thread-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0

    def add(self, n=1):
        with self._lock:
            self._total += n

    @property
    def total(self):
        with self._lock:
            return self._total

    def reset(self):
        with self._lock:
            self._total = 0


DISPATCHES = DispatchCounter()


def dispatch(features, coords, weights, layer, counter=None):
    """One counted invocation of the attention kernel."""
    (counter or DISPATCHES).add(1)
    return set_attention_layer(features, coords, weights, layer)


def batched_layer_over_modalities(lidar_batch, image_batch, weights, layer, counter=None):
    """Fuse two (features, coords) set batches into a single dispatch."""
    lf, lc = lidar_batch
    imf, imc = image_batch
    if lf.shape[1] != imf.shape[1]:
        raise TauMismatch(f"set sizes differ: {lf.shape[1]} vs {imf.shape[1]}")
    n = len(lf)
    out = dispatch(np.concatenate([lf, imf]), np.concatenate([lc, imc]), weights, layer, counter)
    return out[:n], out[n:]
