"""Run configuration: one JSON document with six sections.

Unknown sections or keys are rejected so typos fail loudly.
"""
import copy
import hashlib
import json
import os
from dataclasses import dataclass

from .attention import AttentionConfig
from .geometry import CameraRig, ring_rig

BLOCK_KINDS = ("intra", "inter2d", "inter3d")

DEFAULT = {
    "rig": {"num_views": 6, "image_size": [256, 704], "fov_deg": 70.0, "height": 0.0, "radius": 0.0},
    "tokenizer": {
        "voxel_size": [0.3, 0.3, 8.0],
        "range": [-54.0, -54.0, -5.0, 54.0, 54.0, 3.0],
        "patch": 8,
        "point_features": 1,
    },
    "partition": {"lidar_window": [30, 30, 1], "image_window": [30, 30, 1], "tau": 90},
    "attention": {"channels": 128, "heads": 8, "hidden": 256, "init": "uniform", "init_std": 0.02},
    "blocks": {
        "sequence": ["intra", "inter2d", "inter2d", "inter3d"],
        "layers_per_block": 2,
        "pseudo_grid": [360, 360, 20],
        "offset_units": "patch",
        "bucket_size": 8.0,
    },
    "run": {"seed": 0, "num_points": 12000, "num_boxes": 20, "points_per_box": 150, "serial": False},
}

SMALL = copy.deepcopy(DEFAULT)
SMALL["rig"].update(num_views=3, image_size=[64, 176])
SMALL["tokenizer"]["range"] = [-24.0, -24.0, -5.0, 24.0, 24.0, 3.0]
SMALL["partition"].update(lidar_window=[12, 12, 1], image_window=[12, 12, 1], tau=24)
SMALL["attention"].update(channels=32, heads=4, hidden=64)
SMALL["blocks"]["pseudo_grid"] = [80, 80, 10]
SMALL["run"].update(num_points=1500, num_boxes=6, points_per_box=60)

PRESETS = {"default": DEFAULT, "small": SMALL}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key!r} must be an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_rig(rig):
    if "views" in rig:
        if set(rig) != {"views"}:
            raise ConfigError("an explicit rig takes only 'views'")
        return
    unknown = set(rig) - set(DEFAULT["rig"])
    if unknown:
        raise ConfigError(f"unknown rig keys {sorted(unknown)}")
    if "num_views" in rig and (not isinstance(rig["num_views"], int) or rig["num_views"] < 1):
        raise ConfigError("rig.num_views must be a positive integer")


@dataclass(frozen=True)
class BlockConfig:
    sequence: tuple = ("intra", "inter2d", "inter2d", "inter3d")
    layers_per_block: int = 2
    lidar_window: tuple = (30, 30, 1)
    image_window: tuple = (30, 30, 1)
    tau: int = 90

    def __post_init__(self):
        seq = tuple(s.lower() for s in self.sequence)
        bad = [s for s in seq if s not in BLOCK_KINDS]
        if bad:
            raise ConfigError(f"unknown block kinds {bad}")
        if self.layers_per_block < 2 or self.layers_per_block % 2:
            raise ConfigError("layers_per_block must be even so X/Y rotation alternates")
        object.__setattr__(self, "sequence", seq)

    @property
    def num_layers(self):
        return len(self.sequence) * self.layers_per_block


class Config:
    def __init__(self, data):
        self.data = data
        _check_rig(data["rig"])
        tok = data["tokenizer"]
        part = data["partition"]
        blk = data["blocks"]
        att = data["attention"]
        if blk["offset_units"] not in ("patch", "pixel"):
            raise ConfigError("offset_units must be 'patch' or 'pixel'")
        self.voxel_size = tuple(float(v) for v in tok["voxel_size"])
        self.bounds = tuple(float(v) for v in tok["range"])
        self.patch = int(tok["patch"])
        self.point_features = int(tok["point_features"])
        self.blocks = BlockConfig(tuple(blk["sequence"]), int(blk["layers_per_block"]),
                                  tuple(part["lidar_window"]), tuple(part["image_window"]), int(part["tau"]))
        self.attention = AttentionConfig(
            channels=int(att["channels"]), heads=int(att["heads"]), hidden=int(att["hidden"]),
            point_features=self.point_features, patch=self.patch,
            init=att["init"], init_std=float(att["init_std"]))
        self.pseudo_grid = tuple(int(v) for v in blk["pseudo_grid"])
        self.offset_units = blk["offset_units"]
        self.bucket_size = float(blk["bucket_size"])
        self.run = dict(data["run"])

    @property
    def seed(self):
        return int(self.run["seed"])

    def rig(self):
        r = self.data["rig"]
        if "views" in r:
            return CameraRig.from_dict(r)
        return ring_rig(int(r["num_views"]), tuple(r["image_size"]), float(r["fov_deg"]),
                        float(r["height"]), float(r["radius"]))

    def image_size(self):
        r = self.data["rig"]
        if "views" in r:
            return tuple(r["views"][0]["image_size"])
        return tuple(r["image_size"])

    def num_views(self):
        r = self.data["rig"]
        return len(r["views"]) if "views" in r else int(r["num_views"])

    def replace(self, **sections):
        return Config(_apply(self.data, sections))

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def _apply(base, data):
    unknown = set(data) - set(DEFAULT)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    merged = _merge(base, {k: v for k, v in data.items() if k != "rig"})
    if "rig" in data:
        rig = data["rig"]
        _check_rig(rig)
        if "views" in rig or "views" in merged["rig"]:
            merged["rig"] = copy.deepcopy(rig)
        else:
            merged["rig"] = {**merged["rig"], **copy.deepcopy(rig)}
    return merged


def from_dict(data, base="default"):
    return Config(_apply(PRESETS[base], data))


def load(name_or_path="default"):
    """A preset name (``default``, ``small``) or a path to a JSON file."""
    if name_or_path in PRESETS:
        return Config(copy.deepcopy(PRESETS[name_or_path]))
    if not os.path.exists(name_or_path):
        raise ConfigError(f"no preset or file named {name_or_path!r}")
    with open(name_or_path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{name_or_path}: {exc}") from exc
    base = data.pop("base", "default") if isinstance(data, dict) else "default"
    if base not in PRESETS:
        raise ConfigError(f"unknown base preset {base!r}")
    return from_dict(data, base)
