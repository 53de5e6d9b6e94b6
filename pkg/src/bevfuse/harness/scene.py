"""Seeded synthetic scenes: ground plane, boxes, ring rig, procedural images."""
import json
import os
from dataclasses import dataclass

import numpy as np

from .. import rng, tensorio
from ..geometry import CameraRig, ring_rig
from ..tokenizers import read_point_cloud, write_point_cloud

GROUND_Z = -1.8


@dataclass
class SyntheticScene:
    seed: int
    rig: CameraRig
    cloud: np.ndarray   # (n, 4): x, y, z, intensity
    images: np.ndarray  # (B, H, W, 3) in [0, 1]
    truth_view: np.ndarray
    truth_x: np.ndarray
    truth_y: np.ndarray
    truth_depth: np.ndarray

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        write_point_cloud(os.path.join(out_dir, "cloud.bin"), self.cloud)
        tensorio.save(os.path.join(out_dir, "images.utr"), {"images": self.images.astype(np.float32)})
        tensorio.save(os.path.join(out_dir, "truth.utr"), {
            "view": self.truth_view.astype(np.int64),
            "x": self.truth_x.astype(np.float32),
            "y": self.truth_y.astype(np.float32),
            "depth": self.truth_depth.astype(np.float32),
        })
        with open(os.path.join(out_dir, "rig.json"), "w") as fh:
            json.dump(self.rig.to_dict(), fh, indent=1)
        with open(os.path.join(out_dir, "scene.json"), "w") as fh:
            json.dump({"seed": self.seed, "points": len(self.cloud)}, fh)


def load_scene(in_dir):
    with open(os.path.join(in_dir, "rig.json")) as fh:
        rig = CameraRig.from_dict(json.load(fh))
    with open(os.path.join(in_dir, "scene.json")) as fh:
        meta = json.load(fh)
    cloud = read_point_cloud(os.path.join(in_dir, "cloud.bin"), extra=1)
    images = tensorio.load(os.path.join(in_dir, "images.utr"))["images"].astype(np.float64)
    t = tensorio.load(os.path.join(in_dir, "truth.utr"))
    return SyntheticScene(meta["seed"], rig, cloud, images, t["view"],
                          t["x"].astype(np.float64), t["y"].astype(np.float64), t["depth"].astype(np.float64))


def reference_projection(points, rig):
    """First-hit projection written out component by component.

    Deliberately shares no code with ``geometry`` so it can serve as its
    oracle.
    """
    n = len(points)
    view = np.full(n, -1, dtype=np.int64)
    px = np.full(n, np.nan)
    py = np.full(n, np.nan)
    pd = np.full(n, np.nan)
    X, Y, Z = points[:, 0], points[:, 1], points[:, 2]
    for b, cam in enumerate(rig.views):
        e = cam.extrinsics
        k = cam.intrinsics
        xc = e[0, 0] * X + e[0, 1] * Y + e[0, 2] * Z + e[0, 3]
        yc = e[1, 0] * X + e[1, 1] * Y + e[1, 2] * Z + e[1, 3]
        zc = e[2, 0] * X + e[2, 1] * Y + e[2, 2] * Z + e[2, 3]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u = k[0, 0] * (xc / zc) + k[0, 1] * (yc / zc) + k[0, 2]
            v = k[1, 1] * (yc / zc) + k[1, 2]
        h, w = cam.image_size
        seen = (zc > 1e-6) & (u >= 0) & (u < w) & (v >= 0) & (v < h) & (view < 0)
        view[seen] = b
        px[seen], py[seen], pd[seen] = u[seen], v[seen], zc[seen]
    return view, px, py, pd


def _box_surface(gen, centre, size, yaw, count):
    """Uniform samples on the four sides and the top of an oriented box."""
    lx, ly, lz = size
    areas = np.array([lx * lz, lx * lz, ly * lz, ly * lz, lx * ly])
    face = gen.choice(5, size=count, p=areas / areas.sum())
    u = gen.uniform(-0.5, 0.5, size=count)
    v = gen.uniform(0.0, 1.0, size=count)
    local = np.zeros((count, 3))
    for f, (ax, sign) in enumerate([(1, -1), (1, 1), (0, -1), (0, 1)]):
        sel = face == f
        other = 1 - ax
        local[sel, ax] = sign * 0.5 * size[ax]
        local[sel, other] = u[sel] * size[other]
        local[sel, 2] = v[sel] * lz
    top = face == 4
    local[top, 0] = u[top] * lx
    local[top, 1] = gen.uniform(-0.5, 0.5, size=int(top.sum())) * ly
    local[top, 2] = lz
    c, s = np.cos(yaw), np.sin(yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + centre[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + centre[1]
    world[:, 2] = local[:, 2] + GROUND_Z
    return world


def render_images(rig, truth, seed):
    """Smooth per-view gradients with a marker at every true projection."""
    view, px, py, pd = truth
    gen = rng.stream(seed, "scene.images")
    imgs = []
    for b, cam in enumerate(rig.views):
        h, w = cam.image_size
        yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
        phase = gen.uniform(0, 2 * np.pi)
        img = np.stack([
            0.25 + 0.5 * xx,
            0.25 + 0.5 * yy,
            0.5 + 0.25 * np.sin(2 * np.pi * xx + phase) * np.cos(np.pi * yy),
        ], axis=-1)
        sel = view == b
        col = np.floor(px[sel]).astype(np.int64)
        row = np.floor(py[sel]).astype(np.int64)
        shade = np.clip(1.0 - pd[sel] / 60.0, 0.0, 1.0)
        img[row, col] = np.stack([np.ones_like(shade), shade, np.zeros_like(shade)], axis=1)
        imgs.append(img)
    return np.clip(np.stack(imgs), 0.0, 1.0).astype(np.float32).astype(np.float64)


def generate_scene(seed=0, num_points=12000, num_boxes=20, points_per_box=150, num_views=6,
                   image_size=(256, 704), bounds=(-54.0, -54.0, -5.0, 54.0, 54.0, 3.0), rig=None):
    gen = rng.stream(seed, "scene.points")
    reach = 0.92 * min(bounds[3] - 0.0, -bounds[0], bounds[4], -bounds[1])
    r = reach * np.sqrt(gen.uniform(0.0, 1.0, num_points))
    theta = gen.uniform(0, 2 * np.pi, num_points)
    ground = np.stack([r * np.cos(theta), r * np.sin(theta),
                       GROUND_Z + gen.normal(0.0, 0.02, num_points)], axis=1)
    parts = [ground]
    boxgen = rng.stream(seed, "scene.boxes")
    for _ in range(num_boxes):
        dist = boxgen.uniform(6.0, 0.8 * reach)
        ang = boxgen.uniform(0, 2 * np.pi)
        size = (boxgen.uniform(1.5, 4.5), boxgen.uniform(1.5, 2.5), boxgen.uniform(1.2, 2.5))
        parts.append(_box_surface(boxgen, (dist * np.cos(ang), dist * np.sin(ang)), size,
                                  boxgen.uniform(0, np.pi), points_per_box))
    xyz = np.concatenate(parts)
    lo, hi = np.asarray(bounds[:3]), np.asarray(bounds[3:])
    xyz = xyz[np.all((xyz >= lo) & (xyz < hi), axis=1)]
    intensity = rng.stream(seed, "scene.intensity").uniform(0.0, 1.0, len(xyz))
    cloud = np.concatenate([xyz, intensity[:, None]], axis=1).astype(np.float32).astype(np.float64)

    rig = rig or ring_rig(num_views, tuple(image_size))
    truth = reference_projection(cloud[:, :3], rig)
    images = render_images(rig, truth, seed)
    return SyntheticScene(seed, rig, cloud, images, *truth)


def scene_for(cfg, seed=None):
    seed = cfg.seed if seed is None else seed
    run = cfg.run
    return generate_scene(seed, int(run["num_points"]), int(run["num_boxes"]), int(run["points_per_box"]),
                          cfg.num_views(), cfg.image_size(), cfg.bounds, rig=cfg.rig())
