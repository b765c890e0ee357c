"""Deterministic synthetic rigid-scene renderer with exact ground truth.

Scenes are a textured background plane plus rigid axis-aligned boxes,
each carrying its own rigid motion between the two frames. Both frames
are ray-cast analytically in float64, so depth maps, object masks, the
residual motion field and occlusion masks are exact by construction --
they serve as the oracle for every end-to-end test of the warping and
optimization pipeline.

Conventions: the world frame is the frame-1 camera frame. ``ego`` maps
frame-1 camera coordinates to frame-2 camera coordinates. The ground
truth residual field lives on frame-2 pixels and satisfies
``P1(p) = ego^-1(X2(p)) + residual(p)`` -- exactly the composition the
inverse warp applies, so for a purely translating object the residual is
the negated object translation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .csac import DetectionBox, fg_mask
from .grid import Grid, write_pfm, write_ppm, write_pgm

DEPTH_MIN = 0.1
DEPTH_MAX = 100.0


class SceneError(ValueError):
    pass


# ---------------------------------------------------------------------------
# procedural texture: seeded 3D value noise


def _hash_lattice(ix, iy, iz, seed):
    """Integer-hash lattice coordinates to uniform values in [0, 1)."""
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         + iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
         + iz.astype(np.uint64) * np.uint64(0x94D049BB133111EB)
         + np.uint64((int(seed) * 0xD6E8FEB86659FD93) % (1 << 64)))
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points, seed, scale=1.0, octaves=3):
    """Smooth seeded 3D value noise in [0, 1] at (..., 3) points.

    Trilinear interpolation with smoothstep weights over a hashed integer
    lattice; octaves add self-similar detail at doubling frequency.
    """
    p = np.asarray(points, dtype=np.float64) * scale
    total = np.zeros(p.shape[:-1])
    amp, norm = 1.0, 0.0
    for octave in range(octaves):
        q = p * (2.0 ** octave)
        i0 = np.floor(q).astype(np.int64)
        f = q - i0
        w = f * f * (3.0 - 2.0 * f)  # smoothstep
        acc = np.zeros(q.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    v = _hash_lattice(i0[..., 0] + dx, i0[..., 1] + dy,
                                      i0[..., 2] + dz, seed * 7919 + octave)
                    wx = w[..., 0] if dx else 1.0 - w[..., 0]
                    wy = w[..., 1] if dy else 1.0 - w[..., 1]
                    wz = w[..., 2] if dz else 1.0 - w[..., 2]
                    acc += v * wx * wy * wz
        total += amp * acc
        norm += amp
        amp *= 0.5
    return total / norm


@dataclass(frozen=True)
class Texture:
    """Procedural surface color: base RGB plus noise-driven contrast."""

    base: tuple = (0.5, 0.5, 0.5)
    contrast: float = 0.6
    scale: float = 1.0
    seed: int = 0

    def sample(self, points):
        p = np.asarray(points, dtype=np.float64)
        out = np.empty(p.shape[:-1] + (3,))
        for c in range(3):
            n = value_noise(p, self.seed * 3 + c, scale=self.scale)
            out[..., c] = self.base[c] + self.contrast * (n - 0.5)
        return np.clip(out, 0.02, 0.98)

    def to_json(self):
        return {"base": list(self.base), "contrast": self.contrast,
                "scale": self.scale, "seed": self.seed}

    @classmethod
    def from_json(cls, d):
        return cls(base=tuple(d.get("base", (0.5, 0.5, 0.5))),
                   contrast=float(d.get("contrast", 0.6)),
                   scale=float(d.get("scale", 1.0)),
                   seed=int(d.get("seed", 0)))


# ---------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class Background:
    """Textured plane ``dot(normal, X) = dot(normal, point)`` in world frame."""

    point: tuple = (0.0, 0.0, 12.0)
    normal: tuple = (0.0, 0.0, -1.0)
    texture: Texture = field(default_factory=Texture)

    def to_json(self):
        return {"point": list(self.point), "normal": list(self.normal),
                "texture": self.texture.to_json()}

    @classmethod
    def from_json(cls, d):
        return cls(point=tuple(d.get("point", (0.0, 0.0, 12.0))),
                   normal=tuple(d.get("normal", (0.0, 0.0, -1.0))),
                   texture=Texture.from_json(d.get("texture", {})))


@dataclass(frozen=True)
class SceneObject:
    """Axis-aligned rigid box in the world frame with its own motion.

    ``flat_patch`` optionally overrides the texture with the flat base
    color inside an axis-aligned local-coordinate range -- the deliberate
    low-texture region used by motion-variation fixtures.
    """

    center: tuple
    size: tuple                       # full extents (sx, sy, sz)
    height_m: float                   # physical height in meters
    motion: geo.RigidMotion = field(default_factory=geo.RigidMotion.identity)
    texture: Texture = field(default_factory=lambda: Texture(base=(0.7, 0.4, 0.3)))
    flat_patch: tuple | None = None   # ((lo3), (hi3)) in local coords

    def to_json(self):
        d = {"center": list(self.center), "size": list(self.size),
             "height_m": self.height_m, "motion": self.motion.to_json(),
             "texture": self.texture.to_json()}
        if self.flat_patch is not None:
            d["flat_patch"] = [list(self.flat_patch[0]), list(self.flat_patch[1])]
        return d

    @classmethod
    def from_json(cls, d):
        patch = d.get("flat_patch")
        return cls(center=tuple(d["center"]), size=tuple(d["size"]),
                   height_m=float(d["height_m"]),
                   motion=geo.RigidMotion.from_json(d.get("motion", [0] * 6)),
                   texture=Texture.from_json(d.get("texture", {})),
                   flat_patch=None if patch is None
                   else (tuple(patch[0]), tuple(patch[1])))


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    K: geo.Intrinsics
    ego: geo.RigidMotion = field(default_factory=geo.RigidMotion.identity)
    background: Background = field(default_factory=Background)
    objects: tuple = ()
    seed: int = 0

    def to_json(self):
        return {"width": self.width, "height": self.height,
                "K": self.K.to_json(), "ego": self.ego.to_json(),
                "background": self.background.to_json(),
                "objects": [o.to_json() for o in self.objects],
                "seed": self.seed}

    @classmethod
    def from_json(cls, d):
        return cls(width=int(d["width"]), height=int(d["height"]),
                   K=geo.Intrinsics.from_json(d["K"]),
                   ego=geo.RigidMotion.from_json(d.get("ego", [0] * 6)),
                   background=Background.from_json(d.get("background", {})),
                   objects=tuple(SceneObject.from_json(o)
                                 for o in d.get("objects", [])),
                   seed=int(d.get("seed", 0)))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# ray casting


def _ray_plane(origin, dirs, plane):
    n = np.asarray(plane.normal, dtype=np.float64)
    p0 = np.asarray(plane.point, dtype=np.float64)
    denom = dirs @ n
    num = (p0 - origin) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    return np.where(lam > 1e-9, lam, np.inf)


def _ray_box(origin, dirs, center, half):
    """Slab test for an axis-aligned box; returns entry distance or inf."""
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    lam = np.where(tmin > 1e-9, tmin, tmax)  # inside the box: exit distance
    return np.where(hit, lam, np.inf)


def _cast(scene, cam_from_world, objects_moved):
    """Ray-cast one frame.

    ``cam_from_world`` maps world (frame-1 camera) points into this
    frame's camera; ``objects_moved`` is True for frame 2, where each
    object sits at its own motion applied to its frame-1 pose. Returns
    per-pixel depth, color, object index (-1 for background) and the
    frame-1 position P1 of the hit point.
    """
    h, w = scene.height, scene.width
    u, v = geo.pixel_grids(h, w)
    dirs_cam = np.stack([(u - scene.K.cx) / scene.K.fx,
                         (v - scene.K.cy) / scene.K.fy,
                         np.ones_like(u)], axis=-1)
    world_from_cam = geo.invert(cam_from_world)
    R_wc = geo.euler_to_matrix(world_from_cam.rotation)
    origin = world_from_cam.translation
    dirs = dirs_cam @ R_wc.T  # rotate only; ray directions are vectors

    depth = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3))
    obj_idx = np.full((h, w), -1, dtype=np.int64)
    world_pt = np.zeros((h, w, 3))

    lam_bg = _ray_plane(origin, dirs, scene.background)
    hit_bg = np.isfinite(lam_bg)
    pts = origin + lam_bg[..., None] * dirs
    depth = np.where(hit_bg, lam_bg * dirs_cam[..., 2], depth)
    if np.any(hit_bg):
        color[hit_bg] = scene.background.texture.sample(pts[hit_bg])
        world_pt[hit_bg] = pts[hit_bg]

    for i, obj in enumerate(scene.objects):
        # intersect in the object's frame-1 coordinates: pull the ray
        # back through the object's own motion (frame 2 only)
        if objects_moved:
            m_inv = geo.invert(obj.motion)
            R_mi = geo.euler_to_matrix(m_inv.rotation)
            o_loc = m_inv.apply(origin)
            d_loc = dirs @ R_mi.T
        else:
            o_loc, d_loc = origin, dirs
        lam = _ray_box(o_loc, d_loc, np.asarray(obj.center),
                       np.asarray(obj.size) / 2.0)
        z = lam * dirs_cam[..., 2]
        closer = (lam < np.inf) & (z < depth)
        if not np.any(closer):
            continue
        p1 = o_loc[None, :] + lam[closer][:, None] * d_loc[closer]
        local = p1 - np.asarray(obj.center)
        tex = obj.texture.sample(local)
        if obj.flat_patch is not None:
            lo = np.asarray(obj.flat_patch[0])
            hi = np.asarray(obj.flat_patch[1])
            inside = np.all((local >= lo) & (local <= hi), axis=-1)
            tex[inside] = np.asarray(obj.texture.base)
        depth[closer] = z[closer]
        color[closer] = tex
        obj_idx[closer] = i
        world_pt[closer] = p1

    if not np.all(np.isfinite(depth)):
        raise SceneError("scene does not cover the full frame")
    if depth.min() < DEPTH_MIN or depth.max() > DEPTH_MAX:
        raise SceneError(
            f"depth range [{depth.min():.3g}, {depth.max():.3g}] outside "
            f"[{DEPTH_MIN}, {DEPTH_MAX}]")
    return depth, color, obj_idx, world_pt


# ---------------------------------------------------------------------------
# ground truth assembly


@dataclass
class GroundTruth:
    """Exact render products of both frames plus motion ground truth."""

    I1: Grid
    I2: Grid
    D1: Grid
    D2: Grid
    mask1: Grid            # {0,1} union of object pixels, frame 1
    mask2: Grid
    obj_idx1: np.ndarray   # per-pixel object index, -1 = background
    obj_idx2: np.ndarray
    residual: Grid         # (H, W, 3) on frame-2 pixels
    occlusion: Grid        # {0,1}: 1 where the frame-2 pixel is occluded in frame 1
    boxes: list            # DetectionBox per object (frame 2, with margin)
    tight_boxes: list
    ego: geo.RigidMotion
    object_motions: list
    K: geo.Intrinsics = None
    prior_heights: list = None  # per object: physical height consistent with
                                # the tight box's quantized pixel height

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        write_ppm(os.path.join(out_dir, "I1.ppm"), self.I1)
        write_ppm(os.path.join(out_dir, "I2.ppm"), self.I2)
        write_pfm(os.path.join(out_dir, "I1.pfm"), self.I1)
        write_pfm(os.path.join(out_dir, "I2.pfm"), self.I2)
        write_pfm(os.path.join(out_dir, "D1.pfm"), self.D1)
        write_pfm(os.path.join(out_dir, "D2.pfm"), self.D2)
        write_pgm(os.path.join(out_dir, "mask1.pgm"), self.mask1)
        write_pgm(os.path.join(out_dir, "mask2.pgm"), self.mask2)
        write_pfm(os.path.join(out_dir, "residual.pfm"), self.residual)
        write_pgm(os.path.join(out_dir, "occlusion.pgm"), self.occlusion)
        meta = {
            "ego": self.ego.to_json(),
            "object_motions": [m.to_json() for m in self.object_motions],
            "boxes": [b.to_json() for b in self.boxes],
            "tight_boxes": [b.to_json() for b in self.tight_boxes],
            "K": None if self.K is None else self.K.to_json(),
            "prior_heights": self.prior_heights,
        }
        with open(os.path.join(out_dir, "meta.json"), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def render(scene):
    """Ray-cast both frames and assemble exact ground truth."""
    identity = geo.RigidMotion.identity()
    d1, c1, idx1, _ = _cast(scene, identity, objects_moved=False)
    d2, c2, idx2, p1_of_2 = _cast(scene, scene.ego, objects_moved=True)

    h, w = scene.height, scene.width
    ego_inv = geo.invert(scene.ego)

    # residual(p) = P1(p) - ego^-1(X2(p)); X2 = depth * camera-2 ray
    u, v = geo.pixel_grids(h, w)
    x2 = np.stack([d2 * (u - scene.K.cx) / scene.K.fx,
                   d2 * (v - scene.K.cy) / scene.K.fy, d2], axis=-1)
    residual = p1_of_2 - ego_inv.apply(x2.reshape(-1, 3)).reshape(h, w, 3)
    residual[idx2 < 0] = 0.0
    # clean round-off on static pixels
    residual[np.abs(residual) < 1e-9] = 0.0

    # occlusion: frame-2 pixels whose frame-1 point is hidden or out of frame,
    # plus pixels whose bilinear source footprint straddles two surfaces (a
    # sample there mixes occluder and occludee colors regardless of motion)
    uv1, valid1 = geo.project(p1_of_2, scene.K)
    z1 = p1_of_2[..., 2]
    x0 = np.clip(np.floor(uv1[..., 0]).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(uv1[..., 1]).astype(np.int64), 0, h - 1)
    occ = valid1 < 1
    mixed = np.zeros((h, w), dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = np.minimum(x0 + dx, w - 1)
            yi = np.minimum(y0 + dy, h - 1)
            occ |= z1 > d1[yi, xi] * (1.0 + 5e-3) + 5e-3
            mixed |= idx1[yi, xi] != idx2
    occlusion = (occ | mixed).astype(np.float64)

    rng = np.random.default_rng(scene.seed)
    boxes, tight = [], []
    motions = []
    prior_heights = []
    for i, obj in enumerate(scene.objects):
        m = (idx2 == i).astype(np.float64)
        if m.sum() == 0:
            raise SceneError(f"object {i} is not visible in frame 2")
        tb = box_from_mask(m, margin=0.0, rng=rng)
        tight.append(tb)
        boxes.append(box_from_mask(m, margin=0.1, rng=rng))
        motions.append(obj.motion)
        # physical height consistent with the quantized tight-box height,
        # so the pinhole-implied depth prior is exact at GT depth
        sub = d2[tb.y:tb.y + tb.h, tb.x:tb.x + tb.w]
        fg = fg_mask(sub)
        vals = sub[fg > 0] if np.any(fg > 0) else sub.reshape(-1)
        # lower median, matching the pixel the height prior anchors to
        order = np.argsort(vals, kind="stable")
        d_med = float(vals[order[(len(order) - 1) // 2]])
        prior_heights.append(tb.h * d_med / scene.K.fy)

    def g(a):
        return Grid(a if a.ndim == 3 else a[:, :, None])

    return GroundTruth(
        I1=g(c1), I2=g(c2), D1=g(d1), D2=g(d2),
        mask1=g((idx1 >= 0).astype(np.float64)),
        mask2=g((idx2 >= 0).astype(np.float64)),
        obj_idx1=idx1, obj_idx2=idx2,
        residual=g(residual), occlusion=g(occlusion),
        boxes=boxes, tight_boxes=tight,
        ego=scene.ego, object_motions=motions,
        K=scene.K, prior_heights=prior_heights)


def total_field_gt(gt):
    """GT frame-2 -> frame-1 total motion field (what inverse_warp expects)."""
    ego_inv = geo.invert(gt.ego)
    return geo.compose_total(ego_inv, gt.residual.data)


def box_from_mask(mask, margin=0.1, seed=None, rng=None):
    """Tight bounding box of a binary mask, expanded per side by a random
    fraction of the box size in [0, margin], clipped to the image."""
    m = mask.data[..., 0] if isinstance(mask, Grid) else np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    ys, xs = np.nonzero(m > 0)
    if ys.size == 0:
        raise SceneError("mask is empty")
    if margin < 0:
        raise SceneError("margin must be >= 0")
    if rng is None:
        rng = np.random.default_rng(seed)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    bw, bh = x1 - x0, y1 - y0
    grow = rng.uniform(0.0, margin, size=4) if margin > 0 else np.zeros(4)
    x0 = max(0, int(np.floor(x0 - grow[0] * bw)))
    x1 = min(m.shape[1], int(np.ceil(x1 + grow[1] * bw)))
    y0 = max(0, int(np.floor(y0 - grow[2] * bh)))
    y1 = min(m.shape[0], int(np.ceil(y1 + grow[3] * bh)))
    return DetectionBox(x0, y0, max(x1 - x0, 2), max(y1 - y0, 2))
