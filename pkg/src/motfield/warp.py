"""The two projection stages: forward splatting and pixel-wise inverse warp.

Forward warping splats each source pixel to its nearest target pixel with
a z-buffer (closest depth wins, row-major source index breaks ties) and
leaves holes where nothing lands -- the occlusion/disocclusion structure
the second stage depends on. Inverse warping backprojects the target
depth, applies a per-pixel total motion field and bilinearly samples the
source image; it is differentiable with respect to the target depth, the
rotation angles and the translation field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .grid import Grid, as_array, write_pfm


class WarpError(ValueError):
    pass


@dataclass
class WarpResult:
    """Synthesized image + depth with validity and inconsistency masks."""

    image: object              # (H, W, 3) array or Var
    depth: object              # (H, W) array or Var
    validity: np.ndarray       # (H, W) in {0, 1}
    inconsistency: np.ndarray | None = None  # (H, W) >= 0, 0 where invalid
    coords: object | None = None             # (H, W, 2) source sample coords

    def dump(self, out_dir, prefix):
        """Write the four fields as PFM plus a JSON statistics sidecar."""
        import os

        img = ad.value_of(self.image)
        dep = ad.value_of(self.depth)
        write_pfm(os.path.join(out_dir, f"{prefix}_image.pfm"), img)
        write_pfm(os.path.join(out_dir, f"{prefix}_depth.pfm"), dep[:, :, None])
        write_pfm(os.path.join(out_dir, f"{prefix}_validity.pfm"),
                  self.validity[:, :, None])
        inc = self.inconsistency if self.inconsistency is not None \
            else np.zeros_like(self.validity)
        write_pfm(os.path.join(out_dir, f"{prefix}_inconsistency.pfm"),
                  inc[:, :, None])
        stats = {
            "valid_fraction": float(self.validity.mean()),
            "mean_inconsistency": float(inc[self.validity > 0].mean())
            if np.any(self.validity > 0) else 0.0,
        }
        with open(os.path.join(out_dir, f"{prefix}_stats.json"), "w") as f:
            json.dump(stats, f, indent=2, sort_keys=True)
        return stats


def _depth_2d(depth):
    d = depth.data if isinstance(depth, Grid) else depth
    dv = ad.value_of(d)
    if dv.ndim == 3:
        d = ad.reshape(d, dv.shape[:2])
        dv = dv[..., 0]
    return d, dv


def forward_warp(image, depth, ego, K):
    """Splat a source frame into the target view of a rigid motion.

    Pure numpy (the forward stage feeds no gradients). Each source pixel
    is transformed by ``ego``, projected, and written to the nearest
    target pixel if it wins the z-buffer.
    """
    img = as_array(image)
    _, dv = _depth_2d(depth)
    if np.any(dv <= 0):
        raise WarpError("forward_warp requires strictly positive depth")
    h, w = dv.shape

    points = geo.backproject(dv, K)
    moved = ego.apply(points.reshape(-1, 3)).reshape(h, w, 3)
    uv, valid = geo.project(moved, K)
    z = moved[..., 2]

    ui = np.round(uv[..., 0]).astype(np.int64)
    vi = np.round(uv[..., 1]).astype(np.int64)
    ok = (valid > 0) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)

    src = np.flatnonzero(ok.reshape(-1))
    tgt = (vi.reshape(-1)[src] * w + ui.reshape(-1)[src])
    zs = z.reshape(-1)[src]
    # z-buffer: nearest depth wins, earlier row-major source index on ties
    order = np.lexsort((src, zs, tgt))
    tgt_sorted = tgt[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    winners = order[first]

    out_img = np.zeros_like(img)
    out_depth = np.zeros((h, w))
    out_valid = np.zeros((h, w))
    flat_img = img.reshape(-1, img.shape[2])
    out_img.reshape(-1, img.shape[2])[tgt[winners]] = flat_img[src[winners]]
    out_depth.reshape(-1)[tgt[winners]] = zs[winners]
    out_valid.reshape(-1)[tgt[winners]] = 1.0
    return WarpResult(image=out_img, depth=out_depth, validity=out_valid)


def warp_with_rotation(image, depth, rot_entries, t_field, K):
    """Inverse warp given explicit rotation-matrix entries.

    Used both by :func:`inverse_warp` and by the optimizer, which derives
    inverted rotations analytically (transposed entries) to stay on the
    gradient tape without a matrix-to-Euler round trip.
    """
    img = image.data if isinstance(image, Grid) else image
    d, dv = _depth_2d(depth)
    if np.any(dv <= 0):
        raise WarpError("inverse_warp requires strictly positive depth")

    points = geo.backproject(d, K)
    moved = _apply_entries(rot_entries, points, t_field)
    uv, valid_proj = geo.project(moved, K)
    u = ad.getitem(uv, (Ellipsis, 0))
    v = ad.getitem(uv, (Ellipsis, 1))
    sampled, valid_samp = ad.bilinear_sample(img, u, v)
    validity = valid_proj * valid_samp
    depth_out = ad.getitem(moved, (Ellipsis, 2))
    return WarpResult(image=sampled, depth=depth_out, validity=validity,
                      coords=uv)


def _apply_entries(R, points, t_field):
    px = ad.getitem(points, (Ellipsis, 0))
    py = ad.getitem(points, (Ellipsis, 1))
    pz = ad.getitem(points, (Ellipsis, 2))
    out = []
    for i in range(3):
        ti = ad.getitem(t_field, (Ellipsis, i))
        out.append(R[i][0] * px + R[i][1] * py + R[i][2] * pz + ti)
    return ad.stack(out, axis=-1)


def inverse_warp(image, depth, total, K):
    """Synthesize the target frame by sampling the source at warped coords.

    For each target pixel: backproject with the target depth, apply the
    per-pixel total motion (target-to-source direction), project into the
    source and bilinearly sample. Out-of-bounds samples get validity 0.
    The returned depth is the z-component of the transformed point.
    """
    return warp_with_rotation(image, depth,
                              total.rotation_matrix_entries(),
                              total.translation_field, K)


def inconsistency_map(warped_depth, observed_depth, validity):
    """Normalized depth disagreement |D^ - D| / (D^ + D) on valid pixels."""
    a = ad.value_of(warped_depth)
    b = ad.value_of(observed_depth)
    if a.shape != b.shape:
        raise WarpError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = np.maximum(a + b, 1e-12)
    return np.where(validity > 0, np.abs(a - b) / denom, 0.0)


def occlusion_mask(inconsistency, threshold, validity=None):
    """Binary keep-mask: 1 where consistent and valid."""
    if not (0.0 < threshold < 1.0):
        raise WarpError("occlusion threshold must be in (0, 1)")
    mask = (np.asarray(inconsistency) < threshold).astype(np.float64)
    if validity is not None:
        mask = mask * (validity > 0)
    return mask


def stage2_stack(ego_result, image2, depth2):
    """Diagnostic 8-channel stack (I^ego, D^ego, I2, D2) of the second stage."""
    img = ad.value_of(ego_result.image)
    dep = ad.value_of(ego_result.depth)[:, :, None]
    i2 = as_array(image2)
    d2 = ad.value_of(depth2)
    if d2.ndim == 2:
        d2 = d2[:, :, None]
    return np.concatenate([img, dep, i2, d2], axis=2)


def psnr(a, b, mask=None):
    """Peak signal-to-noise ratio in dB for images scaled to [0, 1]."""
    av, bv = ad.value_of(a), ad.value_of(b)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if av.ndim == 3 and m.ndim == 2:
            m = np.repeat(m[:, :, None], av.shape[2], axis=2)
        av, bv = av[m], bv[m]
    mse = np.mean((av - bv) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))
