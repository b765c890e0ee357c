"""Self-supervised objective terms and their phase-weighted aggregation.

Terms: photometric (L1 + SSIM), geometric depth consistency, edge-aware
depth smoothness, box-height scale prior, reparametrized edge-aware
motion smoothness, motion sparsity, and motion cycle consistency. The
consensus regularization term lives in :mod:`motfield.csac`; this module
only aggregates it.

Per-pixel losses are mean-normalized so the weights are resolution
independent. All terms accept tape variables and stay differentiable.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .grid import Grid, as_array

EPS = 1e-12

# weight schedule, one row per training phase
PHASE_WEIGHTS = {
    1: dict(lam_p=1.0, lam_g=1.0, lam_s=0.1, lam_h=0.2,
            lam_mr=0.0, lam_ms=0.0, lam_mp=0.0, lam_mc=0.0),
    2: dict(lam_p=1.0, lam_g=1.0, lam_s=0.1, lam_h=0.2,
            lam_mr=0.0, lam_ms=1.0, lam_mp=0.5, lam_mc=0.001),
    3: dict(lam_p=1.0, lam_g=1.0, lam_s=0.1, lam_h=0.2,
            lam_mr=0.2, lam_ms=1.0, lam_mp=1.0, lam_mc=0.001),
}

PHASE1_TERMS = ("photometric", "geometric", "depth_smoothness", "height_prior")
PHASE2_TERMS = ("motion_reg", "motion_smoothness", "motion_sparsity",
                "motion_consistency")

TERM_WEIGHT = {
    "photometric": "lam_p",
    "geometric": "lam_g",
    "depth_smoothness": "lam_s",
    "height_prior": "lam_h",
    "motion_reg": "lam_mr",
    "motion_smoothness": "lam_ms",
    "motion_sparsity": "lam_mp",
    "motion_consistency": "lam_mc",
}


class LossError(ValueError):
    pass


class EmptyMaskError(LossError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam_p: float = 1.0
    lam_g: float = 1.0
    lam_s: float = 0.1
    lam_h: float = 0.2
    lam_mr: float = 0.0
    lam_ms: float = 0.0
    lam_mp: float = 0.0
    lam_mc: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise LossError(f"loss weight {k} must be >= 0, got {v}")

    @classmethod
    def for_phase(cls, phase):
        return cls(**PHASE_WEIGHTS[int(phase)])

    def weight_for(self, term):
        return getattr(self, TERM_WEIGHT[term])


@dataclass
class LossReport:
    """Unweighted term values, the weighted total, and bookkeeping counts."""

    phase: int
    terms: dict
    weights: LossWeights
    total: float
    pixel_counts: dict = field(default_factory=dict)
    warnings: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "phase": self.phase,
            "terms": {k: float(v) for k, v in self.terms.items()},
            "weights": asdict(self.weights),
            "total": float(self.total),
            "pixel_counts": self.pixel_counts,
            "warnings": self.warnings,
        }, sort_keys=True)

    def csv_row(self, step):
        row = {"step": step, "total": float(self.total)}
        row.update({k: float(v) for k, v in self.terms.items()})
        return row

    def append_csv(self, path, step):
        row = self.csv_row(step)
        write_header = not os.path.exists(path)
        with open(path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if write_header:
                w.writeheader()
            w.writerow(row)


def _img(x):
    return x.data if isinstance(x, Grid) else x


def masked_mean(x, mask):
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise EmptyMaskError("mask selects no pixels")
    return ad.div(ad.vsum(ad.mul(x, m)), float(n))


def ssim(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    """Per-pixel SSIM on the valid interior (H-2, W-2, C), 3x3 mean window."""
    mu_a = ad.box3(a)
    mu_b = ad.box3(b)
    sig_a = ad.sub(ad.box3(ad.mul(a, a)), ad.mul(mu_a, mu_a))
    sig_b = ad.sub(ad.box3(ad.mul(b, b)), ad.mul(mu_b, mu_b))
    sig_ab = ad.sub(ad.box3(ad.mul(a, b)), ad.mul(mu_a, mu_b))
    num = ad.mul(ad.add(2.0 * ad.mul(mu_a, mu_b), c1),
                 ad.add(2.0 * sig_ab, c2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), c1),
                 ad.add(ad.add(sig_a, sig_b), c2))
    return ad.div(num, den)


def photometric(image, synth, mask, gamma1=0.3, gamma2=1.5):
    """gamma1 * |I - I^|_1 + gamma2 * (1 - SSIM), masked interior mean.

    Both terms are evaluated on the 1-pixel-cropped interior where the
    3x3 SSIM window is fully supported.
    """
    if gamma1 < 0 or gamma2 < 0:
        raise LossError("photometric gammas must be >= 0")
    a = _img(image)
    b = _img(synth)
    av = ad.value_of(a)
    if av.shape != ad.value_of(b).shape:
        raise LossError("photometric shape mismatch")
    inner = (slice(1, -1), slice(1, -1))
    l1 = ad.vmean(ad.getitem(ad.absolute(ad.sub(a, b)), inner + (slice(None),)),
                  axis=-1)
    dssim = ad.vmean(ad.sub(1.0, ssim(a, b)), axis=-1)
    per_pixel = ad.add(ad.mul(l1, gamma1), ad.mul(dssim, gamma2))
    m = as_array(mask)[..., 0][inner]
    return masked_mean(per_pixel, m)


def geometric_consistency(warped_depth, depth, mask):
    """Masked mean of the normalized depth difference |D^-D| / (D^+D)."""
    a = _img(warped_depth)
    b = _img(depth)
    diff = ad.absolute(ad.sub(a, b))
    denom = ad.add(ad.add(a, b), EPS)
    return masked_mean(ad.div(diff, denom), np.asarray(mask, dtype=np.float64))


def depth_smoothness(depth, image):
    """Edge-aware smoothness of mean-normalized depth (scale invariant)."""
    d = _img(depth)
    dv = ad.value_of(d)
    if dv.ndim == 3:
        d = ad.reshape(d, dv.shape[:2])
    img = as_array(_img(image)) if not ad.is_var(image) else image
    norm = ad.div(d, ad.add(ad.vmean(d), EPS))
    gx = ad.absolute(ad.grad_x(norm))
    gy = ad.absolute(ad.grad_y(norm))
    ig = ad.value_of(img)
    wx = np.exp(-np.abs(ig[:, 1:] - ig[:, :-1]).mean(axis=-1))
    wy = np.exp(-np.abs(ig[1:] - ig[:-1]).mean(axis=-1))
    return ad.add(ad.vmean(ad.mul(gx, wx)), ad.vmean(ad.mul(gy, wy)))


def height_prior(depth, boxes, prior_height, K):
    """Scale anchor: median foreground depth of each box versus the depth
    implied by a known physical height seen at the box's pixel height.

    ``prior_height`` is a scalar (meters, i.e. scene units) or one value
    per box. Boxes whose foreground mask is empty are skipped; the count
    of skips is returned alongside the scalar loss.
    """
    from .csac import fg_mask  # local import to avoid a cycle

    d = _img(depth)
    dv = ad.value_of(d)
    if dv.ndim == 3:
        d = ad.reshape(d, dv.shape[:2])
        dv = dv[..., 0]
    heights = np.broadcast_to(np.asarray(prior_height, dtype=np.float64),
                              (len(boxes),))
    terms = []
    skipped = 0
    for box, h_m in zip(boxes, heights):
        sub = dv[box.y:box.y + box.h, box.x:box.x + box.w]
        fg = fg_mask(sub)
        rows, cols = np.nonzero(fg)
        if rows.size == 0:
            skipped += 1
            continue
        vals = sub[rows, cols]
        order = np.argsort(vals, kind="stable")
        mi = order[(len(order) - 1) // 2]  # lower median, deterministic
        d_box = ad.getitem(d, (box.y + rows[mi], box.x + cols[mi]))
        d_expected = K.fy * h_m / box.h
        terms.append(ad.div(ad.absolute(ad.sub(d_box, d_expected)), d_expected))
    if not terms:
        return 0.0, skipped
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, float(len(terms))), skipped


def motion_smoothness(t_res, depth, tau=0.1):
    """Squared motion gradients gated by exp(-|grad D|/tau) depth edges."""
    if not tau > 0:
        raise LossError("tau must be > 0")
    t = _img(t_res)
    dv = ad.value_of(_img(depth))
    if dv.ndim == 3:
        dv = dv[..., 0]
    dn = dv / max(dv.mean(), EPS)
    wx = np.exp(-np.abs(dn[:, 1:] - dn[:, :-1]) / tau)[:, :, None]
    wy = np.exp(-np.abs(dn[1:] - dn[:-1]) / tau)[:, :, None]
    gx = ad.mul(ad.grad_x(t), wx)
    gy = ad.mul(ad.grad_y(t), wy)
    return ad.add(ad.vmean(ad.mul(gx, gx)), ad.vmean(ad.mul(gy, gy)))


def motion_sparsity(t_res):
    """Group-sqrt sparsity: mean over channels of the sub-linear penalty
    2 m_c (sqrt(1 + |T_c|/m_c) - 1) with m_c the channel mean magnitude."""
    t = _img(t_res)
    mags = ad.absolute(t)
    m_c = ad.add(ad.vmean(mags, axis=(0, 1), keepdims=True), EPS)
    inner = ad.sqrt(ad.add(1.0, ad.div(mags, m_c)))
    per = ad.mul(2.0 * m_c, ad.sub(inner, 1.0))
    return ad.vmean(per)


def motion_consistency(total_fwd, total_bwd, valid, depth=None, K=None):
    """Cycle deviation of composed per-pixel transforms from identity.

    Composes ``M_bwd(p') @ M_fwd(p)`` and measures the squared Frobenius
    deviation of the result from the identity, averaged over valid
    pixels. ``p'`` is the forward-warped position of ``p`` when ``depth``
    and ``K`` are given, else ``p`` itself.
    """
    Rf = total_fwd.rotation_matrix_entries()
    Rb = total_bwd.rotation_matrix_entries()
    tf = total_fwd.translation_field
    tb = total_bwd.translation_field

    if depth is not None and K is not None:
        from . import geometry as geo
        points = geo.backproject(_img(depth), K)
        from .warp import _apply_entries
        moved = _apply_entries(Rf, points, tf)
        uv, proj_valid = geo.project(moved, K)
        u = ad.getitem(uv, (Ellipsis, 0))
        v = ad.getitem(uv, (Ellipsis, 1))
        tb_s, samp_valid = ad.bilinear_sample(tb, u, v)
        valid = np.asarray(valid, dtype=np.float64) * proj_valid * samp_valid
    else:
        tb_s = tb

    rot_dev = 0.0
    for i in range(3):
        for j in range(3):
            cij = Rb[i][0] * Rf[0][j] + Rb[i][1] * Rf[1][j] + Rb[i][2] * Rf[2][j]
            d = ad.sub(cij, 1.0 if i == j else 0.0)
            rot_dev = ad.add(rot_dev, ad.mul(d, d))

    t_dev = 0.0
    for i in range(3):
        ci = ad.getitem(tb_s, (Ellipsis, i))
        for k in range(3):
            ci = ad.add(ci, ad.mul(Rb[i][k], ad.getitem(tf, (Ellipsis, k))))
        t_dev = ad.add(t_dev, ad.mul(ci, ci))
    return ad.add(rot_dev, masked_mean(t_dev, valid))


def total_loss(terms, weights, phase):
    """Phase-gated weighted sum; returns ``(scalar, LossReport)``.

    Phase 1 accepts only the four depth/ego terms; phases 2 and 3 add the
    motion terms. Supplying a motion term in phase 1 is an error.
    """
    phase = int(phase)
    if phase not in (1, 2, 3):
        raise LossError(f"phase must be 1, 2 or 3, got {phase}")
    allowed = PHASE1_TERMS + (PHASE2_TERMS if phase >= 2 else ())
    for name in terms:
        if name not in TERM_WEIGHT:
            raise LossError(f"unknown loss term '{name}'")
        if name not in allowed:
            raise LossError(f"term '{name}' is not active in phase {phase}")
    total = 0.0
    values = {}
    for name, value in terms.items():
        lam = weights.weight_for(name)
        values[name] = float(ad.value_of(value))
        total = ad.add(total, ad.mul(value, lam))
    report = LossReport(phase=phase, terms=values, weights=weights,
                        total=float(ad.value_of(total)))
    return total, report
