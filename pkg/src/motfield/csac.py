"""Contrastive sample consensus over residual motion fields.

Given a detection box and the predicted depth, the box is split into a
near (foreground) and far (background) group by Otsu thresholding. Each
group's representative motion is found by a randomized hypothesis search
with soft inlier counting, then refined as the score-weighted mean.
A contrastive penalty pushes weak foreground motions up toward the
foreground consensus magnitude and strong background motions down, which
widens the motion gap across the object boundary.

The hypothesis search is gradient-detached; only the contrastive penalty
backpropagates, and only into the query vectors (the residual field).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import Grid, write_pfm, write_pgm

COMPONENT_EPS = 1e-8  # hypotheses with any |component| below this are rejected
MAG_EPS = 1e-8        # floor for consensus magnitudes in the penalty


class CsacError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionBox:
    """Axis-aligned 2D box in pixel coordinates, clipped at construction."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 2 or self.h < 2:
            raise CsacError(f"box extent must be >= 2 pixels, got {self.w}x{self.h}")

    def clipped(self, width, height):
        x0 = max(self.x, 0)
        y0 = max(self.y, 0)
        x1 = min(self.x + self.w, width)
        y1 = min(self.y + self.h, height)
        if x1 - x0 < 2 or y1 - y0 < 2:
            raise CsacError("box does not overlap the image by >= 2 pixels")
        return DetectionBox(x0, y0, x1 - x0, y1 - y0)

    def to_json(self):
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class ConsensusConfig:
    alpha: float = 30.0
    beta: float = 0.2
    iterations: int = 50
    inlier_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise CsacError("alpha must be > 0")
        if not 0.0 < self.beta < 1.0:
            raise CsacError("beta must be in (0, 1)")
        if self.iterations < 1:
            raise CsacError("iteration count must be >= 1")
        if not 0.0 < self.inlier_threshold < 1.0:
            raise CsacError("inlier threshold must be in (0, 1)")


@dataclass
class ConsensusResult:
    """Per-box consensus output: masks, refined motions, penalty values."""

    box: DetectionBox
    fg_mask: np.ndarray            # {0,1} over the box
    refined_fg: np.ndarray | None  # consensus foreground 3-vector
    refined_bg: np.ndarray | None
    inlier_map: np.ndarray | None  # [0,1] over the box, fg-consensus scores
    loss_fg: float = 0.0
    loss_bg: float = 0.0
    best_score: float = 0.0
    skipped: bool = False

    def export(self, out_dir, index, threshold=0.5):
        import os

        tag = f"box{index:02d}"
        if self.inlier_map is not None:
            write_pfm(os.path.join(out_dir, f"{tag}_inliers.pfm"),
                      self.inlier_map[:, :, None])
            write_pgm(os.path.join(out_dir, f"{tag}_segment.pgm"),
                      (self.inlier_map >= threshold).astype(np.float64)[:, :, None])
        payload = {
            "box": self.box.to_json(),
            "refined_fg": None if self.refined_fg is None else self.refined_fg.tolist(),
            "refined_bg": None if self.refined_bg is None else self.refined_bg.tolist(),
            "best_score": self.best_score,
            "loss_fg": self.loss_fg,
            "loss_bg": self.loss_bg,
            "skipped": self.skipped,
        }
        with open(os.path.join(out_dir, f"{tag}.json"), "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# foreground mask


def otsu_threshold(values, bins=256):
    """Threshold maximizing between-class variance of a 256-bin histogram.

    Returns the bin edge; ties resolve to the lowest threshold.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return None
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / hist.sum()
    w0 = np.cumsum(p)[:-1]
    w1 = 1.0 - w0
    m = np.cumsum(p * np.arange(bins))
    mu_total = m[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m[:-1] / w0
        mu1 = (mu_total - m[:-1]) / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between = np.nan_to_num(var_between, nan=-1.0)
    k = int(np.argmax(var_between))  # argmax takes the first (lowest) maximum
    return edges[k + 1]


def fg_mask(depth_box):
    """Binary foreground mask of a box: pixels nearer than the Otsu cut.

    A constant-depth box has no bimodality and yields an all-background
    mask (callers treat this as a degenerate, skippable box).
    """
    d = depth_box.data[..., 0] if isinstance(depth_box, Grid) else np.asarray(depth_box)
    if d.ndim == 3:
        d = d[..., 0]
    if d.size < 2:
        raise CsacError("box must contain at least 2 depth values")
    t = otsu_threshold(d)
    if t is None:
        return np.zeros_like(d)
    return (d < t).astype(np.float64)


# ---------------------------------------------------------------------------
# soft inlier counting


def inlier_weight(x, alpha=30.0, beta=0.2):
    """Soft inlier score 1 - sigmoid(alpha * (x - beta)), in (0, 1)."""
    if not alpha > 0:
        raise CsacError("alpha must be > 0")
    return ad.sub(1.0, ad.sigmoid(ad.mul(ad.sub(x, beta), alpha)))


def score_hypothesis(v_h, V, alpha=30.0, beta=0.2):
    """Ratio residuals of queries against a hypothesis -> per-vector scores.

    Residual of query q: sum over axes of |(v_h - v_q) / v_h|; invariant
    under joint scaling of hypothesis and queries. Returns ``(S, S_i)``.
    """
    v_h = np.asarray(v_h, dtype=np.float64).reshape(3)
    if np.any(np.abs(v_h) < COMPONENT_EPS):
        raise CsacError("hypothesis has a near-zero component")
    Vv = ad.value_of(V).reshape(-1, 3)
    r = np.abs((v_h[None, :] - Vv) / v_h[None, :]).sum(axis=1)
    S = inlier_weight(r, alpha, beta)
    return S, float(S.sum())


def refine(S, V):
    """Score-weighted mean of the query vectors."""
    S = np.asarray(S, dtype=np.float64).reshape(-1)
    Vv = ad.value_of(V).reshape(-1, 3)
    total = S.sum()
    if total <= 0:
        raise CsacError("refine requires a positive score mass")
    return (S[:, None] * Vv).sum(axis=0) / total


def consensus_search(V, cfg, rng=None):
    """Randomized hypothesis search with soft inlier counting.

    Draws ``cfg.iterations`` single-vector hypotheses uniformly from V
    (hypotheses with any near-zero component are resampled), keeps the
    refinement of the best-scoring one. Deterministic given the seed.

    Returns ``(v_bar, s_max, best_scores)`` or ``None`` if every draw was
    degenerate.
    """
    Vv = np.asarray(V, dtype=np.float64).reshape(-1, 3)
    if Vv.shape[0] == 0:
        raise CsacError("empty query set")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    usable = np.all(np.abs(Vv) >= COMPONENT_EPS, axis=1)
    if not np.any(usable):
        return None
    best = None
    draws = 0
    limit = cfg.iterations * 20
    found = 0
    while found < cfg.iterations and draws < limit:
        idx = int(rng.integers(Vv.shape[0]))
        draws += 1
        if not usable[idx]:
            continue  # degenerate hypothesis: resample
        found += 1
        S, s_i = score_hypothesis(Vv[idx], Vv, cfg.alpha, cfg.beta)
        if best is None or s_i > best[1]:
            best = (Vv[idx], s_i, S)
    if best is None:
        return None
    v_bar = refine(best[2], Vv)
    return v_bar, best[1], best[2]


# ---------------------------------------------------------------------------
# contrastive penalty


def _magnitudes(V):
    sq = ad.vsum(ad.mul(V, V), axis=-1)
    return ad.sqrt(ad.add(sq, 1e-24))


def contrastive_penalty(V_f, V_b, vbar_f, vbar_b, alpha=30.0, beta=0.2):
    """Per-group penalties of Eq-style clipped magnitude ratios.

    Foreground: penalize |v_q| below the consensus magnitude; background:
    penalize |v_q| above it. The consensus magnitudes are detached scalars
    (a near-zero background magnitude is floored at a small epsilon, the
    static-background case). Gradients flow only into the query vectors.
    """
    def group(V, ratio_fn):
        if V is None or ad.value_of(V).size == 0:
            return 0.0
        mags = _magnitudes(V)
        r = ratio_fn(mags)
        pen = ad.sub(1.0, inlier_weight(ad.maximum(r, 0.0), alpha, beta))
        return ad.vsum(pen)

    mf = max(float(np.linalg.norm(vbar_f)), MAG_EPS) if vbar_f is not None else None
    mb = max(float(np.linalg.norm(vbar_b)), MAG_EPS) if vbar_b is not None else None
    loss_f = group(V_f, lambda m: ad.div(ad.sub(mf, m), mf)) if mf is not None else 0.0
    loss_b = group(V_b, lambda m: ad.div(ad.sub(m, mb), mb)) if mb is not None else 0.0
    return loss_f, loss_b


# ---------------------------------------------------------------------------
# full per-box loss


def csac_loss(t_res, depth, boxes, cfg):
    """Consensus regularization over all boxes of a frame.

    Per box: Otsu split of the depth crop, per-group consensus search
    (detached), contrastive penalties (differentiable in the residual
    field), summed and normalized by the total pixel count across boxes.

    Returns ``(loss, results)``; boxes with no usable hypotheses in a
    group contribute nothing for that group and are flagged in their
    :class:`ConsensusResult`.
    """
    tv = ad.value_of(t_res.data if isinstance(t_res, Grid) else t_res)
    if tv.ndim != 3 or tv.shape[2] != 3:
        raise CsacError(f"residual field must be (H, W, 3), got {tv.shape}")
    dv = ad.value_of(depth.data if isinstance(depth, Grid) else depth)
    if dv.ndim == 3:
        dv = dv[..., 0]
    H, W = dv.shape

    total = 0.0
    total_pixels = 0
    results = []
    for bi, raw_box in enumerate(boxes):
        box = raw_box.clipped(W, H)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, bi]))
        sub_d = dv[box.y:box.y + box.h, box.x:box.x + box.w]
        mask = fg_mask(sub_d)
        total_pixels += box.w * box.h

        rows, cols = np.mgrid[box.y:box.y + box.h, box.x:box.x + box.w]
        V_all = ad.gather_pixels(t_res, rows.reshape(-1), cols.reshape(-1))
        flat_mask = mask.reshape(-1) > 0

        def take(keep):
            idx = np.flatnonzero(keep)
            if idx.size == 0:
                return None, None
            sel = ad.getitem(V_all, (idx, slice(None)))
            return sel, ad.value_of(sel)

        Vf, Vf_np = take(flat_mask)
        Vb, Vb_np = take(~flat_mask)

        search_f = consensus_search(Vf_np, cfg, rng) if Vf_np is not None else None
        search_b = consensus_search(Vb_np, cfg, rng) if Vb_np is not None else None

        if search_f is None and search_b is None:
            results.append(ConsensusResult(box=box, fg_mask=mask,
                                           refined_fg=None, refined_bg=None,
                                           inlier_map=None, skipped=True))
            continue

        vbar_f = search_f[0] if search_f else None
        vbar_b = search_b[0] if search_b else None
        loss_f, loss_b = contrastive_penalty(
            Vf if search_f else None, Vb if search_b else None,
            vbar_f, vbar_b, cfg.alpha, cfg.beta)
        total = ad.add(total, ad.add(loss_f, loss_b))

        inlier_map = None
        if search_f is not None:
            # inlier map of the fg consensus against *every* box pixel
            S_all, _ = score_hypothesis(vbar_f, ad.value_of(V_all),
                                        cfg.alpha, cfg.beta) \
                if np.all(np.abs(vbar_f) >= COMPONENT_EPS) else (None, 0.0)
            if S_all is not None:
                inlier_map = np.asarray(S_all).reshape(box.h, box.w)
        results.append(ConsensusResult(
            box=box, fg_mask=mask, refined_fg=vbar_f, refined_bg=vbar_b,
            inlier_map=inlier_map,
            loss_fg=float(ad.value_of(loss_f)),
            loss_bg=float(ad.value_of(loss_b)),
            best_score=float(search_f[1]) if search_f else 0.0))

    if total_pixels == 0:
        return 0.0, results
    return ad.div(total, float(total_pixels)), results


def segment(results, shape, threshold=0.5):
    """Composite per-box inlier maps into a full-image binary mask."""
    if not 0.0 < threshold < 1.0:
        raise CsacError("segmentation threshold must be in (0, 1)")
    out = np.zeros(shape, dtype=np.float64)
    for r in results:
        if r.inlier_map is None:
            continue
        b = r.box
        region = out[b.y:b.y + b.h, b.x:b.x + b.w]
        np.maximum(region, (r.inlier_map >= threshold).astype(np.float64),
                   out=region)
    return out
