"""Evaluation metrics: depth errors, segmentation IoU, trajectory errors.

Depth follows the standard monocular protocol (optional median scaling,
AbsRel/SqRel/RMSE/RMSElog and the delta accuracy fractions). Trajectory
errors are the absolute trajectory error over scale-aligned 5-frame
snippets plus relative translation/rotation drift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import geometry as geo
from .grid import Grid

SNIPPET_LENGTH = 5

DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def table_row(self):
        """Formatted row mirroring the standard column order."""
        return (f"{self.abs_rel:.4f}  {self.sq_rel:.4f}  {self.rmse:.4f}  "
                f"{self.rmse_log:.4f}  {self.delta1:.4f}  {self.delta2:.4f}  "
                f"{self.delta3:.4f}")

    @staticmethod
    def table_header():
        return ("AbsRel  SqRel   RMSE    RMSElog d<1.25  d<1.25^2 d<1.25^3")


def _flat(x):
    a = x.data if isinstance(x, Grid) else np.asarray(x, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., 0]
    return a


def depth_metrics(pred, gt, mask=None, median_scale=True):
    """Standard monocular depth errors over masked pixels.

    With ``median_scale`` (the default) the prediction is first globally
    rescaled by median(gt)/median(pred), removing the monocular scale
    ambiguity before the errors are computed.
    """
    p = _flat(pred)
    g = _flat(gt)
    if p.shape != g.shape:
        raise MetricsError(f"shape mismatch {p.shape} vs {g.shape}")
    if mask is None:
        m = np.ones_like(g, dtype=bool)
    else:
        m = _flat(mask) > 0
    if not np.any(m):
        raise MetricsError("empty evaluation mask")
    p, g = p[m], g[m]
    if np.any(g <= 0):
        raise MetricsError("ground-truth depth must be positive on the mask")
    if np.any(p <= 0):
        raise MetricsError("predicted depth must be positive on the mask")
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < DELTA_THRESHOLDS[0])),
        delta2=float(np.mean(ratio < DELTA_THRESHOLDS[1])),
        delta3=float(np.mean(ratio < DELTA_THRESHOLDS[2])),
    )


def iou(pred_mask, gt_mask):
    """Intersection over union of two binary masks; empty union -> 0."""
    p = _flat(pred_mask) > 0
    g = _flat(gt_mask) > 0
    if p.shape != g.shape:
        raise MetricsError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.sum(p | g)
    if union == 0:
        return 0.0
    return float(np.sum(p & g) / union)


def mean_iou(pred_masks, gt_masks):
    """Mean IoU over paired object masks."""
    pred_masks, gt_masks = list(pred_masks), list(gt_masks)
    if len(pred_masks) != len(gt_masks):
        raise MetricsError("object count mismatch")
    if not pred_masks:
        raise MetricsError("no masks to evaluate")
    return float(np.mean([iou(p, g) for p, g in zip(pred_masks, gt_masks)]))


# ---------------------------------------------------------------------------
# trajectory errors


def _positions(poses):
    """Camera positions in the world frame from a list of camera-from-world
    rigid motions (the first pose's frame is the world)."""
    out = []
    for m in poses:
        inv = geo.invert(m)
        out.append(inv.translation)
    return np.asarray(out)


def ate(pred_poses, gt_poses, snippet=SNIPPET_LENGTH):
    """RMSE of scale-aligned positions over sliding fixed-length snippets.

    Each snippet is translated to start at its first frame and the
    prediction is scaled by the least-squares factor before the position
    RMSE; results average over all snippets.
    """
    if len(pred_poses) != len(gt_poses):
        raise MetricsError("trajectory length mismatch")
    if len(pred_poses) < 2:
        raise MetricsError("need at least 2 poses")
    P = _positions(pred_poses)
    G = _positions(gt_poses)
    n = len(P)
    span = min(snippet, n)
    errs = []
    for s in range(0, n - span + 1):
        p = P[s:s + span] - P[s]
        g = G[s:s + span] - G[s]
        denom = np.sum(p * p)
        scale = np.sum(p * g) / denom if denom > 0 else 1.0
        errs.append(np.sqrt(np.mean(np.sum((scale * p - g) ** 2, axis=1))))
    return float(np.mean(errs))


def relative_errors(pred_poses, gt_poses):
    """Average frame-to-frame translation drift (%) and rotation drift
    (degrees per unit distance, scaled to the conventional per-100-units).

    Translation drift compares consecutive relative motions of prediction
    and ground truth; rotation drift accumulates relative angle error
    normalized by the ground-truth path length.
    """
    if len(pred_poses) != len(gt_poses):
        raise MetricsError("trajectory length mismatch")
    if len(pred_poses) < 2:
        raise MetricsError("need at least 2 poses")
    t_errs = []
    r_deg_sum = 0.0
    dist_sum = 0.0
    for i in range(len(pred_poses) - 1):
        rel_p = geo.compose(pred_poses[i + 1], geo.invert(pred_poses[i]))
        rel_g = geo.compose(gt_poses[i + 1], geo.invert(gt_poses[i]))
        g_norm = np.linalg.norm(rel_g.translation)
        if g_norm > 0:
            t_errs.append(np.linalg.norm(rel_p.translation - rel_g.translation)
                          / g_norm * 100.0)
        dR = geo.euler_to_matrix(rel_p.rotation).T @ geo.euler_to_matrix(rel_g.rotation)
        angle = np.arccos(np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0))
        r_deg_sum += np.degrees(angle)
        dist_sum += g_norm
    t_err = float(np.mean(t_errs)) if t_errs else 0.0
    r_err = float(r_deg_sum / dist_sum * 100.0) if dist_sum > 0 else 0.0
    return t_err, r_err


def trajectory_errors(pred_poses, gt_poses):
    """ATE plus relative translation/rotation drift, as a dict."""
    t_err, r_err = relative_errors(pred_poses, gt_poses)
    return {
        "ate": ate(pred_poses, gt_poses),
        "t_err_pct": t_err,
        "r_err_deg_per_100": r_err,
    }
