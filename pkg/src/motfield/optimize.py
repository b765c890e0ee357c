"""Direct gradient-based optimization of depth, ego-motion and residual field.

The three unknowns a trained network would predict are replaced by raw
parameter blocks optimized per scene pair with adaptive moments:

- ``depth``: raw (H, W, 2) logits squashed to strictly positive depth for
  both frames through a bounded inverse-depth sigmoid map;
- ``ego``: the 6-vector of the frame-1 -> frame-2 camera motion;
- ``residual``: (H, W, 6) per-pixel translations -- channels 0:3 the
  forward residual on frame-2 pixels, channels 3:6 the backward residual
  on frame-1 pixels (needed by the cycle-consistency term).

A three-phase schedule gates both the active losses and the trainable
blocks: phase 1 optimizes depth + ego with the residual pinned at zero,
phase 2 freezes depth and trains the motion terms, phase 3 frees all
blocks and adds the consensus regularizer.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import losses
from . import warp as wp
from .autodiff import ParamBlock
from .csac import ConsensusConfig, csac_loss
from .grid import write_pfm

DEPTH_MIN = 0.1
DEPTH_MAX = 100.0
STEPS_PER_EPOCH = 200
OCCLUSION_THRESHOLD = 0.25

PHASE_BLOCKS = {1: ("depth", "ego"), 2: ("ego", "residual"),
                3: ("depth", "ego", "residual")}


class OptimizeError(RuntimeError):
    pass


class DivergenceError(OptimizeError):
    """Raised when a loss or gradient goes non-finite; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.diagnostics, f, indent=2, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# depth parameterization


def squash_depth(raw):
    """Map raw logits to depth in (DEPTH_MIN, DEPTH_MAX) via bounded
    inverse depth: always strictly positive, saturating at the bounds."""
    inv_lo, inv_hi = 1.0 / DEPTH_MAX, 1.0 / DEPTH_MIN
    disp = ad.add(ad.mul(ad.sigmoid(raw), inv_hi - inv_lo), inv_lo)
    return ad.div(1.0, disp)


def raw_from_depth(depth):
    """Inverse of :func:`squash_depth` for initialization."""
    d = np.clip(np.asarray(depth, dtype=np.float64),
                DEPTH_MIN * (1 + 1e-9), DEPTH_MAX * (1 - 1e-9))
    inv_lo, inv_hi = 1.0 / DEPTH_MAX, 1.0 / DEPTH_MIN
    s = (1.0 / d - inv_lo) / (inv_hi - inv_lo)
    return np.log(s) - np.log1p(-s)


def init_params(height, width, seed=0, depth_init=10.0):
    """Standard initialization: near-constant depth, zero motions."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    d0 = depth_init * (1.0 + 0.01 * rng.standard_normal((height, width, 2)))
    return {
        "depth": raw_from_depth(d0),
        "ego": np.zeros(6),
        "residual": np.zeros((height, width, 6)),
    }


def prior_depth_init(inputs, default=10.0):
    """Initial depth scale implied by the box-height priors.

    Each detection prior implies a depth fy * h / h_px for its box; the
    mean anchors the starting depth so the scale-sensitive photometric
    basin is entered near the right global scale. Falls back to
    ``default`` without boxes.
    """
    if not inputs.boxes or not inputs.box_heights:
        return float(default)
    implied = [inputs.K.fy * h / box.h
               for box, h in zip(inputs.boxes, inputs.box_heights)]
    return float(np.clip(np.mean(implied), DEPTH_MIN * 2, DEPTH_MAX / 2))


def prior_depth_map(inputs, default=10.0):
    """Per-pixel initial depth implied by the box-height priors.

    Outside every detection box the depth starts at the mean implied
    scale (:func:`prior_depth_init`); inside a box it starts at that
    box's own implied depth fy * h / h_px. Boxes are painted
    farthest-first so the nearer object wins where boxes overlap,
    matching how detections occlude. Uses only detector inputs (boxes
    and prior heights), never ground truth.
    """
    h_img, w_img = inputs.I1.shape[:2]
    base = prior_depth_init(inputs, default=default)
    depth = np.full((h_img, w_img, 1), base)
    if not inputs.boxes or not inputs.box_heights:
        return depth
    implied = [float(np.clip(inputs.K.fy * h / box.h, DEPTH_MIN * 2, DEPTH_MAX / 2))
               for box, h in zip(inputs.boxes, inputs.box_heights)]
    for d, box in sorted(zip(implied, inputs.boxes),
                         key=lambda pair: -pair[0]):
        depth[box.y:box.y + box.h, box.x:box.x + box.w, 0] = d
    return depth


# ---------------------------------------------------------------------------
# adaptive-moment updates


@dataclass
class OptimState:
    """Per-block first/second moment accumulators with bias correction."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One adaptive-moment update over the blocks present in ``grads``.

    Blocks without a gradient entry are left bit-identical. Non-finite
    gradients abort with a diagnostic error.
    """
    state.step_count += 1
    t = state.step_count
    out = dict(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient in block '{name}' at step {t}",
                {"block": name, "step": t,
                 "bad_count": int(np.sum(~np.isfinite(g)))})
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        out[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# ---------------------------------------------------------------------------
# objective assembly


@dataclass(frozen=True)
class SceneInputs:
    """Observed data of one frame pair plus weak priors."""

    I1: np.ndarray
    I2: np.ndarray
    K: geo.Intrinsics
    boxes: tuple = ()
    box_heights: tuple = ()

    @property
    def shape(self):
        return self.I1.shape[:2]


def _transpose(R):
    return [[R[j][i] for j in range(3)] for i in range(3)]


def _ego_fields(ego, res_fwd, res_bwd):
    """On-tape forward/backward rotation entries and translation fields.

    Forward direction maps frame-2 points into frame 1 (the inverse of
    the ego motion), backward maps frame 1 into frame 2; residuals add
    per pixel on top of the respective ego translation.
    """
    angles = [ad.getitem(ego, (i,)) for i in range(3)] if ad.is_var(ego) \
        else [float(ego[i]) for i in range(3)]
    trans = [ad.getitem(ego, (i,)) for i in range(3, 6)] if ad.is_var(ego) \
        else [float(ego[i]) for i in range(3, 6)]
    R = geo.rotation_entries(*angles)
    Rt = _transpose(R)
    # inverse translation -R^T t, computed on-tape
    t_inv = [ad.neg(R[0][i] * trans[0] + R[1][i] * trans[1]
                    + R[2][i] * trans[2]) for i in range(3)]
    t_fwd = ad.add(res_fwd, ad.stack(t_inv))
    t_bwd = ad.add(res_bwd, ad.stack(trans))
    return Rt, t_fwd, R, t_bwd


def _direction_terms(image_src, image_tgt, depth_src, depth_tgt, R, t_field, K):
    """Photometric + geometric terms of one warping direction.

    Warps ``image_src`` into the target view using the target depth, then
    compares against ``image_tgt``; the warped depth is checked against
    ``depth_src`` sampled at the warp coordinates. The occlusion estimate
    (detached) removes inconsistent pixels from both terms.
    """
    w = wp.warp_with_rotation(image_src, depth_tgt, R, t_field, K)
    u = ad.getitem(w.coords, (Ellipsis, 0))
    v = ad.getitem(w.coords, (Ellipsis, 1))
    d_samp, d_valid = ad.bilinear_sample(depth_src, u, v)
    validity = w.validity * d_valid
    inc = wp.inconsistency_map(ad.value_of(w.depth), ad.value_of(d_samp),
                               validity)
    mask = wp.occlusion_mask(inc, OCCLUSION_THRESHOLD, validity)
    if mask.sum() == 0:
        raise DivergenceError("warp produced no usable pixels",
                              {"valid_fraction": float(validity.mean())})
    l_p = losses.photometric(image_tgt, w.image, mask)
    l_g = losses.geometric_consistency(w.depth, d_samp, mask)
    return l_p, l_g, mask


def build_objective(inputs, phase, weights, csac_cfg=None):
    """Return ``loss_fn(depth_raw, ego, residual) -> (total, report)``."""
    if csac_cfg is None:
        csac_cfg = ConsensusConfig()

    def loss_fn(depth_raw, ego, residual):
        D1 = squash_depth(ad.getitem(depth_raw, (Ellipsis, 0)))
        D2 = squash_depth(ad.getitem(depth_raw, (Ellipsis, 1)))
        res_fwd = ad.getitem(residual, (Ellipsis, slice(0, 3)))
        res_bwd = ad.getitem(residual, (Ellipsis, slice(3, 6)))
        R_fwd, t_fwd, R_bwd, t_bwd = _ego_fields(ego, res_fwd, res_bwd)

        lp_f, lg_f, mask_f = _direction_terms(
            inputs.I1, inputs.I2, D1, D2, R_fwd, t_fwd, inputs.K)
        lp_b, lg_b, _ = _direction_terms(
            inputs.I2, inputs.I1, D2, D1, R_bwd, t_bwd, inputs.K)

        terms = {
            "photometric": ad.mul(ad.add(lp_f, lp_b), 0.5),
            "geometric": ad.mul(ad.add(lg_f, lg_b), 0.5),
            "depth_smoothness": ad.mul(
                ad.add(losses.depth_smoothness(D1, inputs.I1),
                       losses.depth_smoothness(D2, inputs.I2)), 0.5),
        }
        if inputs.boxes:
            l_h, _ = losses.height_prior(D2, inputs.boxes,
                                         inputs.box_heights, inputs.K)
            terms["height_prior"] = l_h

        if phase >= 2:
            terms["motion_smoothness"] = ad.mul(
                ad.add(losses.motion_smoothness(res_fwd, D2),
                       losses.motion_smoothness(res_bwd, D1)), 0.5)
            terms["motion_sparsity"] = ad.mul(
                ad.add(losses.motion_sparsity(res_fwd),
                       losses.motion_sparsity(res_bwd)), 0.5)
            # the forward rotation entries are the transpose of the ego
            # rotation (not an Euler evaluation), so the cycle term works
            # on explicit entries rather than TotalMotionField objects
            terms["motion_consistency"] = _cycle_term(
                R_fwd, t_fwd, R_bwd, t_bwd, mask_f, D2, inputs.K)
        if phase >= 3 and weights.lam_mr > 0 and inputs.boxes:
            l_mr, _ = csac_loss(res_fwd, ad.value_of(D2),
                                list(inputs.boxes), csac_cfg)
            terms["motion_reg"] = l_mr
        return losses.total_loss(terms, weights, phase)

    return loss_fn


def _cycle_term(R_fwd, t_fwd, R_bwd, t_bwd, valid, depth, K):
    """Cycle consistency on explicit rotation entries (no Euler detour)."""
    points = geo.backproject(depth, K)
    from .warp import _apply_entries
    moved = _apply_entries(R_fwd, points, t_fwd)
    uv, proj_valid = geo.project(moved, K)
    u = ad.getitem(uv, (Ellipsis, 0))
    v = ad.getitem(uv, (Ellipsis, 1))
    tb_s, samp_valid = ad.bilinear_sample(t_bwd, u, v)
    valid = np.asarray(valid, dtype=np.float64) * proj_valid * samp_valid

    rot_dev = 0.0
    for i in range(3):
        for j in range(3):
            cij = (R_bwd[i][0] * R_fwd[0][j] + R_bwd[i][1] * R_fwd[1][j]
                   + R_bwd[i][2] * R_fwd[2][j])
            d = ad.sub(cij, 1.0 if i == j else 0.0)
            rot_dev = ad.add(rot_dev, ad.mul(d, d))
    t_cycle = []
    for i in range(3):
        ri = (R_bwd[i][0] * ad.getitem(t_fwd, (Ellipsis, 0))
              + R_bwd[i][1] * ad.getitem(t_fwd, (Ellipsis, 1))
              + R_bwd[i][2] * ad.getitem(t_fwd, (Ellipsis, 2)))
        t_cycle.append(ad.add(ri, ad.getitem(tb_s, (Ellipsis, i))))
    t_dev = 0.0
    for c in t_cycle:
        t_dev = ad.add(t_dev, ad.mul(c, c))
    if np.sum(ad.value_of(valid)) == 0:
        return ad.mul(rot_dev, 0.0)
    return ad.add(rot_dev, losses.masked_mean(t_dev, valid))


# ---------------------------------------------------------------------------
# phase execution


@dataclass(frozen=True)
class PhasePlan:
    """One row of the multi-phase schedule."""

    phase: int
    steps: int
    weights: losses.LossWeights = None
    lr: float = 1e-4
    csac: ConsensusConfig = field(default_factory=ConsensusConfig)

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise OptimizeError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.steps < 0:
            raise OptimizeError("step count must be >= 0")
        if self.weights is None:
            object.__setattr__(self, "weights",
                               losses.LossWeights.for_phase(self.phase))

    @property
    def active_blocks(self):
        return PHASE_BLOCKS[self.phase]


def default_schedule(epochs=10, lr=1e-4, lam_mr=None, steps_per_epoch=None):
    """Three phases of ``epochs`` epochs each (an epoch is 200 steps)."""
    spe = STEPS_PER_EPOCH if steps_per_epoch is None else steps_per_epoch
    plans = []
    for phase in (1, 2, 3):
        w = losses.LossWeights.for_phase(phase)
        if lam_mr is not None and phase == 3:
            w = replace(w, lam_mr=lam_mr)
        plans.append(PhasePlan(phase=phase, steps=epochs * spe,
                               weights=w, lr=lr))
    return plans


def run_phase(plan, inputs, params, trace_path=None, trace=None,
              step_offset=0):
    """Optimize one phase; frozen blocks stay bit-identical.

    Returns ``(params, trace)`` where trace is the accumulated list of
    per-step :class:`losses.LossReport`.
    """
    trace = [] if trace is None else trace
    state = OptimState(lr=plan.lr)
    objective = build_objective(inputs, plan.phase, plan.weights, plan.csac)
    names = list(plan.active_blocks)

    def loss_over_active(*leaves):
        full = dict(params)
        full.update(dict(zip(names, leaves)))
        total, report = objective(full["depth"], full["ego"], full["residual"])
        loss_over_active.report = report
        return total

    for step in range(plan.steps):
        blocks = [ParamBlock(n, params[n]) for n in names]
        try:
            grads = ad.grad(loss_over_active, blocks)
        except ad.NonFiniteLossError as e:
            err = DivergenceError(
                f"non-finite loss in phase {plan.phase} at step {step}: {e}",
                {"phase": plan.phase, "step": step, "op": str(e)})
            raise err from e
        report = loss_over_active.report
        trace.append(report)
        if trace_path:
            report.append_csv(trace_path, step_offset + step)
        params = adam_step(params, dict(zip(names, grads)), state)
    return params, trace


def run_schedule(plans, inputs, params=None, seed=0, trace_path=None):
    """Chained phases with parameter hand-off; phases must be ordered."""
    order = [p.phase for p in plans]
    if order != sorted(order):
        raise OptimizeError(f"phases must run in order, got {order}")
    h, w = inputs.shape
    if params is None:
        params = init_params(h, w, seed=seed,
                             depth_init=prior_depth_init(inputs))
    trace = []
    summaries = []
    offset = 0
    for plan in plans:
        params, trace = run_phase(plan, inputs, params, trace_path=trace_path,
                                  trace=trace, step_offset=offset)
        offset += plan.steps
        if plan.steps:
            summaries.append({"phase": plan.phase, "steps": plan.steps,
                              "final_total": trace[-1].total,
                              "final_terms": trace[-1].terms})
    return params, trace, summaries


def extract_solution(params):
    """Decode raw blocks into depth maps, ego motion and residual fields."""
    depth = ad.value_of(squash_depth(params["depth"]))
    return {
        "D1": depth[..., 0],
        "D2": depth[..., 1],
        "ego": geo.RigidMotion(params["ego"][:3], params["ego"][3:]),
        "res_fwd": params["residual"][..., 0:3],
        "res_bwd": params["residual"][..., 3:6],
    }


def save_solution(out_dir, params):
    """Final parameters as PFM maps plus a JSON pose file."""
    os.makedirs(out_dir, exist_ok=True)
    sol = extract_solution(params)
    write_pfm(os.path.join(out_dir, "D1.pfm"), sol["D1"][:, :, None])
    write_pfm(os.path.join(out_dir, "D2.pfm"), sol["D2"][:, :, None])
    write_pfm(os.path.join(out_dir, "res_fwd.pfm"), sol["res_fwd"])
    write_pfm(os.path.join(out_dir, "res_bwd.pfm"), sol["res_bwd"])
    with open(os.path.join(out_dir, "ego.json"), "w") as f:
        json.dump({"ego": sol["ego"].to_json()}, f, indent=2)
