"""Global-context attention block for motion feature gating.

The block squeezes the channel dimension to a single-channel map with two
1x1 layers, turns it into a spatial attention distribution via softmax
over all positions, pools the input feature with that distribution into a
global context vector, transforms the context with a two-layer bottleneck
(reduction ratio 4), and adds the result back to every position of the
input. With the transform path zero-initialized the block is an exact
identity, so it can be dropped into a pipeline without perturbing it.

Two independent weight sets gate the two motion-decoding modes: one set
is active when extracting camera-motion features, the other when
extracting the residual motion field.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .grid import Grid, write_pfm, read_pfm

REDUCTION_RATIO = 4


class AttentionError(ValueError):
    pass


def _matmul(x, w):
    """Channel-mixing 1x1 layer: contract the last axis of x with w's rows.

    Works on arrays or tape variables via broadcasting + axis-sum.
    """
    xv = ad.value_of(x)
    wv = ad.value_of(w)
    xs = ad.reshape(x, xv.shape + (1,))
    return ad.vsum(ad.mul(xs, w), axis=-2)


@dataclass(frozen=True)
class DamWeights:
    """Weights of one attention block for channel count c.

    Squeeze path maps c -> c/2 -> 1 (spatial attention logits); transform
    path maps c -> c/4 -> c (context bottleneck). All layers carry biases.
    """

    w_sq1: np.ndarray  # (c, c//2)
    b_sq1: np.ndarray  # (c//2,)
    w_sq2: np.ndarray  # (c//2, 1)
    b_sq2: np.ndarray  # (1,)
    w_tr1: np.ndarray  # (c, c//4)
    b_tr1: np.ndarray  # (c//4,)
    w_tr2: np.ndarray  # (c//4, c)
    b_tr2: np.ndarray  # (c,)

    def __post_init__(self):
        c = self.channels
        expect = {
            "w_sq1": (c, c // 2), "b_sq1": (c // 2,),
            "w_sq2": (c // 2, 1), "b_sq2": (1,),
            "w_tr1": (c, c // REDUCTION_RATIO),
            "b_tr1": (c // REDUCTION_RATIO,),
            "w_tr2": (c // REDUCTION_RATIO, c), "b_tr2": (c,),
        }
        for f in fields(self):
            v = ad.value_of(getattr(self, f.name))
            if tuple(v.shape) != expect[f.name]:
                raise AttentionError(
                    f"{f.name} must have shape {expect[f.name]}, got {v.shape}")

    @property
    def channels(self):
        return int(ad.value_of(self.w_sq1).shape[0])

    @classmethod
    def init(cls, channels, seed=0, scale=0.1):
        """Random squeeze path, zeroed transform path (identity start)."""
        if channels < REDUCTION_RATIO or channels % REDUCTION_RATIO != 0:
            raise AttentionError(
                f"channel count must be a positive multiple of "
                f"{REDUCTION_RATIO}, got {channels}")
        rng = np.random.default_rng(seed)
        c = channels
        return cls(
            w_sq1=scale * rng.standard_normal((c, c // 2)),
            b_sq1=np.zeros(c // 2),
            w_sq2=scale * rng.standard_normal((c // 2, 1)),
            b_sq2=np.zeros(1),
            w_tr1=np.zeros((c, c // REDUCTION_RATIO)),
            b_tr1=np.zeros(c // REDUCTION_RATIO),
            w_tr2=np.zeros((c // REDUCTION_RATIO, c)),
            b_tr2=np.zeros(c),
        )

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def save(self, path_prefix):
        """Flat PFM of all weights plus a JSON shape manifest."""
        arrs = {k: ad.value_of(v) for k, v in self.arrays().items()}
        flat = np.concatenate([a.reshape(-1) for a in arrs.values()])
        write_pfm(path_prefix + ".pfm", flat[None, :, None])
        manifest = {
            "channels": self.channels,
            "reduction_ratio": REDUCTION_RATIO,
            "order": [{"name": k, "shape": list(a.shape)}
                      for k, a in arrs.items()],
        }
        with open(path_prefix + ".json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_prefix):
        with open(path_prefix + ".json") as f:
            manifest = json.load(f)
        flat = read_pfm(path_prefix + ".pfm").data.reshape(-1)
        out = {}
        pos = 0
        for entry in manifest["order"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            out[entry["name"]] = flat[pos:pos + n].reshape(shape)
            pos += n
        if pos != flat.size:
            raise AttentionError("weight file does not match its manifest")
        return cls(**out)


def attention_map(feature, weights):
    """Spatial attention distribution (h, w): softmax of the squeeze logits."""
    fv = ad.value_of(feature.data if isinstance(feature, Grid) else feature)
    f = feature.data if isinstance(feature, Grid) else feature
    if fv.ndim != 3:
        raise AttentionError(f"feature must be (h, w, c), got shape {fv.shape}")
    if fv.shape[2] != weights.channels:
        raise AttentionError(
            f"feature has {fv.shape[2]} channels, weights expect "
            f"{weights.channels}")
    s1 = ad.add(_matmul(f, weights.w_sq1), weights.b_sq1)
    s2 = ad.add(_matmul(s1, weights.w_sq2), weights.b_sq2)
    logits = ad.reshape(s2, fv.shape[:2])
    return ad.softmax(logits)


def dam_forward(feature, weights):
    """Attention-pooled context transform with residual fusion.

    ``out = feature + bottleneck(sum_p a(p) * feature(p))`` where ``a`` is
    the spatial softmax of the squeezed feature. The added context is the
    same c-vector at every position, so the block only shifts the feature
    map globally; all spatial structure rides through the residual path.
    """
    f = feature.data if isinstance(feature, Grid) else feature
    a = attention_map(feature, weights)
    fv = ad.value_of(f)
    aw = ad.reshape(a, fv.shape[:2] + (1,))
    context = ad.vsum(ad.mul(f, aw), axis=(0, 1))
    t1 = ad.add(_matmul(context, weights.w_tr1), weights.b_tr1)
    t2 = ad.add(_matmul(t1, weights.w_tr2), weights.b_tr2)
    out = ad.add(f, t2)
    if isinstance(feature, Grid) and not ad.is_var(out):
        return Grid(out)
    return out


@dataclass(frozen=True)
class DamPair:
    """Independent attention weights for the two motion-decoding modes."""

    ego: DamWeights
    residual: DamWeights

    @classmethod
    def init(cls, channels, seed=0):
        return cls(ego=DamWeights.init(channels, seed=seed),
                   residual=DamWeights.init(channels, seed=seed + 1))

    def forward(self, feature, mode):
        if mode not in ("ego", "residual"):
            raise AttentionError(f"mode must be 'ego' or 'residual', got {mode!r}")
        return dam_forward(feature, self.ego if mode == "ego" else self.residual)


def export_attention_map(path, feature, weights):
    """Write the (h, w) attention distribution as a single-channel PFM."""
    a = ad.value_of(attention_map(feature, weights))
    write_pfm(path, a[:, :, None])
    return a
