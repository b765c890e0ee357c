"""Camera model, 6-DoF rigid motion and per-pixel motion fields.

Rotations use intrinsic X-then-Y-then-Z Euler angles in radians, so the
rotation matrix is ``R = Rx(rx) @ Ry(ry) @ Rz(rz)``. Translations are in
scene depth units. A :class:`TotalMotionField` composes a global rigid
motion with a per-pixel residual translation: applying it at pixel p is
``R @ X + t_field(p)`` where ``t_field = ego translation + residual``.

All functions dispatch through :mod:`motfield.autodiff`, so they accept
plain arrays or tape variables and stay differentiable either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import as_array, Grid

Z_MIN = 1e-3  # projection validity floor in depth units


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def rotation_entries(rx, ry, rz):
    """3x3 rotation matrix entries (nested lists) for intrinsic X-Y-Z Euler
    angles; works on floats or Vars."""
    cx, sx = ad.cos(rx), ad.sin(rx)
    cy, sy = ad.cos(ry), ad.sin(ry)
    cz, sz = ad.cos(rz), ad.sin(rz)
    return [
        [cy * cz, -cy * sz, sy],
        [cx * sz + sx * sy * cz, cx * cz - sx * sy * sz, -sx * cy],
        [sx * sz - cx * sy * cz, sx * cz + cx * sy * sz, cx * cy],
    ]


def euler_to_matrix(angles):
    rx, ry, rz = (float(a) for a in np.asarray(angles, dtype=np.float64))
    return np.array(rotation_entries(rx, ry, rz))


def matrix_to_euler(R):
    """Recover intrinsic X-Y-Z Euler angles; valid away from |pitch|=pi/2."""
    R = np.asarray(R, dtype=np.float64)
    ry = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    rx = np.arctan2(-R[1, 2], R[2, 2])
    rz = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([rx, ry, rz])


@dataclass(frozen=True)
class RigidMotion:
    """6-DoF transform: 3 Euler angles + 3 translations."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(matrix_to_euler(M[:3, :3]), M[:3, 3])

    def to_matrix(self):
        M = np.eye(4)
        M[:3, :3] = euler_to_matrix(self.rotation)
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        """Transform an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        R = euler_to_matrix(self.rotation)
        return p @ R.T + self.translation

    def to_json(self):
        return [*self.rotation.tolist(), *self.translation.tolist()]

    @classmethod
    def from_json(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])


def compose(a, b):
    """Rigid motion equal to applying ``b`` first, then ``a`` (matrix A@B)."""
    return RigidMotion.from_matrix(a.to_matrix() @ b.to_matrix())


def invert(m):
    """Analytic inverse: R^T, -R^T t."""
    R = euler_to_matrix(m.rotation)
    return RigidMotion(matrix_to_euler(R.T), -R.T @ m.translation)


@dataclass(frozen=True)
class TotalMotionField:
    """Global rotation + per-pixel translation grid.

    ``rotation`` holds 3 Euler angles (array, or a sequence of Vars when
    used inside a gradient tape); ``translation_field`` is (H, W, 3).
    """

    rotation: object
    translation_field: object

    @property
    def shape(self):
        return ad.value_of(self.translation_field).shape[:2]

    def rotation_matrix_entries(self):
        r = self.rotation
        if isinstance(r, np.ndarray):
            rx, ry, rz = (float(v) for v in r)
            return rotation_entries(rx, ry, rz)
        return rotation_entries(r[0], r[1], r[2])


def compose_total(ego, residual):
    """Compose an ego motion with a per-pixel residual translation field.

    The per-pixel transform is ``M_res(p) @ M_ego``: the point is rotated
    and translated by the ego motion, then shifted by ``residual(p)``.
    """
    res = residual.data if isinstance(residual, Grid) else residual
    rv = ad.value_of(res)
    if rv.ndim != 3 or rv.shape[2] != 3:
        raise GeometryError(f"residual field must be (H, W, 3), got {rv.shape}")
    t_field = ad.add(res, ego.translation.reshape(1, 1, 3))
    return TotalMotionField(rotation=np.asarray(ego.rotation, dtype=np.float64),
                            translation_field=t_field)


def apply_total(total, points):
    """Apply a TotalMotionField pixel-wise to an (H, W, 3) point grid."""
    R = total.rotation_matrix_entries()
    px = ad.getitem(points, (Ellipsis, 0))
    py = ad.getitem(points, (Ellipsis, 1))
    pz = ad.getitem(points, (Ellipsis, 2))
    tf = total.translation_field
    out = []
    for i in range(3):
        ti = ad.getitem(tf, (Ellipsis, i))
        out.append(R[i][0] * px + R[i][1] * py + R[i][2] * pz + ti)
    return ad.stack(out, axis=-1)


def pixel_grids(height, width):
    """Constant (u, v) pixel-center coordinate grids."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def backproject(depth, K):
    """Lift a depth map to camera-frame 3D points.

    ``point(u, v) = depth(u, v) * ((u-cx)/fx, (v-cy)/fy, 1)``.
    """
    d = depth.data if isinstance(depth, Grid) else depth
    dv = ad.value_of(d)
    if dv.ndim == 3:
        if dv.shape[2] != 1:
            raise GeometryError("depth must have a single channel")
        d = ad.reshape(d, dv.shape[:2])
        dv = dv[..., 0]
    if np.any(dv <= 0):
        raise GeometryError("backproject requires strictly positive depth")
    u, v = pixel_grids(*dv.shape)
    x = ad.mul(d, (u - K.cx) / K.fx)
    y = ad.mul(d, (v - K.cy) / K.fy)
    return ad.stack([x, y, d], axis=-1)


def project(points, K, z_min=Z_MIN):
    """Project camera-frame points to pixel coordinates.

    Returns ``(uv, valid)``: uv is (H, W, 2); valid is a plain {0,1} array,
    zero where depth <= z_min or the pixel falls outside the point grid's
    own image rectangle. Invalid pixels are masked, never raised.
    """
    pv = ad.value_of(points)
    h, w = pv.shape[:2]
    X = ad.getitem(points, (Ellipsis, 0))
    Y = ad.getitem(points, (Ellipsis, 1))
    Z = ad.getitem(points, (Ellipsis, 2))
    Zc = ad.maximum(Z, z_min)
    u = ad.add(ad.mul(ad.div(X, Zc), K.fx), K.cx)
    v = ad.add(ad.mul(ad.div(Y, Zc), K.fy), K.cy)
    uv = ad.stack([u, v], axis=-1)
    un, vn = ad.value_of(u), ad.value_of(v)
    eps = 1e-9  # tolerate round-off at the exact image border
    valid = ((pv[..., 2] > z_min)
             & (un >= -eps) & (un <= w - 1.0 + eps)
             & (vn >= -eps) & (vn <= h - 1.0 + eps)).astype(np.float64)
    return uv, valid
