import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motfield import autodiff as ad
from motfield import geometry as geo


angles_st = st.integers(0, 2 ** 31).map(
    lambda s: np.random.default_rng(s).uniform(-1.2, 1.2, 3))


def test_intrinsics_validation():
    with pytest.raises(geo.GeometryError):
        geo.Intrinsics(0.0, 1.0, 0.0, 0.0)


def test_intrinsics_json_roundtrip(small_K):
    assert geo.Intrinsics.from_json(small_K.to_json()) == small_K


@given(angles=angles_st)
@settings(max_examples=40, deadline=None)
def test_rotation_is_orthonormal(angles):
    R = geo.euler_to_matrix(angles)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


@given(angles=angles_st)
@settings(max_examples=40, deadline=None)
def test_euler_matrix_roundtrip(angles):
    back = geo.matrix_to_euler(geo.euler_to_matrix(angles))
    np.testing.assert_allclose(back, angles, atol=1e-9)


def test_rotation_convention_x_then_y_then_z():
    rx, ry, rz = 0.3, -0.2, 0.5
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    np.testing.assert_allclose(geo.euler_to_matrix([rx, ry, rz]),
                               Rx @ Ry @ Rz, atol=1e-14)


def test_rotation_entries_on_tape_match_numeric():
    angles = np.array([0.1, -0.3, 0.2])
    leaves = [ad.Var(np.asarray(a)) for a in angles]
    entries = geo.rotation_entries(*leaves)
    R = np.array([[float(ad.value_of(entries[i][j])) for j in range(3)]
                  for i in range(3)])
    np.testing.assert_allclose(R, geo.euler_to_matrix(angles), atol=1e-14)


@given(a=angles_st, t=angles_st)
@settings(max_examples=30, deadline=None)
def test_invert_composes_to_identity(a, t):
    m = geo.RigidMotion(a, t)
    ident = geo.compose(geo.invert(m), m)
    np.testing.assert_allclose(ident.to_matrix(), np.eye(4), atol=1e-9)


def test_compose_matches_matrix_product(rng):
    a = geo.RigidMotion(rng.uniform(-0.5, 0.5, 3), rng.uniform(-1, 1, 3))
    b = geo.RigidMotion(rng.uniform(-0.5, 0.5, 3), rng.uniform(-1, 1, 3))
    np.testing.assert_allclose(geo.compose(a, b).to_matrix(),
                               a.to_matrix() @ b.to_matrix(), atol=1e-12)


def test_apply_matches_matrix(rng):
    m = geo.RigidMotion(rng.uniform(-0.5, 0.5, 3), rng.uniform(-1, 1, 3))
    p = rng.uniform(-2, 2, (5, 3))
    hom = np.concatenate([p, np.ones((5, 1))], axis=1)
    np.testing.assert_allclose(m.apply(p), (m.to_matrix() @ hom.T).T[:, :3],
                               atol=1e-12)


def test_rigid_motion_json_roundtrip(rng):
    m = geo.RigidMotion(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3))
    back = geo.RigidMotion.from_json(m.to_json())
    np.testing.assert_array_equal(back.rotation, m.rotation)
    np.testing.assert_array_equal(back.translation, m.translation)


# ---------------------------------------------------------------------------
# projection


def test_project_backproject_roundtrip(small_K, rng):
    depth = rng.uniform(2.0, 9.0, (48, 64))
    pts = geo.backproject(depth, small_K)
    uv, valid = geo.project(pts, small_K)
    u, v = geo.pixel_grids(48, 64)
    np.testing.assert_allclose(uv[..., 0], u, atol=1e-9)
    np.testing.assert_allclose(uv[..., 1], v, atol=1e-9)
    assert valid.min() == 1.0


def test_backproject_rejects_nonpositive(small_K):
    with pytest.raises(geo.GeometryError):
        geo.backproject(np.zeros((4, 4)), small_K)


def test_project_masks_small_depth(small_K):
    pts = np.zeros((2, 2, 3))
    pts[..., 2] = [[5.0, 1e-6], [5.0, -1.0]]
    pts[..., 0] = 0.1
    _, valid = geo.project(pts, small_K)
    assert valid[0, 1] == 0.0 and valid[1, 1] == 0.0


def test_compose_total_adds_ego_translation(rng):
    ego = geo.RigidMotion(rng.uniform(-0.1, 0.1, 3), rng.uniform(-1, 1, 3))
    res = rng.uniform(-0.2, 0.2, (4, 5, 3))
    total = geo.compose_total(ego, res)
    np.testing.assert_allclose(ad.value_of(total.translation_field),
                               res + ego.translation, atol=1e-14)
    np.testing.assert_array_equal(total.rotation, ego.rotation)


def test_compose_total_rejects_bad_shape():
    with pytest.raises(geo.GeometryError):
        geo.compose_total(geo.RigidMotion.identity(), np.zeros((4, 5, 2)))


def test_apply_total_matches_rigid_apply(rng, small_K):
    ego = geo.RigidMotion(rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.5, 0.5, 3))
    depth = rng.uniform(3.0, 6.0, (6, 8))
    pts = geo.backproject(depth, small_K)
    total = geo.compose_total(ego, np.zeros((6, 8, 3)))
    moved = ad.value_of(geo.apply_total(total, pts))
    expect = ego.apply(np.asarray(pts).reshape(-1, 3)).reshape(6, 8, 3)
    np.testing.assert_allclose(moved, expect, atol=1e-12)
