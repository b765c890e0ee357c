import numpy as np
import pytest

from motfield import evalmetrics as em
from motfield import geometry as geo


# ---------------------------------------------------------------------------
# depth metrics: documented 3-pixel fixture


def test_depth_metrics_three_pixel_oracle():
    """pred = (1, 2, 3), gt = (2, 2, 3) without median scaling.

    AbsRel = (1/2 + 0 + 0) / 3 = 1/6; SqRel = (1/2) / 3 = 1/6;
    RMSE = sqrt(1/3); RMSElog = sqrt(log(2)^2 / 3); ratios are
    (2, 1, 1) and 2 exceeds both 1.25^2 and 1.25^3, so every delta is 2/3.
    """
    pred = np.array([[1.0, 2.0, 3.0]])
    gt = np.array([[2.0, 2.0, 3.0]])
    m = em.depth_metrics(pred, gt, median_scale=False)
    assert abs(m.abs_rel - 1.0 / 6.0) < 1e-12
    assert abs(m.sq_rel - 1.0 / 6.0) < 1e-12
    assert abs(m.rmse - np.sqrt(1.0 / 3.0)) < 1e-12
    assert abs(m.rmse_log - np.sqrt(np.log(2.0) ** 2 / 3.0)) < 1e-12
    assert abs(m.delta1 - 2.0 / 3.0) < 1e-12
    assert abs(m.delta2 - 2.0 / 3.0) < 1e-12
    assert abs(m.delta3 - 2.0 / 3.0) < 1e-12


def test_depth_metrics_median_scaling_removes_global_scale(rng):
    gt = rng.uniform(2, 9, (8, 8))
    m = em.depth_metrics(3.7 * gt, gt, median_scale=True)
    assert m.abs_rel < 1e-12
    assert m.delta1 == 1.0


def test_depth_metrics_mask_and_errors(rng):
    gt = rng.uniform(2, 9, (4, 4))
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    m = em.depth_metrics(gt * 2, gt, mask=mask, median_scale=False)
    assert abs(m.abs_rel - 1.0) < 1e-12
    with pytest.raises(em.MetricsError):
        em.depth_metrics(gt, gt[:2])
    with pytest.raises(em.MetricsError):
        em.depth_metrics(gt, gt, mask=np.zeros((4, 4)))
    with pytest.raises(em.MetricsError):
        em.depth_metrics(gt, gt - 10.0)


def test_depth_metrics_report_formats():
    m = em.depth_metrics(np.full((2, 2), 3.0), np.full((2, 2), 3.0),
                         median_scale=False)
    assert "abs_rel" in m.to_json()
    assert len(m.table_row().split()) == 7


# ---------------------------------------------------------------------------
# IoU: documented rectangle fixture


def test_iou_rectangle_oracle():
    """4x4 and 4x4 rectangles overlapping in a 4x2 strip: IoU = 8/24 = 1/3."""
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[2:6, 0:4] = True
    b[2:6, 2:6] = True
    assert abs(em.iou(a, b) - 1.0 / 3.0) < 1e-15


def test_iou_edge_cases():
    z = np.zeros((4, 4))
    assert em.iou(z, z) == 0.0
    o = np.ones((4, 4))
    assert em.iou(o, o) == 1.0
    with pytest.raises(em.MetricsError):
        em.iou(z, np.zeros((3, 3)))


def test_mean_iou():
    a = np.zeros((4, 4)); a[:2] = 1
    b = np.zeros((4, 4)); b[:, :2] = 1
    assert abs(em.mean_iou([a, a], [a, b]) - (1.0 + 1.0 / 3.0) / 2) < 1e-12
    with pytest.raises(em.MetricsError):
        em.mean_iou([a], [a, b])
    with pytest.raises(em.MetricsError):
        em.mean_iou([], [])


# ---------------------------------------------------------------------------
# trajectory errors: documented 5-frame fixture


def _straight_line_poses(step, n=5):
    """Camera-from-world poses of a camera moving +x by ``step`` per frame."""
    return [geo.RigidMotion(np.zeros(3), np.array([-i * step, 0.0, 0.0]))
            for i in range(n)]


def test_ate_zero_for_scaled_trajectory():
    gt = _straight_line_poses(1.0)
    pred = _straight_line_poses(0.5)  # same path at half scale
    assert em.ate(pred, gt) < 1e-12


def test_ate_lateral_offset_oracle():
    """Prediction drifts +y by 0.1 per frame over a straight +x path.

    Per 5-frame snippet positions are (i, 0.1 i, 0); the least-squares
    scale against (i, 0, 0) is 1/1.01, giving residual norm
    sqrt(i^2 (1 - 1/1.01)^2 + (0.1 i / 1.01)^2).
    """
    gt = _straight_line_poses(1.0)
    pred = [geo.RigidMotion(np.zeros(3), np.array([-i, -0.1 * i, 0.0]))
            for i in range(5)]
    s = 1.0 / 1.01
    i = np.arange(5.0)
    res = np.sqrt((i * (s - 1.0)) ** 2 + (0.1 * i * s) ** 2)
    expect = np.sqrt(np.mean(res ** 2))
    assert abs(em.ate(pred, gt) - expect) < 1e-12


def test_relative_errors_oracle():
    """10% longer steps: t_err = 10%; rotation drift zero."""
    gt = _straight_line_poses(1.0)
    pred = _straight_line_poses(1.1)
    t_err, r_err = em.relative_errors(pred, gt)
    assert abs(t_err - 10.0) < 1e-9
    assert abs(r_err) < 1e-9


def test_relative_rotation_drift_oracle():
    """0.01 rad extra yaw per frame over unit steps.

    Rotation drift normalizes by path length (4 units) and scales to
    degrees per 100 units: 4 * 0.01 rad / 4 * 100 = 1 rad * (180/pi) ... /1
    i.e. degrees(0.01) * 100 / 1.
    """
    gt = _straight_line_poses(1.0)
    pred = [geo.RigidMotion(np.array([0.0, 0.01 * i, 0.0]),
                            np.array([-i, 0.0, 0.0])) for i in range(5)]
    _, r_err = em.relative_errors(pred, gt)
    expect = np.degrees(4 * 0.01) / 4.0 * 100.0
    assert abs(r_err - expect) < 1e-6


def test_trajectory_errors_dict():
    gt = _straight_line_poses(1.0)
    out = em.trajectory_errors(gt, gt)
    assert out == {"ate": 0.0, "t_err_pct": 0.0, "r_err_deg_per_100": 0.0}
    with pytest.raises(em.MetricsError):
        em.trajectory_errors(gt[:1], gt[:1])
    with pytest.raises(em.MetricsError):
        em.trajectory_errors(gt, gt[:3])
