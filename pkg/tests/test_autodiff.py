import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motfield import autodiff as ad
from motfield.autodiff import ParamBlock, Var, finite_diff, grad


def _check_grad(loss_fn, blocks, step=1e-6, tol=1e-5):
    g = grad(loss_fn, blocks)
    fd = finite_diff(loss_fn, blocks, step)
    for a, b in zip(g, fd):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


def arrays(shape_max=4):
    return st.integers(0, 2 ** 31).map(
        lambda s: np.random.default_rng(s).uniform(-2.0, 2.0, (3, 4)))


# ---------------------------------------------------------------------------
# elementary ops against finite differences


@pytest.mark.parametrize("op", [
    lambda x: ad.vsum(ad.mul(x, x)),
    lambda x: ad.vsum(ad.exp(ad.mul(x, 0.3))),
    lambda x: ad.vsum(ad.sin(x) + ad.cos(x)),
    lambda x: ad.vsum(ad.sigmoid(x)),
    lambda x: ad.vsum(ad.power(ad.add(ad.mul(x, x), 1.0), 1.5)),
    lambda x: ad.vsum(ad.sqrt(ad.add(ad.mul(x, x), 0.5))),
    lambda x: ad.vsum(ad.log(ad.add(ad.mul(x, x), 1.0))),
    lambda x: ad.vmean(ad.div(x, ad.add(ad.mul(x, x), 2.0))),
    lambda x: ad.vsum(ad.neg(ad.mul(x, 3.0))),
])
def test_unary_chains_match_fd(op, rng):
    x = rng.uniform(-1.5, 1.5, (4, 5))
    _check_grad(op, [ParamBlock("x", x)])


def test_binary_broadcasting_grad(rng):
    a = rng.uniform(0.5, 2.0, (4, 5, 3))
    b = rng.uniform(0.5, 2.0, (1, 1, 3))

    def loss(a, b):
        return ad.vsum(ad.div(ad.mul(a, b), ad.add(a, b)))

    _check_grad(loss, [ParamBlock("a", a), ParamBlock("b", b)])


def test_minimum_maximum_clamp(rng):
    x = rng.uniform(-2, 2, (6, 6))
    # keep away from the kink points of min/max/clamp
    x = x[(np.abs(x - 0.5) > 1e-2) & (np.abs(x + 0.5) > 1e-2)]

    def loss(x):
        return ad.vsum(ad.add(ad.maximum(x, 0.5),
                              ad.add(ad.minimum(x, -0.5),
                                     ad.clamp(x, -0.5, 0.5))))

    _check_grad(loss, [ParamBlock("x", x)])


def test_abs_grad_away_from_zero(rng):
    x = rng.uniform(0.1, 2.0, (3, 3)) * np.where(rng.uniform(size=(3, 3)) > 0.5, 1, -1)
    _check_grad(lambda x: ad.vsum(ad.absolute(x)), [ParamBlock("x", x)])


def test_reductions_axis_keepdims(rng):
    x = rng.uniform(-1, 1, (3, 4, 2))

    def loss(x):
        m = ad.vmean(x, axis=(0, 1), keepdims=True)
        return ad.vsum(ad.mul(ad.sub(x, m), ad.sub(x, m)))

    _check_grad(loss, [ParamBlock("x", x)])


def test_getitem_reshape_concat_stack(rng):
    x = rng.uniform(-1, 1, (4, 6))

    def loss(x):
        a = ad.getitem(x, (slice(0, 2), slice(None)))
        b = ad.getitem(x, (slice(2, 4), slice(None)))
        s = ad.stack([ad.vsum(a), ad.vsum(ad.mul(b, b))])
        return ad.vsum(ad.mul(s, s))

    _check_grad(loss, [ParamBlock("x", x)])


def test_gather_pixels_accumulates_duplicates(rng):
    x = rng.uniform(-1, 1, (4, 4, 3))
    rows = np.array([0, 0, 2])
    cols = np.array([1, 1, 3])

    def loss(x):
        sel = ad.gather_pixels(x, rows, cols)
        return ad.vsum(ad.mul(sel, sel))

    _check_grad(loss, [ParamBlock("x", x)])


def test_grad_x_y_box3(rng):
    x = rng.uniform(-1, 1, (5, 6))

    def loss(x):
        g = ad.add(ad.vsum(ad.mul(ad.grad_x(x), ad.grad_x(x))),
                   ad.vsum(ad.mul(ad.grad_y(x), ad.grad_y(x))))
        return ad.add(g, ad.vsum(ad.box3(ad.mul(x, x))))

    _check_grad(loss, [ParamBlock("x", x)])


def test_softmax_grad_and_normalization(rng):
    x = rng.uniform(-2, 2, (3, 4))
    s = ad.softmax(x)
    assert abs(float(np.sum(ad.value_of(s))) - 1.0) < 1e-12

    def loss(x):
        s = ad.softmax(x)
        return ad.vsum(ad.mul(s, x))

    _check_grad(loss, [ParamBlock("x", x)])


def test_bilinear_sample_exact_on_bilinear_function(rng):
    # bilinear interpolation reproduces a function linear in u and v exactly
    h, w = 6, 7
    v, u = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                       indexing="ij")
    src = 2.0 * u + 3.0 * v + 1.0
    uq = rng.uniform(0, w - 1, (4, 4))
    vq = rng.uniform(0, h - 1, (4, 4))
    out, valid = ad.bilinear_sample(src, uq, vq)
    np.testing.assert_allclose(out, 2.0 * uq + 3.0 * vq + 1.0, atol=1e-12)
    assert valid.min() == 1.0


def test_bilinear_sample_valid_mask():
    src = np.ones((4, 4))
    out, valid = ad.bilinear_sample(src, np.array([[-1.0, 0.0, 3.0, 3.5]]),
                                    np.array([[0.0, 0.0, 3.0, 1.0]]))
    np.testing.assert_array_equal(valid, [[0, 1, 1, 0]])


def test_bilinear_sample_grads(rng):
    src = rng.uniform(0, 1, (6, 6, 2))
    uq = rng.uniform(0.3, 4.3, (3, 3))
    vq = rng.uniform(0.3, 4.3, (3, 3))
    # keep off integer grid lines where the sampler has derivative kinks
    uq = np.where(np.abs(uq - np.round(uq)) < 1e-2, uq + 0.05, uq)
    vq = np.where(np.abs(vq - np.round(vq)) < 1e-2, vq + 0.05, vq)

    def loss(src, u, v):
        out, _ = ad.bilinear_sample(src, u, v)
        return ad.vsum(ad.mul(out, out))

    _check_grad(loss, [ParamBlock("src", src), ParamBlock("u", uq),
                       ParamBlock("v", vq)])


# ---------------------------------------------------------------------------
# hypothesis properties


@given(seed=st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_sigmoid_range_and_symmetry(seed):
    x = np.random.default_rng(seed).uniform(-20, 20, 16)
    s = ad.value_of(ad.sigmoid(x))
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(s + ad.value_of(ad.sigmoid(-x)), 1.0, atol=1e-12)


@given(seed=st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_sum_linearity(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    lhs = ad.value_of(ad.vsum(ad.add(a, b)))
    np.testing.assert_allclose(lhs, a.sum() + b.sum(), atol=1e-10)


@given(seed=st.integers(0, 2 ** 31))
@settings(max_examples=20, deadline=None)
def test_grad_of_linear_is_exact(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 4))
    x = rng.standard_normal((4, 4))
    g = grad(lambda x: ad.vsum(ad.mul(x, w)), [ParamBlock("x", x)])[0]
    np.testing.assert_array_equal(g, w)


# ---------------------------------------------------------------------------
# contract details


def test_grad_zero_for_unused_block(rng):
    x = rng.uniform(size=(2, 2))
    y = rng.uniform(size=(2, 2))
    gx, gy = grad(lambda x, y: ad.vsum(ad.mul(x, x)),
                  [ParamBlock("x", x), ParamBlock("y", y)])
    assert np.any(gx != 0)
    np.testing.assert_array_equal(gy, 0.0)


def test_grad_requires_var_output():
    with pytest.raises(ValueError):
        grad(lambda x: 1.0, [ParamBlock("x", np.zeros(2))])


def test_grad_requires_scalar(rng):
    with pytest.raises(ValueError):
        grad(lambda x: ad.mul(x, 2.0), [ParamBlock("x", rng.uniform(size=3))])


def test_nonfinite_loss_reports_op():
    with pytest.raises(ad.NonFiniteLossError):
        grad(lambda x: ad.vsum(ad.log(x)), [ParamBlock("x", np.zeros(3))])


def test_finite_diff_flat_indices(rng):
    x = rng.uniform(0.5, 1.5, (3, 4))
    fd = finite_diff(lambda x: ad.vsum(ad.mul(x, x)),
                     [ParamBlock("x", x)], 1e-6, indices=[[0, 5]])
    expect = np.zeros_like(x).reshape(-1)
    expect[[0, 5]] = 2 * x.reshape(-1)[[0, 5]]
    np.testing.assert_allclose(fd[0].reshape(-1), expect, atol=1e-7)


def test_finite_diff_rejects_bad_step(rng):
    with pytest.raises(ValueError):
        finite_diff(lambda x: ad.vsum(x), [ParamBlock("x", np.ones(2))], 0.0)


def test_param_block_bounds():
    b = ParamBlock("x", np.array([-2.0, 0.5, 3.0]), bounds=(-1.0, 1.0))
    b.clamp_to_bounds()
    np.testing.assert_array_equal(b.values, [-1.0, 0.5, 1.0])


def test_var_operator_sugar(rng):
    x = rng.uniform(1.0, 2.0, (3,))

    def loss(x):
        y = (-x + 2.0) * 3.0 - 1.0 / x
        return ad.vsum(y ** 2.0 / 2.0)

    _check_grad(loss, [ParamBlock("x", x)])


def test_reused_node_accumulates(rng):
    x = rng.uniform(0.5, 1.5, (4,))

    def loss(x):
        y = ad.mul(x, x)
        return ad.add(ad.vsum(y), ad.vsum(ad.mul(y, 2.0)))

    _check_grad(loss, [ParamBlock("x", x)])
