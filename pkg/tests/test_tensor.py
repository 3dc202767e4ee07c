import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from partscope import _kernels as K
from partscope import tensor as T
from partscope.errors import ConfigError, ContractError, DimensionError, GeometryError, StateError

TOL = 1e-4


def weighted(op, shape_out_like, rng):
    """Scalarise ``op`` with a fixed random weighting so every output entry matters."""
    cache = {}

    def f(x):
        y = op(x)
        if "r" not in cache:
            cache["r"] = rng.standard_normal(y.shape)
        return (y * T.Tensor(cache["r"])).sum()

    return f


def check(op, x, rng):
    return T.grad_check(weighted(op, None, rng), T.Tensor(x))


# ---------------------------------------------------------------------------
# autodiff engine
# ---------------------------------------------------------------------------


def test_backward_without_graph_raises():
    with pytest.raises(StateError):
        T.Tensor(np.ones(3)).sum().backward()


def test_backward_non_scalar_needs_grad():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_gradients_accumulate_across_backward_calls():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    assert_allclose(x.grad, 4 * x.data)


def test_shared_subexpression_gradient():
    x = T.Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # x^2 + x^3
    assert_allclose(x.grad, [2 * 3 + 3 * 9])


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_broadcast_gradient_unbroadcasts():
    a = T.Tensor(np.ones((4, 3)), requires_grad=True)
    b = T.Tensor(np.ones(3), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (3,)
    assert_allclose(b.grad, [4, 4, 4])


@pytest.mark.parametrize("name,op,positive", [
    ("add", lambda x: x + x * 0.5, False),
    ("sub", lambda x: 1.0 - x, False),
    ("div", lambda x: x / 3.0, False),
    ("pow", lambda x: x ** 3.0, False),
    ("exp", T.exp, False),
    ("log", T.log, True),
    ("mean", lambda x: x.mean(axis=0), False),
    ("reshape", lambda x: x.reshape(-1), False),
    ("getitem", lambda x: x[1:, ::2], False),
    ("concat", lambda x: T.concat([x, x * 2.0], axis=-1), False),
    ("matmul", lambda x: x @ x.reshape(x.shape[1], x.shape[0]), False),
])
def test_elementwise_and_structural_grads(name, op, positive, rng):
    for _ in range(3):
        x = rng.standard_normal((3, 4))
        if positive:
            x = np.abs(x) + 0.5
        assert check(op, x, rng) < TOL, name


@pytest.mark.parametrize("kind", ["identity", "relu", "leaky_relu", "sigmoid", "softmax"])
def test_activation_grads(kind, rng):
    for _ in range(3):
        assert check(lambda x: T.activate(x, kind), rng.standard_normal((4, 5)), rng) < TOL


def test_log_softmax_grad(rng):
    assert check(T.log_softmax, rng.standard_normal((3, 6)), rng) < TOL


def test_unknown_activation():
    with pytest.raises(ConfigError):
        T.activate(T.Tensor(np.ones(2)), "swish")


def test_softmax_sums_to_one(rng):
    for _ in range(20):
        z = rng.standard_normal((5, 7)) * 30
        assert_allclose(T.softmax(T.Tensor(z)).data.sum(axis=-1), 1.0, atol=1e-9)


def test_leaky_relu_slope():
    y = T.leaky_relu(T.Tensor(np.array([-2.0, 0.0, 3.0])))
    assert_allclose(y.data, [-0.2, 0.0, 3.0])


def test_dropout_is_identity_in_eval(rng):
    x = T.Tensor(rng.standard_normal((4, 4)))
    assert T.dropout(x, 0.5, rng, training=False) is x


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv_case(rng, f, s, p, n=2, h=6, w=5, cin=2, cout=3):
    x = rng.standard_normal((n, h, w, cin))
    wt = rng.standard_normal((f, f, cin, cout))
    b = rng.standard_normal(cout)
    return x, wt, b


@pytest.mark.parametrize("f,s,p", [(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 0), (5, 2, 2)])
def test_conv_grads_all_inputs(backend, f, s, p, rng):
    x, wt, b = conv_case(rng, f, s, p)
    wt_t, b_t = T.Tensor(wt), T.Tensor(b)
    assert check(lambda t: T.conv2d_raw(t, wt_t, b_t, s, p), x, rng) < TOL
    xt = T.Tensor(x)
    assert check(lambda t: T.conv2d_raw(xt, t, b_t, s, p), wt, rng) < TOL
    assert check(lambda t: T.conv2d_raw(xt, wt_t, t, s, p), b, rng) < TOL


def test_conv_matches_direct_loop(backend, rng):
    x, wt, b = conv_case(rng, 3, 2, 1)
    got = T.conv2d_raw(T.Tensor(x), T.Tensor(wt), T.Tensor(b), 2, 1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho, wo = K.out_size(6, 3, 2, 1), K.out_size(5, 3, 2, 1)
    ref = np.zeros((2, ho, wo, 3))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[:, i, j, :] = np.einsum("nijc,ijcd->nd", patch, wt) + b
    assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_is_linear(rng):
    for _ in range(10):
        x, wt, _ = conv_case(rng, 3, 1, 1)
        y = rng.standard_normal(x.shape)
        a, c = rng.standard_normal(2)
        conv = lambda v: T.conv2d_raw(T.Tensor(v), T.Tensor(wt), None, 1, 1).data
        assert_allclose(conv(a * x + c * y), a * conv(x) + c * conv(y), atol=1e-9)


def test_conv_rejects_bad_shapes(rng):
    x = T.Tensor(rng.standard_normal((1, 4, 4, 2)))
    with pytest.raises(DimensionError):
        T.conv2d_raw(x, T.Tensor(np.ones((3, 3, 3, 1))))
    with pytest.raises(GeometryError):
        T.conv2d_raw(x, T.Tensor(np.ones((5, 5, 2, 1))))
    with pytest.raises(DimensionError):
        T.conv2d_raw(T.Tensor(np.ones((4, 4))), T.Tensor(np.ones((1, 1, 4, 1))))


def test_conv_accepts_unbatched(rng):
    x = rng.standard_normal((5, 5, 2))
    wt = rng.standard_normal((3, 3, 2, 4))
    y = T.conv2d_raw(T.Tensor(x), T.Tensor(wt), None, 1, 1)
    assert y.shape == (5, 5, 4)


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("f,s", [(2, 2), (3, 1), (3, 2)])
def test_pool_grads(backend, kind, f, s, rng):
    for _ in range(2):
        x = rng.standard_normal((2, 7, 6, 3))
        assert check(lambda t: T.pool2d(t, f, s, kind), x, rng) < TOL


def test_pool_values(backend):
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    assert_array_equal(T.pool2d(T.Tensor(x), 2, 2, "max").data[0, :, :, 0], [[5, 7], [13, 15]])
    assert_array_equal(T.pool2d(T.Tensor(x), 2, 2, "avg").data[0, :, :, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_pool_errors():
    x = T.Tensor(np.ones((1, 3, 3, 1)))
    with pytest.raises(GeometryError):
        T.pool2d(x, 4, 1)
    with pytest.raises(ConfigError):
        T.pool2d(x, 2, 1, "median")


@pytest.mark.parametrize("kind", ["max", "avg"])
def test_global_pool_grad(kind, rng):
    assert check(lambda t: T.global_pool(t, kind), rng.standard_normal((2, 3, 4, 5)), rng) < TOL


def test_backends_agree(rng):
    if not K.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    x = rng.standard_normal((3, 9, 8, 4)).astype(np.float32)
    outs = {}
    for flag in (False, True):
        prev = K.use_numba(flag)
        try:
            cols = K.im2col(x, 3, 2)
            mp, arg = K.maxpool(x, 2, 2)
            outs[flag] = (cols, K.col2im(cols, x.shape, 3, 2), mp, arg,
                          K.maxpool_backward(mp, arg, x.shape, 2, 2), K.avgpool(x, 3, 1),
                          K.avgpool_backward(K.avgpool(x, 3, 1), x.shape, 3, 1))
        finally:
            K.use_numba(prev)
    for a, b in zip(outs[False], outs[True]):
        assert_allclose(a, b, rtol=1e-6, atol=1e-6)


def test_shape_law_sample(rng):
    for _ in range(200):
        n = int(rng.integers(3, 33))
        f = int(rng.choice([1, 3, 5, 7]))
        s = int(rng.integers(1, 4))
        p = int(rng.choice([0, T.same_padding(f)]))
        if n + 2 * p < f:
            continue
        y = T.conv2d_raw(T.Tensor(np.zeros((1, n, n, 1))), T.Tensor(np.zeros((f, f, 1, 1))), None, s, p)
        assert y.shape[1] == (n + 2 * p - f) // s + 1


# ---------------------------------------------------------------------------
# dense and losses
# ---------------------------------------------------------------------------


def test_dense_grads(rng):
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    assert check(lambda t: T.dense(t, T.Tensor(w), T.Tensor(b)), x, rng) < TOL
    assert check(lambda t: T.dense(T.Tensor(x), t, T.Tensor(b), "sigmoid"), w, rng) < TOL
    assert check(lambda t: T.dense(T.Tensor(x), T.Tensor(w), t, "relu"), b, rng) < TOL


def test_dense_vector_and_shape_errors(rng):
    w = T.Tensor(rng.standard_normal((3, 5)))
    assert T.dense(T.Tensor(np.ones(5)), w).shape == (3,)
    with pytest.raises(DimensionError):
        T.dense(T.Tensor(np.ones(4)), w)


def test_cross_entropy_grad_and_value(rng):
    y = np.eye(4)[rng.integers(0, 4, 6)]
    p = T.softmax(T.Tensor(rng.standard_normal((6, 4)))).data
    assert check(lambda t: T.cross_entropy(t, y, np.array([1.0, 2.0, 0.5, 1.5])), p, rng) < TOL
    expected = -np.mean(np.sum(y * np.log(p), axis=1))
    assert_allclose(T.cross_entropy(T.Tensor(p), y).data, expected)


def test_cross_entropy_zero_only_at_target():
    y = np.array([0.0, 1.0, 0.0])
    assert T.cross_entropy(T.Tensor(y), y).item() == 0.0
    assert T.cross_entropy(T.Tensor(np.array([0.1, 0.8, 0.1])), y).item() > 0


def test_cross_entropy_shape_mismatch():
    with pytest.raises(DimensionError):
        T.cross_entropy(T.Tensor(np.ones((2, 3)) / 3), np.ones((2, 4)))


def test_softmax_cross_entropy_matches_composition(rng):
    z = rng.standard_normal((5, 3))
    y = np.eye(3)[[0, 1, 2, 1, 0]]
    w = np.array([1.0, 0.5, 2.0])
    fused = T.softmax_cross_entropy(T.Tensor(z), y, w).item()
    plain = T.cross_entropy(T.softmax(T.Tensor(z)), y, w).item()
    assert_allclose(fused, plain, rtol=1e-12)
    assert check(lambda t: T.softmax_cross_entropy(t, y, w), z, rng) < TOL


def test_bce_grad(rng):
    t = (rng.random((4, 3)) > 0.5).astype(float)
    assert check(lambda x: T.bce_with_logits(x, t), rng.standard_normal((4, 3)) * 3, rng) < TOL


def yolo_target(rng, n, s, a, c):
    tgt = np.zeros((n, s, s, a, 5 + c))
    mask = rng.random((n, s, s, a)) < 0.3
    tgt[..., 0:2] = rng.random((n, s, s, a, 2))
    tgt[..., 2:4] = rng.standard_normal((n, s, s, a, 2)) * 0.5
    tgt[..., 4] = mask
    tgt[..., 5:] = np.eye(c)[rng.integers(0, c, (n, s, s, a))]
    tgt[~mask] = 0
    return tgt


def test_yolo_loss_grad(rng):
    n, s, a, c = 2, 3, 2, 3
    tgt = yolo_target(rng, n, s, a, c)
    raw = rng.standard_normal((n, s, s, a * (5 + c)))
    assert T.grad_check(lambda x: T.yolo_loss(x, tgt, a, np.array([1.0, 2.0, 0.5])), T.Tensor(raw)) < TOL


def test_yolo_loss_components():
    # one assigned slot, class logits uniform -> cls term is log(C)
    tgt = np.zeros((1, 1, 1, 1, 7))
    tgt[0, 0, 0, 0] = [0.5, 0.5, 0.0, 0.0, 1.0, 1.0, 0.0]
    raw = np.zeros((1, 1, 1, 7))
    val = T.yolo_loss(T.Tensor(raw), tgt, 1).item()
    # coord: sigmoid(0)=0.5 matches, wh 0 matches -> 0; obj: bce(0, 1)=log 2; cls: log 2
    assert_allclose(val, 2 * np.log(2.0), rtol=1e-12)


def test_yolo_loss_shape_check():
    with pytest.raises(DimensionError):
        T.yolo_loss(T.Tensor(np.zeros((1, 2, 2, 14))), np.zeros((1, 2, 2, 2, 8)), 2)


def test_loss_dispatch_and_config():
    with pytest.raises(ConfigError):
        T.LossConfig(kind="hinge")
    with pytest.raises(ConfigError):
        T.LossConfig(class_weights=[1.0, 0.0])
    cfg = T.LossConfig(kind="yolo_composite")
    with pytest.raises(ConfigError):
        T.loss(T.Tensor(np.zeros((1, 1, 1, 7))), np.zeros((1, 1, 1, 1, 7)), cfg)
    cfg = T.LossConfig(kind="yolo_composite", extra={"num_anchors": 1})
    assert np.isfinite(T.loss(T.Tensor(np.zeros((1, 1, 1, 7))), np.zeros((1, 1, 1, 1, 7)), cfg).item())


def test_grad_check_contract():
    with pytest.raises(ContractError):
        T.grad_check(lambda x: x * 2.0, T.Tensor(np.ones(3)))
    with pytest.raises(ContractError):
        T.grad_check(lambda x: x.sum(), T.Tensor(np.ones(3)), h=0)
