import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aaustereo import _kernels
from aaustereo import autodiff as ad
from aaustereo.autodiff import Parameter, Tensor
from aaustereo.errors import AAUError, NumericError, ShapeError
from aaustereo.optim import AdamW, adamw_step, grad_check

SEEDS = range(20)


# -- softmax -------------------------------------------------------------------


def test_softmax_uniform():
    assert np.allclose(ad.softmax_lastdim([1.0, 1.0, 1.0]).data, 1 / 3, atol=1e-15)


def test_softmax_large_equal_inputs():
    assert np.array_equal(ad.softmax_lastdim([1000.0, 1000.0]).data, [0.5, 0.5])


def test_softmax_ln2():
    assert np.allclose(ad.softmax_lastdim([0.0, np.log(2)]).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError) as e:
        ad.softmax_lastdim(np.zeros((3, 0)))
    assert e.value.code == "empty-reduction"


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=9),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_keep_argmax(x):
    y = ad.softmax_lastdim(x).data
    assert np.all(np.abs(y.sum(-1) - 1) < 1e-12)
    top = np.sort(x, axis=-1)
    unique = top[..., -1] - top[..., -2] > 1e-9 if x.shape[-1] > 1 else np.ones(x.shape[:-1], bool)
    assert np.array_equal(np.argmax(x, -1)[unique], np.argmax(y, -1)[unique])


# -- layer norm ------------------------------------------------------------------


def test_layer_norm_constant_is_zero():
    y = ad.layer_norm(np.full((1, 4), 7.0), np.ones(4), np.zeros(4)).data
    assert np.array_equal(y, np.zeros((1, 4)))


def test_layer_norm_two_values():
    assert np.allclose(ad.layer_norm([1.0, 3.0], np.ones(2), np.zeros(2), eps=1e-12).data, [-1, 1], atol=1e-12)


def test_layer_norm_affine():
    y = ad.layer_norm([1.0, 3.0], np.full(2, 2.0), np.ones(2), eps=1e-12).data
    assert np.allclose(y, [-1, 3], atol=1e-12)


def test_layer_norm_shape_mismatch():
    with pytest.raises(ShapeError) as e:
        ad.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))
    assert e.value.code == "shape-mismatch"


# -- conv2d ------------------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 3, 5, 6))
    k = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(ad.conv2d(x, k, np.zeros(3)).data, x)


def test_conv_all_ones():
    y = ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1)).data
    assert y.shape == (1, 1, 1, 1) and y.item() == 9.0


def test_conv_delta_gives_flipped_kernel(rng):
    k = rng.standard_normal((1, 1, 3, 3))
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    y = ad.conv2d(x, k, np.zeros(1), 1, 1).data
    assert np.array_equal(y[0, 0], k[0, 0, ::-1, ::-1])


def loop_conv(x, k, b, stride, pad):
    cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = b[o] + np.sum(xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw] * k[o])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_loop(rng, stride, pad):
    x = rng.standard_normal((2, 7, 8))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    y = ad.conv2d(x, k, b, stride, pad).data
    assert y.shape[1:] == ((7 + 2 * pad - 3) // stride + 1, (8 + 2 * pad - 3) // stride + 1)
    assert np.allclose(y, loop_conv(x, k, b, stride, pad), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError) as e:
        ad.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
    assert e.value.code == "shape-mismatch"


# -- primitive gradients (>= 20 seeds each) ------------------------------------------

UNARY = {
    "exp": ad.exp,
    "log": lambda a: ad.log(ad.exp(a) + 1.0),
    "sqrt": lambda a: ad.sqrt(a * a + 1.0),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "gelu": ad.gelu,
    "power": lambda a: ad.power(a * a + 0.5, 1.5),
    "softmax": ad.softmax_lastdim,
    "logsumexp": lambda a: ad.logsumexp(a, axis=-1),
    "mean": lambda a: ad.mean(a, axis=0),
    "transpose": lambda a: ad.transpose(a, (1, 0)),
    "roll": lambda a: ad.roll(a, (1, -2), axis=(0, 1)),
    "pad": lambda a: ad.pad(a, ((1, 0), (0, 2))),
    "getitem": lambda a: a[1:, ::2],
    "fancy-index": lambda a: ad.getitem(a, (np.array([0, 2, 2]), np.array([1, 1, 3]))),
    "skew": lambda a: ad.relative_skew(ad.getitem(a, (slice(0, 3), slice(0, 5)))),
    "masked": lambda a: ad.masked_fill(a, np.eye(3, 5, dtype=bool), -2.0),
    "smooth-l1": lambda a: ad.smooth_l1(a * 3.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_primitive_gradient(name, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 5)))
    v = rng.standard_normal(UNARY[name](x).shape)
    err = grad_check(lambda a: ad.tsum(UNARY[name](a) * v), [x])
    assert err < 1e-6


BINARY = {
    "add-broadcast": (lambda a, b: a + b[0], (3, 4), (1, 4)),
    "sub": (lambda a, b: a - b, (3, 4), (3, 4)),
    "mul-broadcast": (lambda a, b: a * ad.reshape(b, (3, 1)), (3, 4), (3,)),
    "div": (lambda a, b: a / (b * b + 1.0), (3, 4), (3, 4)),
    "matmul": (lambda a, b: ad.matmul(a, b), (3, 4), (4, 2)),
    "batched-matmul": (lambda a, b: ad.matmul(ad.reshape(a, (2, 3, 2)), ad.reshape(b, (2, 2, 2))), (3, 4), (2, 4)),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), (3, 4), (2, 4)),
    "stack": (lambda a, b: ad.stack([a, b], axis=1), (3, 4), (3, 4)),
    "where": (lambda a, b: ad.where(np.arange(12).reshape(3, 4) % 3 == 0, a, b), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_primitive_gradient(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.standard_normal(sa)), Tensor(rng.standard_normal(sb))
    v = rng.standard_normal(fn(a, b).shape)
    assert grad_check(lambda a, b: ad.tsum(fn(a, b) * v), [a, b]) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, b = Tensor(rng.standard_normal((4, 6))), Tensor(rng.uniform(0.5, 2, 6)), Tensor(rng.standard_normal(6))
    v = rng.standard_normal((4, 6))
    assert grad_check(lambda x, g, b: ad.tsum(ad.layer_norm(x, g, b) * v), [x, g, b]) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 0, 1), (1, 1, 2)])
def test_conv_gradient(seed, stride, pad, groups):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 4, 6, 5)))
    k = Tensor(rng.standard_normal((4, 4 // groups, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    v = rng.standard_normal(ad.conv2d(x, k, b, stride, pad, groups).shape)
    assert grad_check(lambda x, k, b: ad.tsum(ad.conv2d(x, k, b, stride, pad, groups) * v), [x, k, b]) < 1e-6


def test_relu_and_clip_gradient_away_from_kinks(rng):
    x = Tensor(rng.choice([-1, 1], (4, 4)) * rng.uniform(0.1, 1, (4, 4)))
    assert grad_check(lambda a: ad.tsum(ad.relu(a) * 1.7 + ad.clip(a, lo=-0.05, hi=0.05)), [x]) < 1e-6


# -- tape --------------------------------------------------------------------------


def test_reused_input_accumulates():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    x.grad = np.zeros(3)
    with ad.Tape() as tape:
        y = ad.tsum(x * x)
    tape.backward(y)
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_visits_each_node_once():
    x = Parameter(np.ones(3))
    with ad.Tape() as tape:
        a = x * 2.0
        b = a + x
        c = ad.tsum(b * a)
    n = len(tape)
    tape.backward(c)
    assert tape.visits == n


def test_parameter_reset():
    p = Parameter(np.ones((2, 3)))
    p.grad += 5.0
    assert p.grad.shape == p.data.shape
    p.zero_grad()
    assert not p.grad.any()


def test_no_tape_records_nothing():
    x = Parameter(np.ones(3))
    with ad.Tape() as tape:
        with ad.no_tape():
            ad.tsum(x * x)
    assert len(tape) == 0


def test_non_scalar_backward_rejected():
    x = Parameter(np.ones(3))
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError) as e:
        tape.backward(y)
    assert e.value.code == "non-scalar-objective"


@pytest.mark.parametrize("seed", range(3))
def test_ops_are_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 6, 6))
        k = rng.standard_normal((3, 3, 3, 3))
        y = ad.conv2d(x, k, np.zeros(3), 1, 1)
        return ad.softmax_lastdim(ad.layer_norm(y, np.ones(6), np.zeros(6))).data

    assert run().tobytes() == run().tobytes()


# -- kernels backends ------------------------------------------------------------


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba missing")
@given(seed=st.integers(0, 2**31), groups=st.sampled_from([1, 2]), stride=st.sampled_from([1, 2]),
       pad=st.sampled_from([0, 1]))
@settings(max_examples=30)
def test_backends_agree(seed, groups, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 7, 6))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    b = rng.standard_normal(4)
    x2 = rng.standard_normal((9, 5))
    g2 = rng.standard_normal((9, 5))
    res = {}
    prev = _kernels.get_backend()
    for name in ("numpy", "numba"):
        _kernels.set_backend(name)
        y = _kernels.conv2d_forward(x, w, b, stride, pad, groups)
        gy = np.ones_like(y)
        ln, xhat, rstd = _kernels.layer_norm_forward(x2, np.ones(5), np.zeros(5), 1e-5)
        sm = _kernels.softmax_forward(x2)
        res[name] = [y, *_kernels.conv2d_backward(gy, x, w, stride, pad, groups), ln,
                     *_kernels.layer_norm_backward(g2, xhat, rstd, np.ones(5)), sm, _kernels.softmax_backward(g2, sm)]
    _kernels.set_backend(prev)
    for a, c in zip(res["numpy"], res["numba"]):
        a = a if isinstance(a, np.ndarray) else np.asarray(a)
        assert np.allclose(a, c, rtol=1e-12, atol=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _kernels.set_backend("cuda")


# -- optimizer ---------------------------------------------------------------------


def test_adamw_zero_grad_no_decay():
    p = Parameter(np.array([1.0, -2.0]))
    adamw_step([p], 0.1, weight_decay=0.0, step=1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_is_sign():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    p.grad[:] = [3.0, -0.01, 1e-3]
    adamw_step([p], 1e-2, weight_decay=0.0, step=1)
    assert np.allclose(p.data - [1.0, -2.0, 0.5], -1e-2 * np.sign([3.0, -0.01, 1e-3]), rtol=1e-4)


def test_adamw_decoupled_decay():
    p = Parameter(np.array([2.0, -4.0]))
    adamw_step([p], 0.5, weight_decay=1e-4, step=1)
    assert np.allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.5 * 1e-4), rtol=0, atol=1e-15)


def test_adamw_matches_reference_recursion(rng):
    p = Parameter(rng.standard_normal(5))
    ref = p.data.copy()
    m, v = np.zeros(5), np.zeros(5)
    opt = AdamW([p], lr=1e-2, weight_decay=1e-2)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        p.grad[:] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 1e-2 * 1e-2) - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, ref, atol=1e-14)


def test_adamw_non_finite_grad_names_parameter():
    p = Parameter(np.ones(2), name="head.weight")
    p.grad[0] = np.nan
    with pytest.raises(NumericError) as e:
        adamw_step([p], 0.1)
    assert e.value.code == "non-finite-grad" and "head.weight" in str(e.value)


def test_adamw_group_learning_rates():
    a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1), group="context")
    a.grad[:] = b.grad[:] = 1.0
    adamw_step([a, b], {"default": 1e-3, "context": 2e-3}, weight_decay=0.0)
    assert np.allclose([a.data[0], b.data[0]], [-1e-3, -2e-3], rtol=1e-6)


# -- grad_check harness --------------------------------------------------------------


def test_grad_check_quadratic():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    assert grad_check(lambda a: ad.tsum(a * a), [x]) < 1e-8
    assert np.allclose(x.grad, [2, 4, 6])


def test_grad_check_softmax_dot(rng):
    v = rng.standard_normal(8)
    assert grad_check(lambda a: ad.tsum(ad.softmax_lastdim(a) * v), [Tensor(rng.standard_normal(8))]) < 1e-6


def test_grad_check_rejects_vector_objective():
    with pytest.raises(AAUError) as e:
        grad_check(lambda a: a * 2.0, [Tensor(np.ones(3))])
    assert e.value.code == "non-scalar-objective"


def test_grad_check_epsilon_range():
    with pytest.raises(ValueError):
        grad_check(lambda a: ad.tsum(a), [Tensor(np.ones(3))], epsilon=1e-2)


def test_grad_check_detects_wrong_gradient(monkeypatch):
    """A deliberately broken backward kernel is caught, so the harness is not vacuous."""
    real = _kernels.softmax_backward
    monkeypatch.setattr(_kernels, "softmax_backward", lambda g, y: 2.0 * real(g, y))
    v = np.arange(5.0)
    err = grad_check(lambda a: ad.tsum(ad.softmax_lastdim(a) * v), [Tensor(np.linspace(0, 1, 5))])
    assert err > 1e-3
