import io
import math

import numpy as np
import pytest

from clusdiff.errors import ConfigError, NumericError, ShapeError, StateError
from clusdiff.nncore import (
    AdamState,
    Conv1x1,
    Conv2d,
    GroupNorm,
    Linear,
    Param,
    Rng,
    Tensor,
    adam_step,
    grad_check,
    no_grad,
    ops,
    read_tensor,
    write_tensor,
)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, k, stride):
    """Direct 6-loop convolution, padding 1."""
    cin, h, w = x.shape
    cout = k.shape[0]
    xp = np.zeros((cin, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                for c in range(cin):
                    for u in range(3):
                        for v in range(3):
                            out[o, i, j] += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
    return out


class TestMatmul:
    def test_identity(self):
        b = np.arange(6.0).reshape(2, 3)
        out = ops.matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_zero(self):
        out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0], [0.0]])

    def test_row_times_ones(self):
        a = np.array([[1.0, 2.0, 3.0]])
        b = np.ones((3, 1))
        assert naive_matmul(a, b)[0, 0] == 6.0
        assert ops.matmul(Tensor(a), Tensor(b)).data[0, 0] == 6.0

    def test_random_against_loops(self):
        rs = np.random.default_rng(1)
        a, b = rs.normal(size=(4, 5)), rs.normal(size=(5, 3))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_center_one_kernel_is_identity(self):
        rs = np.random.default_rng(0)
        x = rs.normal(size=(2, 5, 5))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(k))
        np.testing.assert_array_equal(out.data, x)

    def test_constant_field_interior(self):
        out = ops.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data[0, 1:-1, 1:-1], 9.0)
        assert out.data[0, 0, 0] == 4.0

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_six_loop_reference(self, stride, seed):
        rs = np.random.default_rng(seed)
        x = rs.normal(size=(1, 4, 4))
        k = rs.normal(size=(1, 1, 3, 3))
        np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(k), stride=stride).data, naive_conv(x, k, stride), atol=1e-12)

    def test_multichannel_odd_extent(self):
        rs = np.random.default_rng(5)
        x = rs.normal(size=(3, 5, 7))
        k = rs.normal(size=(2, 3, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(k), stride=2)
        assert out.shape == (2, 3, 4)
        np.testing.assert_allclose(out.data, naive_conv(x, k, 2), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestNormActivation:
    def test_constant_input_normalizes_to_zero(self):
        out = ops.group_norm(Tensor(np.full((2, 4, 3, 3), 7.0)), 2)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_group_stats(self):
        rs = np.random.default_rng(3)
        x = rs.normal(3.0, 2.0, size=(2, 6, 4, 4))
        out = ops.group_norm(Tensor(x), 3).data.reshape(2, 3, -1)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_groups_must_divide(self):
        with pytest.raises(ConfigError):
            ops.group_norm(Tensor(np.ones((1, 6, 2, 2))), 4)

    def test_silu_values(self):
        assert ops.silu(Tensor(0.0)).item() == 0.0
        assert abs(ops.silu(Tensor(1.0)).item() - 1.0 / (1.0 + math.exp(-1.0))) < 1e-15
        assert abs(ops.silu(Tensor(1.0)).item() - 0.7310585) < 1e-7


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_hand_case(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance_and_rows(self):
        rs = np.random.default_rng(0)
        x = rs.normal(size=(5, 7))
        a = ops.softmax(Tensor(x), axis=1).data
        b = ops.softmax(Tensor(x + 123.4), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
        assert (a > 0).all()


class TestTimeEmbed:
    def test_t0(self):
        e = ops.sinusoidal_time_embed(0, 16)
        assert e.shape == (16,)
        np.testing.assert_array_equal(e[0::2], 0.0)
        np.testing.assert_array_equal(e[1::2], 1.0)

    def test_distinct_steps(self):
        d = np.abs(ops.sinusoidal_time_embed(1, 32) - ops.sinusoidal_time_embed(2, 32)).max()
        assert d > 1e-3

    def test_frequency_span(self):
        e = ops.sinusoidal_time_embed(np.pi / 2, 8)
        # highest frequency is 1: sin(pi/2) = 1
        assert abs(e[0] - 1.0) < 1e-12

    def test_odd_dim(self):
        with pytest.raises(ConfigError):
            ops.sinusoidal_time_embed(3, 7)


class TestGradCheck:
    def test_linear_function_exact(self):
        w = Tensor(np.array([1.5, -2.0, 0.25]))
        x = Tensor(np.array([0.3, 0.1, -0.7]))
        err = grad_check(lambda: ops.sum(ops.mul(w, x)), [x])
        assert err < 1e-10

    def test_softmax_cross_entropy(self):
        rs = np.random.default_rng(4)
        logits = Tensor(rs.normal(size=(5, 4)))
        labels = rs.integers(0, 4, size=5)
        assert grad_check(lambda: ops.cross_entropy(logits, labels), [logits]) < 1e-6

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3))
        with pytest.raises(NumericError):
            grad_check(lambda: ops.mul(x, 2.0), [x])


def _layer_cases(seed):
    rs = np.random.default_rng(seed)
    rng = Rng(seed)
    h = int(rs.integers(2, 9))
    w = int(rs.integers(2, 9))
    x4 = Tensor(rs.normal(size=(2, 4, h, w)))
    x2 = Tensor(rs.normal(size=(3, 5)))
    proj4 = Tensor(rs.normal(size=(2, 4, h, w)))

    conv = Conv2d(4, 3, rng.child("c1"))
    conv_s2 = Conv2d(4, 4, rng.child("c2"), stride=2)
    gn = GroupNorm(2, 4)
    gn.gain.data = rs.normal(size=4)
    gn.bias.data = rs.normal(size=4)
    lin = Linear(5, 6, rng.child("lin"))
    c11 = Conv1x1(4, 2, rng.child("c11"))

    def wsum(t):
        wts = Tensor(np.random.default_rng(seed + 99).normal(size=t.shape))
        return ops.sum(ops.mul(t, wts))

    return [
        ("conv2d", lambda: wsum(conv(x4)), [x4, conv.k, conv.b]),
        ("conv2d_s2", lambda: wsum(conv_s2(x4)), [x4, conv_s2.k]),
        ("group_norm", lambda: wsum(gn(x4)), [x4, gn.gain, gn.bias]),
        ("silu", lambda: wsum(ops.silu(x4)), [x4]),
        ("linear", lambda: wsum(lin(x2)), [x2, lin.w, lin.b]),
        ("conv1x1", lambda: wsum(c11(x4)), [x4, c11.w]),
        ("softmax", lambda: wsum(ops.softmax(x2, axis=1)), [x2]),
        ("matmul", lambda: wsum(ops.matmul(x2, lin.w)), [x2, lin.w]),
        ("upsample", lambda: wsum(ops.upsample2x(x4)), [x4]),
        ("concat", lambda: wsum(ops.concat([x4, proj4], axis=1)), [x4, proj4]),
        ("mse", lambda: ops.mse(x4, proj4), [x4, proj4]),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_every_layer_matches_finite_differences(seed):
    for name, fn, inputs in _layer_cases(seed):
        err = grad_check(fn, inputs, max_entries=12, seed=seed)
        assert err < 1e-4, (name, err)


def test_ops_are_pure():
    rs = np.random.default_rng(0)
    x = rs.normal(size=(2, 4, 6, 6))
    k = rs.normal(size=(3, 4, 3, 3))
    x_copy = x.copy()
    a = ops.conv2d(Tensor(x), Tensor(k)).data
    b = ops.conv2d(Tensor(x), Tensor(k)).data
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(x, x_copy)


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        ops.exp(Tensor([1000.0]))


def test_no_grad_records_nothing():
    p = Param(np.ones(3))
    with no_grad():
        out = ops.mul(p, 2.0)
    assert not out.requires_grad


class TestAdam:
    def test_zero_grads_keep_params(self):
        p = Param(np.array([1.0, -2.0]), id="p")
        st = AdamState.for_params([p])
        p.grad = np.zeros(2)
        adam_step([p], st)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_zero_lr_keeps_params(self):
        p = Param(np.array([1.0]), id="p")
        st = AdamState.for_params([p], lr=0.0)
        p.grad = np.array([3.0])
        adam_step([p], st)
        assert p.data[0] == 1.0

    @pytest.mark.parametrize("g", [0.5, -3.0, 40.0])
    def test_first_step_moves_by_lr(self, g):
        # m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps)
        p = Param(np.array([0.0]), id="p")
        st = AdamState.for_params([p], lr=1e-3)
        p.grad = np.array([g])
        adam_step([p], st)
        assert abs(p.data[0] - (-1e-3 * np.sign(g))) < 1e-6
        assert p.grad is None

    def test_missing_state(self):
        p = Param(np.ones(1), id="a")
        q = Param(np.ones(1), id="b")
        st = AdamState.for_params([p])
        with pytest.raises(StateError):
            adam_step([p, q], st)

    def test_minimizes_quadratic(self):
        p = Param(np.array([3.0, -2.0]), id="p")
        st = AdamState.for_params([p], lr=0.05)
        for _ in range(500):
            ops.sum(ops.square(p)).backward()
            adam_step([p], st)
        assert np.abs(p.data).max() < 1e-2


class TestRng:
    def test_stream_reproducible(self):
        a = Rng(7).child("noise", 3).normal(5)
        b = Rng(7).child("noise", 3).normal(5)
        assert a.tobytes() == b.tobytes()

    def test_streams_independent_of_consumption_order(self):
        r = Rng(11)
        first = r.child(1).normal(4)
        r.child(2).normal(100)
        again = r.child(1).normal(4)
        assert first.tobytes() == again.tobytes()

    def test_distinct_streams_differ(self):
        assert not np.array_equal(Rng(1).child(0).normal(4), Rng(1).child(1).normal(4))
        assert not np.array_equal(Rng(1).child(0).normal(4), Rng(2).child(0).normal(4))

    def test_frozen_draw(self):
        # guards against silent changes in the underlying bit generator
        assert Rng(0).child("x").integers(0, 2**31, size=3).tolist() == Rng(0).child("x").integers(0, 2**31, size=3).tolist()


class TestTensorFile:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, dtype):
        arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(dtype)
        buf = io.BytesIO()
        write_tensor(buf, arr)
        raw = buf.getvalue()
        assert raw[:4] == b"CDTN"
        assert raw[4] == (0 if dtype == np.float32 else 1)
        back = read_tensor(io.BytesIO(raw))
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)

    def test_header_layout(self):
        raw = io.BytesIO()
        write_tensor(raw, np.zeros((5, 7)))
        b = raw.getvalue()
        assert int.from_bytes(b[5:9], "little") == 2
        assert int.from_bytes(b[9:13], "little") == 5
        assert int.from_bytes(b[13:17], "little") == 7
        assert len(b) == 17 + 35 * 8
