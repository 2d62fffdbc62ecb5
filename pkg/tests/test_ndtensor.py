import numpy as np
import pytest

from ndvad.errors import ContractError, DimensionError, FormatError, NumericError
from ndvad.ndtensor import (
    Parameter,
    Tape,
    Tensor,
    backward,
    checkpoint,
    concat,
    conv2d,
    conv_transpose2d,
    div,
    exp,
    grad,
    grad_check,
    leaky_relu,
    linear,
    log,
    matmul,
    no_grad,
    norm,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
    tsum,
    upsample2x,
)


def direct_conv(x, k, stride=1, pad=0):
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


def direct_conv_transpose(x, k, stride=1, pad=0):
    # scatter form: every input pixel paints a weighted kernel footprint
    n, ci, h, w = x.shape
    _, co, kh, kw = k.shape
    full = np.zeros((n, co, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for b in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(w):
                    full[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[b, c, i, j] * k[c]
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (w - 1) * stride - 2 * pad + kw
    return full[:, :, pad : pad + ho, pad : pad + wo]


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        k = np.zeros((3, 3, 1, 1))
        k[[0, 1, 2], [0, 1, 2]] = 1.0
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k)).data, x)

    def test_constant_case(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, 4.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_direct_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, k = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
        got = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
        np.testing.assert_allclose(got, direct_conv(x, k, stride, pad), atol=1e-6)

    def test_output_size_floor(self):
        out = conv2d(Tensor(np.zeros((1, 1, 7, 6))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, pad=1)
        assert out.shape == (1, 2, 4, 3)

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(DimensionError, match="channel"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (2, 0)])
    def test_transpose_matches_scatter_oracle(self, stride, pad):
        rng = np.random.default_rng(7 + stride + pad)
        x, k = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 3, 3))
        got = conv_transpose2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
        np.testing.assert_allclose(got, direct_conv_transpose(x, k, stride, pad), atol=1e-9)

    def test_transpose_is_adjoint_of_conv(self):
        rng = np.random.default_rng(3)
        x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        y = rng.normal(size=(1, 3, 3, 3))
        # <conv(x), y> == <x, conv_transpose(y)> with the same (c_out, c_in) kernel read as (c_in, c_out)
        lhs = np.sum(conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data * y)
        up = conv_transpose2d(Tensor(y), Tensor(k), stride=2, pad=1).data
        assert up.shape == x.shape
        assert lhs == pytest.approx(np.sum(up * x), abs=1e-9)

    def test_upsample(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(upsample2x(Tensor(x)).data[0, 0],
                                      [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


class TestLinearSoftmax:
    def test_linear_identity_and_bias(self):
        out = linear(Tensor(np.array([1.0, 2.0])), Tensor(np.eye(2)), Tensor(np.array([3.0, 4.0])))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_linear_matches_loops(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(5, 8)), rng.normal(size=(8, 3))
        ref = np.array([[sum(x[i, k] * w[k, j] for k in range(8)) for j in range(3)] for i in range(5)])
        np.testing.assert_allclose(linear(Tensor(x), Tensor(w)).data, ref, atol=1e-6)

    def test_linear_mismatch(self):
        with pytest.raises(DimensionError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))))

    def test_softmax_examples(self):
        np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, 0.25)
        np.testing.assert_allclose(softmax(Tensor(np.array([1000.0, 1000.0]))).data, [0.5, 0.5])
        np.testing.assert_allclose(softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75])

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(2).normal(scale=50, size=(20, 7))
        s = softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(s > 0)


class TestBackward:
    def test_sum_gives_ones(self):
        p = Parameter(np.array([1.0, 2.0, 3.0]), "p")
        backward(p.sum())
        np.testing.assert_array_equal(p.grad.data, 1.0)

    def test_square(self):
        p = Parameter(np.array([1.0, 2.0, 3.0]), "p")
        backward((p * p).sum())
        np.testing.assert_array_equal(p.grad.data, [2.0, 4.0, 6.0])

    def test_unreachable_gets_none(self):
        a, b = Parameter(np.ones(2), "a"), Parameter(np.ones(2), "b")
        backward(a.sum())
        assert b.grad is None
        assert grad(a.sum(), [a, b])[1] is None

    def test_non_scalar_is_contract_error(self):
        with pytest.raises(ContractError):
            backward(Parameter(np.ones(3), "p") * 2.0)

    def test_tape_visits_each_node_once(self):
        x = Tensor(np.array([0.5, -1.0]), requires_grad=True)
        y = x * x
        z = (y + y * x).sum()  # y is used twice
        tape = Tape(z)
        tape.run(Tensor(np.ones(())))
        assert tape.visits == len(tape.nodes)
        assert len({id(n) for n in tape.nodes}) == len(tape.nodes)

    def test_division_by_zero_is_numeric_error(self):
        with pytest.raises(NumericError):
            div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))

    def test_non_finite_forward_is_numeric_error(self):
        with pytest.raises(NumericError):
            log(Tensor(np.array([-1.0])))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_norm_gradient_at_zero(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        g = grad(norm(x, axis=-1).sum(), [x])[0]
        np.testing.assert_array_equal(g.data, 0.0)


OPS = {
    "add": (lambda a, b: (a + b * b).sum(), 2),
    "sub": (lambda a, b: ((a - b) * a).sum(), 2),
    "mul": (lambda a, b: (a * b).sum(), 2),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), 2),
    "scalar": (lambda a: ((2.0 * a + 1.0) / 3.0 - 0.5).sum() * (a * a).mean(), 1),
    "pow": (lambda a: ((a * a + 1.0) ** 1.5).sum(), 1),
    "exp_log": (lambda a: log(exp(a) + 1.0).sum(), 1),
    "relu": (lambda a: (relu(a) * a).sum(), 1),
    "leaky_relu": (lambda a: (leaky_relu(a) * a).sum(), 1),
    "sigmoid": (lambda a: (sigmoid(a) * a).sum(), 1),
    "tanh": (lambda a: (tanh(a) * a).sum(), 1),
    "mean_axis": (lambda a: (a.mean(axis=1) ** 2).sum(), 1),
    "sum_axis": (lambda a: (tsum(a, 0) ** 2).sum(), 1),
    "norm": (lambda a: norm(a, axis=-1).sum(), 1),
    "reshape": (lambda a: (reshape(a, (a.size,)) * np.arange(a.size)).sum(), 1),
    "concat": (lambda a, b: (concat([a, b * 2.0], axis=0) ** 2).sum(), 2),
    "matmul": (lambda a, b: (matmul(a, reshape(b, (b.shape[1], b.shape[0]))) ** 2).sum(), 2),
    "softmax": (lambda a: (softmax(a, axis=-1) * np.arange(a.shape[-1])).sum(), 1),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_and_reduction_gradcheck(name):
    fn, arity = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(3):
        pts = [rng.normal(size=(3, 4)) + 0.1 for _ in range(arity)]
        assert grad_check(fn, pts) < 1e-5


def test_conv_ops_gradcheck():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    assert grad_check(lambda x, k, b: (conv2d(x, k, b, stride=2, pad=1) ** 2).sum(), [x, k, b]) < 1e-5
    kt = rng.normal(size=(2, 3, 3, 3))
    assert grad_check(lambda x, k: (conv_transpose2d(x, k, stride=2, pad=1) ** 2).sum(), [x, kt]) < 1e-5
    assert grad_check(lambda x: (upsample2x(x) * np.arange(400).reshape(2, 2, 10, 10)).sum(), [x]) < 1e-5


def test_gradient_of_gradient():
    def fn(x):
        g = grad((sigmoid(x) * tanh(x)).sum(), [x], create_graph=True)[0]
        return (g * g).sum()

    x = np.random.default_rng(0).normal(size=(4,))
    assert grad_check(fn, x) < 1e-5


def test_grad_check_square():
    assert grad_check(lambda x: x * x, np.array(3.0), eps=1e-5) < 1e-6


def test_grad_check_reports_nan_coordinate():
    def bad(x):
        return (x * Tensor(np.array([1.0, np.nan]))).sum()

    with pytest.raises(NumericError):
        grad_check(bad, np.ones(2))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a": rng.normal(size=(3, 4)).astype(np.float32),
            "b.c": rng.normal(size=(2, 1, 5)),
            "scalar": np.array(1.5),
            "bytes": np.frombuffer(b"meta", dtype=np.uint8),
        }
        path = tmp_path / "x.ndck"
        checkpoint.save(path, tensors)
        back = checkpoint.load(path)
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype
            assert back[k].tobytes() == tensors[k].tobytes()
            assert back[k].shape == tensors[k].shape

    def test_header_layout(self):
        buf = checkpoint.encode({"w": np.zeros((2,), np.float32)})
        assert buf[:4] == b"NDCK"
        assert int.from_bytes(buf[4:6], "little") == 1
        assert int.from_bytes(buf[6:10], "little") == 1

    @pytest.mark.parametrize("cut", [0, 3, 9, 12, 20])
    def test_truncation_is_format_error(self, cut):
        buf = checkpoint.encode({"weights": np.arange(6, dtype=np.float32)})
        with pytest.raises(FormatError) as info:
            checkpoint.decode(buf[:cut])
        assert "offset" in str(info.value)

    def test_bad_magic_and_tag(self):
        buf = bytearray(checkpoint.encode({"w": np.zeros(1, np.float32)}))
        with pytest.raises(FormatError, match="magic"):
            checkpoint.decode(b"XXXX" + bytes(buf[4:]))
        buf[-5] = 99  # dtype tag precedes the 4 value bytes
        with pytest.raises(FormatError):
            checkpoint.decode(bytes(buf))
