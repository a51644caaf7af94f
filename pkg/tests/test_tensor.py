import io
import math
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import integrate

from gpsa_lab import tensor as T
from gpsa_lab.errors import ContractError, FormatError, NumericError, ShapeError

from .gradcheck_util import check_grads


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(T.tensor([[1, 0], [0, 1]]), T.tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_row_times_column(self):
        assert T.matmul(T.tensor([[1, 2]]), T.tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        out = T.matmul(T.tensor(a), T.tensor(b)).data
        assert np.max(np.abs(out - loop_matmul(a, b))) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
    def test_triple_loop_property(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        assert np.max(np.abs(T.matmul(T.tensor(a), T.tensor(b)).data - loop_matmul(a, b))) < 1e-12

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((4, 5))))

    def test_backward_rule(self):
        rng = np.random.default_rng(1)
        a = T.parameter(rng.normal(size=(3, 4)))
        b = T.parameter(rng.normal(size=(4, 2)))
        g = rng.normal(size=(3, 2))
        T.backward(T.sum(T.matmul(a, b) * g))
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)

    def test_batched_against_loop(self):
        rng = np.random.default_rng(2)
        a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
        out = T.matmul(T.tensor(a), T.tensor(w)).data
        for i in range(3):
            assert np.max(np.abs(out[i] - loop_matmul(a[i], w))) < 1e-12


class TestSoftmax:
    def test_zeros_uniform(self):
        np.testing.assert_array_equal(T.softmax_rows(T.tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_no_overflow(self):
        out = T.softmax_rows(T.tensor([[1000.0, 0.0]])).data
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-300 + 1e-400
        assert np.isfinite(out).all()

    def test_high_precision_oracle(self):
        mpmath.mp.dps = 50
        es = [mpmath.e ** k for k in (1, 2, 3)]
        expected = [float(e / sum(es)) for e in es]
        out = T.softmax_rows(T.tensor([[1.0, 2.0, 3.0]])).data[0]
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_rows(T.tensor([[np.nan, 1.0]]))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                      elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = T.softmax_rows(T.tensor(x)).data
        assert np.all(y >= 0)
        assert np.max(np.abs(y.sum(axis=-1) - 1)) < 1e-12
        y2 = T.softmax_rows(T.tensor(x + c)).data
        assert np.max(np.abs(y - y2)) < 1e-12


class TestSigmoid:
    def test_values(self):
        out = T.sigmoid(T.tensor([0.0, 1.0, -1.0])).data
        assert out[0] == 0.5
        assert out[1] == pytest.approx(0.7310585786300049, abs=1e-15)
        assert out[2] == pytest.approx(1 - out[1], abs=1e-15)

    def test_grad_closed_form(self):
        x = T.parameter([-2.0, 0.3, 1.7])
        T.backward(T.sum(T.sigmoid(x)))
        s = 1 / (1 + np.exp(-x.data))
        np.testing.assert_allclose(x.grad, s * (1 - s), atol=1e-15)


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.tensor([0.0])).data[0] == 0.0

    def test_asymptotics(self):
        out = T.gelu(T.tensor([20.0, -20.0])).data
        assert out[0] == pytest.approx(20.0, abs=1e-12)
        assert abs(out[1]) < 1e-12

    def test_quadrature_oracle(self):
        phi, _ = integrate.quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -np.inf, 1.0,
                                epsabs=1e-14, epsrel=1e-14)
        assert T.gelu(T.tensor([1.0])).data[0] == pytest.approx(phi, abs=1e-10)


class TestLayernorm:
    def test_constant_vector_gives_bias(self):
        bias = np.array([0.1, -0.2, 0.3])
        out = T.layernorm(T.tensor([[2.0, 2.0, 2.0]]), T.tensor(np.ones(3)), T.tensor(bias)).data
        np.testing.assert_allclose(out[0], bias, atol=1e-12)

    def test_unit_variance_input(self):
        out = T.layernorm(T.tensor([1.0, -1.0]), T.tensor([1.0, 1.0]), T.tensor([0.0, 0.0])).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)

    def test_random_statistics(self):
        x = np.random.default_rng(3).normal(3.0, 5.0, size=64)
        out = T.layernorm(T.tensor(x), T.tensor(np.ones(64)), T.tensor(np.zeros(64))).data
        assert abs(out.mean()) < 1e-9
        assert 1 - 1e-4 <= out.var() <= 1 + 1e-4

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.layernorm(T.tensor(np.ones((2, 3))), T.tensor(np.ones(4)), T.tensor(np.zeros(4)))


class TestBackward:
    def test_linear_case(self):
        x = np.array([1.0, -2.0, 3.0])
        w = T.parameter(np.ones((2, 3)))
        T.backward(T.sum(T.matmul(w, T.tensor(x.reshape(3, 1)))))
        np.testing.assert_array_equal(w.grad, np.tile(x, (2, 1)))

    def test_non_scalar_rejected(self):
        x = T.parameter([1.0, 2.0])
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_accumulates_across_uses(self):
        x = T.parameter([3.0])
        T.backward(T.sum(x * x + x))
        assert x.grad.tolist() == [7.0]
        T.backward(T.sum(x * 2.0))
        assert x.grad.tolist() == [9.0]

    def test_no_grad_records_nothing(self):
        x = T.parameter([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_tape_order(self):
        x = T.parameter([1.0])
        y = T.exp(x)
        z = T.sum(y * x)
        tape = T.trace(z)
        assert [t._seq for t in tape] == sorted(t._seq for t in tape)
        assert tape[0] is x and tape[-1] is z


def _rand(rng, *shape):
    return T.parameter(rng.normal(size=shape))


@pytest.mark.parametrize("name", [
    "matmul", "batched_matmul", "add_bcast", "sub", "mul", "div", "exp", "log", "softmax",
    "log_softmax", "sigmoid", "gelu", "layernorm", "concat", "transpose", "reshape", "index",
    "broadcast_to", "mean",
])
def test_finite_difference(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    c, v = _rand(rng, 3, 4), _rand(rng, 4)
    weights = T.tensor(rng.normal(size=(3, 4)))
    builders = {
        "matmul": (lambda: T.sum(T.matmul(a, b) * T.tensor(np.arange(6).reshape(3, 2))), [a, b]),
        "batched_matmul": (lambda: T.sum(T.matmul(T.broadcast_to(c, (2, 3, 4)), b) * 0.5), [c, b]),
        "add_bcast": (lambda: T.sum((a + v) * weights), [a, v]),
        "sub": (lambda: T.sum((a - c) * weights), [a, c]),
        "mul": (lambda: T.sum(a * c * weights), [a, c]),
        "div": (lambda: T.sum(a / (T.exp(c) + 0.5)), [a, c]),
        "exp": (lambda: T.sum(T.exp(a) * weights), [a]),
        "log": (lambda: T.sum(T.log(T.exp(a) + 1.0) * weights), [a]),
        "softmax": (lambda: T.sum(T.softmax_rows(a) * weights), [a]),
        "log_softmax": (lambda: T.sum(T.log_softmax(a) * weights), [a]),
        "sigmoid": (lambda: T.sum(T.sigmoid(a) * weights), [a]),
        "gelu": (lambda: T.sum(T.gelu(a) * weights), [a]),
        "layernorm": (lambda: T.sum(T.layernorm(a, v, T.exp(v)) * weights), [a, v]),
        "concat": (lambda: T.sum(T.concat([a, c], axis=1) * T.tensor(np.arange(24.0).reshape(3, 8))), [a, c]),
        "transpose": (lambda: T.sum(T.matmul(T.transpose(b), T.transpose(a)) * T.tensor(np.arange(6.0).reshape(2, 3))), [a, b]),
        "reshape": (lambda: T.sum(T.reshape(a, (2, 6)) * T.tensor(np.arange(12.0).reshape(2, 6))), [a]),
        "index": (lambda: T.sum(a[1:, 2] * a[2, :3].sum()), [a]),
        "broadcast_to": (lambda: T.sum(T.broadcast_to(v, (3, 4)) * weights), [v]),
        "mean": (lambda: T.sum(T.mean(a * a, axis=0) * v), [a, v]),
    }
    fn, params = builders[name]
    assert max(check_grads(fn, params)) < 1e-4


def test_no_public_op_makes_inf_silently():
    with pytest.raises(NumericError):
        T.exp(T.tensor([1000.0]))
    with pytest.raises(NumericError):
        T.log(T.tensor([0.0]))


class TestSerialization:
    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(4).normal(size=(2, 3, 4))
        T.save_tensor(tmp_path / "x.bin", T.tensor(x))
        assert np.array_equal(T.load_tensor(tmp_path / "x.bin").data, x)

    def test_header_layout(self):
        buf = io.BytesIO()
        T.write_tensor(buf, T.tensor([[1.5, 2.0]]))
        raw = buf.getvalue()
        assert raw[:6] == b"GPSAT1"
        assert raw[6:10] == (2).to_bytes(4, "little")
        assert raw[10:18] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(raw[18:], dtype="<f8").tolist() == [1.5, 2.0]

    def test_truncated(self, tmp_path):
        buf = io.BytesIO()
        T.write_tensor(buf, T.tensor(np.ones(4)))
        (tmp_path / "t.bin").write_bytes(buf.getvalue()[:-3])
        with pytest.raises(FormatError, match="offset"):
            T.load_tensor(tmp_path / "t.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(b"NOPE00" + bytes(8))
        with pytest.raises(FormatError):
            T.load_tensor(tmp_path / "t.bin")
