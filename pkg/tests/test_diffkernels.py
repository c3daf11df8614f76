import math
import zlib
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bgformer import diffkernels as dk
from bgformer.errors import FormatError, NonFinite, ShapeMismatch

getcontext().prec = 50


def _dec_exp(x):
    return Decimal(x).exp()


class TestAffine:
    def test_identity(self):
        X = np.arange(6.0).reshape(2, 3)
        out = dk.affine(X, np.eye(3), np.zeros((1, 3)))
        np.testing.assert_array_equal(out.value, X)

    def test_zero_input_broadcasts_bias(self):
        b = np.array([[1.5, -2.0]])
        out = dk.affine(np.zeros((3, 4)), np.ones((4, 2)), b)
        np.testing.assert_array_equal(out.value, np.repeat(b, 3, axis=0))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        X, W, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), rng.normal(size=(1, 2))
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                acc = b[0, j]
                for k in range(3):
                    acc += X[i, k] * W[k, j]
                expected[i, j] = acc
        np.testing.assert_allclose(dk.affine(X, W, b).value, expected, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dk.affine(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((1, 2)))
        with pytest.raises(ShapeMismatch):
            dk.affine(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros((1, 3)))


class TestRowSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(dk.row_softmax([[0.0, 0.0]]).value, [[0.5, 0.5]], atol=1e-15)

    @pytest.mark.parametrize("c", [-700.0, -3.0, 0.0, 12.5, 700.0])
    def test_shift_ratio(self, c):
        y = dk.row_softmax([[c, c + math.log(3.0)]]).value
        np.testing.assert_allclose(y, [[0.25, 0.75]], atol=1e-14)

    def test_matches_extended_precision(self):
        xs = [1.0, 2.0, 3.0]
        den = sum(_dec_exp(x) for x in xs)
        expected = [float(_dec_exp(x) / den) for x in xs]
        np.testing.assert_allclose(dk.row_softmax([xs]).value[0], expected, rtol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, S, c):
        y = dk.row_softmax(S).value
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y >= 0)
        np.testing.assert_allclose(dk.row_softmax(S + c).value, y, atol=1e-12)


class TestElementwise:
    def test_fixed_points(self):
        z = np.zeros((1, 1))
        assert dk.elementwise("sigmoid", z).value.item() == 0.5
        assert dk.elementwise("exp", z).value.item() == 1.0
        assert dk.elementwise("log1p", z).value.item() == 0.0

    def test_softplus_extended_precision(self):
        expected = float((Decimal(1) + _dec_exp(1.5)).ln())
        assert dk.elementwise("softplus", [[1.5]]).value.item() == pytest.approx(expected, rel=1e-15)

    def test_softplus_overflow_guard(self):
        assert dk.softplus([[1000.0]]).value.item() == 1000.0
        assert np.isfinite(dk.softplus([[-1000.0]]).value).all()

    def test_sigmoid_saturation(self):
        v = dk.sigmoid([[-100.0, 100.0]]).value
        assert 0 < v[0, 0] < 1e-40
        assert v[0, 1] == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            dk.elementwise("tanh", [[0.0]])

    def test_exp_clamp(self):
        assert dk.exp([[100.0]], clamp=30.0).value.item() == pytest.approx(math.exp(30.0))


def _store(rng, **shapes):
    ps = dk.ParamStore(seed=0)
    for name, shape in shapes.items():
        ps.set(name, rng.normal(size=shape))
    return ps


KERNEL_CASES = {
    "affine": (dict(X=(3, 4), W=(4, 2), b=(1, 2)), lambda p: dk.total(dk.affine(p["X"], p["W"], p["b"]))),
    "matmul": (dict(A=(3, 4), B=(4, 2)), lambda p: dk.sq_frobenius(dk.matmul(p["A"], p["B"]))),
    "matmul_t": (dict(A=(3, 4), B=(5, 4)), lambda p: dk.sq_frobenius(dk.matmul_t(p["A"], p["B"]))),
    "softmax": (dict(S=(3, 4), T=(3, 4)), lambda p: dk.sq_frobenius(dk.add(dk.row_softmax(p["S"]), p["T"]))),
    "sigmoid": (dict(A=(3, 3)), lambda p: dk.sq_frobenius(dk.sigmoid(p["A"]))),
    "softplus": (dict(A=(3, 3)), lambda p: dk.sq_frobenius(dk.softplus(p["A"]))),
    "exp": (dict(A=(3, 3)), lambda p: dk.total(dk.exp(p["A"]))),
    "log1p": (dict(A=(3, 3)), lambda p: dk.total(dk.log1p(dk.exp(p["A"])))),
    "concat": (dict(A=(3, 2), B=(3, 3)), lambda p: dk.sq_frobenius(dk.concat_cols([p["A"], dk.scale(p["B"], 1.5)]))),
    "gather": (dict(U=(4, 3)), lambda p: dk.sq_frobenius(dk.gather_rows(p["U"], [0, 2, 2, 3, 0]))),
    "scale_rows": (dict(A=(3, 2)), lambda p: dk.sq_frobenius(dk.scale_rows(p["A"], [1.0, 2.0, 0.5]))),
}


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(KERNEL_CASES))
    def test_kernels_at_random_points(self, name):
        shapes, f = KERNEL_CASES[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst = 0.0
        for _ in range(100):
            worst = max(worst, dk.grad_check(f, _store(rng, **shapes), h=1e-6))
        assert worst < 1e-6

    def test_linear_function_exact(self):
        rng = np.random.default_rng(0)
        ps = _store(rng, W=(3, 2))
        X = rng.normal(size=(4, 3))
        err = dk.grad_check(lambda p: dk.total(dk.affine(X, p["W"], np.zeros((1, 2)))), ps, h=1e-5)
        assert err < 1e-10

    def test_softmax_sum_has_zero_gradient(self):
        rng = np.random.default_rng(0)
        ps = _store(rng, S=(4, 5))
        with dk.Tape() as tape:
            loss = dk.total(dk.row_softmax(ps["S"]))
            tape.backward(loss)
        assert np.max(np.abs(ps["S"].grad)) < 1e-8
        assert dk.grad_check(lambda p: dk.total(dk.row_softmax(p["S"])), ps) < 1e-8

    def test_nonfinite_raises(self):
        ps = dk.ParamStore()
        ps.set("A", [[1000.0]])
        with pytest.raises(NonFinite):
            dk.grad_check(lambda p: dk.total(dk.exp(p["A"])), ps)

    def test_step_range(self):
        ps = dk.ParamStore()
        ps.set("A", [[1.0]])
        with pytest.raises(ValueError):
            dk.grad_check(lambda p: dk.total(p["A"]), ps, h=1e-2)

    def test_straight_through_routes_to_both(self):
        ps = dk.ParamStore()
        ps.set("H", [[1.0, 2.0]])
        ps.set("U", [[0.5, -1.0]])
        with dk.Tape() as tape:
            loss = dk.sq_frobenius(dk.straight_through(ps["H"], ps["U"]))
            tape.backward(loss)
        np.testing.assert_allclose(ps["H"].grad, [[1.0, -2.0]])
        np.testing.assert_allclose(ps["U"].grad, [[1.0, -2.0]])


class TestDeterminismAndCounting:
    def test_deterministic(self):
        rng = np.random.default_rng(3)
        X, W = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        a = dk.row_softmax(dk.matmul(X, W)).value
        b = dk.row_softmax(dk.matmul(X, W)).value
        assert np.array_equal(a, b)

    def test_flop_counts(self):
        with dk.count_flops() as fc:
            dk.matmul(np.zeros((3, 4)), np.zeros((4, 5)))
            dk.row_softmax(np.zeros((3, 5)))
        assert fc.total == 2 * 3 * 4 * 5 + 4 * 15
        assert fc.by_op("matmul") == 120

    def test_no_tape_means_no_grad(self):
        ps = dk.ParamStore()
        ps.set("A", [[1.0]])
        out = dk.exp(ps["A"])
        assert not out.requires_grad


class TestParamStore:
    def test_uniform_init_bounds(self):
        ps = dk.ParamStore(seed=5)
        W = ps.add("W", 30, 20).value
        bound = math.sqrt(6 / 50)
        assert np.all(np.abs(W) <= bound)
        assert ps.add("b", 1, 20, init="zeros").value.sum() == 0

    def test_seeded(self):
        a = dk.ParamStore(seed=9).add("W", 3, 3).value
        b = dk.ParamStore(seed=9).add("W", 3, 3).value
        assert np.array_equal(a, b)

    def test_grad_buffers_match_shapes(self):
        ps = dk.ParamStore()
        ps.add("W", 3, 2)
        ps.zero_grad()
        for _, p in ps:
            assert p.grad.shape == p.value.shape and not p.grad.any()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        values = {"enc.W_e": rng.normal(size=(3, 4)), "U": rng.normal(size=(2, 4)), "b": np.zeros((1, 4))}
        path = tmp_path / "c.bgf"
        dk.save_checkpoint(path, values)
        back = dk.load_checkpoint(path)
        assert list(back) == list(values)
        for k in values:
            assert np.array_equal(back[k], values[k])

    def test_layout(self, tmp_path):
        path = tmp_path / "c.bgf"
        dk.save_checkpoint(path, {"ab": np.array([[1.0, 2.0]])})
        raw = path.read_bytes()
        assert raw[:4] == b"BGF1"
        # count, name length, name, rows, cols, two doubles
        assert len(raw) == 4 + 4 + 4 + 2 + 16 + 16
        assert np.frombuffer(raw[-16:], "<f8").tolist() == [1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.bgf"
        path.write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            dk.load_checkpoint(path)
