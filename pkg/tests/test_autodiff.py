import numpy as np
import pytest

import classprompt.autodiff as ad
from classprompt.autodiff import Tensor, finite_diff_check
from classprompt.errors import ContractError, DeterminismError, ShapeError


def triple_loop_matmul(a, b):
    """Independent oracle: textbook i-j-p loops, sequential accumulation."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s = s + a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((eye @ m).data, m.data)

    def test_annihilating(self):
        a = Tensor([[1.0, 0.0]])
        b = Tensor([[0.0], [5.0]])
        assert np.array_equal((a @ b).data, [[0.0]])

    def test_matches_triple_loop_3x4x2(self):
        rng = np.random.default_rng(11)
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 2))
        got = (Tensor(a) @ Tensor(b)).data
        assert np.abs(got - triple_loop_matmul(a, b)).max() < 1e-12

    @pytest.mark.parametrize("m,k,n", [
        (1, 1, 1), (2, 3, 5), (7, 16, 4), (16, 16, 16), (16, 5, 16),
    ])
    def test_bit_identical_to_triple_loop(self, m, k, n):
        rng = np.random.default_rng(m * 100 + k * 10 + n)
        a = rng.uniform(-1, 1, (m, k))
        b = rng.uniform(-1, 1, (k, n))
        got = (Tensor(a) @ Tensor(b)).data
        assert np.array_equal(got, triple_loop_matmul(a, b))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_batched_broadcast(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, (3, 2, 4, 5))
        b = rng.uniform(-1, 1, (5, 6))
        got = (Tensor(a) @ Tensor(b)).data
        assert got.shape == (3, 2, 4, 6)
        assert np.abs(got - a @ b).max() < 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)

        def f(_):
            return ((a @ b) ** 2.0).sum()

        assert finite_diff_check(f, [a, b]) < 1e-8


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor([[5.0, 5.0, 5.0]])
        out = ad.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, np.zeros((1, 3)))

    def test_symmetric_two_point(self):
        x = Tensor([[1.0, -1.0]])
        out = ad.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.abs(out.data - [[1.0, -1.0]]).max() < 1e-9

    def test_row_statistics(self):
        # DERIVED oracle: compute the statistics directly
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (2, 8)))
        out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-10).data
        assert np.abs(out.mean(axis=1)).max() < 1e-10
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6

    def test_rejects_bad_eps(self):
        x = Tensor([[1.0, 2.0]])
        with pytest.raises(ContractError):
            ad.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(-1, 1, (4, 6)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
        b = Tensor(rng.uniform(-0.5, 0.5, 6), requires_grad=True)

        def f(_):
            return (ad.layer_norm(x, g, b) ** 2.0).sum()

        assert finite_diff_check(f, [x, g, b]) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([[0.0, 0.0]])).data
        assert np.array_equal(out, [[0.5, 0.5]])

    def test_stability_under_large_inputs(self):
        out = ad.softmax(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert abs(out[0, 0] - 1.0) < 1e-12 and out[0, 1] < 1e-12

    def test_matches_high_precision_oracle(self):
        # DERIVED oracle: exp/sum-exp in mpmath at 50 digits
        import mpmath

        mpmath.mp.dps = 50
        rng = np.random.default_rng(21)
        row = rng.uniform(-5, 5, 12)
        got = ad.softmax(Tensor(row.reshape(1, -1))).data[0]
        exps = [mpmath.e ** mpmath.mpf(v) for v in row]
        total = sum(exps)
        want = np.array([float(e / total) for e in exps])
        assert np.abs(got - want).max() < 1e-12

    def test_rows_sum_to_one_up_to_1e3(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(-1e3, 1e3, (32, 9)))
        out = ad.softmax(x).data
        assert out.min() >= 0.0
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 5)))

        def f(_):
            return (ad.softmax(x) * w).sum()

        assert finite_diff_check(f, [x]) < 1e-8


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        w.sum().backward()
        assert np.array_equal(w.grad, np.ones(3))

    def test_quadratic(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (w * w).sum().backward()
        assert np.array_equal(w.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_root_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_fanout_accumulates_k_fold(self):
        for k in (2, 3, 5):
            w = Tensor([1.0, -2.0], requires_grad=True)
            total = w.sum()
            for _ in range(k - 1):
                total = total + w.sum()
            total.backward()
            assert np.array_equal(w.grad, np.full(2, float(k)))

    def test_each_node_visited_once(self):
        # diamond: y = (w + w) * (w + w); naive revisit would double-count
        w = Tensor([3.0], requires_grad=True)
        a = w + w
        y = (a * a).sum()
        y.backward()
        assert w.grad[0] == pytest.approx(8.0 * 3.0)


class TestElementwise:
    def test_relu_gelu_exp_log_gradients(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.uniform(0.1, 2.0, (3, 4)), requires_grad=True)

        def f(_):
            return (ad.relu(x) + ad.gelu(x) + ad.exp(x) + ad.log(x)).sum()

        assert finite_diff_check(f, [x]) < 1e-7

    def test_broadcasting_gradients(self):
        rng = np.random.default_rng(19)
        x = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        row = Tensor(rng.uniform(-1, 1, (1, 3)), requires_grad=True)
        scalar = Tensor(rng.uniform(-1, 1, ()), requires_grad=True)

        def f(_):
            return ((x + row) * scalar).sum()

        assert finite_diff_check(f, [x, row, scalar]) < 1e-8

    def test_concat_slice_expand_gradients(self):
        rng = np.random.default_rng(23)
        a = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (2, 2)), requires_grad=True)

        def f(_):
            joined = ad.concat([a, b], axis=1)
            left = ad.slice_axis(joined, 0, 4, axis=1)
            stack = ad.expand_leading(left, 3)
            return (stack * stack).sum()

        assert finite_diff_check(f, [a, b]) < 1e-8

    def test_values_are_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 9.0

    def test_slices_copy(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        sliced = ad.slice_axis(t, 0, 1, axis=0)
        assert sliced.data.base is None or sliced.data.base is not t.data


class TestRandomOpGradients:
    """Every registered op family passes finite differences on [-1, 1] inputs."""

    @pytest.mark.parametrize("seed", range(5))
    def test_mixed_graph(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, (3, 6)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (6, 4)), requires_grad=True)
        g = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
        b = Tensor(rng.uniform(-0.5, 0.5, 6), requires_grad=True)

        def f(_):
            h = ad.layer_norm(x, g, b)
            h = ad.gelu(h @ w)
            p = ad.softmax(h)
            return (p * p).sum() + ad.relu(x).mean()

        assert finite_diff_check(f, [x, w, g, b], h=1e-5) < 1e-4


class TestFiniteDiffCheck:
    def test_polynomial_exactness(self):
        w = Tensor([1.0, 2.0], requires_grad=True)

        def f(params):
            (v,) = params
            return (v * v).sum()

        assert finite_diff_check(f, [w]) < 1e-9

    def test_h_bounds_enforced(self):
        w = Tensor([1.0], requires_grad=True)

        def f(params):
            return params[0].sum()

        with pytest.raises(ContractError):
            finite_diff_check(f, [w], h=1e-2)
        with pytest.raises(ContractError):
            finite_diff_check(f, [w], h=1e-8)

    def test_detects_nondeterminism(self):
        w = Tensor([1.0], requires_grad=True)
        counter = {"n": 0}

        def f(params):
            counter["n"] += 1
            return params[0].sum() * float(counter["n"])

        with pytest.raises(DeterminismError):
            finite_diff_check(f, [w])


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(31)
    x = Tensor(rng.uniform(-1, 1, (4, 8)))
    for out in (
        ad.softmax(x * 100.0),
        ad.gelu(x),
        ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))),
        ad.normalize_rows(x + 2.0),
    ):
        assert np.all(np.isfinite(out.data))


def test_tensor_rejects_non_finite():
    with pytest.raises(ContractError):
        Tensor([np.nan, 1.0])
