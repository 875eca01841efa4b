"""Tensor core: forward examples, finite-difference gradient checks, and
structural properties."""

import math

import mpmath
import numpy as np
import pytest

from token_thinner import tensor as T
from token_thinner.exceptions import DimensionError, ParameterError, TokenIndexError


def finite_difference_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def assert_grad_matches(build, arrays, rtol=1e-4, step=1e-4):
    """Check analytic gradients of build(*tensors) against finite differences.

    `build` maps parameter tensors to a scalar Tensor; every array in
    `arrays` is checked.
    """
    tensors = [T.parameter(a.copy()) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    for k, (t, a) in enumerate(zip(tensors, arrays)):
        def scalar(x, k=k):
            args = [T.constant(arr.copy()) for arr in arrays]
            args[k] = T.constant(x)
            return build(*args).item()
        fd = finite_difference_grad(scalar, a.copy(), step=step)
        scale = np.maximum(np.abs(fd), 1.0)
        np.testing.assert_allclose(t.grad, fd, atol=rtol, rtol=0, err_msg=f"operand {k}")
        np.testing.assert_array_less(np.abs(t.grad - fd) / scale, rtol + np.zeros_like(fd))


class TestMatmul:
    def test_identity(self):
        eye = T.constant([[1.0, 0.0], [0.0, 1.0]])
        b = T.constant([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(eye, b).data, b.data)

    def test_hand_product(self):
        a = T.constant([[1.0, 2.0]])
        b = T.constant([[3.0], [4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.constant(np.zeros((2, 3))), T.constant(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        assert_grad_matches(lambda x, y: T.mean_all(T.matmul(x, y)), [a, b], rtol=1e-5)

    def test_mac_counting(self):
        a = T.constant(np.ones((4, 5)))
        b = T.constant(np.ones((5, 3)))
        with T.count_macs() as mc:
            T.matmul(a, b)
        assert mc.total == 4 * 5 * 3

    def test_mac_counter_nests_and_scopes(self):
        a = T.constant(np.ones((2, 2)))
        with T.count_macs() as outer:
            T.matmul(a, a)
            with T.count_macs() as inner:
                T.matmul(a, a)
        assert inner.total == 8
        assert outer.total == 16
        with T.count_macs() as fresh:
            pass
        assert fresh.total == 0


class TestSoftmaxRows:
    def test_uniform_on_constant_row(self):
        out = T.softmax_rows(T.constant([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        out = T.softmax_rows(T.constant([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)
        assert np.all(np.isfinite(out.data))

    def test_values_match_high_precision_oracle(self):
        row = [1.0, 2.0, 3.0]
        mpmath.mp.dps = 50
        exps = [mpmath.exp(v) for v in row]
        total = sum(exps)
        expected = np.array([float(e / total) for e in exps])
        out = T.softmax_rows(T.constant([row]))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-15)

    def test_rows_sum_to_one_and_lie_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.normal(scale=10, size=(5, 7))
            s = T.softmax_rows(T.constant(x)).data
            np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
            assert np.all(s >= 0) and np.all(s <= 1)

    def test_empty_last_axis_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax_rows(T.constant(np.zeros((3, 0))))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        weights = T.constant(w)
        assert_grad_matches(lambda t: T.mean_all(T.mul(T.softmax_rows(t), weights)), [x])


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        x = T.constant([[4.0, 4.0, 4.0]])
        gain = T.constant(np.ones((1, 3)))
        bias = T.constant(np.zeros((1, 3)))
        out = T.layer_norm(x, gain, bias, eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized_row_is_fixed_point(self):
        x = T.constant([[1.0, -1.0]])
        gain = T.constant(np.ones((1, 2)))
        bias = T.constant(np.zeros((1, 2)))
        out = T.layer_norm(x, gain, bias, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_nonpositive_eps_rejected(self):
        x = T.constant(np.ones((2, 3)))
        g = T.constant(np.ones((1, 3)))
        b = T.constant(np.zeros((1, 3)))
        with pytest.raises(ParameterError):
            T.layer_norm(x, g, b, eps=0.0)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6))
        gain = rng.normal(size=(1, 6))
        bias = rng.normal(size=(1, 6))
        probe = T.constant(rng.normal(size=(4, 6)))
        assert_grad_matches(
            lambda a, g, b: T.mean_all(T.mul(T.layer_norm(a, g, b), probe)),
            [x, gain, bias],
            rtol=1e-5,
        )


class TestGatherRows:
    def test_full_index_set_is_identity(self):
        x = T.constant(np.arange(20.0).reshape(5, 4))
        out = T.gather_rows(x, [0, 1, 2, 3, 4])
        np.testing.assert_array_equal(out.data, x.data)

    def test_picks_requested_rows(self):
        x = T.constant(np.arange(20.0).reshape(5, 4))
        out = T.gather_rows(x, [1, 3])
        np.testing.assert_array_equal(out.data, x.data[[1, 3]])

    def test_rejects_out_of_range_and_duplicates(self):
        x = T.constant(np.zeros((3, 2)))
        with pytest.raises(TokenIndexError):
            T.gather_rows(x, [0, 3])
        with pytest.raises(TokenIndexError):
            T.gather_rows(x, [1, 1])
        with pytest.raises(TokenIndexError):
            T.gather_rows(x, [2, 0])

    def test_backward_scatters_ones_at_selected_rows(self):
        x = T.parameter(np.ones((5, 3)))
        loss = T.mean_all(T.gather_rows(x, [1, 3]))
        loss.backward()
        expected = np.zeros((5, 3))
        expected[[1, 3]] = 1.0 / 6.0
        np.testing.assert_allclose(x.grad, expected)

    def test_scatter_conserves_gradient_mass(self):
        rng = np.random.default_rng(4)
        x = T.parameter(rng.normal(size=(6, 4)))
        picked = T.gather_rows(x, [0, 2, 5])
        probe = T.constant(rng.normal(size=(3, 4)))
        out = T.mul(picked, probe)
        T.mean_all(out).backward()
        # every gradient element arriving at the gather output lands bitwise
        # on exactly one source row; untouched rows stay exactly zero
        np.testing.assert_array_equal(x.grad[[0, 2, 5]], out.grad * probe.data)
        np.testing.assert_array_equal(x.grad[[1, 3, 4]], 0.0)


class TestMeanRows:
    def test_single_row_identity(self):
        x = T.constant([[2.0, 7.0]])
        np.testing.assert_array_equal(T.mean_rows(x).data, [[2.0, 7.0]])

    def test_hand_mean(self):
        x = T.constant([[1.0, 3.0], [3.0, 1.0]])
        np.testing.assert_array_equal(T.mean_rows(x).data, [[2.0, 2.0]])

    def test_zero_rows_rejected(self):
        with pytest.raises(DimensionError):
            T.mean_rows(T.constant(np.zeros((0, 3))))

    def test_gradient_is_uniform(self):
        x = T.parameter(np.arange(6.0).reshape(3, 2))
        out = T.mean_rows(x)
        loss = T.mean_all(out)
        loss.backward()
        np.testing.assert_allclose(x.grad, np.full((3, 2), 1.0 / 6.0))


class TestPlumbingOps:
    """add/mul/div, take_rows, concat, gelu, clamp, cross entropy; all under
    the same finite-difference contract."""

    def test_add_mul_div_gradients(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) + 3.0
        assert_grad_matches(lambda x, y: T.mean_all(T.add(x, y)), [a, b])
        assert_grad_matches(lambda x, y: T.mean_all(T.mul(x, y)), [a, b])
        assert_grad_matches(lambda x, y: T.mean_all(T.div(x, y)), [a, b])

    def test_broadcast_add_row_vector(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(1, 3))
        assert_grad_matches(lambda x, y: T.mean_all(T.add(x, y)), [a, b])

    def test_scale(self):
        a = np.array([[1.0, -2.0]])
        assert_grad_matches(lambda x: T.mean_all(T.scale(x, 2.5)), [a])

    def test_take_rows_with_repeats(self):
        table = T.parameter(np.arange(8.0).reshape(4, 2))
        out = T.take_rows(table, [1, 1, 3])
        np.testing.assert_array_equal(out.data, table.data[[1, 1, 3]])
        T.mean_all(out).backward()
        expected = np.zeros((4, 2))
        expected[1] = 2.0 / 6.0
        expected[3] = 1.0 / 6.0
        np.testing.assert_allclose(table.grad, expected)

    def test_concat_rows_and_cols(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        assert_grad_matches(lambda x, y: T.mean_all(T.concat_rows([x, y])), [a, b])
        c, d = rng.normal(size=(3, 2)), rng.normal(size=(3, 5))
        assert_grad_matches(lambda x, y: T.mean_all(T.concat_cols([x, y])), [c, d])

    def test_transpose_gradient(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(3, 5))
        probe = T.constant(rng.normal(size=(5, 3)))
        assert_grad_matches(lambda x: T.mean_all(T.mul(T.transpose(x), probe)), [a])

    def test_gelu_values_and_gradient(self):
        x = np.array([[-2.0, -0.5, 0.0, 0.5, 2.0]])
        out = T.gelu(T.constant(x))
        expected = x * 0.5 * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        assert_grad_matches(lambda t: T.mean_all(T.gelu(t)), [x], rtol=1e-5)

    def test_clamp_min_guards_zero_counts(self):
        counts = T.parameter(np.array([[0.0], [1.0], [3.0]]))
        out = T.clamp_min(counts, 1.0)
        np.testing.assert_array_equal(out.data, [[1.0], [1.0], [3.0]])
        T.mean_all(out).backward()
        np.testing.assert_array_equal(counts.grad, [[0.0], [1.0 / 3.0], [1.0 / 3.0]])

    def test_sum_rows(self):
        a = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]])
        out = T.sum_rows(T.constant(a))
        np.testing.assert_array_equal(out.data, [[6.0], [1.0]])
        assert_grad_matches(lambda x: T.mean_all(T.sum_rows(x)), [a])

    def test_cross_entropy_matches_log_softmax(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(1, 5))
        loss = T.cross_entropy_with_logits(T.constant(z), 2)
        probs = np.exp(z[0] - z[0].max())
        probs /= probs.sum()
        assert loss.item() == pytest.approx(-math.log(probs[2]), abs=1e-12)
        assert_grad_matches(lambda t: T.cross_entropy_with_logits(t, 2), [z], rtol=1e-5)

    def test_cross_entropy_rejects_bad_target(self):
        with pytest.raises(ParameterError):
            T.cross_entropy_with_logits(T.constant(np.zeros((1, 3))), 3)

    def test_linear_affine(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=(1, 2))
        assert_grad_matches(lambda a, c, d: T.mean_all(T.linear(a, c, d)), [x, w, b])

    def test_dropout_disabled_and_enabled(self):
        x = T.parameter(np.ones((4, 4)))
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x
        rng = np.random.default_rng(0)
        out = T.dropout(x, 0.5, rng)
        kept = out.data != 0
        np.testing.assert_allclose(out.data[kept], 2.0)


class TestHardAssign:
    def test_forward_one_hot_and_tie_break(self):
        sim = T.constant(np.array([[0.2, 0.5], [0.7, 0.5], [0.1, 0.0]]))
        hard = T.hard_assign_columns(sim)
        np.testing.assert_array_equal(hard.data, [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])

    def test_backward_is_identity(self):
        rng = np.random.default_rng(11)
        sim = T.parameter(rng.random(size=(3, 5)))
        probe = T.constant(rng.normal(size=(3, 5)))
        loss = T.mean_all(T.mul(T.hard_assign_columns(sim), probe))
        loss.backward()
        np.testing.assert_array_equal(sim.grad, probe.data / probe.data.size)


class TestDeterminismAndGraph:
    def test_forward_is_bit_identical_across_runs(self):
        def run():
            rng = np.random.default_rng(42)
            x = T.constant(rng.normal(size=(6, 6)))
            w = T.constant(rng.normal(size=(6, 6)))
            return T.softmax_rows(T.matmul(x, w)).data
        np.testing.assert_array_equal(run(), run())

    def test_reused_node_accumulates_once_per_path(self):
        x = T.parameter(np.array([[2.0]]))
        y = T.add(T.mul(x, x), x)  # x^2 + x ; dy/dx = 2x + 1 = 5
        y.backward()
        np.testing.assert_allclose(x.grad, [[5.0]])

    def test_backward_requires_scalar(self):
        x = T.parameter(np.ones((2, 2)))
        with pytest.raises(DimensionError):
            T.add(x, x).backward()

    def test_no_grad_graph_is_pruned(self):
        a = T.constant(np.ones((2, 2)))
        out = T.matmul(a, a)
        assert out._parents == () and out._backward is None
