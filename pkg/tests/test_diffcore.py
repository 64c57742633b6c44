import numpy as np
import pytest

from figrot import diffcore as dc
from figrot.diffcore import GraphError, Parameter

from conftest import op_fd_check


def param(name, shape, seed=0, scale=1.0):
    rng = np.random.default_rng([seed, hash(name) % 2**31])
    return Parameter(name, rng.normal(scale=scale, size=shape))


class TestForwardValues:
    def test_logistic_zero(self):
        out = dc.logistic(dc.constant(np.zeros(3)))
        assert np.allclose(out.data, 0.5)

    def test_softmax_constant_row(self):
        out = dc.softmax(dc.constant(np.full((2, 3), 7.0)))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_l2_normalize_345(self):
        out = dc.l2_normalize_rows(dc.constant(np.array([[3.0, 4.0]])))
        assert np.allclose(out.data, [[0.6, 0.8]])

    def test_softmax_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 9))
        out = dc.softmax(dc.constant(x)).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() <= 1e-6
        shifted = dc.softmax(dc.constant(x + rng.normal(size=(5, 1)))).data
        assert np.abs(out - shifted).max() <= 1e-6

    def test_unit_norm_when_input_not_tiny(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 8))
        out = dc.l2_normalize_rows(dc.constant(x)).data
        assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() <= 1e-6

    def test_nonfinite_output_rejected(self):
        with pytest.raises(GraphError, match="non-finite"), \
                np.errstate(over="ignore"):
            big = dc.constant(np.array([1e308]))
            dc.mul(big, big)

    def test_determinism_bit_identical(self):
        x = np.random.default_rng(5).normal(size=(4, 6))
        a = dc.gelu(dc.constant(x)).data
        b = dc.gelu(dc.constant(x.copy())).data
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_sum_gives_ones(self):
        p = param("p", (5,))
        grads = dc.backward(dc.sum_(p), [p])
        assert np.array_equal(grads["p"], np.ones(5))

    def test_unreached_param_zero(self):
        p, q = param("p", (3,)), param("q", (3,))
        grads = dc.backward(dc.sum_(p), [p, q])
        assert np.array_equal(grads["q"], np.zeros(3))

    def test_quadratic(self):
        p = Parameter("p", np.array([1.0, 2.0]))
        grads = dc.backward(dc.sum_(dc.mul(p, p)), [p])
        assert np.array_equal(grads["p"], np.array([2.0, 4.0]))

    def test_non_scalar_loss(self):
        p = param("p", (3,))
        with pytest.raises(GraphError, match="scalar"):
            dc.backward(dc.mul(p, p), [p])

    def test_disconnected_loss(self):
        p = param("p", (3,))
        with pytest.raises(GraphError, match="disconnected"):
            dc.backward(dc.constant(np.zeros(())), [p])

    def test_fanout_accumulates(self):
        p = Parameter("p", np.array([3.0]))
        loss = dc.sum_(dc.add(p, p))
        grads = dc.backward(loss, [p])
        assert np.array_equal(grads["p"], np.array([2.0]))


class TestFiniteDiffCheck:
    def test_quadratic_tight(self):
        p = param("p", (4,), seed=1)
        err = dc.finite_diff_check(lambda: dc.sum_(dc.mul(p, p)), [p])
        assert err <= 1e-7

    def test_constant_zero_error(self):
        p = param("p", (3,), seed=2)
        err = dc.finite_diff_check(
            lambda: dc.sum_(dc.constant(np.ones(2))), [p])
        assert err == 0.0

    def test_nondeterministic_f_detected(self):
        p = param("p", (2,), seed=3)
        state = {"n": 0}

        def f():
            state["n"] += 1
            return dc.sum_(dc.scale(p, float(state["n"])))

        with pytest.raises(GraphError, match="deterministic"):
            dc.finite_diff_check(f, [p])

    def test_coordinate_subsampling(self):
        p = param("p", (40,), seed=4)
        err = dc.finite_diff_check(lambda: dc.sum_(dc.mul(p, p)), [p],
                                   max_coords_per_param=5,
                                   rng=np.random.default_rng(0))
        assert err <= 1e-7


class TestPerOpGradients:
    """Every op passes a random-input finite-difference check at 1e-6."""

    def test_add_broadcast(self):
        a, b = param("a", (3, 4), 10), param("b", (4,), 11)
        op_fd_check(lambda: dc.sum_(dc.add(a, b)), [a, b])

    def test_sub(self):
        a, b = param("a", (3, 4), 12), param("b", (3, 4), 13)
        op_fd_check(lambda: dc.sum_(dc.mul(dc.sub(a, b), dc.sub(a, b))), [a, b])

    def test_mul(self):
        a, b = param("a", (2, 5), 14), param("b", (2, 5), 15)
        op_fd_check(lambda: dc.sum_(dc.mul(a, b)), [a, b])

    def test_scale_neg(self):
        a = param("a", (6,), 16)
        op_fd_check(lambda: dc.sum_(dc.neg(dc.scale(a, 2.5))), [a])

    def test_matmul_2d(self):
        a, b = param("a", (3, 4), 17), param("b", (4, 2), 18)
        op_fd_check(lambda: dc.sum_(dc.mul(dc.matmul(a, b),
                                           dc.matmul(a, b))), [a, b])

    def test_matmul_3d(self):
        a, b = param("a", (2, 3, 4), 19), param("b", (4, 5), 20)
        op_fd_check(lambda: dc.sum_(dc.matmul(a, b)), [a, b])

    def test_bmm(self):
        a, b = param("a", (2, 3, 4), 21), param("b", (2, 4, 5), 22)
        op_fd_check(lambda: dc.sum_(dc.mul(dc.bmm(a, b), dc.bmm(a, b))),
                    [a, b])

    def test_reshape_transpose(self):
        a = param("a", (2, 6), 23)
        op_fd_check(lambda: dc.sum_(dc.mul(
            dc.transpose(dc.reshape(a, (3, 2, 2)), (1, 0, 2)),
            dc.transpose(dc.reshape(a, (3, 2, 2)), (1, 0, 2)))), [a])

    def test_concat_split(self):
        a, b = param("a", (2, 3), 24), param("b", (2, 5), 25)

        def build():
            cat = dc.concat([a, b], axis=1)
            left, right = dc.split(cat, [3, 5], axis=1)
            return dc.add(dc.sum_(dc.mul(left, left)), dc.sum_(right))

        op_fd_check(build, [a, b])

    def test_logistic(self):
        a = param("a", (7,), 26)
        op_fd_check(lambda: dc.sum_(dc.logistic(a)), [a])

    def test_gelu(self):
        a = param("a", (9,), 27)
        op_fd_check(lambda: dc.sum_(dc.gelu(a)), [a])

    def test_relu(self):
        a = param("a", (9,), 28)
        # nudge values away from the kink where the derivative jumps
        a.data[np.abs(a.data) < 1e-3] = 0.5
        op_fd_check(lambda: dc.sum_(dc.relu(a)), [a])

    def test_softmax(self):
        a = param("a", (3, 5), 29)
        w = np.random.default_rng(0).normal(size=(3, 5))
        op_fd_check(lambda: dc.sum_(dc.mul(dc.softmax(a), dc.constant(w))),
                    [a])

    def test_logsumexp(self):
        a = param("a", (4, 6), 30)
        op_fd_check(lambda: dc.sum_(dc.logsumexp(a)), [a])

    def test_layer_norm(self):
        a = param("a", (3, 8), 31)
        g, b = param("g", (8,), 32), param("b", (8,), 33)
        w = np.random.default_rng(1).normal(size=(3, 8))
        op_fd_check(lambda: dc.sum_(dc.mul(dc.layer_norm(a, g, b),
                                           dc.constant(w))), [a, g, b])

    def test_l2_normalize(self):
        a = param("a", (3, 6), 34)
        w = np.random.default_rng(2).normal(size=(3, 6))
        op_fd_check(lambda: dc.sum_(dc.mul(dc.l2_normalize_rows(a),
                                           dc.constant(w))), [a])

    def test_gate_residual(self):
        a = param("a", (3, 8), 35)
        mask = np.zeros(8)
        mask[[1, 4, 6]] = 1.0
        w = np.random.default_rng(3).normal(size=(3, 8))
        op_fd_check(lambda: dc.sum_(dc.mul(dc.gate_residual(a, mask),
                                           dc.constant(w))), [a])

    def test_sum_axis_mean(self):
        a = param("a", (4, 5), 36)
        op_fd_check(lambda: dc.sum_(dc.mul(dc.mean_(a, axis=1),
                                           dc.sum_(a, axis=1))), [a])

    def test_column_variance(self):
        a = param("a", (5, 4), 37)
        w = np.random.default_rng(4).normal(size=4)
        op_fd_check(lambda: dc.sum_(dc.mul(dc.column_variance(a),
                                           dc.constant(w))), [a])

    def test_diag_part(self):
        a = param("a", (4, 4), 38)
        op_fd_check(lambda: dc.sum_(dc.mul(dc.diag_part(a),
                                           dc.diag_part(a))), [a])


class TestGateResidual:
    def test_passthrough_bit_exact(self):
        x = np.random.default_rng(6).normal(size=(4, 10))
        mask = np.zeros(10)
        mask[:3] = 1.0
        out = dc.gate_residual(dc.constant(x), mask).data
        assert out[:, 3:].tobytes() == x[:, 3:].tobytes()

    def test_masked_value(self):
        x = np.array([[1.0]])
        out = dc.gate_residual(dc.constant(x), np.ones(1)).data
        assert abs(out[0, 0] - 1.73105858) <= 1e-8

    def test_zero_fixed_point(self):
        out = dc.gate_residual(dc.constant(np.zeros((1, 2))), np.ones(2)).data
        assert np.array_equal(out, np.zeros((1, 2)))
