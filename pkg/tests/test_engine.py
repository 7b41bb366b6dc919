import numpy as np
import pytest

from promptgrid import engine as e
from promptgrid.engine import (
    CosineSchedule,
    NonFiniteError,
    OptimizerState,
    ShapeError,
    Tensor,
    backward,
    check_gradients,
    numeric_gradient,
    relative_error,
    sgd_step,
)


def brute_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = e.matmul(np.eye(2), a)
        assert np.array_equal(out.data, a)

    def test_basis_selection(self):
        out = e.matmul(np.array([[1.0, 0.0]]), np.array([[5.0], [7.0]]))
        assert np.array_equal(out.data, np.array([[5.0]]))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        assert np.allclose(e.matmul(a, b).data, brute_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            e.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_batched_broadcast_grads(self):
        rng = np.random.default_rng(1)
        x = e.parameter(rng.normal(size=(2, 3, 4)))
        w = e.parameter(rng.normal(size=(4, 5)))
        loss = e.matmul(x, w).sum()
        grads = backward(loss, leaves=[x, w])
        assert grads[x].shape == (2, 3, 4)
        assert grads[w].shape == (4, 5)
        # d(sum(xw))/dw = sum over batch/rows of x
        assert np.allclose(grads[w], x.data.sum(axis=(0, 1))[:, None].repeat(5, 1))


class TestSoftmax:
    def test_symmetry(self):
        out = e.softmax(np.array([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_single_element(self):
        for v in (-1e6, 0.0, 3.7, 1e6):
            assert np.allclose(e.softmax(np.array([v])).data, [1.0])

    def test_ln2_case(self):
        out = e.softmax(np.array([np.log(2.0), 0.0]))
        assert np.allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_simplex_property(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            x = rng.normal(scale=30.0, size=(4, 7))
            s = e.softmax(x, axis=-1).data
            assert np.all(s >= 0)
            assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            e.softmax(np.zeros((3, 0)))


class TestCrossEntropy:
    def test_confident_correct(self):
        logits = np.zeros((1, 5))
        logits[0, 3] = 1e9
        assert e.cross_entropy(logits, np.array([3])).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_is_log_v(self):
        assert e.cross_entropy(np.zeros((1, 4)), np.array([1])).item() == pytest.approx(np.log(4.0))

    def test_mean_over_positions_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(2, 6))
        targets = np.array([4, 0])

        def scalar_ce(row, t):
            p = np.exp(row - row.max())
            p /= p.sum()
            return -np.log(p[t])

        expected = np.mean([scalar_ce(logits[i], targets[i]) for i in range(2)])
        assert e.cross_entropy(logits, targets).item() == pytest.approx(expected, rel=1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(ShapeError):
            e.cross_entropy(np.zeros((2, 4)), np.array([1, 4]))

    def test_positive_unless_point_mass(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(3, 5))
        assert e.cross_entropy(logits, np.array([0, 1, 2])).item() > 0.0


class TestGelu:
    def test_zero(self):
        assert e.gelu(np.array([0.0])).item() == 0.0

    def test_asymptotes(self):
        assert e.gelu(np.array([12.0])).item() == pytest.approx(12.0, rel=1e-9)
        assert e.gelu(np.array([-12.0])).item() == pytest.approx(0.0, abs=1e-9)

    def test_gradient_matches_finite_difference(self):
        for v in (-2.3, -0.4, 0.1, 0.9, 3.0):
            x = e.parameter(np.array([v]))
            loss = e.gelu(x).sum()
            ana = backward(loss, leaves=[x])[x][0]
            num = numeric_gradient(lambda: e.gelu(x).sum(), x, (0,))
            assert relative_error(ana, num) < 1e-4


class TestCosineSimilarity:
    def test_self_similarity(self):
        u = np.array([1.0, -2.0, 0.5])
        assert e.cosine_similarity(u, u).item() == pytest.approx(1.0)

    def test_orthogonal(self):
        assert e.cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item() == pytest.approx(0.0)

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(5)
        u = rng.normal(size=6)
        for c in (0.01, 1.0, 250.0):
            assert e.cosine_similarity(u, c * u).item() == pytest.approx(1.0)

    def test_range(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            u, v = rng.normal(size=4), rng.normal(size=4)
            assert -1.0 - 1e-12 <= e.cosine_similarity(u, v).item() <= 1.0 + 1e-12

    def test_zero_norm_errors(self):
        with pytest.raises(ValueError):
            e.cosine_similarity(np.zeros(3), np.ones(3))


class TestBackward:
    def test_sum_gives_ones(self):
        x = e.parameter(np.zeros((3, 4, 2)))
        grads = backward(x.sum(), leaves=[x])
        assert np.array_equal(grads[x], np.ones((3, 4, 2)))

    def test_product_rule(self):
        x = e.parameter(np.array(3.0))
        y = e.parameter(np.array(5.0))
        grads = backward(x * y, leaves=[x, y])
        assert grads[x] == pytest.approx(5.0)
        assert grads[y] == pytest.approx(3.0)

    def test_each_node_visited_once(self):
        # Diamond graph: reusing a node must not double-count.
        x = e.parameter(np.array(2.0))
        y = x * x           # 4
        z = y + y           # 8, dz/dx = 2 * 2x = 8
        grads = backward(z, leaves=[x])
        assert grads[x] == pytest.approx(8.0)

    def test_non_participating_leaf_gets_zero(self):
        x = e.parameter(np.array([1.0, 2.0]))
        unused = e.parameter(np.array([[5.0]]))
        grads = backward(x.sum(), leaves=[x, unused])
        assert np.array_equal(grads[unused], np.zeros((1, 1)))

    def test_loss_must_be_scalar(self):
        x = e.parameter(np.ones(3))
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_gradient_shape_matches_leaf(self):
        x = e.parameter(np.ones((2, 5)))
        w = e.parameter(np.ones((5, 3)))
        grads = backward((x @ w).mean(), leaves=[x, w])
        assert grads[x].shape == x.shape
        assert grads[w].shape == w.shape


class TestStructuralOps:
    def test_concat_split_grads(self):
        a = e.parameter(np.ones((2, 3)))
        b = e.parameter(np.full((4, 3), 2.0))
        out = e.concat([a, b], axis=0)
        assert out.shape == (6, 3)
        grads = backward((out * np.arange(18.0).reshape(6, 3)).sum(), leaves=[a, b])
        assert np.array_equal(grads[a], np.arange(6.0).reshape(2, 3))
        assert np.array_equal(grads[b], np.arange(6.0, 18.0).reshape(4, 3))

    def test_gather_rows_scatter(self):
        x = e.parameter(np.arange(12.0).reshape(4, 3))
        out = e.gather_rows(x, np.array([2, 0, 2]))
        assert np.array_equal(out.data, x.data[[2, 0, 2]])
        grads = backward(out.sum(), leaves=[x])
        assert np.array_equal(grads[x][:, 0], np.array([1.0, 0.0, 2.0, 0.0]))

    def test_take_label(self):
        x = e.parameter(np.arange(6.0).reshape(2, 3))
        out = e.take_label(x, np.array([2, 0]))
        assert np.array_equal(out.data, np.array([2.0, 3.0]))
        grads = backward(out.sum(), leaves=[x])
        expected = np.zeros((2, 3))
        expected[0, 2] = 1.0
        expected[1, 0] = 1.0
        assert np.array_equal(grads[x], expected)

    def test_transpose_reshape_roundtrip_grads(self):
        x = e.parameter(np.arange(24.0).reshape(2, 3, 4))
        out = e.transpose(x, (1, 0, 2)).reshape((3, 8))
        grads = backward((out * 2.0).sum(), leaves=[x])
        assert np.array_equal(grads[x], np.full((2, 3, 4), 2.0))


class TestNonFinite:
    def test_forward_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))

    def test_overflow_in_op_rejected(self):
        x = Tensor(np.array([1e308]))
        with pytest.raises(NonFiniteError):
            x * 1e308

    def test_log_domain(self):
        with pytest.raises(NonFiniteError):
            e.log(np.array([0.0]))


class TestRandomizedGradcheck:
    def test_small_composite_graphs(self):
        """matmul/softmax/gelu/layer-norm/cross_entropy composites vs
        central finite differences (h=1e-4, rel err < 1e-3)."""
        rng = np.random.default_rng(7)
        for trial in range(5):
            w1 = e.parameter(rng.normal(scale=0.5, size=(3, 4)))
            w2 = e.parameter(rng.normal(scale=0.5, size=(4, 3)))
            gain = e.parameter(rng.normal(scale=0.2, size=4) + 1.0)
            bias = e.parameter(rng.normal(scale=0.2, size=4))
            x = rng.normal(size=(2, 3))
            targets = rng.integers(0, 3, size=2)

            def loss_fn():
                h = e.layer_norm(e.matmul(x, w1), gain, bias)
                h = e.gelu(h)
                logits = e.matmul(h, w2)
                ce = e.cross_entropy(logits, targets)
                probe = e.softmax(logits, axis=-1)
                return ce + 0.1 * (probe * probe).sum()

            worst = check_gradients(loss_fn, [w1, w2, gain, bias], rng,
                                    samples_per_param=3)
            assert worst < 1e-3, f"trial {trial}: worst rel err {worst}"


class TestOptimizer:
    def test_zero_gradient_leaves_params(self):
        p = e.parameter(np.array([1.0, 2.0]))
        state = OptimizerState(CosineSchedule(0.03, 10))
        sgd_step([p], [np.zeros(2)], state)
        assert np.array_equal(p.data, [1.0, 2.0])
        assert state.step == 1

    def test_first_step_uses_initial_lr(self):
        p = e.parameter(np.array(1.0))
        state = OptimizerState(CosineSchedule(0.03, 100))
        sgd_step([p], [np.array(1.0)], state)
        assert p.data == pytest.approx(0.97)

    def test_lr_zero_at_end(self):
        sched = CosineSchedule(0.03, 40)
        assert sched.lr(40) == 0.0
        assert sched.lr(0) == 0.03

    def test_schedule_non_increasing(self):
        sched = CosineSchedule(0.5, 64)
        lrs = [sched.lr(s) for s in range(66)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert all(lr >= 0.0 for lr in lrs)

    def test_shape_mismatch(self):
        p = e.parameter(np.ones(3))
        state = OptimizerState(CosineSchedule(0.1, 5))
        with pytest.raises(ShapeError):
            sgd_step([p], [np.ones(4)], state)
