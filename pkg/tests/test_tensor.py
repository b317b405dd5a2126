import numpy as np
import pytest

from retline.tensor import (
    OpCounter,
    Tape,
    Tensor,
    add,
    backward,
    concat_cols,
    concat_rows,
    count_ops,
    dropout,
    embedding_rows,
    gelu,
    grad_check,
    layer_norm,
    log_softmax_rows,
    masked_softmax_rows,
    matmul,
    mean_all,
    mul,
    mul_const,
    pow_const,
    rotate_pairs,
    scale_rows,
    sigmoid,
    slice_cols,
    slice_rows,
    softmax_rows,
    sum_all,
    transpose,
    unfold,
)


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


class TestConstruction:
    def test_shape_matches_data(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.size == 4

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Tensor([np.inf, 1.0])
        with pytest.raises(ValueError):
            Tensor([np.nan])

    def test_detach_drops_grad_tracking(self):
        t = Tensor([1.0], requires_grad=True)
        assert not t.detach().requires_grad


class TestMatmul:
    def test_identity(self):
        a = Tensor([[2.0, -1.0], [0.5, 3.0]])
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(matmul(eye, a).data, a.data)

    def test_zero(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        z = Tensor([[0.0], [0.0]])
        np.testing.assert_array_equal(matmul(a, z).data, [[0.0], [0.0]])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            matmul(rand((2, 3)), rand((2, 3)))

    def test_1x1_counts_one_mult_zero_adds(self):
        c = OpCounter()
        with count_ops(c):
            matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert c.mults == 1
        assert c.adds == 0

    def test_count_is_mkp(self):
        for (m, k, p) in [(1, 1, 1), (3, 4, 5), (8, 8, 8), (2, 7, 1)]:
            c = OpCounter()
            with count_ops(c):
                matmul(rand((m, k), seed=m), rand((k, p), seed=p))
            assert c.mults == m * k * p
            assert c.adds == m * p * (k - 1)

    def test_associativity_consistent(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a, b, c = (Tensor(rng.standard_normal((8, 8))) for _ in range(3))
            left = matmul(matmul(a, b), c).data
            right = matmul(a, matmul(b, c)).data
            assert np.max(np.abs(left - right)) / np.max(np.abs(left)) < 1e-9

    def test_counters_nest_per_context(self):
        outer, inner = OpCounter(), OpCounter()
        with count_ops(outer):
            matmul(rand((2, 2)), rand((2, 2)))
            with count_ops(inner):
                matmul(rand((2, 2)), rand((2, 2)))
        assert inner.mults == 8
        assert outer.mults == 16


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_single_column(self):
        out = softmax_rows(Tensor([[5.0], [-2.0]]))
        np.testing.assert_array_equal(out.data, [[1.0], [1.0]])

    def test_log_ratio_row(self):
        out = softmax_rows(Tensor([[np.log(1.0), np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((20, 9))
        s = softmax_rows(Tensor(x))
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)
        s2 = softmax_rows(Tensor(x + 13.7))
        assert np.max(np.abs(s.data - s2.data)) < 1e-12

    def test_masked_softmax_zeroes_blocked_entries(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 6)))
        allow = np.zeros((4, 6), dtype=bool)
        allow[:, :3] = True
        s = masked_softmax_rows(x, allow)
        assert np.all(s.data[:, 3:] == 0.0)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)

    def test_masked_softmax_rejects_empty_row(self):
        with pytest.raises(ValueError):
            masked_softmax_rows(rand((2, 2)), np.zeros((2, 2), dtype=bool))


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_saturates_to_identity(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-9

    def test_kills_large_negative(self):
        assert abs(gelu(Tensor([-10.0])).data[0]) < 1e-9


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        x = Tensor([[4.0, 4.0, 4.0]])
        out = layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_vector(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((16, 32)))
        out = layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)))
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-4)

    def test_empty_vector_rejected(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            backward(sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_matmul_grad_pattern(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
        with Tape():
            backward(sum_all(matmul(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((2, 2)) @ b.data.T)
        np.testing.assert_array_equal(b.grad, a.data.T @ np.ones((2, 2)))

    def test_detached_receives_no_grad(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        frozen = Tensor([[3.0, 4.0]])
        with Tape():
            backward(sum_all(mul(x, frozen)))
        assert frozen.grad is None
        np.testing.assert_array_equal(x.grad, frozen.data)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with Tape():
            y = mul(x, x)
            with pytest.raises(ValueError):
                backward(y)

    def test_repeat_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            loss = sum_all(mul(x, x))
            backward(loss)
            backward(loss)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_requires_active_tape(self):
        x = Tensor([1.0], requires_grad=True)
        loss = sum_all(x)
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_backward_does_not_mutate_forward_values(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape():
            y = gelu(x)
            kept = y.data.copy()
            backward(sum_all(y))
        np.testing.assert_array_equal(y.data, kept)


class TestGradCheck:
    def test_quadratic(self):
        x = rand((3, 4), seed=5)
        assert grad_check(lambda t: sum_all(mul(t, t)), x) <= 1e-7

    def test_constant_function(self):
        x = rand((2, 2), seed=6)
        const = Tensor(np.zeros(()))
        assert grad_check(lambda t: const, x) == 0.0

    def test_every_primitive_under_random_points(self):
        rng = np.random.default_rng(42)
        weights = rng.standard_normal((4, 6))
        cases = [
            lambda t: sum_all(mul_const(softmax_rows(t), weights)),
            lambda t: sum_all(mul(softmax_rows(t), t)),
            lambda t: sum_all(log_softmax_rows(t)),
            lambda t: sum_all(gelu(t)),
            lambda t: sum_all(sigmoid(t)),
            lambda t: sum_all(mul_const(
                layer_norm(t, Tensor(np.ones(6)), Tensor(np.zeros(6))), weights)),
            lambda t: sum_all(matmul(t, transpose(t))),
            lambda t: sum_all(mul(slice_rows(t, 1, 3), slice_rows(t, 0, 2))),
            lambda t: sum_all(mul(slice_cols(t, 0, 3), slice_cols(t, 2, 5))),
            lambda t: sum_all(concat_rows([t, t])),
            lambda t: sum_all(mul(concat_cols([t, t]), concat_cols([t, t]))),
            lambda t: mean_all(mul_const(t, np.arange(24.0).reshape(4, 6))),
            lambda t: sum_all(scale_rows(mul(t, t), np.arange(1.0, 5.0))),
            lambda t: sum_all(rotate_pairs(t, np.linspace(0, 2, 12).reshape(4, 3))),
        ]
        for i, f in enumerate(cases):
            for trial in range(10):
                x = Tensor(rng.standard_normal((4, 6)))
                err = grad_check(f, x)
                assert err <= 1e-4, f"case {i} trial {trial}: {err}"

    def test_pow_const_gradient(self):
        x = Tensor(np.random.default_rng(1).random((3, 3)) + 0.5)
        assert grad_check(lambda t: sum_all(pow_const(t, 1 / 16)), x) <= 1e-6

    def test_embedding_gradient_scatters(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        with Tape():
            out = embedding_rows(table, [1, 1, 3])
            backward(sum_all(out))
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_embedding_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            embedding_rows(rand((4, 3)), [4])


class TestRotation:
    def test_norm_preserved(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((5, 8)))
        ang = rng.random((5, 4)) * 6.0
        y = rotate_pairs(x, ang)
        np.testing.assert_allclose(
            np.linalg.norm(y.data, axis=1), np.linalg.norm(x.data, axis=1), atol=1e-12
        )


class TestUnfold:
    def test_shapes_and_values(self):
        x = Tensor(np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4))
        cols, oh, ow = unfold(x, kernel=3, stride=(2, 2), pad=1)
        assert (oh, ow) == (2, 2)
        assert cols.shape == (4, 2 * 9)
        # top-left patch, channel 0, with zero padding around the corner
        np.testing.assert_array_equal(
            cols.data[0, :9], [0, 0, 0, 0, 0, 1, 0, 4, 5]
        )

    def test_gradient(self):
        x = Tensor(np.random.default_rng(2).standard_normal((2, 6, 5)))
        err = grad_check(lambda t: sum_all(mul(unfold(t, 3, (2, 1), 1)[0],
                                               unfold(t, 3, (2, 1), 1)[0])), x)
        assert err <= 1e-6


class TestDropout:
    def test_zero_rate_is_identity(self):
        x = rand((3, 3))
        assert dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_preserves_expectation(self):
        x = Tensor(np.ones((200, 50)))
        out = dropout(x, 0.3, np.random.default_rng(8))
        assert abs(out.data.mean() - 1.0) < 0.02

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            dropout(rand((2, 2)), 1.0, np.random.default_rng(0))


class TestConcurrency:
    def test_distinct_tapes_run_concurrently(self):
        import threading

        shared = Tensor(np.full((4, 4), 2.0))  # read-only across threads
        results = {}

        def worker(tid):
            x = Tensor(np.full((4, 4), float(tid + 1)), requires_grad=True)
            with Tape():
                backward(sum_all(mul(mul(x, x), shared)))
            results[tid] = x.grad.copy()

        threads = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for tid, grad in results.items():
            np.testing.assert_allclose(grad, 2.0 * (tid + 1) * 2.0)
        assert shared.grad is None

    def test_counters_are_per_thread(self):
        import threading

        counts = {}

        def worker(tid, reps):
            c = OpCounter()
            with count_ops(c):
                for _ in range(reps):
                    matmul(rand((2, 2), seed=tid), rand((2, 2), seed=tid))
            counts[tid] = c.mults

        threads = [threading.Thread(target=worker, args=(t, t + 1))
                   for t in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert counts == {t: 8 * (t + 1) for t in range(4)}


class TestAddVariants:
    def test_row_vector_bias(self):
        x = Tensor(np.zeros((3, 2)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape():
            out = add(x, b)
            backward(sum_all(out))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]] * 3)
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            add(rand((2, 3)), rand((3, 2)))
