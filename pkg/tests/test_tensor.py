import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tscm.errors import DegenerateInputError, NonFiniteError, ShapeError
from tscm.tensor import (
    Tensor,
    avg_pool2d,
    clamped_normalize,
    concat,
    conv2d,
    grad_check,
    l2_normalize,
    matmul,
    no_grad,
    relu,
    reshape,
    slice_,
    softmax,
    softmax_rows,
    square,
    sqrt,
    transpose,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_gradient_of_sum_is_ones_times_bt(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-14)
        # independent check by central differences, step 1e-6
        fd = np.zeros((3, 4))
        for i in range(3):
            for j in range(4):
                x = a.data.copy()
                x[i, j] += 1e-6
                up = (x @ b.data).sum()
                x[i, j] -= 2e-6
                fd[i, j] = (up - (x @ b.data).sum()) / 2e-6
        np.testing.assert_allclose(a.grad, fd, atol=1e-7)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_gradient(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(4, 5)))
        r = grad_check(lambda a, w: square(matmul(a, w)).sum(), [a, w])
        assert r.max_rel_error < 1e-6


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_no_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_gradient_matches_central_differences(self):
        c = Tensor([[0.3, -1.2, 2.0]])
        r = grad_check(lambda x: (softmax_rows(x) * c).sum(), Tensor([[1.0, 2.0, 3.0]]))
        assert r.max_rel_error < 1e-6 and r.checked == 3

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            softmax_rows(Tensor([[np.nan, 0.0]]))

    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
    def test_rows_sum_to_one(self, x):
        out = softmax_rows(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestNormalize:
    def test_three_four(self):
        np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)

    def test_idempotent_on_unit_vector(self):
        u = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(Tensor(u)).data, u)

    def test_random_vector_unit_norm(self, rng):
        out = l2_normalize(Tensor(rng.normal(size=8))).data
        assert abs(np.linalg.norm(out) - 1.0) < 1e-10

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize(Tensor([0.0, 1e-13]))

    def test_clamped_keeps_zero_rows(self, rng):
        x = np.vstack([np.zeros(4), rng.normal(size=4)])
        out = clamped_normalize(Tensor(x), axis=-1).data
        np.testing.assert_array_equal(out[0], 0.0)
        assert abs(np.linalg.norm(out[1]) - 1) < 1e-12

    def test_gradients(self, rng):
        c = Tensor(rng.normal(size=(3, 5)))
        assert grad_check(lambda x: (l2_normalize(x) * c).sum(), Tensor(rng.normal(size=(3, 5)))).max_rel_error < 1e-6
        assert grad_check(lambda x: (clamped_normalize(x) * c).sum(), Tensor(rng.normal(size=(3, 5)))).max_rel_error < 1e-6


class TestElementwiseAndShape:
    def test_add_zero(self, rng):
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal((Tensor(x) + Tensor(np.zeros((2, 3)))).data, x)

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_concat_shape_law(self):
        assert concat([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))], axis=-1).shape == (1, 5)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((1, 2))), Tensor(np.ones((2, 3)))], axis=-1)

    def test_concat_slice_round_trip(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        c = concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(c[:, :3].data, a)
        np.testing.assert_array_equal(c[:, 3:].data, b)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "square", "sqrt", "transpose", "reshape", "slice", "concat", "mean", "pool"])
    def test_op_gradients(self, op, rng):
        w = rng.normal(size=(4, 6))
        a = Tensor(rng.normal(size=(4, 6)))
        b = Tensor(rng.normal(size=(1, 6)))
        fns = {
            "add": lambda a, b: square(a + b).sum(),
            "sub": lambda a, b: square(a - b).sum(),
            "mul": lambda a, b: square(a * b).sum(),
            "square": lambda a, b: (square(a) * Tensor(w)).sum() + b.sum(),
            "sqrt": lambda a, b: (sqrt(square(a) + 1.0) * Tensor(w)).sum() + b.sum(),
            "transpose": lambda a, b: (transpose(a) @ a * Tensor(rng_fixed(6, 6))).sum() + b.sum(),
            "reshape": lambda a, b: (reshape(a, (6, 4)) @ Tensor(w)).sum() + b.sum(),
            "slice": lambda a, b: square(slice_(a, (slice(1, 3), [0, 2, 2]))).sum() + b.sum(),
            "concat": lambda a, b: (square(concat([a, b], axis=0)) * Tensor(rng_fixed(5, 6))).sum(),
            "mean": lambda a, b: square(a.mean(axis=0) + b).sum(),
            "pool": lambda a, b: (avg_pool2d(reshape(a, (1, 1, 4, 6)), 2) * Tensor(rng_fixed(1, 1, 2, 3))).sum() + b.sum(),
        }
        r = grad_check(fns[op], [a, b])
        assert not r.boundary
        assert r.max_rel_error < 1e-6


def rng_fixed(*shape):
    return np.random.default_rng(99).normal(size=shape)


class TestConv:
    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 5, 5))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(5):
                        ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        c = Tensor(rng.normal(size=(2, 3, 4, 4)))
        r = grad_check(lambda x, w, b: (conv2d(x, w, b) * c).sum(), [x, w, b])
        assert r.max_rel_error < 1e-6


class TestBackward:
    def test_sum(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_square(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)

    def test_repeated_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            (x * x).backward()

    def test_detached_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(RuntimeError):
            (x.detach() * 2.0).sum().backward()
        with no_grad():
            loss = (x * 2.0).sum()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_tape_topological_and_visits_once(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        h = x @ x
        loss = (h + h @ x).sum()
        order = loss.tape()
        pos = {id(n): i for i, n in enumerate(order)}
        assert len(pos) == len(order)
        for node in order:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]
        loss.backward()
        # d/dx sum(x@x + x@x@x) by finite differences
        r = grad_check(lambda x: ((x @ x) + (x @ x) @ x).sum(), Tensor(x.data))
        assert r.max_rel_error < 1e-6

    def test_deterministic(self, rng):
        data = rng.normal(size=(4, 4))
        grads = []
        for _ in range(2):
            x = Tensor(data, requires_grad=True)
            (softmax(x @ x) * x).sum().backward()
            grads.append(x.grad)
        assert np.array_equal(grads[0], grads[1])


class TestGradCheck:
    def test_sum(self, rng):
        assert grad_check(lambda x: x.sum(), Tensor(rng.normal(size=6))).max_rel_error < 1e-8

    def test_non_scalar(self):
        with pytest.raises(ShapeError):
            grad_check(lambda x: x * 2.0, Tensor([1.0, 2.0]))

    def test_kink_flagged_as_boundary(self):
        r = grad_check(lambda x: relu(x).sum(), Tensor([0.0, 1.0]))
        assert r.boundary and r.checked == 0

    def test_crossing_coordinate_skipped(self):
        # 3e-7 from the kink: the +-1e-6 probe flips the hinge, so it is skipped
        r = grad_check(lambda x: relu(x).sum(), Tensor([3e-7, 1.0]))
        assert not r.boundary and r.skipped == 1 and r.checked == 1
        assert r.max_rel_error < 1e-8

    def test_max_coords_samples(self, rng):
        r = grad_check(lambda x: square(x).sum(), Tensor(rng.normal(size=100)), max_coords=10)
        assert r.checked == 10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_random_ops_pass_grad_check(seed):
    g = np.random.default_rng(seed)
    a = Tensor(g.normal(size=(3, 4)))
    b = Tensor(g.normal(size=(4, 3)))
    c = Tensor(g.normal(size=(3, 3)))

    def f(a, b):
        return (l2_normalize(softmax(a @ b) + c) * c).sum()

    assert grad_check(f, [a, b]).max_rel_error < 1e-4
