import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gfkd import ops
from gfkd.gradcheck import finite_diff_check
from gfkd.tensor import GradMap, Tape, Tensor, backward, grads_for

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(ops.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_mul_by_scalar_zero(self):
        np.testing.assert_array_equal(ops.mul(Tensor([2, 3]), 0).data, [0, 0])

    def test_square(self):
        np.testing.assert_array_equal(ops.square(Tensor([3, -2])).data, [9, 4])

    def test_dispatch_by_kind(self):
        a, b = Tensor([1.0, 5.0]), Tensor([2.0, 3.0])
        np.testing.assert_array_equal(ops.elementwise("sub", a, b).data, [-1, 2])
        np.testing.assert_array_equal(ops.elementwise("scale", a, 2.0).data, [2, 10])
        np.testing.assert_array_equal(ops.elementwise("square", a).data, [1, 25])
        with pytest.raises(ValueError):
            ops.elementwise("pow", a, b)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            ops.add(Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_operator_sugar(self):
        a = Tensor([1.0, 2.0])
        np.testing.assert_array_equal((a + 1).data, [2, 3])
        np.testing.assert_array_equal((3 - a).data, [2, 1])
        np.testing.assert_array_equal((-a * a).data, [-1, -4])

    def test_lineage_only_when_an_input_has_it(self):
        assert ops.add(Tensor([1.0]), Tensor([2.0])).is_leaf
        assert not ops.add(leaf([1.0]), Tensor([2.0])).is_leaf


class TestReduce:
    def test_sum(self):
        assert ops.sum(Tensor([1, 2, 3])).item() == 6

    def test_sq_norm(self):
        assert ops.sq_norm(Tensor([3, 4])).item() == 25

    def test_mean_over_empty_extent_rejected(self):
        with pytest.raises(ValueError):
            ops.mean(Tensor(np.zeros((0, 3))), axes=0)

    def test_invalid_axis_rejected(self):
        with pytest.raises(ValueError):
            ops.reduce("sum", Tensor(np.ones((2, 2))), axes=2)

    def test_axes_and_keepdims(self):
        x = Tensor(np.arange(12.0).reshape(2, 3, 2))
        out = ops.reduce("sum", x, axes=(0, 2), keepdims=True)
        assert out.shape == (1, 3, 1)
        np.testing.assert_array_equal(out.data.ravel(), x.data.sum(axis=(0, 2)))

    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_sq_norm_is_sum_of_squares(self, a):
        assert ops.sq_norm(Tensor(a)).item() == pytest.approx(float((a * a).sum()), rel=1e-12, abs=1e-12)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = leaf([1.0, -2.0, 4.0])
        np.testing.assert_array_equal(backward(ops.sum(x))[x], np.ones(3))

    def test_square_at_three(self):
        x = leaf(3.0)
        assert backward(ops.square(x))[x] == 6.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            backward(leaf([1.0, 2.0]))

    def test_unreachable_leaf_reads_zero(self):
        x, y = leaf([1.0, 2.0]), leaf([5.0])
        g = backward(ops.sum(x))
        np.testing.assert_array_equal(g[y], [0.0])

    def test_no_lineage_gives_empty_map(self):
        g = backward(ops.sum(Tensor([1.0, 2.0])))
        assert isinstance(g, GradMap) and len(g) == 0

    def test_shared_subexpression_accumulates(self):
        x = leaf(2.0)
        y = ops.mul(x, x)  # x used twice
        z = ops.add(y, y)
        assert backward(z)[x] == pytest.approx(8.0)

    def test_named_grads(self):
        p = {"a": leaf([1.0, 2.0]), "b": leaf([3.0])}
        g = grads_for(ops.sum(ops.square(p["a"])), p)
        np.testing.assert_array_equal(g["a"], [2.0, 4.0])
        np.testing.assert_array_equal(g["b"], [0.0])

    def test_tape_topological_and_unique(self):
        x = leaf([1.0, 2.0])
        y = ops.square(x)
        z = ops.sum(ops.add(y, ops.scale(y, 2.0)))
        tape = Tape.record(z)
        pos = {id(t): i for i, t in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)
        for t in tape.nodes:
            if not t.is_leaf:
                assert all(pos[id(i)] < pos[id(t)] for i in t._node.inputs if i.requires_grad)

    def test_deep_chain_does_not_recurse(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = ops.scale(y, 1.0)
        assert backward(y)[x] == 1.0

    @given(
        arrays(np.float64, (5,), elements=finite),
        st.floats(-3, 3, allow_nan=False),
        st.floats(-3, 3, allow_nan=False),
    )
    def test_gradient_linearity(self, v, a, b):
        def f(t):
            return ops.sum(ops.square(t))

        def g(t):
            return ops.sum(ops.mul(t, Tensor(np.arange(5.0))))

        x = leaf(v)
        combo = backward(ops.add(ops.scale(f(x), a), ops.scale(g(x), b)))[x]
        x1, x2 = leaf(v), leaf(v)
        separate = a * backward(f(x1))[x1] + b * backward(g(x2))[x2]
        np.testing.assert_allclose(combo, separate, rtol=0, atol=1e-10)


def test_forward_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    first = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    second = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    assert first.tobytes() == second.tobytes()


def test_sq_norm_gradcheck_is_tight(rng):
    err = finite_diff_check(lambda ts: ops.sq_norm(ts[0]), [rng.normal(size=(4, 3))])
    assert err < 1e-9
