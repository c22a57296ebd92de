import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestnet import autograd as ag
from nestnet.autograd import NonFiniteError, ShapeError, Tensor, finite_diff, gradients, stop_gradient

from gradcheck import max_grad_error, primitive_cases


def test_square_forward():
    x = Tensor(3.0, requires_grad=True)
    assert float((x * x).data) == 9.0


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ag.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))


def test_layer_norm_of_constant_vector_is_zero():
    out = ag.layer_norm(Tensor(np.full(5, 2.5)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros(5))


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    assert gradients(x * x, {"x": x})["x"] == pytest.approx(6.0)


def test_stop_gradient_branch_is_constant():
    x = Tensor(2.0, requires_grad=True)
    assert gradients(stop_gradient(x) * x, {"x": x})["x"] == pytest.approx(2.0)


def test_softmax_cross_entropy_matches_finite_differences(rng):
    logits = rng.standard_normal(5)
    onehot = np.eye(5)[2]
    err = max_grad_error(lambda p: -(ag.log_softmax(p["z"]) * onehot).sum(), {"z": logits})
    assert err < 1e-4


def test_stop_gradient_forward_identity_and_zero_grad():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    sg = stop_gradient(x)
    np.testing.assert_array_equal(sg.data, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(gradients(sg.sum() + 0.0 * x.sum(), {"x": x})["x"], np.zeros(3))
    assert sg.sg_source is x


def test_finite_diff_square():
    g = finite_diff(lambda p: float(p["x"] ** 2), {"x": np.array(3.0)}, eps=1e-3)
    assert abs(float(g["x"]) - 6.0) < 1e-6


def test_finite_diff_sine():
    g = finite_diff(lambda p: float(np.sin(p["x"])), {"x": np.array(0.0)})
    assert float(g["x"]) == pytest.approx(1.0, abs=1e-6)


def test_finite_diff_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        finite_diff(lambda p: 0.0, {"x": np.array(0.0)}, eps=0)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        gradients(x * 2.0, {"x": x})


def test_unreachable_parameter_gets_zeros():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones((2, 3)), requires_grad=True)
    g = gradients(x.sum(), {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], np.zeros((2, 3)))


def test_shape_mismatch_names_both_operands():
    a = Tensor(np.ones((2, 3)), name="left")
    b = Tensor(np.ones((4, 5)), name="right")
    with pytest.raises(ShapeError) as exc:
        a + b
    assert "left" in str(exc.value) and "right" in str(exc.value)
    with pytest.raises(ShapeError):
        a @ b


def test_non_finite_intermediate_raises_overflow():
    x = Tensor(np.array([1000.0]))
    with pytest.raises(OverflowError):
        ag.exp(x)
    with pytest.raises(NonFiniteError):
        ag.log(Tensor(np.array([0.0])))


def test_non_finite_leaf_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_gradients_sum_across_loss_terms(rng):
    w = Tensor(rng.standard_normal(4), requires_grad=True)
    g = gradients((w * w).sum() + (w * 3.0).sum(), {"w": w})["w"]
    np.testing.assert_allclose(g, 2 * w.data + 3.0)


def test_forward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((5, 6))
    runs = [ag.log_softmax(ag.linear(Tensor(x), Tensor(w))).data.tobytes() for _ in range(3)]
    assert len(set(runs)) == 1


def test_stop_gradient_never_changes_forward(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    plain = ag.softmax(ag.swish(x) * 2.0)
    cut = ag.softmax(stop_gradient(ag.swish(x)) * 2.0)
    np.testing.assert_array_equal(plain.data, cut.data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_backward_populates_leaf_grads():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    ((x * x).sum()).backward()
    np.testing.assert_allclose(x.grad, [2.0, -4.0])


def test_getitem_and_take_gradients(rng):
    a = rng.standard_normal((5, 3))
    idx = np.array([4, 0, 4])
    assert max_grad_error(lambda p: (ag.take(p["a"], idx, axis=0) * 1.5).sum(), {"a": a}) < 1e-6
    assert max_grad_error(lambda p: (p["a"][1:, ::2] * 2.0).sum(), {"a": a}) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_primitives_match_finite_differences(seed):
    for name, build, point in primitive_cases(np.random.default_rng(seed)):
        assert max_grad_error(build, point) < 1e-3, name
