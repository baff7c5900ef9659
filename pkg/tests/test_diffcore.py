import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causalbounds import diffcore as dc
from causalbounds.diffcore import ShapeError, Tape, Tensor, gradient_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    v = np.array([0.3, -1.7])
    np.testing.assert_array_equal(dc.matmul(Tensor(np.eye(2)), Tensor(v)).value, v)


def test_relu_values():
    np.testing.assert_array_equal(dc.relu(Tensor([-1.0, 2.0])).value, [0.0, 2.0])


def test_sum_square():
    assert dc.sum(dc.square(Tensor([3.0, 4.0]))).item() == 25.0


def test_square_derivative():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(dc.sum(dc.square(x)))
    assert x.grad[0] == 6.0


def test_relu_inactive_and_kink():
    x = Tensor([-1.0, 0.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(dc.sum(dc.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_fan_out_accumulates():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x + 3.0 * x
        tape.backward(dc.sum(y))
    assert x.grad[0] == pytest.approx(7.0)


def test_non_scalar_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as err:
        dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    msg = str(err.value)
    assert "add" in msg and "(2, 3)" in msg and "(4,)" in msg
    with pytest.raises(ShapeError, match="matmul"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_gradient_check_quadratic():
    x = np.random.default_rng(0).normal(size=5)
    assert gradient_check(lambda t: dc.sum(t * t), x) < 1e-6


def test_gradient_check_constant_is_zero():
    assert gradient_check(lambda t: dc.sum(t * 0.0) + 4.0, np.ones(3)) == 0.0


def test_gradient_check_relu_away_from_kink():
    x = np.array([-1.3, 0.7, 2.2, -0.4])
    assert gradient_check(lambda t: dc.sum(dc.relu(t)), x) < 1e-6


def test_no_tape_means_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert y.node_id is None


def test_zero_grad_then_backward_is_idempotent():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = rng.normal(size=(4, 2))
    grads = []
    for _ in range(2):
        w.zero_grad()
        with Tape() as tape:
            tape.backward(dc.sum(dc.square(dc.relu(dc.matmul(Tensor(x), dc.transpose(w))))))
        grads.append(w.grad.copy())
    np.testing.assert_array_equal(*grads)


UNARY = {
    "relu": dc.relu,
    "square": dc.square,
    "absolute": dc.absolute,
    "exp": dc.exp,
    "softplus": dc.softplus,
    "neg": dc.neg,
    "scale": lambda t: dc.scale(t, -2.5),
    "maximum": lambda t: dc.maximum(t, 0.25),
    "cumsum": lambda t: dc.cumsum(t, axis=-1),
    "mean": lambda t: dc.mean(t, axis=0),
    "transpose": dc.transpose,
    "reshape": lambda t: dc.reshape(t, (-1,)),
    "index": lambda t: t[1:, ::-1],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(len(name))
    x = rng.uniform(0.3, 1.5, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    weights = rng.normal(size=UNARY[name](Tensor(x)).shape)
    assert gradient_check(lambda t: dc.sum(UNARY[name](t) * weights), x) < 1e-4


def test_positive_domain_gradients():
    x = np.random.default_rng(2).uniform(0.5, 2.0, size=(2, 3))
    for f in (dc.log, dc.sqrt):
        assert gradient_check(lambda t: dc.sum(f(t)), x) < 1e-4


BINARY = {
    "add": dc.add,
    "sub": dc.sub,
    "mul": dc.mul,
    "div": dc.div,
    "matmul": lambda a, b: dc.matmul(a, dc.transpose(b)),
    "concat": lambda a, b: dc.concat([a, b], axis=1),
    "linear": lambda a, b: dc.linear(a, b, b[0]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(len(name) + 7)
    a = rng.uniform(0.5, 1.5, size=(3, 3))
    b = rng.uniform(0.5, 1.5, size=(3, 3))
    f = BINARY[name]
    weights = rng.normal(size=f(Tensor(a), Tensor(b)).shape)
    assert gradient_check(lambda t: dc.sum(f(t, Tensor(b)) * weights), a) < 1e-4
    assert gradient_check(lambda t: dc.sum(f(Tensor(a), t) * weights), b) < 1e-4


def test_broadcast_gradient_is_summed():
    a = np.random.default_rng(3).normal(size=(4, 3))
    assert gradient_check(lambda b: dc.sum(dc.square(Tensor(a) * b)), np.array([0.5, -1.0, 2.0])) < 1e-4


def test_solve_and_logdet_gradients():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(3, 3)) + 4 * np.eye(3)
    rhs = rng.normal(size=3)
    assert gradient_check(lambda t: dc.sum(dc.solve(t, Tensor(rhs))), A) < 1e-4
    assert gradient_check(lambda t: dc.logdet(t), A) < 1e-4


def test_where_and_take_along():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    mask = x > 0
    idx = np.array([[1], [0], [3]])
    assert gradient_check(lambda t: dc.sum(dc.where(mask, t * 2.0, dc.square(t))), x) < 1e-4
    assert gradient_check(lambda t: dc.sum(dc.square(dc.take_along(t, idx, axis=1))), x) < 1e-4


def test_forward_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        with Tape():
            return dc.sum(dc.relu(dc.linear(Tensor(rng.normal(size=(7, 3))), w))).item()

    assert run() == run()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_add_mul_match_numpy(a, b):
    np.testing.assert_allclose(dc.add(Tensor(a), Tensor(b)).value, a + b)
    np.testing.assert_allclose(dc.mul(Tensor(a), Tensor(b)).value, a * b)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(0.1, 3).map(lambda v: v) | st.floats(-3, -0.1)))
def test_abs_gradient_is_sign(x):
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        tape.backward(dc.sum(dc.absolute(t)))
    np.testing.assert_array_equal(t.grad, np.sign(x))
