import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from graspflow import ContractError, NumericError, TapeError
from graspflow.numerics import (AdamW, AdamWState, GradTape, Mlp, Parameter, Var,
                                adamw_step, backward, check_gradients, exp, log,
                                make_rng, mean, mlp_forward, no_tape,
                                positional_encode, spawn_seeds, square, vsum)


def test_mlp_zero_weights_give_bias():
    net = Mlp(3, (), 2, rng=make_rng(0))
    weight, bias = net.layers[0]
    weight.value = np.zeros((3, 2))
    bias.value = np.array([[1.5, -2.0]])
    out = mlp_forward(net, np.array([0.3, -7.0, 2.0]))
    assert_array_equal(out.value, [[1.5, -2.0]])


def test_mlp_relu_identity_layer():
    net = Mlp(2, (), 2, final_activation=True, rng=make_rng(0))
    weight, bias = net.layers[0]
    weight.value = np.eye(2)
    bias.value = np.zeros((1, 2))
    assert_array_equal(net(np.array([1.0, -1.0])).value, [[1.0, 0.0]])


def test_mlp_matches_plain_arithmetic():
    net = Mlp(4, (5,), 3, rng=make_rng(42))
    (w0, b0), (w1, b1) = net.layers
    x = np.ones((1, 4))
    expected = np.maximum(x @ w0.value + b0.value, 0.0) @ w1.value + b1.value
    assert_allclose(net(x).value, expected, rtol=0, atol=1e-12)


def test_mlp_context_joins_first_layer():
    net = Mlp(2, (4,), 1, context_dim=3, activation='tanh', rng=make_rng(1))
    (w0, b0), (w1, b1) = net.layers
    x = make_rng(2).standard_normal((5, 2))
    c = np.array([[0.1, 0.2, 0.3]])
    h = np.tanh(np.concatenate([x, np.repeat(c, 5, axis=0)], axis=1) @ w0.value + b0.value)
    assert_allclose(net(x, c).value, h @ w1.value + b1.value, atol=1e-12)


def test_mlp_dimension_mismatch():
    net = Mlp(3, (4,), 2, rng=make_rng(0))
    with pytest.raises(ContractError):
        net(np.ones((2, 4)))
    with pytest.raises(ContractError):
        net(np.ones((2, 3)), np.ones((2, 1)))


def test_backward_linear():
    w = Parameter(np.array([[1.0, 2.0, 3.0]]))
    x = np.array([[4.0, 5.0, 6.0]])
    with GradTape() as tape:
        loss = vsum(w * x)
    grads = backward(tape, loss, [w])
    assert_array_equal(grads[w], x)


def test_backward_constant_loss():
    w = Parameter(np.ones((2, 2)))
    with GradTape() as tape:
        loss = vsum(Var(np.ones(3)))
    grads = tape.backward(loss, [w])
    assert_array_equal(grads[w], np.zeros((2, 2)))


def test_backward_twice():
    w = Parameter(np.ones((1, 2)))
    with GradTape() as tape:
        loss = vsum(square(w))
    tape.backward(loss, [w])
    with pytest.raises(TapeError):
        tape.backward(loss, [w])


def test_mlp_gradient_check():
    rng = make_rng(3)
    net = Mlp(3, (6,), 2, activation='tanh', rng=rng)
    x = rng.standard_normal((7, 3))
    worst = check_gradients(lambda: vsum(square(net(x))), net.parameters(), rng,
                            n_coords=100, floor=1e-3)
    assert worst < 1e-4


def test_no_tape_suspends_recording():
    w = Parameter(np.ones((1, 2)))
    with GradTape() as tape:
        loss = vsum(square(w))
        recorded = len(tape.nodes)
        with no_tape():
            square(w)
        assert len(tape.nodes) == recorded
    assert tape.backward(loss, [w])[w].shape == (1, 2)


def test_adamw_zero_gradient_keeps_parameters():
    p = Parameter(np.array([[1.0, -2.0]]))
    state = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step([p], {p: np.zeros((1, 2))}, state)
    assert_array_equal(p.value, [[1.0, -2.0]])
    assert state.step == 1


def test_adamw_first_step():
    p = Parameter(np.array([[1.0, -2.0]]))
    g = np.array([[0.5, -0.1]])
    state = AdamWState(lr=0.01, weight_decay=0.0)
    adamw_step([p], {p: g}, state)
    expected = np.array([[1.0, -2.0]]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert_allclose(p.value, expected, rtol=0, atol=1e-12)


def test_adamw_decoupled_decay():
    p = Parameter(np.array([[1.0, -2.0, 4.0]]))
    optimizer = AdamW([p], lr=0.1, weight_decay=0.5)
    optimizer.step({p: np.zeros((1, 3))})
    assert_allclose(p.value, np.array([[1.0, -2.0, 4.0]]) * (1 - 0.1 * 0.5), atol=1e-15)


def test_adamw_shape_mismatch():
    p = Parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        adamw_step([p], {p: np.ones((1, 2))}, AdamWState())


def _trajectory(seed):
    rng = make_rng(seed)
    net = Mlp(2, (8,), 1, rng=rng)
    x = rng.standard_normal((32, 2))
    y = np.sin(x[:, :1])
    optimizer = AdamW(net.parameters(), lr=1e-2)
    for _ in range(100):
        with GradTape() as tape:
            loss = mean(square(net(x) - y))
        optimizer.step(tape.backward(loss, net.parameters()))
    return [p.value for p in net.parameters()]


def test_determinism():
    for a, b in zip(_trajectory(5), _trajectory(5)):
        assert_array_equal(a, b)


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        Var(np.array([np.nan, 1.0]))
    with pytest.raises(NumericError):
        log(Var(np.array([-1.0])))
    with pytest.raises(NumericError):
        exp(Var(np.array([1000.0])))


def test_positional_encode():
    assert_allclose(positional_encode(np.array([0.0]), 2), [0, 0, 1, 0, 1], atol=1e-15)
    assert_allclose(positional_encode(np.array([1.0]), 1), [1, 0, -1], atol=1e-15)
    v = np.array([0.3, -1.2])
    assert_array_equal(positional_encode(v, 0), v)
    assert positional_encode(np.ones((4, 3)), 4).shape == (4, 27)
    with pytest.raises(ContractError):
        positional_encode(v, -1)


def test_seeds():
    assert spawn_seeds(7, 4) == spawn_seeds(7, 4)
    assert len(set(spawn_seeds(7, 4))) == 4
    assert_array_equal(make_rng(1).standard_normal(5), make_rng(1).standard_normal(5))


if __name__ == '__main__':
    pytest.main(args=[os.path.abspath(__file__)])
