import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvae.nn import (AdamState, DenseNetwork, Layer, ShapeError, adam_step, backward,
                     finite_difference_check, forward, load_network, read_network,
                     save_network, write_network)


def _sum_loss(net, x):
    out, cache = forward(net, x, return_cache=True)
    return float(out.sum()), backward(net, cache, np.ones_like(out)).grads


def _quad_loss(net, x):
    out, cache = forward(net, x, return_cache=True)
    return 0.5 * float(np.sum(out ** 2)), backward(net, cache, out).grads


def test_forward_identity_layer():
    net = DenseNetwork([Layer(np.eye(2), np.zeros(2))])
    np.testing.assert_array_equal(forward(net, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_forward_hand_matrix():
    net = DenseNetwork([Layer([[2.0, 0.0], [0.0, 3.0]], [1.0, 1.0])])
    np.testing.assert_array_equal(forward(net, np.array([[1.0, 1.0]])), [[3.0, 4.0]])


def test_forward_relu():
    net = DenseNetwork([Layer(np.eye(2), np.zeros(2), "relu")])
    np.testing.assert_array_equal(forward(net, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        DenseNetwork([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((2, 4)), np.zeros(2))])
    net = DenseNetwork.init((3, 2), seed=0)
    with pytest.raises(ShapeError):
        forward(net, np.ones((1, 4)))


def test_backward_zero_upstream():
    net = DenseNetwork.init((3, 5, 2), seed=1)
    out, cache = forward(net, np.ones((4, 3)), return_cache=True)
    gs = backward(net, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in gs)


def test_backward_sum_of_outputs_outer_product():
    net = DenseNetwork([Layer(np.array([[0.3, -0.2, 0.5], [1.0, 2.0, -1.0]]), np.zeros(2))])
    x = np.array([[1.0, 2.0, 3.0]])
    _, grads = _sum_loss(net, x)
    np.testing.assert_allclose(grads[0], np.outer(np.ones(2), x[0]))
    np.testing.assert_allclose(grads[1], np.ones(2))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(["tanh", "relu", "identity"]),
       widths=st.lists(st.integers(1, 5), min_size=1, max_size=3))
def test_backward_matches_finite_differences(seed, act, widths):
    rng = np.random.default_rng(seed)
    net = DenseNetwork.init((3, *widths, 2), activation=act, seed=seed)
    x = rng.standard_normal((4, 3))
    if act == "relu":
        # keep pre-activations away from the kink
        for layer in net.layers:
            layer.bias += 0.05 * np.sign(rng.standard_normal(layer.bias.shape))
    assert finite_difference_check(net, _quad_loss, x, eps=1e-5) < 1e-4


def test_fd_linear_quadratic_exact():
    net = DenseNetwork.init((4, 3), activation="identity", seed=3)
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert finite_difference_check(net, _quad_loss, x) < 1e-6


def test_fd_tanh():
    net = DenseNetwork.init((4, 6, 6, 3), activation="tanh", seed=4)
    x = np.random.default_rng(1).standard_normal((5, 4))
    assert finite_difference_check(net, _quad_loss, x, eps=1e-5) < 1e-4


def test_fd_detects_corrupted_gradient():
    def corrupted(net, x):
        loss, grads = _quad_loss(net, x)
        grads = [g.copy() for g in grads]
        grads[0].flat[0] *= 2.0
        return loss, grads

    net = DenseNetwork.init((4, 3), activation="tanh", seed=5)
    x = np.random.default_rng(2).standard_normal((5, 4))
    assert finite_difference_check(net, corrupted, x) > 0.1


def test_adam_zero_gradient_leaves_parameters():
    net = DenseNetwork.init((3, 4, 2), seed=0)
    before = [p.copy() for p in net.parameters()]
    adam_step(net.parameters(), [np.zeros_like(p) for p in net.parameters()],
              AdamState(lr=1e-2))
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_adam_first_step_closed_form():
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([0.3, -4.0, 1e-3])]
    state = AdamState(lr=1e-3)
    adam_step(p, g, state)
    # bias correction makes m_hat = g and v_hat = g^2 on the first step
    expected = np.array([1.0, -2.0, 0.5]) - 1e-3 * g[0] / (np.abs(g[0]) + 1e-8)
    np.testing.assert_allclose(p[0], expected, rtol=1e-12, atol=1e-15)


def test_adam_converges_on_quadratic():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 5))
    h = a @ a.T + np.eye(5)
    x = [rng.standard_normal(5)]
    loss0 = 0.5 * x[0] @ h @ x[0]
    state = AdamState(lr=1e-2)
    for _ in range(1000):
        adam_step(x, [h @ x[0]], state)
    assert 0.5 * x[0] @ h @ x[0] < loss0


def test_adam_zero_lr_is_bit_identical():
    net = DenseNetwork.init((3, 4, 2), seed=0)
    before = [p.copy() for p in net.parameters()]
    rng = np.random.default_rng(1)
    state = AdamState(lr=0.0)
    for _ in range(5):
        adam_step(net.parameters(), [rng.standard_normal(p.shape) for p in before], state)
    for a, b in zip(before, net.parameters()):
        assert a.tobytes() == b.tobytes()


def test_adam_rejects_non_finite():
    p = [np.ones(3)]
    state = AdamState(lr=1e-3)
    with pytest.raises(FloatingPointError):
        adam_step(p, [np.array([1.0, np.nan, 0.0])], state)
    np.testing.assert_array_equal(p[0], np.ones(3))
    assert state.t == 0 and not state.m


def test_checkpoint_round_trip(tmp_path):
    net = DenseNetwork.init((5, 7, 3), activation="relu", out_activation="tanh", seed=9)
    path = tmp_path / "net.dvae"
    save_network(path, net)
    back = load_network(path)
    assert [l.activation for l in back.layers] == ["relu", "tanh"]
    for a, b in zip(net.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_layout():
    net = DenseNetwork([Layer([[1.0, 2.0]], [3.0], "tanh")])
    buf = io.BytesIO()
    write_network(buf, net)
    raw = buf.getvalue()
    assert raw[:4] == b"DVAE"
    assert len(raw) == 4 + 8 + 9 + 8 * 3
    assert raw[12] == 1  # tanh tag


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        read_network(io.BytesIO(b"NOPE" + bytes(8)))
    buf = io.BytesIO()
    write_network(buf, DenseNetwork.init((3, 2), seed=0))
    with pytest.raises(ValueError):
        read_network(io.BytesIO(buf.getvalue()[:-4]))


def test_forward_is_pure():
    net = DenseNetwork.init((4, 8, 3), seed=2)
    x = np.random.default_rng(0).standard_normal((6, 4))
    before = [p.copy() for p in net.parameters()]
    assert forward(net, x).tobytes() == forward(net, x.copy()).tobytes()
    for a, b in zip(before, net.parameters()):
        assert a.tobytes() == b.tobytes()
