import numpy as np
import pytest

from ilrec.errors import NumericError, UsageError
from ilrec.neural import (Net, adam_init, adam_step, backward, forward, gradient_check, init_net, load_nets,
                          log_softmax, relative_error, save_nets, softmax)


def squared_loss(target):
    def fn(out):
        d = out - target
        return 0.5 * float(np.sum(d * d)), d
    return fn


def test_zero_net_identity_outputs_zero():
    net = init_net([3, 4, 2], "identity", zero=True)
    assert np.all(forward(net, np.ones(3)) == 0)


def test_softmax_head_uniform_on_zero_logits():
    net = init_net([2, 3], "identity", "softmax", zero=True)
    np.testing.assert_allclose(forward(net, np.ones(2)), [1 / 3] * 3, atol=1e-15)


def test_identity_layer_passes_input():
    net = Net([3, 3], [np.eye(3), np.zeros(3)], "identity")
    x = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(forward(net, x), x)


def test_dim_mismatch_is_usage_error():
    with pytest.raises(UsageError):
        forward(init_net([3, 2]), np.ones(4))


def test_softmax_stable_for_large_logits():
    p = softmax(np.array([[1e3, -1e3, 0.0]]))
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.isfinite(log_softmax(np.array([[1e3, -1e3]]))))


def test_softmax_outputs_sum_to_one(rng):
    net = init_net([5, 8, 7], "tanh", "softmax", seed=2)
    p = forward(net, rng.normal(size=(20, 5)))
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_backward_zero_upstream_and_shapes(rng):
    net = init_net([4, 6, 3], seed=1)
    g = backward(net, rng.normal(size=(5, 4)), np.zeros((5, 3)))
    assert all(gi.shape == p.shape and not gi.any() for gi, p in zip(g, net.params))


def test_last_bias_gradient_equals_upstream():
    net = init_net([3, 5, 1], seed=4)
    g = backward(net, np.array([0.1, 0.2, 0.3]), np.array([0.75]))
    assert g[-1][0] == pytest.approx(0.75)


def test_non_finite_upstream_raises():
    net = init_net([2, 1])
    with pytest.raises(NumericError):
        backward(net, np.ones(2), np.array([np.nan]))


def test_gradient_check_linear_exact(rng):
    net = init_net([4, 3], "identity", seed=0)
    assert gradient_check(net, squared_loss(rng.normal(size=(6, 3))), rng.normal(size=(6, 4))) < 1e-7


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_tanh_two_layer(seed):
    rng = np.random.default_rng(seed)
    net = init_net([5, 7, 3], "tanh", seed=seed)
    assert gradient_check(net, squared_loss(rng.normal(size=(8, 3))), rng.normal(size=(8, 5))) < 1e-4


def test_gradient_check_softmax_head(rng):
    net = init_net([4, 6, 5], "tanh", "softmax", seed=3)
    target = np.eye(5)[rng.integers(0, 5, 6)]

    def nll(p):
        return -float(np.sum(target * np.log(p))), -target / p
    assert gradient_check(net, nll, rng.normal(size=(6, 4))) < 1e-4


def test_gradient_check_relu_away_from_kinks(rng):
    net = init_net([4, 8, 2], "relu", seed=5)
    x = rng.normal(size=(30, 4))
    pre = x @ net.params[0] + net.params[1]
    x = x[np.all(np.abs(pre) > 1e-3, axis=1)]
    assert len(x) > 5
    assert gradient_check(net, squared_loss(rng.normal(size=(len(x), 2))), x) < 1e-4


def test_adam_zero_grads_leave_params():
    net = init_net([2, 2], seed=0)
    new, opt = adam_step(net, [np.zeros_like(p) for p in net.params], adam_init(net))
    assert all(np.array_equal(a, b) for a, b in zip(net.params, new.params))
    assert opt.step == 1


def test_adam_first_step_is_lr_sign():
    net = init_net([2, 2], seed=0)
    g = [np.full_like(p, -3.0) for p in net.params]
    new, _ = adam_step(net, g, adam_init(net, 1e-3))
    for a, b in zip(net.params, new.params):
        np.testing.assert_allclose(b - a, 1e-3, rtol=1e-6)


def test_adam_descends_quadratic():
    net = Net([1, 2], [np.zeros((1, 2)), np.array([1.0, 1.0])], "identity")
    opt = adam_init(net, 0.1)
    for _ in range(50):
        x = net.params[1]
        net, opt = adam_step(net, [np.zeros((1, 2)), 2 * x], opt)
    assert np.linalg.norm(net.params[1]) < 0.1


def test_adam_refuses_non_finite():
    net = init_net([2, 1])
    with pytest.raises(NumericError):
        adam_step(net, [np.full_like(p, np.nan) for p in net.params], adam_init(net))


def test_adam_does_not_mutate_input():
    net = init_net([3, 2], seed=9)
    before = [p.copy() for p in net.params]
    adam_step(net, [np.ones_like(p) for p in net.params], adam_init(net))
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params))


def test_relative_error_formula():
    assert relative_error([np.array([1.0])], [np.array([1.0])]) == 0.0
    assert relative_error([np.array([1.0])], [np.array([3.0])]) == pytest.approx(0.5)
    assert relative_error([np.array([0.0])], [np.array([1e-12])]) == pytest.approx(1e-4)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    nets = {"a": init_net([3, 4, 2], "tanh", seed=1), "b": init_net([2, 1], "relu", "softmax", seed=2)}
    nets["a"].params.append(np.random.default_rng(0).normal(size=(3, 5)))  # extra trailing tensor
    path = save_nets(tmp_path / "n.npz", nets)
    back = load_nets(path)
    for k in nets:
        assert back[k].layer_dims == nets[k].layer_dims
        assert back[k].activation == nets[k].activation and back[k].output_head == nets[k].output_head
        assert all(x.tobytes() == y.tobytes() for x, y in zip(back[k].params, nets[k].params))
    again = save_nets(tmp_path / "m.npz", back)
    assert path.read_bytes() == again.read_bytes()
