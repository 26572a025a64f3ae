"""Dense-network engine tests: forward/backward oracles, Adam, Gumbel heads."""

import json

import numpy as np
import pytest

from fairmap import nn


def test_forward_identity_single_layer():
    net = nn.DenseNet([2, 2], ["identity"])
    net.set_parameters([np.eye(2), np.zeros(2)])
    out = net.forward(np.array([[1.0, 2.0]]))
    assert np.allclose(out, [[1.0, 2.0]])


def test_softmax_symmetry():
    net = nn.DenseNet([2, 2], ["softmax"])
    net.set_parameters([np.eye(2), np.zeros(2)])
    out = net.forward(np.array([[0.0, 0.0]]))
    assert np.allclose(out, [[0.5, 0.5]])


def test_two_layer_relu_hand_oracle():
    # oracle: plain scalar arithmetic for x=1 through fixed weights
    net = nn.DenseNet([1, 2, 1], ["relu", "identity"])
    w1 = np.array([[2.0, -3.0]])
    b1 = np.array([0.5, 1.0])
    w2 = np.array([[1.5], [-0.5]])
    b2 = np.array([0.25])
    net.set_parameters([w1, b1, w2, b2])
    h1 = max(0.0, 1.0 * 2.0 + 0.5)      # 2.5
    h2 = max(0.0, 1.0 * -3.0 + 1.0)     # 0.0
    expected = 1.5 * h1 - 0.5 * h2 + 0.25
    out = net.forward(np.array([[1.0]]))
    assert np.allclose(out, [[expected]])


def test_forward_shape_error():
    net = nn.DenseNet([3, 2])
    with pytest.raises(nn.ShapeError):
        net.forward(np.zeros((4, 2)))


def test_backward_without_forward_is_state_error():
    net = nn.DenseNet([2, 2])
    with pytest.raises(nn.StateError):
        net.backward(np.zeros((1, 2)))


def test_zero_upstream_gradient_gives_zero_grads():
    net = nn.DenseNet([3, 4, 2], seed=1)
    out = net.forward(np.random.default_rng(0).normal(size=(5, 3)), training=True)
    grads = net.backward(np.zeros_like(out))
    assert all(np.all(g == 0.0) for g in grads)


def test_single_linear_neuron_closed_form():
    # squared loss L = (yhat - y)^2, dL/dw = 2 (yhat - y) x
    net = nn.DenseNet([1, 1], ["identity"])
    net.set_parameters([np.array([[0.7]]), np.array([0.2])])
    x, y = 3.0, 1.0
    yhat = 0.7 * x + 0.2
    out = net.forward(np.array([[x]]), training=True)
    grads = net.backward(2.0 * (out - y))
    assert np.allclose(grads[0], [[2.0 * (yhat - y) * x]])
    assert np.allclose(grads[1], [2.0 * (yhat - y)])


def _random_net_and_input(seed, max_width=16, n_layers=3, batch=4):
    """Random net plus an input kept away from relu kinks (the finite
    difference oracle is invalid within the step of a kink)."""
    r = np.random.default_rng(seed)
    for attempt in range(50):
        dims = [int(r.integers(2, max_width + 1)) for _ in range(n_layers + 1)]
        acts = [str(r.choice(["relu", "sigmoid"])) for _ in range(n_layers - 1)]
        acts.append(str(r.choice(["identity", "softmax", "sigmoid"])))
        net = nn.DenseNet(dims, acts, seed=seed * 100 + attempt)
        params = net.parameters()
        # non-zero biases so no unit sits exactly at a kink
        net.set_parameters([p + 0.05 * r.normal(size=p.shape) for p in params])
        x = r.normal(size=(batch, dims[0]))
        net.forward(x, training=True)
        clear = all(
            np.abs(z).min() > 1e-3
            for z, act in zip(net._cache["pre"], net.activations) if act == "relu"
        )
        if clear:
            return net, x
    raise AssertionError("could not find a kink-free configuration")


def _fd_max_rel_err(net, x, step=1e-5):
    r = np.random.default_rng(0)
    target = r.normal(size=(x.shape[0], net.out_dim))

    def loss():
        return 0.5 * float(np.sum((net.forward(x, training=True) - target) ** 2))

    out = net.forward(x, training=True)
    grads = net.backward(out - target)
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        flat, gflat = p.ravel(), g.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp = loss()
            flat[k] = orig - step
            lm = loss()
            flat[k] = orig
            fd = (lp - lm) / (2 * step)
            denom = max(abs(fd), abs(gflat[k]), 1e-6)
            worst = max(worst, abs(fd - gflat[k]) / denom)
    return worst


def test_backward_matches_central_finite_differences():
    net, x = _random_net_and_input(seed=7)
    assert _fd_max_rel_err(net, x) <= 1e-4


def test_input_gradient_matches_finite_differences():
    net, x = _random_net_and_input(seed=3)
    out = net.forward(x, training=True)
    net.backward(np.ones_like(out))
    ig = net.input_grad.copy()
    fd = np.zeros_like(x)
    h = 1e-6
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd[i, j] = (net.forward(xp).sum() - net.forward(xm).sum()) / (2 * h)
    assert np.abs(fd - ig).max() <= 1e-6


def test_softmax_rows_sum_to_one():
    net = nn.DenseNet([4, 8, 3], ["relu", "softmax"], seed=2)
    out = net.forward(np.random.default_rng(1).normal(size=(64, 4), scale=5.0))
    assert np.all(out > 0.0) and np.all(out < 1.0)
    assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-12


def test_inference_is_pure_and_dropout_only_in_training():
    net = nn.DenseNet([3, 16, 2], dropout=0.5, seed=4)
    x = np.random.default_rng(2).normal(size=(8, 3))
    a = net.forward(x, training=False)
    b = net.forward(x, training=False)
    assert np.array_equal(a, b)
    t1 = net.forward(x, training=True)
    t2 = net.forward(x, training=True)
    assert not np.array_equal(t1, t2)  # dropout masks differ per call


def test_training_determinism_bit_identical():
    def run():
        net = nn.DenseNet([3, 8, 2], dropout=0.1, seed=9)
        opt = nn.Adam(lr=1e-2)
        r = np.random.default_rng(5)
        x = r.normal(size=(16, 3))
        t = r.normal(size=(16, 2))
        for _ in range(20):
            out = net.forward(x, training=True)
            opt.step(net.parameters(), net.backward(out - t))
        return [p.copy() for p in net.parameters()]

    p1, p2 = run(), run()
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = nn.DenseNet([5, 7, 3], ["relu", "softmax"], dropout=0.2, seed=11)
    path = tmp_path / "net.json"
    net.save(path)
    loaded = nn.DenseNet.load(path)
    assert loaded.dims == net.dims and loaded.activations == net.activations
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    # format guard
    doc = json.loads(path.read_text())
    doc["format"] = "other"
    with pytest.raises(nn.ParameterError):
        nn.DenseNet.from_dict(doc)


# -- Adam ---------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    opt = nn.Adam(lr=0.1)
    opt.step([p], [np.zeros(2)])
    assert np.allclose(p, [1.0, -2.0])


def test_adam_single_step_hand_recurrence():
    # beta1=0, beta2=0.999, g=1, lr=0.1: m_hat=1, v_hat=1 -> step 0.1/(1+eps)
    p = np.array([0.0])
    opt = nn.Adam(lr=0.1, beta1=0.0, beta2=0.999, eps=1e-8)
    opt.step([p], [np.array([1.0])])
    m_hat = 1.0
    v_hat = (0.999 * 0.0 + 0.001 * 1.0) / (1.0 - 0.999)
    expected = -0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(p, [expected])
    assert abs(p[0] + 0.1) < 1e-8


def test_adam_identical_gradients_step_non_increasing():
    # recurrence oracle: replay the Adam formulas independently
    p = np.array([0.0])
    opt = nn.Adam(lr=0.05)
    steps = []
    prev = p.copy()
    m = v = 0.0
    for t in range(1, 6):
        opt.step([p], [np.array([1.0])])
        steps.append(abs(p[0] - prev[0]))
        prev = p.copy()
        m = 0.0 * m + 1.0 * 1.0
        v = 0.999 * v + 0.001 * 1.0
        expected = 0.05 * m / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(steps[-1] - expected) < 1e-12
    assert all(b <= a + 1e-15 for a, b in zip(steps, steps[1:]))


def test_adam_shape_mismatch():
    opt = nn.Adam(lr=0.1)
    with pytest.raises(nn.ShapeError):
        opt.step([np.zeros(2)], [np.zeros(3)])


# -- Gumbel-softmax -----------------------------------------------------


def test_gumbel_high_temperature_uniform():
    rng = np.random.default_rng(0)
    logits = np.zeros((10000, 4))
    out = nn.gumbel_softmax(logits, temperature=100.0, rng=rng)
    assert np.abs(out.mean(axis=0) - 0.25).max() <= 0.05
    assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-12


def test_gumbel_hard_rows_one_hot():
    rng = np.random.default_rng(1)
    out = nn.gumbel_softmax(np.random.default_rng(2).normal(size=(500, 3)),
                            temperature=0.5, hard=True, rng=rng)
    assert np.all(np.isin(out, (0.0, 1.0)))
    assert np.all(out.sum(axis=1) == 1.0)


def test_gumbel_peaked_logits_dominate():
    rng = np.random.default_rng(3)
    logits = np.tile([10.0, 0.0, 0.0], (10000, 1))
    out = nn.gumbel_softmax(logits, temperature=0.5, hard=True, rng=rng)
    assert out[:, 0].mean() >= 0.99


def test_gumbel_temperature_domain():
    with pytest.raises(nn.ParameterError):
        nn.gumbel_softmax(np.zeros((1, 2)), temperature=0.0)


def test_gumbel_backward_matches_soft_path():
    # straight-through convention: gradients flow as if the soft sample
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(6, 3))
    soft = nn.gumbel_softmax(logits, temperature=0.7, rng=np.random.default_rng(5))
    grad = rng.normal(size=soft.shape)
    g = nn.gumbel_softmax_backward(soft, grad, temperature=0.7)
    expected = nn.softmax_backward(soft, grad) / 0.7
    assert np.allclose(g, expected)
