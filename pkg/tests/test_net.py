import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from einn import net
from einn.net import AdamState, MlpParams, NetError, NonFiniteGradientError, TrainConfig


def naive_forward(params, x):
    # independent re-implementation: plain loops over neurons
    a = list(np.asarray(x, dtype=float))
    n_layers = len(params.layer_sizes) - 1
    for k in range(n_layers):
        w, b = params.weights[k], params.biases[k]
        z = [sum(w[i, j] * a[j] for j in range(len(a))) + b[i] for i in range(w.shape[0])]
        a = [np.tanh(v) for v in z] if k < n_layers - 1 else z
    return np.array(a)


def random_params(sizes, seed):
    rng = np.random.default_rng(seed)
    p = net.init(sizes, seed)
    flat = p.flat.copy()
    flat += rng.normal(0.0, 0.3, flat.size)  # nonzero biases too
    return MlpParams(p.layer_sizes, flat)


def test_init_deterministic_and_shaped():
    a = net.init([1, 10, 10, 10, 10, 1], 3)
    b = net.init([1, 10, 10, 10, 10, 1], 3)
    assert np.array_equal(a.flat, b.flat)
    assert [w.shape for w in a.weights] == [(10, 1), (10, 10), (10, 10), (10, 10), (1, 10)]
    assert all(np.all(bias == 0) for bias in a.biases)
    for w in a.weights:
        limit = np.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w) <= limit)
    assert not np.array_equal(a.flat, net.init([1, 10, 10, 10, 10, 1], 4).flat)


@pytest.mark.parametrize("sizes", [[3], [], [1, 0, 1], [2, -1]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(NetError):
        net.init(sizes, 0)


def test_forward_zero_network():
    p = MlpParams((2, 5, 3), np.zeros(2 * 5 + 5 + 5 * 3 + 3))
    np.testing.assert_array_equal(net.forward(p, [0.3, -1.0]), np.zeros(3))


def test_forward_affine_single_layer():
    p = MlpParams.from_arrays([np.array([[2.5]])], [np.array([-0.5])])
    assert net.forward(p, [2.0])[0] == 4.5
    out, d = net.forward_with_input_derivative(p, [2.0], 0)
    assert out[0] == 4.5 and d[0] == 2.5


def test_forward_dimension_mismatch():
    p = net.init([2, 3, 1], 0)
    with pytest.raises(NetError):
        net.forward(p, [1.0])
    with pytest.raises(NetError):
        net.forward_with_input_derivative(p, [1.0, 2.0], 2)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive(seed):
    p = random_params([2, 7, 5, 3], seed)
    x = np.random.default_rng(seed).normal(size=2)
    np.testing.assert_allclose(net.forward(p, x), naive_forward(p, x), rtol=1e-14, atol=1e-15)


def test_forward_batch_matches_single():
    p = random_params([1, 10, 10, 2], 1)
    xs = np.linspace(-1, 1, 9)[:, None]
    batch = net.forward(p, xs)
    for i in range(9):
        np.testing.assert_allclose(batch[i], net.forward(p, xs[i]), rtol=1e-14, atol=1e-15)


def test_forward_saturation_is_finite():
    p = random_params([1, 10, 10, 1], 2)
    out = net.forward(p, np.array([[1e300], [-1e300], [0.0]]))
    assert np.all(np.isfinite(out))


def test_constant_network_has_zero_input_derivative():
    p = MlpParams((1, 4, 1), np.zeros(4 + 4 + 4 + 1))
    _, d = net.forward_with_input_derivative(p, [0.7], 0)
    assert d[0] == 0.0


def test_backward_zero_cotangent():
    p = random_params([1, 10, 10, 1], 0)
    g = net.backward(p, [0.3], [0.0])
    assert np.all(g.flat == 0.0)


def test_backward_affine():
    p = MlpParams.from_arrays([np.array([[1.7]])], [np.array([0.2])])
    g = net.backward(p, [0.6], [1.0])
    assert g.weights[0][0, 0] == 0.6 and g.biases[0][0] == 1.0


def test_backward_cotangent_shape():
    p = net.init([1, 3, 2], 0)
    with pytest.raises(NetError):
        net.backward(p, [0.1], [1.0])


def _fd_grad(p, x, cot, h=1e-6):
    out = np.empty_like(p.flat)
    for i in range(p.flat.size):
        up, dn = p.flat.copy(), p.flat.copy()
        up[i] += h
        dn[i] -= h
        fu = float(np.dot(cot, net.forward(MlpParams(p.layer_sizes, up), x)))
        fd = float(np.dot(cot, net.forward(MlpParams(p.layer_sizes, dn), x)))
        out[i] = (fu - fd) / (2 * h)
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1.0, 1.0))
def test_backward_matches_finite_difference(seed, x):
    p = random_params([1, 10, 10, 1], seed)
    g = net.backward(p, [x], [1.0]).flat
    fd = _fd_grad(p, [x], [1.0])
    # relative error per entry, floored at 1e-3 where an entry is itself tiny
    assert np.all(np.abs(g - fd) <= 1e-5 * np.maximum(np.abs(fd), 1e-3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1.0, 1.0))
def test_input_derivative_matches_finite_difference(seed, x):
    p = random_params([1, 10, 10, 10, 10, 2], seed)
    out, d = net.forward_with_input_derivative(p, [x], 0)
    np.testing.assert_array_equal(out, net.forward(p, [x]))
    h = 1e-6
    fd = (net.forward(p, [x + h]) - net.forward(p, [x - h])) / (2 * h)
    assert np.all(np.abs(d - fd) <= 1e-6 * np.maximum(np.abs(fd), 1e-2))


def test_backward_batch_sums_samples():
    p = random_params([1, 6, 2], 5)
    xs = np.array([[0.1], [-0.4], [0.9]])
    cot = np.array([[1.0, 0.5], [0.0, -2.0], [0.3, 0.3]])
    total = sum(net.backward(p, xs[i], cot[i]).flat for i in range(3))
    np.testing.assert_allclose(net.backward(p, xs, cot).flat, total, rtol=1e-13, atol=1e-15)


def test_adam_zero_gradient():
    p = net.init([1, 3, 1], 0)
    state = AdamState.fresh(p)
    new_p, new_state = net.adam_step(p, np.zeros_like(p.flat), state, TrainConfig())
    np.testing.assert_array_equal(new_p.flat, p.flat)
    assert new_state.step_count == 1 and state.step_count == 0


def test_adam_single_step_hand_computed():
    p = MlpParams.from_arrays([np.array([[0.0]])], [np.array([0.0])])
    state = AdamState.fresh(p)
    new_p, _ = net.adam_step(p, np.array([1.0, 0.0]), state, TrainConfig(learning_rate=1e-3))
    # m_hat = 1, v_hat = 1: step = lr * 1 / (1 + 1e-8)
    assert new_p.flat[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-15)
    assert new_p.flat[0] == pytest.approx(-9.9999999e-4, abs=1e-15)


def test_adam_rejects_non_finite():
    p = net.init([1, 2, 1], 0)
    g = np.zeros_like(p.flat)
    g[0] = np.nan
    with pytest.raises(NonFiniteGradientError):
        net.adam_step(p, g, AdamState.fresh(p), TrainConfig())


def test_adam_second_moment_nonnegative():
    p = net.init([1, 4, 1], 0)
    state = AdamState.fresh(p)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, state = net.adam_step(p, rng.normal(size=p.flat.size), state, TrainConfig())
    assert np.all(state.second_moment >= 0)


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"mse_stop": -1}, {"max_epochs": 0}])
def test_train_config_validation(kwargs):
    with pytest.raises(NetError):
        TrainConfig(**kwargs)


def test_serialization_round_trip():
    p = random_params([1, 10, 10, 10, 10, 2], 9)
    text = net.dumps(p, {"seed": 9, "epochs": 12, "final_mse": 1e-9, "stop_reason": "epoch-cap"})
    doc = json.loads(text)
    assert doc["format"] == "einn-mlp" and doc["version"] == 1
    assert doc["metadata"]["stop_reason"] == "epoch-cap"
    q = net.loads(text)
    np.testing.assert_array_equal(q.flat, p.flat)
    assert q.layer_sizes == p.layer_sizes


def test_serialization_rejects_bad_documents():
    p = net.init([1, 2, 1], 0)
    doc = net.params_to_dict(p)
    with pytest.raises(NetError):
        net.params_from_dict(dict(doc, version=2))
    with pytest.raises(NetError):
        net.params_from_dict(dict(doc, format="other"))
    with pytest.raises(NetError):
        net.params_from_dict(dict(doc, layer_sizes=[1, 3, 1]))
