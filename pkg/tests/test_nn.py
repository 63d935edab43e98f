import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbdc import nn
from qbdc.committee import DropoutMask

from conftest import perturb_params, small_conv_net, small_mlp
from oracles import cross_entropy_mp, forward_loop, numeric_grad, rel_error


def test_identity_dense_relu():
    net = nn.Network([nn.Dense(2), nn.ReLU()], (2,),
                     [np.eye(2), np.zeros(2)])
    logits, trace = nn.forward(net, np.array([[1.0, -2.0]]))
    np.testing.assert_array_equal(logits, [[1.0, 0.0]])


def test_keep_all_mask_is_noop(rng):
    net = small_conv_net(rng)
    x = rng.random((3, 2, 8, 8))
    plain, _ = nn.forward(net, x)
    masked, _ = nn.forward(net, x, DropoutMask.keep_all(net, p=0.0))
    np.testing.assert_array_equal(plain, masked)


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    net = perturb_params(small_conv_net(rng), rng)
    x = rng.random((2, 2, 8, 8))
    logits, trace = nn.forward(net, x)
    np.testing.assert_allclose(logits, forward_loop(net, x), rtol=0, atol=1e-10)
    np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-6)


def test_mnist_architecture_shapes(rng):
    net = nn.Network.build(nn.mnist_layers(), (1, 28, 28), rng)
    assert net.shapes[-1] == (10,)
    assert net.depth == 5
    assert net.param_shapes()[:4] == [(20, 1, 3, 3), (20,), (40, 20, 3, 3), (40,)]
    # 28 -> 26 -> 13 -> 11 -> 5, 40 * 5 * 5 features into the first dense layer
    assert net.param_shapes()[4] == (1000, 100)
    assert net.hidden_widths() == [20, 40, 100, 100]


def test_shape_errors_name_layer(rng):
    net = small_conv_net(rng)
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(net, rng.random((2, 3, 8, 8)))
    bad = DropoutMask({0: np.ones(5, dtype=bool)}, 0.5)
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(net, rng.random((2, 2, 8, 8)), bad)
    with pytest.raises(nn.ShapeError, match="output layer"):
        nn.forward(net, rng.random((1, 2, 8, 8)), DropoutMask({3: np.ones(4, dtype=bool)}, 0.5))


def test_invalid_architectures():
    with pytest.raises(ValueError):
        nn.Conv(0)
    with pytest.raises(ValueError, match="final"):
        nn.Network.build([nn.Dense(3), nn.Softmax(), nn.Dense(2)], (4,), np.random.default_rng(0))
    with pytest.raises(nn.ShapeError):
        nn.Network.build([nn.Conv(2, 5, 5), nn.Dense(2)], (1, 3, 3), np.random.default_rng(0))
    with pytest.raises(ValueError, match="bad layer token"):
        nn.parse_architecture("c20-q2", 10)


def test_perfect_prediction_zero_logit_grad():
    # a huge logit margin makes P = one_hot(y) exactly in double precision
    net = nn.Network([nn.Dense(3), nn.Softmax()], (1,), [np.array([[0.0, 1000.0, 0.0]]), np.zeros(3)])
    _, trace = nn.forward(net, np.array([[1.0]]))
    np.testing.assert_array_equal(trace.probs, [[0.0, 1.0, 0.0]])
    g = nn.backward(net, trace, np.array([1]))
    np.testing.assert_array_equal(g.params[0], 0)
    np.testing.assert_array_equal(g.params[1], 0)


def test_two_class_half_logit_gradient():
    # bias gradient of a single-sample dense layer equals the logit gradient
    net = nn.Network([nn.Dense(2), nn.Softmax()], (1,), [np.zeros((1, 2)), np.zeros(2)])
    _, trace = nn.forward(net, np.array([[0.3]]))
    np.testing.assert_allclose(trace.probs, [[0.5, 0.5]])
    g = nn.backward(net, trace, np.array([0]))
    np.testing.assert_allclose(g.params[1], [-0.5, 0.5])


def _loss_fn(net, x, y, mask=None):
    return lambda: nn.softmax_cross_entropy(nn.forward(net, x, mask)[0], y)


@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    net = perturb_params(small_conv_net(rng), rng)
    x = rng.random((3, 2, 8, 8))
    y = rng.integers(0, 4, 3)
    _, trace = nn.forward(net, x)
    g = nn.backward(net, trace, y, want_input_grad=True)
    f = _loss_fn(net, x, y)
    for k, p in enumerate(net.params):
        assert rel_error(g.params[k], numeric_grad(f, p)) < 1e-4, f"param {k}"
    assert rel_error(g.input, numeric_grad(f, x)) < 1e-4


def test_backward_with_mask_matches_finite_differences(rng):
    net = perturb_params(small_conv_net(rng), rng)
    mask = DropoutMask.sample(net, 0.4, rng)
    x = rng.random((2, 2, 8, 8))
    y = np.array([1, 3])
    _, trace = nn.forward(net, x, mask)
    g = nn.backward(net, trace, y, want_input_grad=True)
    f = _loss_fn(net, x, y, mask)
    for k, p in enumerate(net.params):
        assert rel_error(g.params[k], numeric_grad(f, p)) < 1e-4, f"param {k}"
    assert rel_error(g.input, numeric_grad(f, x)) < 1e-4


def test_backward_first_param_skips_lower_layers(rng):
    net = small_conv_net(rng)
    x, y = rng.random((2, 2, 8, 8)), np.array([0, 1])
    _, trace = nn.forward(net, x)
    full = nn.backward(net, trace, y)
    last = nn.backward(net, trace, y, first_param=net.depth - 1)
    assert all(g is None for g in last.params[:-2])
    np.testing.assert_array_equal(last.params[-2], full.params[-2])


def test_backward_rejects_foreign_trace(rng):
    a, b = small_mlp(rng), small_mlp(rng)
    _, trace = nn.forward(a, rng.random((2, 6)))
    with pytest.raises(ValueError, match="trace"):
        nn.backward(b, trace, np.array([0, 1]))
    with pytest.raises(nn.ShapeError):
        nn.backward(a, trace, np.array([0, 1, 2]))


def test_softmax_cross_entropy_cases(rng):
    assert nn.softmax_cross_entropy(np.zeros((1, 10)), np.array([3])) == pytest.approx(math.log(10))
    assert nn.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0])) == pytest.approx(0.0, abs=1e-300)
    logits = rng.standard_normal((6, 5)) * 4
    y = rng.integers(0, 5, 6)
    assert abs(nn.softmax_cross_entropy(logits, y) - cross_entropy_mp(logits, y)) < 1e-9
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_predict_tie_breaks_low_and_matches_forward(rng):
    ident = nn.Network([nn.Dense(2), nn.Softmax()], (2,), [np.eye(2), np.zeros(2)])
    assert nn.predict(ident, np.array([[0.1, 0.9]]))[0] == 1
    assert nn.predict(ident, np.array([[0.5, 0.5]]))[0] == 0
    net = small_conv_net(rng)
    x = rng.random((3, 2, 8, 8))
    np.testing.assert_array_equal(nn.predict(net, x), nn.forward(net, x)[0].argmax(axis=1))


def test_determinism(rng):
    net = small_conv_net(rng, dtype=np.float32)
    mask = DropoutMask.sample(net, 0.5, rng)
    x = rng.random((4, 2, 8, 8)).astype(np.float32)
    a, _ = nn.forward(net, x, mask)
    b, _ = nn.forward(net, x, mask)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_softmax_is_normalized(seed, p):
    rng = np.random.default_rng(seed)
    net = small_conv_net(rng)
    mask = DropoutMask.sample(net, p, rng)
    _, trace = nn.forward(net, rng.random((3, 2, 8, 8)) * 5, mask)
    assert np.all(trace.probs > 0)
    np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-6)
    assert trace.logits.shape == (3, 4)


def test_standard_dropout_training_forward(rng):
    net = small_mlp(rng)
    x = rng.random((50, 6))
    _, trace = nn.forward(net, x, dropout=0.5, rng=np.random.default_rng(0))
    mult = trace.multipliers[0]
    assert mult.shape == (50, 7)
    assert set(np.unique(mult)) <= {0.0, 2.0}
    # zero rate is the plain path
    a, _ = nn.forward(net, x, dropout=0.0, rng=rng)
    np.testing.assert_array_equal(a, nn.forward(net, x)[0])
