import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpca.nn_core import (
    ContractError,
    MlpParams,
    SgdState,
    backward,
    cross_entropy,
    forward,
    predict,
    predict_from_probs,
    sgd_step,
)


def random_net(rng, d, h, c):
    return MlpParams(rng.normal(size=(h, d)), rng.normal(size=h), rng.normal(size=(c, h)), rng.normal(size=c))


def numeric_grad(params, x, y, eps=1e-5):
    out = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + eps
            up = cross_entropy(forward(params, x), y)
            arr[i] = old - eps
            down = cross_entropy(forward(params, x), y)
            arr[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def test_zero_net_gives_uniform_probs():
    p = MlpParams.zeros(4, 3, 5)
    trace = forward(p, np.random.default_rng(0).normal(size=(7, 4)))
    np.testing.assert_allclose(trace.probs, 0.2)


def test_identity_like_net_hand_softmax():
    p = MlpParams([[1.0]], [0.0], [[1.0], [0.0]], [0.0, 0.0])
    trace = forward(p, np.array([[2.0]]))
    np.testing.assert_array_equal(trace.logits, [[2.0, 0.0]])
    e2 = math.exp(2.0)
    np.testing.assert_allclose(trace.probs, [[e2 / (e2 + 1), 1 / (e2 + 1)]], rtol=1e-15)


def test_empty_batch():
    p = MlpParams.zeros(3, 2, 2)
    trace = forward(p, np.zeros((0, 3)))
    assert trace.probs.shape == (0, 2)
    assert cross_entropy(trace, np.zeros(0, dtype=int)) == 0.0
    g = backward(p, trace, np.zeros(0, dtype=int))
    assert all(np.all(a == 0) for a in g.arrays())


def test_forward_shape_mismatch():
    with pytest.raises(ContractError):
        forward(MlpParams.zeros(3, 2, 2), np.zeros((4, 5)))


def test_params_shape_contract():
    with pytest.raises(ContractError):
        MlpParams(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 4)), np.zeros(2))


def test_cross_entropy_values():
    uniform = forward(MlpParams.zeros(2, 2, 2), np.zeros((3, 2)))
    assert cross_entropy(uniform, [0, 1, 1]) == pytest.approx(math.log(2))
    trace = uniform
    trace.probs = np.array([[0.9, 0.1]])
    assert cross_entropy(trace, [1]) == pytest.approx(2.302585092994046)
    trace.probs = np.array([[1.0, 0.0]])
    assert cross_entropy(trace, [0]) == 0.0
    # floor keeps an impossible label finite
    assert cross_entropy(trace, [1]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_bad_label():
    trace = forward(MlpParams.zeros(2, 2, 3), np.zeros((2, 2)))
    with pytest.raises(ContractError):
        cross_entropy(trace, [0, 3])
    with pytest.raises(ContractError):
        cross_entropy(trace, [0])


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, h, c, n = (int(v) for v in rng.integers(1, [9, 9, 5, 17]))
    c = max(c, 2)
    p = random_net(rng, d, h, c)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, c, size=n)
    analytic = backward(p, forward(p, x), y).arrays()
    assert max_rel_err(analytic, numeric_grad(p, x, y)) < 1e-4


def test_confident_correct_batch_has_vanishing_gradient():
    x = np.array([[1.0], [2.0]])
    norms = []
    for scale in (1.0, 5.0, 20.0):
        p = MlpParams([[1.0]], [0.0], [[scale], [-scale]], [0.0, 0.0])
        g = backward(p, forward(p, x), [0, 0])
        norms.append(sum(float(np.sum(a**2)) for a in g.arrays()))
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] < 1e-20


def test_sgd_plain_step():
    p = MlpParams.zeros(2, 2, 2)
    g = MlpParams(np.ones((2, 2)), np.ones(2), np.full((2, 2), 2.0), np.full(2, 3.0))
    new, _ = sgd_step(p, g, SgdState(learning_rate=1.0, momentum=0.0, weight_decay=0.0))
    for a, b in zip(new.arrays(), g.arrays()):
        np.testing.assert_array_equal(a, -b)


def test_sgd_zero_grad_is_fixed_point():
    rng = np.random.default_rng(1)
    p = random_net(rng, 3, 4, 2)
    zero = MlpParams.zeros(3, 4, 2)
    new, _ = sgd_step(p, zero, SgdState(learning_rate=0.3, momentum=0.9, weight_decay=0.0))
    for a, b in zip(new.arrays(), p.arrays()):
        np.testing.assert_array_equal(a, b)


def test_sgd_momentum_two_steps():
    p = MlpParams.zeros(1, 1, 2)
    g = MlpParams([[1.0]], [1.0], [[1.0], [1.0]], [1.0, 1.0])
    state = SgdState(learning_rate=1.0, momentum=0.9, weight_decay=0.0)
    p1, state = sgd_step(p, g, state)
    p2, state = sgd_step(p1, g, state)
    for a in p2.arrays():
        np.testing.assert_allclose(a, -2.9)


def test_sgd_state_validation():
    with pytest.raises(ContractError):
        SgdState(learning_rate=0.0)
    with pytest.raises(ContractError):
        SgdState(momentum=1.0)


def test_predict_and_tie_break():
    cls, conf = predict_from_probs(np.array([[0.2, 0.8], [0.5, 0.5]]))
    assert cls.tolist() == [1, 0]
    assert conf.tolist() == [0.8, 0.5]
    cls, _ = predict(MlpParams.zeros(3, 2, 4), np.random.default_rng(0).normal(size=(5, 3)))
    assert cls.tolist() == [0] * 5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
def test_softmax_rows_sum_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    p = random_net(rng, 3, 4, 3)
    p.w2 *= scale
    probs = forward(p, rng.normal(size=(6, 3)) * scale).probs
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((probs >= 0) & (probs <= 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = random_net(rng, 4, 5, 3)
    x = rng.normal(size=(9, 4))
    y = rng.integers(0, 3, size=9)
    perm = rng.permutation(9)
    a = cross_entropy(forward(p, x), y)
    b = cross_entropy(forward(p, x[perm]), y[perm])
    assert a == pytest.approx(b, rel=1e-12)


def test_features_are_relu_of_first_layer():
    rng = np.random.default_rng(3)
    p = random_net(rng, 4, 6, 3)
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(forward(p, x).features, np.maximum(x @ p.w1.T + p.b1, 0))
