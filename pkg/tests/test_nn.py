import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import Probe, fd_relative_error
from tokenprune.errors import DimensionError, StateError, ConfigError, TrainingError
from tokenprune.nn import (
    Adam, AdamState, GELU, LayerNorm, Linear, MultiHeadAttention, Parameter, ResidualMLP, adam_step,
    gelu, gelu_grad, layernorm_forward, matmul, multi_head_attention, sigmoid, sigmoid_grad, softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# -- matmul --------------------------------------------------------------------


def test_matmul_identity_and_hand_example():
    a = np.random.default_rng(0).standard_normal((3, 5))
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), ref, rtol=0, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 1)))


# -- elementwise -----------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)
    for c in (-1e3, 0.0, 7.5, 1e3):
        np.testing.assert_allclose(softmax_rows([[c, c, c]]), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax_rows([[1.0, 2.0]]), [[0.26894142, 0.73105858]], atol=1e-8)


def test_softmax_mask_excludes_entries():
    out = softmax_rows([[1.0, 5.0, 2.0]], mask=np.array([True, False, True]))
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], softmax_rows([[1.0, 2.0]])[0], atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(a):
    out = softmax_rows(a)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_rows(a + 3.25), out, atol=1e-12)


def test_activation_examples():
    assert gelu(0.0) == 0.0
    assert sigmoid(0.0) == 0.5
    assert sigmoid(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)
    assert sigmoid_grad(0.0) == 0.25
    # exact erf form: gelu(1) = Phi(1)
    assert gelu(1.0) == pytest.approx(0.8413447460685429, abs=1e-14)


@given(st.floats(-8, 8))
def test_activation_derivatives_match_differences(x):
    h = 1e-6
    assert gelu_grad(x) == pytest.approx((gelu(x + h) - gelu(x - h)) / (2 * h), abs=1e-7)
    assert sigmoid_grad(x) == pytest.approx((sigmoid(x + h) - sigmoid(x - h)) / (2 * h), abs=1e-7)


def test_layernorm_examples():
    ln = LayerNorm(3)
    np.testing.assert_array_equal(ln.forward(np.full((1, 3), 4.2)), np.zeros((1, 3)))
    out = LayerNorm(2).forward(np.array([[1.0, 3.0]]))
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)  # eps correction only
    assert abs(out.mean()) <= 1e-10


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 7)), elements=finite))
def test_layernorm_rows_are_centred(x):
    out = LayerNorm(x.shape[1]).forward(x)
    assert np.all(np.abs(out.mean(axis=1)) <= 1e-10)


def test_layernorm_functional_matches_module():
    x = np.random.default_rng(2).standard_normal((4, 5))
    ln = LayerNorm(5)
    ln.gain.value[:] = 2.0
    ln.shift.value[:] = -1.0
    np.testing.assert_array_equal(layernorm_forward(x, ln.gain, ln.shift), ln.forward(x))


# -- attention -------------------------------------------------------------------


def test_attention_single_token():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.standard_normal((1, 8))
    out = mha.forward(x)
    np.testing.assert_array_equal(mha._cache.probs, np.ones((2, 1, 1)))
    ref = LayerNorm(8).forward(x + x @ mha.w_v.value @ mha.w_o.value)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def _single_head_reference(x, wq, wk, wv, wo):
    q, k, v = x @ wq, x @ wk, x @ wv
    s = q @ k.T / math.sqrt(q.shape[1])
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    return a @ v @ wo


def test_multi_head_equals_sliced_single_heads():
    rng = np.random.default_rng(4)
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.standard_normal((3, 8))
    mha.forward(x)
    wq, wk, wv, wo = (p.value for p in (mha.w_q, mha.w_k, mha.w_v, mha.w_o))
    mixed = sum(
        _single_head_reference(x, wq[:, s], wk[:, s], wv[:, s], wo[s, :])
        for s in (slice(0, 4), slice(4, 8))
    )
    np.testing.assert_allclose(mha._cache.heads @ wo, mixed, atol=1e-12)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(8, 4, rng)
    x = rng.standard_normal((6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(multi_head_attention(x[perm], mha), multi_head_attention(x, mha)[perm], atol=1e-12)


def test_attention_key_mask_ignores_padding():
    rng = np.random.default_rng(6)
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.standard_normal((5, 8))
    padded = np.vstack([x, rng.standard_normal((2, 8))])
    mask = np.array([True] * 5 + [False] * 2)
    np.testing.assert_allclose(mha.forward(padded, mask)[:5], mha.forward(x), atol=1e-12)


def test_attention_rejects_bad_head_count():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


def test_backward_before_forward_raises():
    rng = np.random.default_rng(0)
    for layer in (Linear(3, 2, rng), LayerNorm(3), GELU(), MultiHeadAttention(4, 2, rng)):
        with pytest.raises(StateError):
            layer.backward(np.ones((1, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.standard_normal((4, 8))
    w = rng.standard_normal((4, 8))

    def loss(backward):
        out = mha.forward(x)
        if backward:
            mha.backward(w)
        return float(np.sum(out * w))

    assert fd_relative_error(loss, mha.parameters()) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_attention_input_gradient(seed):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(8, 4, rng)
    x = Probe(rng.standard_normal((2, 5, 8)))
    mask = np.ones((2, 5), bool)
    mask[1, 3:] = False
    w = rng.standard_normal((2, 5, 8))

    def loss(backward):
        out = mha.forward(x.value, mask)
        if backward:
            x.grad += mha.backward(w)
        return float(np.sum(out * w))

    assert fd_relative_error(loss, [x]) <= 1e-4


def test_zero_upstream_gradient_gives_zero_parameter_gradients():
    rng = np.random.default_rng(7)
    mha = MultiHeadAttention(8, 2, rng)
    mha.forward(rng.standard_normal((4, 8)))
    mha.zero_grad()
    mha.backward(np.zeros((4, 8)))
    assert all(not p.grad.any() for p in mha.parameters())


@pytest.mark.parametrize("seed", range(5))
def test_residual_mlp_and_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    block = ResidualMLP(6, 10, rng)
    x = Probe(rng.standard_normal((3, 4, 6)))
    w = rng.standard_normal((3, 4, 6))

    def loss(backward):
        out = block.forward(x.value)
        if backward:
            x.grad += block.backward(w)
        return float(np.sum(out * w))

    assert fd_relative_error(loss, block.parameters() + [x]) <= 1e-3


# -- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameter():
    p = Parameter([[1.0, -2.0]])
    adam_step(p, AdamState.like(p), lr=0.1)
    np.testing.assert_array_equal(p.value, [[1.0, -2.0]])


def test_adam_first_step_is_signed_lr():
    p = Parameter(np.zeros((1, 3)))
    p.grad[0] = [3.0, -0.02, 1e3]
    adam_step(p, AdamState.like(p), lr=0.01)
    np.testing.assert_allclose(p.value, [[-0.01, 0.01, -0.01]], rtol=1e-6)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(8)
    p = Parameter(rng.standard_normal((1, 4)))
    ref = p.value.copy()
    m = v = np.zeros((1, 4))
    state = AdamState.like(p)
    for t in range(1, 6):
        g = rng.standard_normal((1, 4))
        p.grad[:] = g
        adam_step(p, state, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.value, ref, atol=1e-14)


def test_adam_constant_gradient_moves_monotonically():
    p = Parameter([[0.5]])
    opt = Adam([p], lr=0.1)
    trail = [p.value[0, 0]]
    for _ in range(2):
        p.grad[:] = 2.0
        opt.step()
        trail.append(p.value[0, 0])
    assert trail[0] > trail[1] > trail[2]


def test_parameters_are_matrices():
    with pytest.raises(DimensionError):
        Parameter(np.ones(3))


def test_adam_rejects_frozen_and_nonfinite():
    p = Parameter(np.ones((1, 2)), "w")
    p.freeze()
    with pytest.raises(StateError):
        adam_step(p, AdamState.like(p), lr=0.1)
    q = Parameter(np.ones((1, 2)), "bad")
    q.grad[0, 0] = np.nan
    with pytest.raises(TrainingError, match="bad"):
        adam_step(q, AdamState.like(q), lr=0.1)


def test_module_state_dict_round_trip_and_mismatch():
    rng = np.random.default_rng(9)
    a, b = ResidualMLP(4, 6, rng), ResidualMLP(4, 6, rng)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.value, pb.value)
    bad = a.state_dict()
    bad.pop("fc1.weight")
    with pytest.raises(ConfigError):
        b.load_state_dict(bad)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(4, 2, rng)
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(mha.forward(x), mha.forward(x))
