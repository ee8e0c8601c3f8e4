import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaaug.augment import EMBED_DIM
from metaaug.nn import DenseLayer, flatten, unflatten
from metaaug.policy import PolicyNetwork, grad_theta, normalize_weights, normalized_coeffs, weight


def random_policy(rng, feature_dim=6, hidden=5, scale=0.5):
    return PolicyNetwork(
        DenseLayer(rng.normal(0, scale, (hidden, feature_dim)), rng.normal(0, 0.2, hidden), "relu"),
        DenseLayer(rng.normal(0, scale / 3, (hidden, EMBED_DIM)), rng.normal(0, 0.2, hidden), "relu"),
        DenseLayer(rng.normal(0, scale, (1, 2 * hidden)), rng.normal(0, 0.2, 1), "sigmoid"),
    )


def zero_policy(feature_dim=6, hidden=5):
    return random_policy(np.random.default_rng(0), feature_dim, hidden).with_params(
        [np.zeros(p.shape) for p in random_policy(np.random.default_rng(0), feature_dim, hidden).params()])


def test_zero_parameters_give_half():
    pol = zero_policy()
    rng = np.random.default_rng(1)
    w = pol.weights(rng.normal(size=(4, 6)), rng.uniform(0, 11, (4, EMBED_DIM)))
    assert np.array_equal(w, np.full(4, 0.5))


def test_init_head_is_zero():
    pol = PolicyNetwork.init(8, np.random.default_rng(2))
    assert pol.branch_feat.out_size == 100 and pol.branch_emb.out_size == 100
    f = np.random.default_rng(3).normal(size=(3, 8))
    assert np.array_equal(pol.weights(f, np.ones((3, EMBED_DIM))), np.full(3, 0.5))


def test_forward_matches_matrix_oracle():
    rng = np.random.default_rng(4)
    pol = random_policy(rng)
    f, e = rng.normal(size=6), rng.uniform(0, 11, EMBED_DIM)
    wf, bf, we, be, wh, bh = pol.params()
    h = np.concatenate([np.maximum(wf @ f + bf, 0), np.maximum(we @ e + be, 0)])
    oracle = 1 / (1 + np.exp(-(wh[0] @ h + bh[0])))
    assert weight(f, e, pol) == pytest.approx(oracle, rel=1e-14)


def test_dimension_mismatch():
    pol = random_policy(np.random.default_rng(5))
    with pytest.raises(ValueError):
        pol.weights(np.zeros((1, 7)), np.zeros((1, EMBED_DIM)))
    with pytest.raises(ValueError):
        pol.weights(np.zeros((1, 6)), np.zeros((1, 27)))


def test_output_stays_in_open_interval_when_saturated():
    rng = np.random.default_rng(6)
    pol = random_policy(rng, scale=30.0)
    w = pol.weights(rng.normal(size=(200, 6)), rng.uniform(0, 11, (200, EMBED_DIM)))
    assert np.all((w > 0) & (w < 1))


def test_monotone_in_head_bias():
    rng = np.random.default_rng(6)
    pol = random_policy(rng)
    f, e = rng.normal(size=(50, 6)), rng.uniform(0, 11, (50, EMBED_DIM))
    w = pol.weights(f, e)
    params = pol.params()
    params[5] = params[5] + 0.1
    assert np.all(pol.with_params(params).weights(f, e) > w)


# -- normalization -----------------------------------------------------------


def test_normalize_uniform_batch():
    assert np.array_equal(normalize_weights(np.full(7, 0.3)), np.ones(7))


def test_normalize_two_values():
    assert np.allclose(normalize_weights([0.2, 0.6]), [0.5, 1.5], rtol=0, atol=1e-15)


def test_normalize_empty():
    with pytest.raises(ValueError):
        normalize_weights([])


@settings(max_examples=200, deadline=None)
@given(raw=st.lists(st.floats(1e-6, 1 - 1e-6), min_size=1, max_size=64), c=st.floats(1e-3, 1e3))
def test_normalize_mean_one_and_scale_invariant(raw, c):
    raw = np.array(raw)
    out = normalize_weights(raw)
    assert abs(out.mean() - 1.0) <= 1e-12
    assert np.max(np.abs(normalize_weights(c * raw) - out)) <= 1e-12


# -- gradients ---------------------------------------------------------------


def test_grad_at_zero_parameters():
    pol = zero_policy()
    g = grad_theta(np.ones(6), np.ones(EMBED_DIM), pol)
    assert np.all(g[4] == 0)
    assert g[5][0] == 0.25


LD = np.longdouble


def oracle_weights(params, f, e):
    """Independent extended-precision forward pass."""
    wf, bf, we, be, wh, bh = (np.asarray(p, dtype=LD) for p in params)
    f, e = np.atleast_2d(np.asarray(f, dtype=LD)), np.atleast_2d(np.asarray(e, dtype=LD))
    h = np.concatenate([np.maximum(f @ wf.T + bf, 0), np.maximum(e @ we.T + be, 0)], axis=1)
    return 1 / (1 + np.exp(-(h @ wh[0] + bh[0])))


def fd(fun, pol, h=1e-5):
    """Central differences of ``fun(params)`` in long double."""
    params = pol.params()
    flat = flatten(params).astype(LD)
    out = np.empty(flat.size)
    for i in range(flat.size):
        p, m = flat.copy(), flat.copy()
        p[i] += h
        m[i] -= h
        out[i] = (fun(unflatten(p, params)) - fun(unflatten(m, params))) / (2 * h)
    return out


def rel_err(a, b):
    big = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / big))


def test_grad_theta_matches_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        pol = random_policy(rng)
        f, e = rng.normal(size=6), rng.uniform(0, 11, EMBED_DIM)
        a = flatten(grad_theta(f, e, pol))
        worst = max(worst, rel_err(a, fd(lambda q: oracle_weights(q, f, e)[0], pol)))
    assert worst <= 1e-5


def test_normalized_weight_gradient_includes_cross_terms():
    rng = np.random.default_rng(8)
    for _ in range(10):
        pol = random_policy(rng)
        f, e = rng.normal(size=(5, 6)), rng.uniform(0, 11, (5, EMBED_DIM))
        u = rng.normal(size=5)
        raw, cache = pol.forward(f, e)
        a = flatten(pol.backward(cache, normalized_coeffs(raw, u)))

        def normalized(q):
            r = oracle_weights(q, f, e)
            return u @ (r * (len(r) / r.sum()))

        assert rel_err(a, fd(normalized, pol)) <= 1e-5


def test_single_sample_normalized_gradient_vanishes():
    rng = np.random.default_rng(9)
    pol = random_policy(rng)
    raw, _ = pol.forward(rng.normal(size=(1, 6)), rng.uniform(0, 11, (1, EMBED_DIM)))
    assert np.allclose(normalized_coeffs(raw, [3.0]), 0.0, atol=1e-15)
