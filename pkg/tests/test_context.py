import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from villa.context import CAMConfig, ContextAggregation, FFN, aggregate_context, condense_top_k
from villa.errors import ConfigError, EmptyContextError
from villa.numerics import autograd_check, param_grad_check


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


@pytest.fixture
def ffn():
    torch.manual_seed(3)
    return FFN(2, 4)


def test_single_visual_token(rng, ffn):
    f = t(rng.normal(size=(1, 2)))
    e, attn = aggregate_context(t(rng.normal(size=(3, 2))), f, ffn)
    assert torch.equal(attn, torch.ones(3, 1, dtype=torch.float64))
    assert torch.allclose(e, ffn(f.expand(3, 2)), atol=1e-15)


def test_zero_features_give_identical_rows(rng, ffn):
    e, _ = aggregate_context(t(rng.normal(size=(3, 2))), t(np.zeros((4, 2))), ffn)
    assert torch.equal(e, ffn(torch.zeros(3, 2, dtype=torch.float64)))
    assert torch.equal(e[0], e[1]) and torch.equal(e[1], e[2])


def test_matches_step_by_step_oracle(rng, ffn):
    x, f = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    s = x @ f.T / np.sqrt(2)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    w1, b1 = ffn.fc1.weight.detach().numpy(), ffn.fc1.bias.detach().numpy()
    w2, b2 = ffn.fc2.weight.detach().numpy(), ffn.fc2.bias.detach().numpy()
    h = (a @ f) @ w1.T + b1
    h = 0.5 * h * (1 + np.vectorize(__import__("math").erf)(h / np.sqrt(2)))
    expect = h @ w2.T + b2
    e, attn = aggregate_context(t(x), t(f), ffn)
    np.testing.assert_allclose(attn.numpy(), a, atol=1e-12, rtol=0)
    np.testing.assert_allclose(e.detach().numpy(), expect, atol=1e-12, rtol=0)


def test_residual_variant(rng, ffn):
    x, f = t(rng.normal(size=(3, 2))), t(rng.normal(size=(4, 2)))
    e, attn = aggregate_context(x, f, ffn, residual=True)
    h = x + attn @ f
    assert torch.allclose(e, h + ffn(h), atol=1e-14)


def test_empty_context_error(ffn):
    with pytest.raises(EmptyContextError):
        aggregate_context(t(np.zeros((3, 2))), t(np.zeros((0, 2))), ffn)


def test_condense_keep_all_preserves_order(rng):
    e = t(rng.normal(size=(5, 3)))
    out = condense_top_k(e, t(rng.uniform(size=(5, 7))), 5)
    assert out.source_indices == [0, 1, 2, 3, 4] and torch.equal(out.rows, e)


def test_condense_prefers_peaked_row():
    attn = t([[0.25] * 4, [0.25] * 4, [0, 0, 1.0, 0], [0.25] * 4])
    assert condense_top_k(t(np.eye(4)), attn, 1).source_indices == [2]


def test_condense_tie_break_smaller_index():
    assert condense_top_k(t(np.eye(4)), t(np.full((4, 3), 1 / 3)), 2).source_indices == [0, 1]


def test_condense_rejects_k_above_m():
    with pytest.raises(ConfigError):
        condense_top_k(t(np.eye(3)), t(np.eye(3)), 4)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_condense_subset_and_column_permutation_invariance(seed, k):
    r = np.random.default_rng(seed)
    m, n = 6, 5
    e = t(r.normal(size=(m, 3)))
    attn = t(r.dirichlet(np.ones(n), size=m))
    out = condense_top_k(e, attn, k)
    assert len(out.rows) == k and out.source_indices == sorted(set(out.source_indices))
    for row, i in zip(out.rows, out.source_indices):
        assert torch.equal(row, e[i])
    perm = r.permutation(n)
    assert condense_top_k(e, attn[:, perm], k).source_indices == out.source_indices


def test_module_condenses_each_frame(rng):
    torch.manual_seed(0)
    cam = ContextAggregation(4, CAMConfig(queries=6, keep=3))
    out = cam(t(rng.normal(size=(6, 4))), t(rng.normal(size=(3, 5, 4))))
    assert len(out) == 3 and all(c.rows.shape == (3, 4) for c in out)


def test_gradients_through_cam(rng, ffn):
    x, f = t(rng.normal(size=(3, 2))), t(rng.normal(size=(4, 2)))
    w = t(rng.normal(size=(3, 2)))
    assert autograd_check(lambda z: (aggregate_context(z, f, ffn)[0] * w).sum(), x).passed(1e-4)
    assert autograd_check(lambda z: (aggregate_context(x, z, ffn)[0] * w).sum(), f).passed(1e-4)
    assert param_grad_check(lambda: (aggregate_context(x, f, ffn)[0] * w).sum(), ffn.fc1.weight).passed(1e-4)
    assert param_grad_check(lambda: (aggregate_context(x, f, ffn)[0] * w).sum(), ffn.fc2.weight).passed(1e-4)
