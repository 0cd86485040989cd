import math

import numpy as np
import pytest
import torch

from villa.errors import ConfigError, DimensionError, EncodingError
from villa.numerics import autograd_check
from villa.reasoning import (
    EOS,
    Responder,
    ResponderConfig,
    Vocabulary,
    build_seg_codebook,
    generate_response,
    project_seg_tokens,
    seg_symbols,
    text_loss,
)

WORDS = ["the", "is", "red", "blue", "circle", "square"]


def make_responder(d=8, n_tok=2, seed=0):
    torch.manual_seed(seed)
    vocab = Vocabulary.build(WORDS, n_tok)
    return Responder(ResponderConfig(hidden=d, seg_tokens=n_tok), vocab)


# numpy re-implementation of the causal transformer, used as the oracle

def _ln(x, mod):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + mod.eps) * mod.weight.detach().numpy() + mod.bias.detach().numpy()


def _lin(x, mod):
    y = x @ mod.weight.detach().numpy().T
    return y + mod.bias.detach().numpy() if mod.bias is not None else y


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def manual_forward(resp, x):
    s, d = x.shape
    h = x + resp.pos_embed.detach().numpy()[:s]
    for b in resp.blocks:
        z = _ln(h, b.ln1)
        q, k, v = _lin(z, b.wq), _lin(z, b.wk), _lin(z, b.wv)
        logits = q @ k.T / math.sqrt(d)
        logits = np.where(np.tril(np.ones((s, s), dtype=bool)), logits, -np.inf)
        w = np.exp(logits - logits.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        h = h + _lin(w @ v, b.wo)
        h = h + _lin(_gelu(_lin(_ln(h, b.ln2), b.mlp.fc1)), b.mlp.fc2)
    return _ln(h, resp.ln_f)


def inputs(rng, d=8, n_vis=3, n_ctx=2):
    return torch.as_tensor(rng.normal(size=(n_vis, d))), torch.as_tensor(rng.normal(size=(n_ctx, d)))


def test_codebook_determinism_count_range():
    a, b = build_seg_codebook(3, 16, seed=7), build_seg_codebook(3, 16, seed=7)
    assert torch.equal(a.stacked(), b.stacked())
    assert build_seg_codebook(1, 16, 0).stacked().shape == (2, 16)
    assert float(a.stacked().abs().max()) <= 1 / math.sqrt(16)
    with pytest.raises(ConfigError):
        build_seg_codebook(0, 16, 0)


def test_vocabulary_limits_and_placeholders():
    with pytest.raises(ConfigError):
        Vocabulary([f"w{i}" for i in range(65)])
    with pytest.raises(ConfigError):
        Responder(ResponderConfig(hidden=8, seg_tokens=3), Vocabulary.build(WORDS, 2))
    with pytest.raises(EncodingError):
        Vocabulary.build(WORDS, 2).encode(["purple"])


def test_seg_states_match_manual_forward(rng):
    resp = make_responder()
    bank = build_seg_codebook(2, 8, 1)
    vis, ctx = inputs(rng)
    answer = ["the", "red", "circle", "is"]
    out = generate_response(vis, ctx, bank, resp, answer=answer)
    seq = torch.cat([vis, ctx, resp.embed(["<bos>"] + answer), bank.frame, bank.video]).detach().numpy()
    expect = manual_forward(resp, seq)
    np.testing.assert_allclose(out.seg_states.detach().numpy(), expect[-4:], atol=1e-12, rtol=0)


def test_template_layout_and_determinism(rng):
    resp = make_responder()
    bank = build_seg_codebook(2, 8, 1)
    vis, ctx = inputs(rng)
    slots = (("red", "blue"), ("circle", "square"))
    a = generate_response(vis, ctx, bank, resp, object_words=slots)
    b = generate_response(vis, ctx, bank, resp, object_words=slots)
    assert a.text_tokens == b.text_tokens and torch.equal(a.seg_states, b.seg_states)
    assert a.text_tokens[-5:] == seg_symbols(2) + [EOS]
    assert a.text_tokens[0] == "the" and a.text_tokens[3] == "is"
    assert a.text_tokens[1] in slots[0] and a.text_tokens[2] in slots[1]
    assert a.seg_states.shape == (4, 8) and len(a.targets) == a.logits.shape[0]


def test_greedy_slot_picks_argmax(rng):
    resp = make_responder()
    bank = build_seg_codebook(2, 8, 1)
    vis, ctx = inputs(rng)
    out = generate_response(vis, ctx, bank, resp, object_words=("red", "blue"))
    prompt = torch.cat([vis, ctx, resp.embed(["<bos>", "the"])])
    _, logits = resp(prompt)
    ids = resp.vocab.encode(["red", "blue"])
    assert out.text_tokens[1] == ["red", "blue"][int(torch.argmax(logits[-1, ids]))]


def test_seg_states_depend_on_visual_tokens(rng):
    resp = make_responder()
    bank = build_seg_codebook(2, 8, 1)
    vis, ctx = inputs(rng)
    answer = ["the", "red", "circle", "is"]
    base = generate_response(vis, ctx, bank, resp, answer=answer).seg_states
    vis2 = vis.clone()
    vis2[1] += torch.as_tensor(rng.normal(size=8))  # not a constant shift: layer norm would erase that
    moved = generate_response(vis2, ctx, bank, resp, answer=answer).seg_states
    assert float((moved - base).abs().max().detach()) > 1e-6


def test_causal_prefix_property(rng):
    resp = make_responder()
    x = torch.as_tensor(rng.normal(size=(10, 8)))
    h_full, _ = resp(x)
    h_pre, _ = resp(x[:6])
    assert torch.allclose(h_full[:6], h_pre, atol=1e-12)


def test_width_mismatch_and_length_limit(rng):
    resp = make_responder()
    bank = build_seg_codebook(2, 8, 1)
    with pytest.raises(DimensionError):
        generate_response(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(1, 8, dtype=torch.float64), bank, resp,
                          answer=["the", "red", "circle", "is"])
    with pytest.raises(ConfigError):
        resp(torch.zeros(65, 8, dtype=torch.float64))


def test_project_seg_tokens_cases(rng):
    s = torch.as_tensor(rng.normal(size=(4, 8)))
    qf, qv = project_seg_tokens(s, torch.eye(8, dtype=torch.float64))
    assert torch.equal(qf, s[:2]) and torch.equal(qv, s[2:])
    qf, qv = project_seg_tokens(s, torch.zeros(8, 5, dtype=torch.float64))
    assert torch.count_nonzero(qf) + torch.count_nonzero(qv) == 0
    phi = rng.normal(size=(8, 5))
    qf, qv = project_seg_tokens(s, torch.as_tensor(phi))
    np.testing.assert_allclose(torch.cat([qf, qv]).numpy(), s.numpy() @ phi, atol=1e-12)
    with pytest.raises(DimensionError):
        project_seg_tokens(s, torch.zeros(4, 4, dtype=torch.float64))


def test_text_loss_cases(rng):
    targets = [3, 1, 7]
    logits = torch.zeros(3, 64, dtype=torch.float64)
    logits[torch.arange(3), targets] = 30.0
    assert float(text_loss(logits, targets)) < 1e-9
    assert abs(float(text_loss(torch.zeros(3, 64, dtype=torch.float64), targets)) - math.log(64)) < 1e-12
    z = rng.normal(size=(3, 10))
    tg = [0, 4, 9]
    expect = -np.mean([z[i, tg[i]] - np.log(np.exp(z[i]).sum()) for i in range(3)])
    assert abs(float(text_loss(torch.as_tensor(z), tg)) - expect) < 1e-12
    with pytest.raises(EncodingError):
        text_loss(torch.as_tensor(z), [0, 4, 10])


def test_text_loss_gradient(rng):
    tg = [2, 0, 5]
    assert autograd_check(lambda z: text_loss(z, tg), torch.as_tensor(rng.normal(size=(3, 6)))).passed(1e-4)


def test_responder_gradients(rng):
    from villa.numerics import param_grad_check

    resp = make_responder()
    bank = build_seg_codebook(2, 8, 1)
    vis, ctx = inputs(rng)
    w = torch.as_tensor(rng.normal(size=(4, 8)))

    def loss():
        out = generate_response(vis, ctx, bank, resp, answer=["the", "blue", "square", "is"])
        return (out.seg_states * w).sum() + text_loss(out.logits, out.targets)

    for p in (resp.blocks[0].wq.weight, resp.blocks[1].mlp.fc1.weight, resp.tok_embed):
        assert param_grad_check(loss, p, indices=range(0, p.numel(), 5)).passed(1e-4)
