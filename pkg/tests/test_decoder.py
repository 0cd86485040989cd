import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from villa.decoder import (
    DecoderConfig,
    DecoderLayer,
    DecoderState,
    FFN,
    VideoFrameDecoder,
    decoder_layer,
    logits_to_tracklets,
    predict_masks,
    video_frame_aggregate,
)
from villa.encoder import EncoderConfig, VisualEncoder
from villa.errors import ConfigError
from villa.numerics import param_grad_check


def t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# ---- momentum aggregation

def test_gamma_zero_is_identity(rng):
    q_v = t(rng.normal(size=(3, 4)))
    assert torch.equal(video_frame_aggregate(q_v, t(rng.normal(size=(3, 4))), 0.0), q_v)


def test_gamma_one_single_frame_row_broadcasts(rng):
    row = t(rng.normal(size=(1, 4)))
    out = video_frame_aggregate(t(rng.normal(size=(3, 4))), row, 1.0)
    assert torch.allclose(out, row.expand(3, 4), atol=1e-15)


def test_worked_value():
    out = video_frame_aggregate(t([[1.0, 0.0]]), t([[1.0, 0.0], [0.0, 1.0]]), 0.03)
    e = math.e
    assert np.allclose(out.numpy(), [[0.99193, 0.00807]], atol=1e-5)
    assert np.allclose(out.numpy(), [[0.97 + 0.03 * e / (e + 1), 0.03 / (e + 1)]], atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_update_is_bounded_by_convex_hull(seed, gamma):
    r = np.random.default_rng(seed)
    q_v, q_f = t(r.normal(size=(3, 4)) * 3), t(r.normal(size=(5, 4)) * 3)
    out = video_frame_aggregate(q_v, q_f, gamma)
    mixed = (out - (1 - gamma) * q_v).numpy()
    lo, hi = gamma * q_f.numpy().min(0), gamma * q_f.numpy().max(0)
    assert (mixed >= lo - 1e-9).all() and (mixed <= hi + 1e-9).all()


# ---- one cascade layer vs a numpy oracle

def _ln(x, m):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + m.eps) * m.weight.detach().numpy() + m.bias.detach().numpy()


def _attn(mod, q, kv, mask=None):
    W = lambda lin: lin.weight.detach().numpy().T
    qq, kk, vv = q @ W(mod.wq), kv @ W(mod.wk), kv @ W(mod.wv)
    s = qq @ kk.T / math.sqrt(qq.shape[-1])
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    return (w @ vv) @ W(mod.wo)


def _ffn(f, x):
    h = x @ f.fc1.weight.detach().numpy().T + f.fc1.bias.detach().numpy()
    h = 0.5 * h * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))
    return h @ f.fc2.weight.detach().numpy().T + f.fc2.bias.detach().numpy()


def block_oracle(b, q, mem, mask=None):
    q = q + _attn(b.ca, _ln(q, b.ca_norm), mem, mask)
    h = _ln(q, b.sa_norm)
    q = q + _attn(b.sa, h, h)
    return q + _ffn(b.ffn, _ln(q, b.ffn_norm))


@pytest.fixture
def layer():
    torch.manual_seed(5)
    return DecoderLayer(6, 6)


def test_layer_matches_oracle(layer, rng):
    q_f, q_v = rng.normal(size=(1, 3, 6)), rng.normal(size=(3, 6))
    feat = rng.normal(size=(1, 4, 6))
    out = decoder_layer(layer, DecoderState(t(q_f), t(q_v)), t(feat))
    np.testing.assert_allclose(out.q_f[0].detach().numpy(), block_oracle(layer.frame, q_f[0], feat[0]), atol=1e-12)
    np.testing.assert_allclose(out.q_v.detach().numpy(), block_oracle(layer.video, q_v, feat[0]), atol=1e-12)
    assert out.layer == 1


def test_full_mask_equals_unmasked(layer, rng):
    st_ = DecoderState(t(rng.normal(size=(2, 3, 6))), t(rng.normal(size=(3, 6))))
    feat = t(rng.normal(size=(2, 4, 6)))
    free = decoder_layer(layer, st_, feat)
    full = decoder_layer(layer, st_, feat, (torch.ones(2, 3, 4, dtype=torch.bool), torch.ones(3, 8, dtype=torch.bool)))
    assert torch.equal(free.q_f, full.q_f) and torch.equal(free.q_v, full.q_v)


def test_masked_weights_vanish_and_empty_rows_fall_back(layer, rng):
    b = layer.video
    q, mem = t(rng.normal(size=(3, 6))), t(rng.normal(size=(8, 6)))
    mask = torch.zeros(3, 8, dtype=torch.bool)
    mask[0, :2] = True
    mask[1, 5] = True  # row 2 is empty -> attends everywhere
    from villa.decoder import with_fallback

    _, w = b.ca(b.ca_norm(q), mem, with_fallback(mask))
    w = w.detach()
    assert float(w[0, 2:].abs().max()) <= 1e-12 and float(w[1, :5].abs().max()) <= 1e-12
    assert (w[2] > 0).all()
    out = b(q, mem, mask).detach().numpy()
    oracle = block_oracle(b, q.numpy(), mem.numpy(), with_fallback(mask).numpy())
    np.testing.assert_allclose(out, oracle, atol=1e-12)


# ---- mask head

def test_orthogonal_query_gives_half():
    pixel = t(np.array([[[1.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.5, 0.0]]]))  # 1 frame, 2x2 grid
    logits = predict_masks(t([[0.0, 1.0]]), pixel, lambda x: x, (2, 2), (2, 2))
    assert torch.allclose(torch.sigmoid(logits), torch.full_like(logits, 0.5), atol=0)


def test_unit_pixel_feature_gives_sigmoid_one():
    pixel = t(np.array([[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]]))
    prob = torch.sigmoid(predict_masks(t([[1.0, 0.0]]), pixel, lambda x: x, (2, 2), (2, 2)))
    assert abs(float(prob[0, 0, 0, 0]) - 1 / (1 + math.exp(-1))) < 1e-15
    assert abs(float(prob[0, 0, 0, 0]) - 0.7311) < 1e-4


def test_per_cell_dot_product_oracle(rng):
    torch.manual_seed(1)
    mlp = FFN(4, 4, 3)
    q = t(rng.normal(size=(2, 4)))
    pixel = t(rng.normal(size=(3, 4, 3)))  # T=3 frames, 2x2 grid
    logits = predict_masks(q, pixel, mlp, (2, 2), (2, 2)).detach().numpy()
    emb = mlp(q).detach().numpy()
    for n in range(2):
        for f in range(3):
            for cell in range(4):
                y, x = divmod(cell, 2)
                assert abs(logits[n, f, y, x] - emb[n] @ pixel[f, cell].numpy()) < 1e-12
    per_frame = predict_masks(t(rng.normal(size=(3, 2, 4))), pixel, mlp, (2, 2), (2, 2), per_frame=True)
    assert per_frame.shape == (3, 2, 2, 2)


def test_confidence_rules():
    logits = torch.full((2, 1, 2, 2), -5.0, dtype=torch.float64)
    logits[0, 0, 0, 0], logits[0, 0, 1, 1] = 2.0, 1.0
    tr = logits_to_tracklets(logits, 0.5)
    sig = lambda z: 1 / (1 + math.exp(-z))
    assert abs(tr[0].confidence - (sig(2) + sig(1)) / 2) < 1e-15
    assert tr[1].confidence == 0.0 and not tr[1].masks.any()
    scored = logits_to_tracklets(logits, 0.5, scores=t([0.0, 3.0]))
    assert abs(scored[0].confidence - tr[0].confidence * 0.5) < 1e-15


# ---- whole decoder

def setup_decoder(layers=3, gamma=0.03, frame_branch=True, seed=0):
    torch.manual_seed(seed)
    enc = VisualEncoder(EncoderConfig(channels=8, scales=3))
    dec = VideoFrameDecoder(DecoderConfig(layers=layers, gamma=gamma, width=8, frame_branch=frame_branch), 8)
    return enc, dec


def test_zero_layers_pass_through(rng):
    enc, dec = setup_decoder(layers=0)
    feats = enc(rng.uniform(size=(2, 16, 16, 3)))
    q_f, q_v = t(rng.normal(size=(2, 8))), t(rng.normal(size=(2, 8)))
    out = dec(q_f, q_v, feats, (16, 16))
    pixel = dec.head.pixel(feats.levels[0])
    expect = predict_masks(dec.norm(q_v), pixel, dec.head.mlp, feats.grids[0], (16, 16))
    assert torch.equal(out.video_logits, expect)
    assert len(out.tracklets()) == 2 and out.tracklets()[0].masks.shape == (2, 16, 16)


def test_gamma_zero_video_path_ignores_frame_queries(rng):
    enc, dec = setup_decoder(gamma=0.0)
    feats = enc(rng.uniform(size=(2, 16, 16, 3)))
    q_v = t(rng.normal(size=(2, 8)))
    a = dec(t(rng.normal(size=(2, 8))), q_v, feats, (16, 16))
    b = dec(t(rng.normal(size=(2, 8))), q_v, feats, (16, 16))
    for sa, sb in zip(a.states, b.states):
        assert torch.equal(sa.q_v, sb.q_v)
    assert torch.equal(a.video_logits, b.video_logits)


def test_deterministic_tracklets(rng):
    enc, dec = setup_decoder()
    frames = rng.uniform(size=(2, 16, 16, 3))
    q_f, q_v = t(rng.normal(size=(2, 8))), t(rng.normal(size=(2, 8)))
    a = dec(q_f, q_v, enc(frames), (16, 16)).tracklets()
    b = dec(q_f, q_v, enc(frames), (16, 16)).tracklets()
    assert all(np.array_equal(x.logits, y.logits) and x.confidence == y.confidence for x, y in zip(a, b))


def test_layers_cannot_exceed_scales():
    with pytest.raises(ConfigError):
        DecoderConfig(layers=4).validate(3)
    with pytest.raises(ConfigError):
        DecoderConfig(gamma=1.5).validate()


def test_pipeline_gradients(rng):
    enc, dec = setup_decoder()
    feats = enc(rng.uniform(size=(2, 16, 16, 3)))
    q_f, q_v = t(rng.normal(size=(2, 8))), t(rng.normal(size=(2, 8)))
    target = t(rng.uniform(size=(2, 2, 16, 16)) > 0.5)
    from villa.supervision import bce_loss

    def loss():
        out = dec(q_f, q_v, feats, (16, 16))
        return bce_loss(out.video_logits, target) + bce_loss(out.frame_logits.transpose(0, 1), target)

    for p in (dec.head.mlp.fc1.weight, dec.layers[0].video.ffn.fc1.weight, dec.layers[2].frame.ca.wq.weight):
        assert param_grad_check(loss, p, indices=range(0, p.numel(), 9)).passed(1e-4)
