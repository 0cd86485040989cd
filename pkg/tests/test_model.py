import numpy as np
import pytest
import torch

from villa.bench import generate_episode
from villa.config import apply_ablation
from villa.errors import ConfigError
from villa.metrics import spatiotemporal_iou
from villa.model import ViLLa
from villa.numerics import param_grad_check
from villa.train import evaluate, predictions, train

from conftest import tiny_config


@pytest.fixture(scope="module")
def episode():
    return generate_episode(0, tiny_config().generator, 0)


def test_forward_shapes(episode):
    cfg = tiny_config()
    out = ViLLa(cfg).episode_forward(episode)
    t, h, w, _ = episode.clip.frames.shape
    n = cfg.responder.seg_tokens
    assert out.decoded.video_logits.shape == (n, t, h, w)
    assert out.decoded.frame_logits.shape == (t, n, h, w)
    assert len(out.context) == t and all(c.rows.shape[0] == cfg.cam.keep for c in out.context)


@pytest.mark.parametrize("toggle", ["cam_on=false", "vfdec_on=false", "aggregation_strategy=stacked",
                                    "aggregation_strategy=fusion", "scale_count=1", "residual_in_eq1=true",
                                    "score_strategy=logit"])
def test_ablation_variants_run(episode, toggle):
    model = ViLLa(apply_ablation(tiny_config(), toggle))
    loss = model.loss(episode)
    assert torch.isfinite(loss.total)
    tracks, resp = model.infer(episode)
    assert len(tracks) == model.cfg.responder.seg_tokens and resp.text_tokens[0] == "the"


def test_empty_instruction_rejected():
    with pytest.raises(ConfigError):
        ViLLa(tiny_config()).text_rows([])


def test_total_loss_gradients_through_whole_model(episode):
    model = ViLLa(tiny_config())
    names = ["encoder.patch_embed", "query_slots", "cam.ffn.fc1.weight", "responder.blocks.0.wv.weight",
             "bank_video", "phi", "decoder.layers.1.video.ca.wk.weight", "decoder.head.score.weight"]
    params = dict(model.named_parameters())
    for name in names:
        p = params[name]
        step = max(1, p.numel() // 6)
        rep = param_grad_check(lambda: model.loss(episode).total, p, indices=range(0, p.numel(), step))
        assert rep.passed(1e-4), (name, rep)


def test_training_is_bitwise_deterministic(episode):
    cfg = tiny_config(max_iters=3)
    eps = [episode, generate_episode(0, cfg.generator, 1)]
    a, b = train(cfg, eps, measure=False), train(cfg, eps, measure=False)
    assert a.history == b.history
    assert evaluate(a.model, eps).summary() == evaluate(b.model, eps).summary()


def test_overfits_a_single_clip(episode):
    cfg = tiny_config(max_iters=120, batch_size=1)
    cfg.optimizer.lr = 3e-3
    result = train(cfg, [episode], measure=False)
    best = predictions(result.model.infer(episode)[0])
    assert best and spatiotemporal_iou(best[0], episode.target_tracklets()[0]) > 0.5
