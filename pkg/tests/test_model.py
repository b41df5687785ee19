"""Model assembly: config, weights naming, fused encoding, masked losses."""

import numpy as np
import pytest

import umfdet.ndtensor as nd
from umfdet import model as M
from umfdet.data import Category, ImagePayload, ManipulationAnnotation, NewsSample
from umfdet.data import CotNote, template_cot
from umfdet.errors import ConfigError, DataError
from umfdet.instruct import (ANSWER_CLOSE, ANSWER_OPEN, EOS, THINK_CLOSE, THINK_OPEN,
                             render_prompt)
from umfdet.trainer import FREEZE_VISUAL_PREFIXES


def _sample(feat_width=64, title="Merkel visits the bright harbor in Oslo on Friday",
            label=Category.REAL, think=None) -> NewsSample:
    note = template_cot(label, "Merkel")
    if think is not None:
        note = CotNote(think=think, answer=label.value, verdict="accepted")
    return NewsSample(id="s-0", title=title,
                      image=ImagePayload(feat=np.full((3, feat_width), 0.1)),
                      label=label, annotation=ManipulationAnnotation(), cot=note)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    M.ModelConfig()  # defaults are valid
    with pytest.raises(ConfigError):
        M.ModelConfig(h=30, n_heads=4)
    with pytest.raises(ConfigError):
        M.ModelConfig(n_moe=0)
    with pytest.raises(ConfigError):
        M.ModelConfig(n_moe=5)
    with pytest.raises(ConfigError):
        M.ModelConfig(n_enc=0)
    with pytest.raises(ConfigError):
        M.ModelConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        M.ModelConfig(lambda_cot=-0.5)
    with pytest.raises(ConfigError):
        M.ModelConfig(vocab_size=8)
    with pytest.raises(ConfigError):
        M.ModelConfig(in_channels=2)
    with pytest.raises(ConfigError):
        M.ModelConfig(max_len=8)


def test_config_json_round_trip():
    cfg = M.ModelConfig(h=32, n_heads=2, lambda_cot=0.5, moe_enabled=False)
    assert M.ModelConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        M.ModelConfig.from_json({"h": 32, "mystery": 1})


# ---------------------------------------------------------------------------
# weight naming


def test_init_model_checkpoint_names(tiny_config):
    params = M.init_model(tiny_config, np.random.default_rng(0))
    names = set(params.tensors)
    for expected in ("tok_emb", "pos_emb", "vis_pos_emb", "vis_proj.W", "patch_proj.W",
                     "enc.0.ln1.gamma", "enc.0.attn.Wq", "enc.0.attn.bo",
                     "enc.0.ffn.W1", "cmoe.0.ln.gamma",
                     "cmoe.0.reality.W_a", "cmoe.0.deception.W_out",
                     "cmoe.0.synthesis.b_b", "cmoe.0.router.W", "cmoe.0.router.b",
                     "moe_out_ln.gamma", "dec.0.self_attn.Wq", "dec.0.cross_attn.Wk",
                     "dec.0.ffn.W2", "final_ln.beta", "head.W", "head.b"):
        assert expected in names, expected
    assert len(params.cmoe_layers) == tiny_config.n_moe
    # structured views alias the flat dict
    assert params.tensors["cmoe.0.router.W"] is params.cmoe_layers[0].router.W


def test_init_model_solo_names_without_moe(tiny_config):
    cfg = M.ModelConfig(**{**tiny_config.to_json(), "moe_enabled": False})
    params = M.init_model(cfg, np.random.default_rng(0))
    assert "cmoe.0.solo.W_a" in params.tensors
    assert "cmoe.0.solo.b_out" in params.tensors
    assert not any(".router." in n or ".reality." in n for n in params.tensors)


def test_trainable_freeze_prefixes(tiny_config):
    params = M.init_model(tiny_config, np.random.default_rng(0))
    kept = dict(params.trainable(FREEZE_VISUAL_PREFIXES))
    assert "patch_proj.W" not in kept and "vis_proj.b" not in kept
    assert "vis_pos_emb" not in kept
    assert "tok_emb" in kept
    assert len(kept) == len(params.tensors) - 5


# ---------------------------------------------------------------------------
# image embedding


def test_embed_image_feature_payload(tiny_config):
    params = M.init_model(tiny_config, np.random.default_rng(0))
    out = M.embed_image(params, ImagePayload(feat=np.zeros((5, tiny_config.h_v))))
    assert out.shape == (5, tiny_config.h)
    # zero features leave only the projection bias plus positional rows
    expected = params.tensors["vis_proj.b"].values + params.tensors["vis_pos_emb"].values[:5]
    assert np.allclose(out.values, expected)


def test_embed_image_raw_patches(tiny_config):
    params = M.init_model(tiny_config, np.random.default_rng(0))
    out = M.embed_image(params, ImagePayload(raw=np.ones((1, 16, 16))))
    assert out.shape == (4, tiny_config.h)  # (16/8)^2 patches


def test_embed_image_raw_patch_values_order(tiny_config):
    params = M.init_model(tiny_config, np.random.default_rng(0))
    raw = np.arange(256.0).reshape(1, 16, 16)
    # patch grid row-major: token 1 covers columns 8..15 of rows 0..7
    W = params.tensors["patch_proj.W"].values
    b = params.tensors["patch_proj.b"].values
    pos = params.tensors["vis_pos_emb"].values
    flat = raw[0, 0:8, 8:16].reshape(-1)
    expected = flat @ W + b + pos[1]
    out = M.embed_image(params, ImagePayload(raw=raw))
    assert np.allclose(out.values[1], expected)


def test_embed_image_errors(tiny_config):
    params = M.init_model(tiny_config, np.random.default_rng(0))
    with pytest.raises(DataError, match="resolve"):
        M.embed_image(params, ImagePayload(path="img.png"), "s-9")
    with pytest.raises(DataError, match="h_v"):
        M.embed_image(params, ImagePayload(feat=np.zeros((2, tiny_config.h_v + 1))))
    with pytest.raises(DataError, match="channels"):
        M.embed_image(params, ImagePayload(raw=np.zeros((3, 16, 16))))
    with pytest.raises(DataError, match="multiple"):
        M.embed_image(params, ImagePayload(raw=np.zeros((1, 12, 12))))
    with pytest.raises(DataError, match="s-7.*visual tokens"):
        M.embed_image(params, ImagePayload(
            feat=np.zeros((tiny_config.max_vis_tokens + 1, tiny_config.h_v))), "s-7")


# ---------------------------------------------------------------------------
# span masks


def test_span_masks_full_target():
    ids = [THINK_OPEN, 20, 21, THINK_CLOSE, ANSWER_OPEN, 22, ANSWER_CLOSE, EOS]
    think, answer = M._span_masks(ids, "s")
    assert think == {0, 1, 2, 3}
    assert answer == {4, 5, 6, 7}  # trailing EOS owned by the answer span


def test_span_masks_answer_only():
    ids = [ANSWER_OPEN, 22, ANSWER_CLOSE, EOS]
    think, answer = M._span_masks(ids, "s")
    assert think == set()
    assert answer == {0, 1, 2, 3}


@pytest.mark.parametrize("ids,msg", [
    ([THINK_OPEN, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE], "duplicate"),
    ([THINK_OPEN, 9, ANSWER_OPEN, 22, ANSWER_CLOSE], "unpaired"),
    ([THINK_OPEN, 9, THINK_CLOSE, 22], "answer block"),
    ([9, 10], "answer block"),
    ([ANSWER_CLOSE, 22, ANSWER_OPEN], "out of order"),
    ([ANSWER_OPEN, ANSWER_CLOSE, THINK_OPEN, THINK_CLOSE], "out of order"),
])
def test_span_masks_rejects_malformed(ids, msg):
    with pytest.raises(DataError, match=msg) as exc:
        M._span_masks(ids, "s-13")
    assert "s-13" in str(exc.value)


# ---------------------------------------------------------------------------
# training forward


def test_forward_train_requires_rationale(tiny_model, toy_vocab, template):
    sample = _sample()
    sample.cot = None
    with pytest.raises(DataError, match="rationale"):
        M.forward_train(tiny_model, sample, toy_vocab, template, training=False)
    sample.cot = CotNote(think="x", answer="  ", verdict="accepted")
    with pytest.raises(DataError):
        M.forward_train(tiny_model, sample, toy_vocab, template, training=False)


def test_forward_train_losses_and_counts(tiny_model, toy_vocab, template):
    res = M.forward_train(tiny_model, _sample(), toy_vocab, template, training=False)
    assert res.loss_det.values.shape == ()
    assert float(res.loss_det.values) > 0.0
    assert float(res.loss_cot.values) > 0.0
    assert res.n_answer_tokens == 4  # <answer> real </answer> EOS
    assert res.n_think_tokens > 10
    assert len(res.decisions) == tiny_model.config.n_moe


def test_forward_train_no_think_gives_inert_zero(tiny_model, toy_vocab, template):
    res = M.forward_train(tiny_model, _sample(think=""), toy_vocab, template,
                          training=False)
    assert float(res.loss_cot.values) == 0.0
    assert not res.loss_cot.requires_grad
    assert res.n_think_tokens == 0
    assert float(res.loss_det.values) > 0.0


def test_forward_train_skip_cot_branch(tiny_model, toy_vocab, template):
    res = M.forward_train(tiny_model, _sample(), toy_vocab, template, training=False,
                          build_cot_loss=False)
    assert float(res.loss_cot.values) == 0.0
    assert not res.loss_cot.requires_grad


def _fresh(tiny_config):
    return M.init_model(tiny_config, np.random.default_rng(7))


def test_forward_train_deterministic_without_dropout(tiny_config, toy_vocab, template):
    a = M.forward_train(_fresh(tiny_config), _sample(), toy_vocab, template,
                        training=False)
    b = M.forward_train(_fresh(tiny_config), _sample(), toy_vocab, template,
                        training=False)
    assert float(a.loss_det.values) == float(b.loss_det.values)
    assert float(a.loss_cot.values) == float(b.loss_cot.values)


def test_zero_weight_rationale_loss_matches_detection_only(tiny_config, toy_vocab,
                                                           template):
    """Total with a zero-weighted rationale term backs the same gradients,
    bitwise, as the detection loss alone."""
    sample = _sample()

    pa = _fresh(tiny_config)
    ra = M.forward_train(pa, sample, toy_vocab, template, training=False)
    total = nd.add(ra.loss_det, nd.scale(ra.loss_cot, 0.0))
    assert float(total.values) == float(ra.loss_det.values)  # x + 0.0 is bitwise x
    nd.Graph(total).backward()

    pb = _fresh(tiny_config)
    rb = M.forward_train(pb, sample, toy_vocab, template, training=False,
                         build_cot_loss=False)
    nd.Graph(rb.loss_det).backward()

    for name in pa.tensors:
        ga, gb = pa.tensors[name].grad, pb.tensors[name].grad
        if ga is None and gb is None:
            continue
        assert ga is not None and gb is not None, name
        assert np.array_equal(ga, gb), name


def test_forward_train_dropout_depends_on_rng(tiny_config, toy_vocab, template):
    sample = _sample()
    a = M.forward_train(_fresh(tiny_config), sample, toy_vocab, template,
                        training=True, rng=np.random.default_rng(1))
    b = M.forward_train(_fresh(tiny_config), sample, toy_vocab, template,
                        training=True, rng=np.random.default_rng(2))
    assert float(a.loss_det.values) != float(b.loss_det.values)


# ---------------------------------------------------------------------------
# encode / generate


def test_encode_shapes_and_decisions(tiny_model, toy_vocab, template):
    memory, decisions = M.encode(tiny_model, _sample(), toy_vocab, template)
    n_prompt = len(toy_vocab.encode(render_prompt(template, _sample().title)))
    assert memory.shape == (3 + n_prompt, tiny_model.config.h)
    assert len(decisions) == tiny_model.config.n_moe
    assert all(d.selected in (0, 1, 2) for d in decisions)


def test_encode_without_moe_has_no_decisions(tiny_config, toy_vocab, template):
    cfg = M.ModelConfig(**{**tiny_config.to_json(), "moe_enabled": False})
    params = M.init_model(cfg, np.random.default_rng(0))
    memory, decisions = M.encode(params, _sample(), toy_vocab, template)
    assert decisions == []
    assert memory.shape[1] == cfg.h


def test_generate_budget_and_structure(tiny_model, toy_vocab, template):
    out = M.generate(tiny_model, _sample(), toy_vocab, template, max_new=5)
    assert len(out.token_ids) <= 5
    assert isinstance(out.text, str)
    assert len(out.decisions) == tiny_model.config.n_moe
    assert EOS not in out.token_ids


def test_generate_budget_capped_by_max_len(tiny_config, toy_vocab, template):
    params = M.init_model(tiny_config, np.random.default_rng(3))
    out = M.generate(params, _sample(), toy_vocab, template, max_new=10**6)
    assert len(out.token_ids) <= tiny_config.max_len - 1


def test_generate_accumulates_no_grads(tiny_model, toy_vocab, template):
    M.generate(tiny_model, _sample(), toy_vocab, template, max_new=4)
    assert all(not np.any(t.grad) for t in tiny_model.tensors.values())
