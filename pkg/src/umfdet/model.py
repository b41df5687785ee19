"""Desk-scale multimodal detector: patch/feature image embedding, a shared
pre-norm encoder over the fused visual+text sequence, a category-aware
mixture stage, and a causal decoder that writes the rationale and the
answer as text.

Training computes two masked language-model losses over the decoder output:
one restricted to the answer span (markers plus trailing end token) and one
to the reasoning span (markers inclusive). Generation is greedy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ndtensor as nd
from .cmoe import (CMoELayer, ExpertParams, cmoe_forward, expert_forward,
                   init_cmoe_layer, init_expert, layer_named_tensors)
from .data import ImagePayload, NewsSample
from .errors import ConfigError, DataError
from .instruct import (ANSWER_CLOSE, ANSWER_OPEN, BOS, EOS, THINK_CLOSE,
                       THINK_OPEN, InstructionTemplate, Vocabulary,
                       embed_text, render_prompt)
from .ndtensor import Tensor

PATCH = 8
_NEG = -1e30


@dataclass
class ModelConfig:
    h: int = 64
    h_v: int = 64
    n_heads: int = 4
    n_enc: int = 1
    n_moe: int = 2
    n_dec: int = 1
    expansion_ratio: int = 2
    dropout_rate: float = 0.1
    gate_scaling: bool = True
    moe_enabled: bool = True
    lambda_cot: float = 1.0
    vocab_size: int = 512
    max_len: int = 192
    max_vis_tokens: int = 64
    in_channels: int = 1
    gen_max_tokens: int = 64

    def __post_init__(self):
        if self.h <= 0 or self.h % self.n_heads != 0:
            raise ConfigError(f"h={self.h} must be positive and divisible by n_heads={self.n_heads}")
        if not 1 <= self.n_moe <= 4:
            raise ConfigError(f"n_moe must lie in [1, 4], got {self.n_moe}")
        if self.n_enc < 1 or self.n_dec < 1:
            raise ConfigError("n_enc and n_dec must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.lambda_cot < 0:
            raise ConfigError(f"lambda_cot must be >= 0, got {self.lambda_cot}")
        if self.vocab_size < 9:
            raise ConfigError("vocab_size must cover the reserved ids")
        if self.max_len < 16:
            raise ConfigError(f"max_len too small: {self.max_len}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.expansion_ratio < 1 or self.max_vis_tokens < 1 or self.gen_max_tokens < 4:
            raise ConfigError("expansion_ratio, max_vis_tokens, gen_max_tokens out of range")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)


@dataclass
class ModelParams:
    """All weights, flat name -> Tensor in a stable insertion order; the
    mixture layers additionally keep structured views over the same tensors."""
    config: ModelConfig
    tensors: dict
    cmoe_layers: list = field(default_factory=list)

    def trainable(self, freeze_prefixes=()):
        out = []
        for name, t in self.tensors.items():
            if any(name.startswith(p) for p in freeze_prefixes):
                continue
            out.append((name, t))
        return out


def _linear(rng, fan_in, fan_out):
    std = (2.0 / (fan_in + fan_out)) ** 0.5
    return Tensor(rng.normal(0.0, std, (fan_in, fan_out)), requires_grad=True)


def _bias(n):
    return Tensor(np.zeros(n), requires_grad=True)


def _ln_pair(tensors, name, h):
    tensors[f"{name}.gamma"] = Tensor(np.ones(h), requires_grad=True)
    tensors[f"{name}.beta"] = Tensor(np.zeros(h), requires_grad=True)


def _attn_params(tensors, rng, name, h):
    for w in ("Wq", "Wk", "Wv", "Wo"):
        tensors[f"{name}.{w}"] = _linear(rng, h, h)
    for b in ("bq", "bk", "bv", "bo"):
        tensors[f"{name}.{b}"] = _bias(h)


def _ffn_params(tensors, rng, name, h, ratio):
    tensors[f"{name}.W1"] = _linear(rng, h, ratio * h)
    tensors[f"{name}.b1"] = _bias(ratio * h)
    tensors[f"{name}.W2"] = _linear(rng, ratio * h, h)
    tensors[f"{name}.b2"] = _bias(h)


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    h, r = config.h, config.expansion_ratio
    t = {}
    t["tok_emb"] = Tensor(rng.normal(0.0, 0.02, (config.vocab_size, h)), requires_grad=True)
    t["pos_emb"] = Tensor(rng.normal(0.0, 0.02, (config.max_len, h)), requires_grad=True)
    t["vis_pos_emb"] = Tensor(rng.normal(0.0, 0.02, (config.max_vis_tokens, h)),
                              requires_grad=True)
    t["vis_proj.W"] = _linear(rng, config.h_v, h)
    t["vis_proj.b"] = _bias(h)
    t["patch_proj.W"] = _linear(rng, config.in_channels * PATCH * PATCH, h)
    t["patch_proj.b"] = _bias(h)
    for i in range(config.n_enc):
        _ln_pair(t, f"enc.{i}.ln1", h)
        _attn_params(t, rng, f"enc.{i}.attn", h)
        _ln_pair(t, f"enc.{i}.ln2", h)
        _ffn_params(t, rng, f"enc.{i}.ffn", h, r)
    cmoe_layers = []
    for i in range(config.n_moe):
        _ln_pair(t, f"cmoe.{i}.ln", h)
        if config.moe_enabled:
            layer = init_cmoe_layer(rng, h, r, config.dropout_rate, config.gate_scaling)
            t.update(layer_named_tensors(layer, i))
        else:
            layer = init_expert(rng, h, r)
            for key, tensor in layer.tensors().items():
                t[f"cmoe.{i}.solo.{key}"] = tensor
        cmoe_layers.append(layer)
    _ln_pair(t, "moe_out_ln", h)
    for i in range(config.n_dec):
        _ln_pair(t, f"dec.{i}.ln1", h)
        _attn_params(t, rng, f"dec.{i}.self_attn", h)
        _ln_pair(t, f"dec.{i}.ln2", h)
        _attn_params(t, rng, f"dec.{i}.cross_attn", h)
        _ln_pair(t, f"dec.{i}.ln3", h)
        _ffn_params(t, rng, f"dec.{i}.ffn", h, r)
    _ln_pair(t, "final_ln", h)
    t["head.W"] = _linear(rng, h, config.vocab_size)
    t["head.b"] = _bias(config.vocab_size)
    return ModelParams(config=config, tensors=t, cmoe_layers=cmoe_layers)


# ---------------------------------------------------------------------------
# forward pieces


def _ln(t, name, x):
    return nd.layer_norm(x, t[f"{name}.gamma"], t[f"{name}.beta"])


def _proj(t, name, suffix_w, suffix_b, x):
    return nd.add(nd.matmul(x, t[f"{name}.{suffix_w}"]), t[f"{name}.{suffix_b}"])


def _attention(t, name, x_q, x_kv, n_heads, causal):
    """Multi-head scaled dot-product attention via per-head column slices;
    x_kv None means self-attention."""
    if x_kv is None:
        x_kv = x_q
    h = x_q.shape[1]
    dh = h // n_heads
    q = _proj(t, name, "Wq", "bq", x_q)
    k = _proj(t, name, "Wk", "bk", x_kv)
    v = _proj(t, name, "Wv", "bv", x_kv)
    mask = None
    if causal:
        n = x_q.shape[0]
        mask = Tensor(np.triu(np.full((n, n), _NEG), k=1))
    heads = []
    for i in range(n_heads):
        qh = nd.slice_cols(q, i * dh, (i + 1) * dh)
        kh = nd.slice_cols(k, i * dh, (i + 1) * dh)
        vh = nd.slice_cols(v, i * dh, (i + 1) * dh)
        scores = nd.scale(nd.matmul(qh, nd.transpose(kh)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = nd.add(scores, mask)
        heads.append(nd.matmul(nd.softmax(scores, axis=-1), vh))
    return _proj(t, name, "Wo", "bo", nd.concat(heads, axis=1))


def _ffn(t, name, x, training, rng, rate):
    u = nd.silu(nd.add(nd.matmul(x, t[f"{name}.W1"]), t[f"{name}.b1"]))
    u = nd.dropout(u, rate, training, rng)
    return nd.add(nd.matmul(u, t[f"{name}.W2"]), t[f"{name}.b2"])


def embed_image(params: ModelParams, payload: ImagePayload, sample_id: str = "?"):
    """Image payload -> [T_v, H] visual tokens with positional rows added."""
    cfg = params.config
    t = params.tensors
    if payload.path is not None:
        raise DataError(f"sample {sample_id}: image payload is an unresolved path "
                        f"({payload.path}); resolve it before the forward pass")
    if payload.feat is not None:
        feat = np.asarray(payload.feat, dtype=np.float64)
        if feat.shape[1] != cfg.h_v:
            raise DataError(f"sample {sample_id}: feature width {feat.shape[1]} != h_v {cfg.h_v}")
        tokens = nd.add(nd.matmul(Tensor(feat), t["vis_proj.W"]), t["vis_proj.b"])
    else:
        raw = np.asarray(payload.raw, dtype=np.float64)
        c, s = raw.shape[0], raw.shape[1]
        if c != cfg.in_channels:
            raise DataError(f"sample {sample_id}: image has {c} channels, model expects "
                            f"{cfg.in_channels}")
        if s % PATCH != 0:
            raise DataError(f"sample {sample_id}: image side {s} is not a multiple of {PATCH}")
        g = s // PATCH
        patches = (raw.reshape(c, g, PATCH, g, PATCH)
                      .transpose(1, 3, 0, 2, 4)
                      .reshape(g * g, c * PATCH * PATCH))
        tokens = nd.add(nd.matmul(Tensor(patches), t["patch_proj.W"]), t["patch_proj.b"])
    n = tokens.shape[0]
    if n > cfg.max_vis_tokens:
        raise DataError(f"sample {sample_id}: {n} visual tokens exceed "
                        f"max_vis_tokens {cfg.max_vis_tokens}")
    pos = nd.embedding(t["vis_pos_emb"], np.arange(n))
    return nd.add(tokens, pos)


def encode(params: ModelParams, sample: NewsSample, vocab: Vocabulary,
           template: InstructionTemplate, training: bool = False,
           rng: np.random.Generator | None = None):
    """Fused memory over [visual tokens; prompt tokens] after the encoder
    stack, the mixture stage and the output norm. Returns (memory, decisions)."""
    cfg = params.config
    t = params.tensors
    rate = cfg.dropout_rate
    prompt_ids = vocab.encode(render_prompt(template, sample.title))
    try:
        e_t = embed_text(t["tok_emb"], t["pos_emb"], prompt_ids)
    except DataError as exc:
        raise DataError(f"sample {sample.id}: {exc}") from None
    e_v = embed_image(params, sample.image, sample.id)
    x = nd.concat([e_v, e_t], axis=0)
    for i in range(cfg.n_enc):
        a = _attention(t, f"enc.{i}.attn", _ln(t, f"enc.{i}.ln1", x), None, cfg.n_heads, False)
        x = nd.add(x, nd.dropout(a, rate, training, rng))
        f = _ffn(t, f"enc.{i}.ffn", _ln(t, f"enc.{i}.ln2", x), training, rng, rate)
        x = nd.add(x, nd.dropout(f, rate, training, rng))
    decisions = []
    for i, layer in enumerate(params.cmoe_layers):
        normed = _ln(t, f"cmoe.{i}.ln", x)
        if cfg.moe_enabled:
            out, decision = cmoe_forward(layer, normed, training, rng, sequence_id=sample.id)
            decisions.append(decision)
        else:
            out = expert_forward(layer, normed, training, rng, rate)
        x = nd.add(x, out)
    x = _ln(t, "moe_out_ln", x)
    return x, decisions


def _attention_kv(t, name, x_q, memory, n_heads):
    return _attention(t, name, x_q, memory, n_heads, False)


def decode(params: ModelParams, memory, ids, training: bool = False,
           rng: np.random.Generator | None = None, sample_id: str = "?"):
    """Causal decoder over the target prefix; returns [T, V] logits."""
    cfg = params.config
    t = params.tensors
    rate = cfg.dropout_rate
    try:
        y = embed_text(t["tok_emb"], t["pos_emb"], ids)
    except DataError as exc:
        raise DataError(f"sample {sample_id}: {exc}") from None
    for i in range(cfg.n_dec):
        a = _attention(t, f"dec.{i}.self_attn", _ln(t, f"dec.{i}.ln1", y), None,
                       cfg.n_heads, True)
        y = nd.add(y, nd.dropout(a, rate, training, rng))
        c = _attention_kv(t, f"dec.{i}.cross_attn", _ln(t, f"dec.{i}.ln2", y),
                          memory, cfg.n_heads)
        y = nd.add(y, nd.dropout(c, rate, training, rng))
        f = _ffn(t, f"dec.{i}.ffn", _ln(t, f"dec.{i}.ln3", y), training, rng, rate)
        y = nd.add(y, nd.dropout(f, rate, training, rng))
    y = _ln(t, "final_ln", y)
    return _proj(t, "head", "W", "b", y)


# ---------------------------------------------------------------------------
# training / generation entry points


@dataclass
class ForwardResult:
    loss_det: Tensor
    loss_cot: Tensor
    decisions: list
    n_answer_tokens: int
    n_think_tokens: int


def _span_masks(target_ids, sample_id):
    """Locate the reasoning and answer spans; both include their markers and
    the answer span also owns the trailing end token. Duplicate, unpaired or
    misordered markers are data errors."""
    positions = {}
    for marker, label in ((THINK_OPEN, "<think>"), (THINK_CLOSE, "</think>"),
                          (ANSWER_OPEN, "<answer>"), (ANSWER_CLOSE, "</answer>")):
        hits = [i for i, t in enumerate(target_ids) if t == marker]
        if len(hits) > 1:
            raise DataError(f"sample {sample_id}: duplicate {label} marker in target")
        positions[marker] = hits[0] if hits else None
    t_open, t_close = positions[THINK_OPEN], positions[THINK_CLOSE]
    a_open, a_close = positions[ANSWER_OPEN], positions[ANSWER_CLOSE]
    if (t_open is None) != (t_close is None):
        raise DataError(f"sample {sample_id}: unpaired think markers in target")
    if a_open is None or a_close is None:
        raise DataError(f"sample {sample_id}: target lacks a complete answer block")
    if a_open > a_close or (t_open is not None and not t_open < t_close < a_open):
        raise DataError(f"sample {sample_id}: target markers out of order")
    think_span = set(range(t_open, t_close + 1)) if t_open is not None else set()
    answer_span = set(range(a_open, a_close + 1))
    answer_span.update(range(a_close + 1, len(target_ids)))  # trailing EOS
    return think_span, answer_span


def forward_train(params: ModelParams, sample: NewsSample, vocab: Vocabulary,
                  template: InstructionTemplate, training: bool = True,
                  rng: np.random.Generator | None = None,
                  build_cot_loss: bool = True) -> ForwardResult:
    """One sample forward pass yielding the two masked losses.

    With build_cot_loss False the reasoning-loss graph is never constructed
    and a gradient-free zero stands in for it.
    """
    if sample.cot is None or not sample.cot.answer.strip():
        raise DataError(f"sample {sample.id}: training requires a rationale note "
                        f"with a non-empty answer")
    think = sample.cot.think.strip()
    answer = sample.cot.answer.strip()
    if think:
        target_text = f"<think>{think}</think><answer>{answer}</answer>"
    else:
        target_text = f"<answer>{answer}</answer>"
    target_ids = vocab.encode(target_text) + [EOS]
    think_span, answer_span = _span_masks(target_ids, sample.id)
    dec_in = [BOS] + target_ids[:-1]
    memory, decisions = encode(params, sample, vocab, template, training, rng)
    logits = decode(params, memory, dec_in, training, rng, sample.id)
    det_targets = [t if i in answer_span else -100 for i, t in enumerate(target_ids)]
    loss_det = nd.cross_entropy_lm(logits, det_targets)
    if build_cot_loss:
        cot_targets = [t if i in think_span else -100 for i, t in enumerate(target_ids)]
        loss_cot = nd.cross_entropy_lm(logits, cot_targets)
    else:
        loss_cot = Tensor(np.asarray(0.0))
    return ForwardResult(loss_det=loss_det, loss_cot=loss_cot, decisions=decisions,
                         n_answer_tokens=len(answer_span), n_think_tokens=len(think_span))


@dataclass
class GenerationResult:
    text: str
    token_ids: list
    decisions: list


def generate(params: ModelParams, sample: NewsSample, vocab: Vocabulary,
             template: InstructionTemplate, max_new: int | None = None) -> GenerationResult:
    """Greedy decode from the fused memory until the end token or the budget."""
    cfg = params.config
    budget = min(max_new or cfg.gen_max_tokens, cfg.max_len - 1)
    with nd.no_grad():
        memory, decisions = encode(params, sample, vocab, template, training=False)
        ids = [BOS]
        out = []
        for _ in range(budget):
            logits = decode(params, memory, ids, training=False, sample_id=sample.id)
            nxt = int(np.argmax(logits.values[-1]))
            if nxt == EOS:
                break
            ids.append(nxt)
            out.append(nxt)
    return GenerationResult(text=vocab.decode(out), token_ids=out, decisions=decisions)
