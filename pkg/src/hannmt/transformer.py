"""Sentence-level transformer layers: the base NMT model the context network plugs into.

Post-norm residual blocks (sublayer -> add -> layer norm), sinusoidal
positions, scaled dot-product multi-head attention. All forwards accept an
arbitrary leading batch prefix so the same code serves single sentences,
training batches and per-position context attention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

NEG_INF = -1e9


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    a = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class ParamBundle:
    """Mixin: every Tensor attribute is a parameter, discovered in order."""

    def named_params(self, prefix: str):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield f"{prefix}.{key}", value
            elif isinstance(value, ParamBundle):
                yield from value.named_params(f"{prefix}.{key}")


class AttentionParams(ParamBundle):
    def __init__(self, d_model: int, rng, dtype):
        self.wq = uniform_init(rng, d_model, (d_model, d_model), dtype)
        self.wk = uniform_init(rng, d_model, (d_model, d_model), dtype)
        self.wv = uniform_init(rng, d_model, (d_model, d_model), dtype)
        self.wo = uniform_init(rng, d_model, (d_model, d_model), dtype)
        self.bq = zeros_param((d_model,), dtype)
        self.bk = zeros_param((d_model,), dtype)
        self.bv = zeros_param((d_model,), dtype)
        self.bo = zeros_param((d_model,), dtype)


class FeedForwardParams(ParamBundle):
    def __init__(self, d_model: int, d_ff: int, rng, dtype):
        self.w1 = uniform_init(rng, d_model, (d_model, d_ff), dtype)
        self.b1 = zeros_param((d_ff,), dtype)
        self.w2 = uniform_init(rng, d_ff, (d_ff, d_model), dtype)
        self.b2 = zeros_param((d_model,), dtype)


class LayerNormParams(ParamBundle):
    def __init__(self, d_model: int, dtype):
        self.gain = ones_param((d_model,), dtype)
        self.bias = zeros_param((d_model,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class EncoderLayerParams(ParamBundle):
    def __init__(self, d_model, d_ff, rng, dtype):
        self.self_attn = AttentionParams(d_model, rng, dtype)
        self.norm1 = LayerNormParams(d_model, dtype)
        self.ffn = FeedForwardParams(d_model, d_ff, rng, dtype)
        self.norm2 = LayerNormParams(d_model, dtype)


class DecoderLayerParams(ParamBundle):
    def __init__(self, d_model, d_ff, rng, dtype):
        self.self_attn = AttentionParams(d_model, rng, dtype)
        self.norm1 = LayerNormParams(d_model, dtype)
        self.cross_attn = AttentionParams(d_model, rng, dtype)
        self.norm2 = LayerNormParams(d_model, dtype)
        self.ffn = FeedForwardParams(d_model, d_ff, rng, dtype)
        self.norm3 = LayerNormParams(d_model, dtype)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    d = x.shape[-1]
    dh = d // n_heads
    y = T.reshape(x, x.shape[:-1] + (n_heads, dh))
    return T.moveaxis(y, -2, -3)  # [..., h, L, dh]


def merge_heads(x: Tensor) -> Tensor:
    y = T.moveaxis(x, -3, -2)  # [..., L, h, dh]
    return T.reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def multi_head_attention(params: AttentionParams, query: Tensor, keys: Tensor,
                         values: Tensor, mask: np.ndarray | None, n_heads: int,
                         attn_sink: list | None = None, name: str = "attn"):
    """Scaled dot-product attention with per-head projections.

    query [..., q, d], keys/values [..., kv, d]; ``mask`` is additive
    (0 or NEG_INF), broadcastable to the score shape [..., h, q, kv].
    Returns the projected output and the softmax weights.
    """
    d = query.shape[-1]
    if d % n_heads != 0:
        raise T.ShapeError(f"d_model {d} not divisible by n_heads {n_heads}")
    if keys.shape[-2] == 0:
        raise T.ShapeError("attention over zero keys")
    if mask is not None and np.any(mask.max(axis=-1) <= NEG_INF / 10):
        raise ValueError(f"{name}: some query has every key masked")

    q = split_heads(T.affine(query, params.wq, params.bq), n_heads)
    k = split_heads(T.affine(keys, params.wk, params.bk), n_heads)
    v = split_heads(T.affine(values, params.wv, params.bv), n_heads)

    scale = 1.0 / math.sqrt(d // n_heads)
    scores = T.matmul(q, T.moveaxis(k, -1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    weights = T.softmax(scores, axis=-1)
    out = T.affine(merge_heads(T.matmul(weights, v)), params.wo, params.bo)
    if attn_sink is not None:
        attn_sink.append((name, weights.data))
    return out, weights


def feed_forward(params: FeedForwardParams, x: Tensor) -> Tensor:
    return T.affine(T.relu(T.affine(x, params.w1, params.b1)), params.w2, params.b2)


def positional_encoding(max_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table: row t, columns (2i, 2i+1) = (sin, cos)(t / 10000^(2i/d))."""
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((max_len, d_model), dtype=dtype)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def causal_mask(t: int, dtype=np.float64) -> np.ndarray:
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = NEG_INF
    return m


def key_padding_mask(real: np.ndarray, dtype=np.float64) -> np.ndarray:
    """[..., kv] boolean (True = real token) -> additive [..., 1, 1, kv]."""
    m = np.where(real, 0.0, NEG_INF).astype(dtype)
    return m[..., None, None, :]


@dataclass
class EncoderStates:
    """Final encoder-layer outputs for one source sentence (pre-context)."""

    states: Tensor  # [len, d_model] (or [B, len, d_model] batched)
    mask: np.ndarray  # [len] bool, True at real tokens


@dataclass
class DecoderStates:
    """Final decoder-layer outputs plus the encoder-decoder attention outputs."""

    states: Tensor  # [len, d_model]
    alignment: Tensor  # [len, d_model], cross-attention sublayer output of the last layer


class TransformerParams(ParamBundle):
    """All base-model parameters (no context network)."""

    def __init__(self, cfg, rng: np.random.Generator, dtype):
        d = cfg.d_model
        self.src_embed = uniform_init(rng, d, (cfg.vocab_src, d), dtype)
        self.tgt_embed = uniform_init(rng, d, (cfg.vocab_tgt, d), dtype)
        self.enc = [EncoderLayerParams(d, cfg.d_ff, rng, dtype) for _ in range(cfg.n_layers_enc)]
        self.dec = [DecoderLayerParams(d, cfg.d_ff, rng, dtype) for _ in range(cfg.n_layers_dec)]
        self.out_w = uniform_init(rng, d, (d, cfg.vocab_tgt), dtype)
        self.out_b = zeros_param((cfg.vocab_tgt,), dtype)

    def named_params(self, prefix: str):
        yield f"{prefix}.src_embed", self.src_embed
        yield f"{prefix}.tgt_embed", self.tgt_embed
        for i, layer in enumerate(self.enc):
            yield from layer.named_params(f"{prefix}.enc.{i}")
        for i, layer in enumerate(self.dec):
            yield from layer.named_params(f"{prefix}.dec.{i}")
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


def embed_positions(table: Tensor, ids: np.ndarray, pe: np.ndarray, d_model: int,
                    dropout_rate: float, training: bool, rng) -> Tensor:
    x = T.embedding(table, ids) * math.sqrt(d_model)
    x = x + pe[: ids.shape[-1]]
    return T.dropout(x, dropout_rate, training, rng)


def encoder_forward(params: TransformerParams, cfg, src_ids: np.ndarray, pe: np.ndarray,
                    src_real: np.ndarray, training: bool, rng,
                    attn_sink: list | None = None) -> Tensor:
    """Run the encoder stack. src_ids [..., S]; returns states [..., S, d]."""
    mask = key_padding_mask(src_real, dtype=params.src_embed.dtype)
    x = embed_positions(params.src_embed, src_ids, pe, cfg.d_model, cfg.dropout, training, rng)
    for i, layer in enumerate(params.enc):
        sa, _ = multi_head_attention(layer.self_attn, x, x, x, mask, cfg.n_heads,
                                     attn_sink, f"enc.{i}.self_attn")
        x = layer.norm1(x + T.dropout(sa, cfg.dropout, training, rng))
        ff = feed_forward(layer.ffn, x)
        x = layer.norm2(x + T.dropout(ff, cfg.dropout, training, rng))
    return x


def decoder_forward(params: TransformerParams, cfg, tgt_ids: np.ndarray, memory: Tensor,
                    pe: np.ndarray, src_real: np.ndarray, training: bool, rng,
                    attn_sink: list | None = None) -> tuple[Tensor, Tensor]:
    """Teacher-forced decoder pass.

    Returns (states, alignment): the final layer outputs and its
    encoder-decoder attention sublayer output (after the output
    projection, before the residual add).
    """
    t_len = tgt_ids.shape[-1]
    cmask = causal_mask(t_len, dtype=params.tgt_embed.dtype)
    smask = key_padding_mask(src_real, dtype=params.tgt_embed.dtype)
    x = embed_positions(params.tgt_embed, tgt_ids, pe, cfg.d_model, cfg.dropout, training, rng)
    alignment = None
    for i, layer in enumerate(params.dec):
        sa, _ = multi_head_attention(layer.self_attn, x, x, x, cmask, cfg.n_heads,
                                     attn_sink, f"dec.{i}.self_attn")
        x = layer.norm1(x + T.dropout(sa, cfg.dropout, training, rng))
        ca, _ = multi_head_attention(layer.cross_attn, x, memory, memory, smask, cfg.n_heads,
                                     attn_sink, f"dec.{i}.cross_attn")
        if i == len(params.dec) - 1:
            alignment = ca
        x = layer.norm2(x + T.dropout(ca, cfg.dropout, training, rng))
        ff = feed_forward(layer.ffn, x)
        x = layer.norm3(x + T.dropout(ff, cfg.dropout, training, rng))
    return x, alignment


def classify(params: TransformerParams, h: Tensor) -> Tensor:
    """Project (possibly context-gated) states to target-vocabulary logits."""
    return T.affine(h, params.out_w, params.out_b)


def truncate_overlength(tokens: list[int], max_len: int, what: str) -> list[int]:
    if len(tokens) > max_len:
        log.warning("%s sentence of %d tokens truncated to max_len=%d", what, len(tokens), max_len)
        return tokens[:max_len]
    return tokens
