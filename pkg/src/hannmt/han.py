"""Hierarchical context attention over cached previous-sentence states.

For each position of the current sentence, a word-level multi-head
attention summarizes every cached sentence into one vector, a
sentence-level attention condenses those summaries into a single context
vector, and a sigmoid gate blends it with the position's own hidden
state. Caches hold plain arrays, so previous sentences never receive
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .tensor import Tensor
from .transformer import (
    NEG_INF,
    AttentionParams,
    DecoderStates,
    EncoderStates,
    FeedForwardParams,
    LayerNormParams,
    ParamBundle,
    feed_forward,
    multi_head_attention,
    uniform_init,
    zeros_param,
)

SITES = ("enc", "dec_target", "dec_source", "dec_alignment")


class HanBlock(ParamBundle):
    """Parameters for one context-attention site.

    Two distinct query maps feed the word-level and sentence-level
    attentions; each attention and the feed-forward are followed by a
    layer norm. The gate carries no bias, so zero-initialized gate
    weights start the blend at an even 0.5.
    """

    def __init__(self, site: str, cfg: ModelConfig, rng: np.random.Generator, dtype):
        if site not in SITES:
            raise ConfigError(f"unknown context site {site!r}")
        d = cfg.d_model
        self.f_w_w = uniform_init(rng, d, (d, d), dtype)
        self.f_w_b = zeros_param((d,), dtype)
        self.f_s_w = uniform_init(rng, d, (d, d), dtype)
        self.f_s_b = zeros_param((d,), dtype)
        self.word_attn = AttentionParams(d, rng, dtype)
        self.norm_word = LayerNormParams(d, dtype)
        self.sent_attn = AttentionParams(d, rng, dtype)
        self.norm_sent = LayerNormParams(d, dtype)
        self.ffn = FeedForwardParams(d, cfg.d_ff, rng, dtype)
        self.norm_ffn = LayerNormParams(d, dtype)
        self.gate_wh = zeros_param((d, d), dtype)
        self.gate_wd = zeros_param((d, d), dtype)
        self.site = site
        self.n_heads = cfg.han_heads
        self.residual = cfg.han_residual
        self.force_gate = None  # test hook: fixes the gate to a constant


@dataclass
class TargetEntry:
    states: np.ndarray
    alignment: np.ndarray


class ContextCache:
    """Rolling store of the last k sentences' hidden states for one document.

    Entries are detached arrays (oldest first). Reset at document
    boundaries; owned by a single in-flight document job.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.source_entries: list[np.ndarray] = []
        self.target_entries: list[TargetEntry] = []

    def reset(self):
        self.source_entries = []
        self.target_entries = []

    def values_for(self, site: str) -> list[np.ndarray]:
        if site in ("enc", "dec_source"):
            return self.source_entries
        if site == "dec_target":
            return [e.states for e in self.target_entries]
        if site == "dec_alignment":
            return [e.alignment for e in self.target_entries]
        raise ConfigError(f"unknown context site {site!r}")


def cache_push(cache: ContextCache, enc: EncoderStates, dec: DecoderStates | None = None) -> ContextCache:
    """Append a translated sentence's states, evicting beyond capacity.

    Padding rows are stripped from the source side; stored arrays are
    detached copies and never receive gradient.
    """
    if cache.capacity <= 0:
        return cache
    cache.source_entries.append(np.array(enc.states.data[enc.mask]))
    if len(cache.source_entries) > cache.capacity:
        cache.source_entries.pop(0)
    if dec is not None:
        cache.target_entries.append(TargetEntry(np.array(dec.states.data), np.array(dec.alignment.data)))
        if len(cache.target_entries) > cache.capacity:
            cache.target_entries.pop(0)
    return cache


@dataclass
class AttentionTrace:
    """Recorded context-attention weights for one prediction step."""

    site: str
    sentence_index: int
    token_position: int
    sentence_weights: np.ndarray  # [han_heads, k_eff]
    word_weights: list  # per cached sentence j: [han_heads, len_j]


def _word_summary(q_w: Tensor, states: Tensor, block: HanBlock, mask=None, sink=None, name="word"):
    attn, w = multi_head_attention(block.word_attn, q_w, states, states, mask,
                                   block.n_heads, sink, name)
    if block.residual:
        attn = q_w + attn
    return block.norm_word(attn), w


def _sentence_context(q_s: Tensor, summaries: Tensor, block: HanBlock, sink=None, name="sent"):
    attn, w = multi_head_attention(block.sent_attn, q_s, summaries, summaries, None,
                                   block.n_heads, sink, name)
    if block.residual:
        attn = q_s + attn
    a = block.norm_sent(attn)
    ff = feed_forward(block.ffn, a)
    if block.residual:
        ff = a + ff
    return block.norm_ffn(ff), w


def word_level_summary(h_t: Tensor, sentence_states: Tensor, block: HanBlock):
    """Summarize one cached sentence for the query state h_t [d_model].

    Returns (s_j [d_model], word_weights [han_heads, len_j]).
    """
    if sentence_states.shape[-2] == 0:
        raise T.ShapeError("word_level_summary over an empty sentence")
    q_w = T.affine(T.reshape(h_t, (1, -1)), block.f_w_w, block.f_w_b)
    s, w = _word_summary(q_w, sentence_states, block)
    return T.reshape(s, (-1,)), w.data[:, 0, :]


def sentence_level_summary(h_t: Tensor, summaries: Tensor, block: HanBlock):
    """Condense per-sentence summaries [k_eff, d_model] into one context vector.

    Returns (d_t [d_model], sentence_weights [han_heads, k_eff]).
    """
    q_s = T.affine(T.reshape(h_t, (1, -1)), block.f_s_w, block.f_s_b)
    d_t, w = _sentence_context(q_s, summaries, block)
    return T.reshape(d_t, (-1,)), w.data[:, 0, :]


def _gate_proj(x: Tensor, w: Tensor) -> Tensor:
    if x.ndim == 1:
        return T.reshape(T.matmul(T.reshape(x, (1, -1)), w), (-1,))
    return T.matmul(x, w)


def context_gate(h_t: Tensor, d_t: Tensor, block: HanBlock):
    """Elementwise sigmoid blend of the current state and the context vector."""
    if block.force_gate is not None:
        lam = Tensor(np.full(h_t.shape, float(block.force_gate), dtype=h_t.data.dtype))
    else:
        lam = T.sigmoid(_gate_proj(h_t, block.gate_wh) + _gate_proj(d_t, block.gate_wd))
    h_tilde = lam * h_t + (1.0 - lam) * d_t
    return h_tilde, lam


def han_apply(site: str, h: Tensor, cache: ContextCache, block: HanBlock,
              trace_sink: list | None = None, sentence_index: int = 0,
              attn_sink: list | None = None) -> Tensor:
    """Context-gate every position of ``h`` [len, d_model] against the cache.

    With an empty cache the input is returned unchanged (document start
    behaves exactly like the context-free model).
    """
    if block.site != site:
        raise ConfigError(f"site {site!r} does not match block built for {block.site!r}")
    entries = cache.values_for(site)
    k_eff = len(entries)
    if k_eff == 0:
        return h

    q_w = T.affine(h, block.f_w_w, block.f_w_b)  # [len, d]
    s_list, word_w = [], []
    for j, states in enumerate(entries):
        s_j, w_j = _word_summary(q_w, Tensor(np.asarray(states, dtype=h.data.dtype)), block,
                                 sink=attn_sink, name=f"han.{site}.word.{j}")
        s_list.append(s_j)
        word_w.append(w_j.data)  # [heads, len, len_j]
    summaries = T.stack(s_list, axis=1)  # [len, k_eff, d]

    q_s = T.reshape(T.affine(h, block.f_s_w, block.f_s_b), (h.shape[0], 1, h.shape[1]))
    d_ctx, w_s = _sentence_context(q_s, summaries, block, sink=attn_sink, name=f"han.{site}.sent")
    d_ctx = T.reshape(d_ctx, h.shape)
    h_tilde, _ = context_gate(h, d_ctx, block)

    if trace_sink is not None:
        for t in range(h.shape[0]):
            trace_sink.append(AttentionTrace(
                site=site,
                sentence_index=sentence_index,
                token_position=t,
                sentence_weights=w_s.data[t, :, 0, :].copy(),
                word_weights=[w[:, t, :].copy() for w in word_w],
            ))
    return h_tilde


def han_apply_batch(site: str, h: Tensor, caches: list[ContextCache], block: HanBlock,
                    attn_sink: list | None = None) -> Tensor:
    """Batched version of :func:`han_apply` for h [B, len, d_model].

    Requires every cache to hold the same number of entries (the batch
    planner groups sentences at equal document depth, which guarantees
    it); cached sentences of different lengths are padded and masked.
    Falls back to the per-sentence path on mixed depths.
    """
    if block.site != site:
        raise ConfigError(f"site {site!r} does not match block built for {block.site!r}")
    b, length, d = h.shape
    k_effs = [len(c.values_for(site)) for c in caches]
    if all(k == 0 for k in k_effs):
        return h
    if len(set(k_effs)) != 1:
        rows = [han_apply(site, T.slice0(h, i), caches[i], block) for i in range(b)]
        return T.stack(rows, axis=0)
    k_eff = k_effs[0]
    dtype = h.data.dtype

    q_w = T.affine(h, block.f_w_w, block.f_w_b)  # [B, len, d]
    s_list = []
    for j in range(k_eff):
        sents = [c.values_for(site)[j] for c in caches]
        lmax = max(s.shape[0] for s in sents)
        keys = np.zeros((b, lmax, d), dtype=dtype)
        real = np.zeros((b, lmax), dtype=bool)
        for i, s in enumerate(sents):
            keys[i, : s.shape[0]] = s
            real[i, : s.shape[0]] = True
        mask = np.where(real, 0.0, NEG_INF).astype(dtype)[:, None, None, :]
        kt = Tensor(keys)
        s_j, _ = _word_summary(q_w, kt, block, mask=mask, sink=attn_sink,
                               name=f"han.{site}.word.{j}")
        s_list.append(s_j)
    summaries = T.stack(s_list, axis=2)  # [B, len, k_eff, d]

    q_s = T.reshape(T.affine(h, block.f_s_w, block.f_s_b), (b, length, 1, d))
    d_ctx, _ = _sentence_context(q_s, summaries, block, sink=attn_sink, name=f"han.{site}.sent")
    d_ctx = T.reshape(d_ctx, (b, length, d))
    h_tilde, _ = context_gate(h, d_ctx, block)
    return h_tilde
