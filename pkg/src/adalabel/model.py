"""Transformer encoder, causal dialogue decoder, and the bi-directional
auxiliary decoder.

The auxiliary decoder is a single pre-norm transformer layer whose
self-attention blocks exactly the superdiagonal: query position i may attend
every key except i+1, the position holding the token it predicts. One layer
is mandatory; stacking a second would route the hidden token back in through
an intermediate position.

All three components share one token-embedding table; output projections are
separate. Forward passes build autodiff graphs unless wrapped in
``autodiff.no_grad()``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    enc_layers: int = 2
    dec_layers: int = 2
    aux_layers: int = 1
    heads: int = 4
    hidden: int = 64
    ffn_dim: int = 128
    max_len: int = 102
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 6:
            raise ValueError("vocab_size must cover the reserved ids plus at least one token")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.aux_layers != 1:
            raise ValueError("leakage risk: the auxiliary decoder must have exactly one layer")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.max_len < 2:
            raise ValueError("max_len too small")
        for name in ("enc_layers", "dec_layers", "heads", "hidden", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def desk(cls, vocab_size, **overrides):
        """Small preset that trains in minutes on a laptop CPU."""
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def paper_scale(cls, vocab_size=30522, **overrides):
        """6/6/1-layer preset with hidden 512, 8 heads, ffn 512, dropout 0.1."""
        base = dict(enc_layers=6, dec_layers=6, aux_layers=1, heads=8,
                    hidden=512, ffn_dim=512, dropout=0.1)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)


@dataclass
class EncoderMemory:
    """Per-position encoder states plus the source pad mask (True = pad)."""

    states: Tensor
    src_pad: np.ndarray


def build_causal_mask(length):
    """Boolean (L, L) matrix, True where attention is blocked: key > query."""
    if length <= 0:
        raise ValueError("mask length must be positive")
    idx = np.arange(length)
    return idx[None, :] > idx[:, None]


def build_target_mask(length):
    """Boolean (L, L) matrix blocking exactly the superdiagonal key == query+1.

    Every other pair stays visible, so each query sees the full sequence
    except the single token it is asked to predict.
    """
    if length <= 0:
        raise ValueError("mask length must be positive")
    idx = np.arange(length)
    return idx[None, :] == idx[:, None] + 1


def sinusoidal_positions(max_len, hidden, dtype=np.float32):
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(hidden, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * (dim // 2) / hidden)
    pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def _attention_param_shapes(prefix, hidden):
    shapes = {}
    for name in ("wq", "wk", "wv", "wo"):
        shapes[f"{prefix}.{name}"] = (hidden, hidden)
    for name in ("bq", "bk", "bv", "bo"):
        shapes[f"{prefix}.{name}"] = (hidden,)
    return shapes


def _layer_param_shapes(prefix, hidden, ffn_dim, cross_attention):
    shapes = {}
    shapes.update(_attention_param_shapes(f"{prefix}.self", hidden))
    shapes[f"{prefix}.ln1.g"] = (hidden,)
    shapes[f"{prefix}.ln1.b"] = (hidden,)
    if cross_attention:
        shapes.update(_attention_param_shapes(f"{prefix}.cross", hidden))
        shapes[f"{prefix}.ln2.g"] = (hidden,)
        shapes[f"{prefix}.ln2.b"] = (hidden,)
    shapes[f"{prefix}.ffn.w1"] = (hidden, ffn_dim)
    shapes[f"{prefix}.ffn.b1"] = (ffn_dim,)
    shapes[f"{prefix}.ffn.w2"] = (ffn_dim, hidden)
    shapes[f"{prefix}.ffn.b2"] = (hidden,)
    shapes[f"{prefix}.ln3.g"] = (hidden,)
    shapes[f"{prefix}.ln3.b"] = (hidden,)
    return shapes


def parameter_shapes(config):
    """Ordered name -> shape map for every learnable parameter.

    Single source of truth for allocation, checkpointing, and size
    accounting; computing counts from it never allocates the arrays.
    """
    h, f = config.hidden, config.ffn_dim
    shapes = {"embed.tok": (config.vocab_size, h)}
    for i in range(config.enc_layers):
        shapes.update(_layer_param_shapes(f"enc.{i}", h, f, cross_attention=False))
    shapes["enc.ln_out.g"] = (h,)
    shapes["enc.ln_out.b"] = (h,)
    for i in range(config.dec_layers):
        shapes.update(_layer_param_shapes(f"dec.{i}", h, f, cross_attention=True))
    shapes["dec.ln_out.g"] = (h,)
    shapes["dec.ln_out.b"] = (h,)
    shapes["dec.proj.w"] = (h, config.vocab_size)
    shapes["dec.proj.b"] = (config.vocab_size,)
    for i in range(config.aux_layers):
        shapes.update(_layer_param_shapes(f"aux.{i}", h, f, cross_attention=True))
    shapes["aux.ln_out.g"] = (h,)
    shapes["aux.ln_out.b"] = (h,)
    shapes["aux.proj.w"] = (h, config.vocab_size)
    shapes["aux.proj.b"] = (config.vocab_size,)
    return shapes


def parameter_count(config, prefixes=None):
    total = 0
    for name, shape in parameter_shapes(config).items():
        if prefixes is None or any(name.startswith(p) for p in prefixes):
            total += int(np.prod(shape))
    return total


class TransformerModel:
    """Shared-encoder seq2seq model with a dialogue and an auxiliary decoder."""

    def __init__(self, config, seed=0, dtype=np.float32, params=None):
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(seed)
            self.params = {}
            for name, shape in parameter_shapes(config).items():
                if name.endswith((".g",)):
                    self.params[name] = ad.ones_param(shape, dtype=self.dtype)
                elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
                    self.params[name] = ad.zeros_param(shape, dtype=self.dtype)
                else:
                    self.params[name] = ad.normal_init(shape, rng, std=0.02, dtype=self.dtype)
        self._posenc = sinusoidal_positions(config.max_len, config.hidden, self.dtype)
        self._neg_inf = np.array(-np.inf, dtype=self.dtype)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        return self.params

    def param_group(self, group):
        """Parameter names for 'shared', 'encoder', 'dialogue' or 'auxiliary'."""
        prefix = {"shared": "embed.", "encoder": "enc.", "dialogue": "dec.", "auxiliary": "aux."}[group]
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """Name -> ndarray snapshot of current parameter values."""
        return {name: p.data.copy() for name, p in self.params.items()}

    @classmethod
    def from_arrays(cls, config, arrays, dtype=np.float32):
        expected = parameter_shapes(config)
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise ValueError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        params = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=dtype)
            if arr.shape != tuple(shape):
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {tuple(shape)}")
            params[name] = Tensor(arr, requires_grad=True)
        return cls(config, params=params, dtype=dtype)

    # -- forward passes ---------------------------------------------------------

    def _check_ids(self, ids, what):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"{what} ids must be a (batch, length) matrix")
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"{what} length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"{what} contains token ids outside [0, {self.config.vocab_size})")
        return ids

    def _embed(self, ids):
        x = ad.embedding(self.params["embed.tok"], ids)
        x = ad.mul_const(x, math.sqrt(self.config.hidden))
        return x + Tensor(self._posenc[: ids.shape[1]])

    def _mha(self, prefix, query_x, kv_x, bias, train, rng):
        cfg = self.config
        p = self.params
        batch, len_q, hidden = query_x.shape
        len_k = kv_x.shape[1]
        nh, dh = cfg.heads, hidden // cfg.heads

        def split(t, length):
            t = ad.reshape(t, (batch, length, nh, dh))
            return ad.transpose(t, (0, 2, 1, 3))

        q = split(ad.linear(query_x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), len_q)
        k = split(ad.linear(kv_x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), len_k)
        v = split(ad.linear(kv_x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), len_k)

        scores = ad.mul_const(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + Tensor(bias)
        attn = ad.softmax(scores)
        if train and cfg.dropout > 0:
            attn = ad.dropout(attn, cfg.dropout, rng)
        ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        ctx = ad.reshape(ctx, (batch, len_q, hidden))
        return ad.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ffn(self, prefix, x, train, rng):
        p = self.params
        h = ad.relu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        if train and self.config.dropout > 0:
            h = ad.dropout(h, self.config.dropout, rng)
        return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _ln(self, prefix, x):
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _bias_from_blocked(self, blocked):
        """bool (.., Lq, Lk) -> additive bias with -inf at blocked positions."""
        return np.where(blocked, self._neg_inf, self.dtype.type(0.0))

    def encode(self, src_ids, src_pad, train=False, rng=None):
        src_ids = self._check_ids(src_ids, "source")
        src_pad = np.asarray(src_pad, dtype=bool)
        bias = self._bias_from_blocked(src_pad[:, None, None, :])
        x = self._embed(src_ids)
        for i in range(self.config.enc_layers):
            normed = self._ln(f"enc.{i}.ln1", x)
            x = x + self._mha(f"enc.{i}.self", normed, normed, bias, train, rng)
            x = x + self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln3", x), train, rng)
        return EncoderMemory(states=self._ln("enc.ln_out", x), src_pad=src_pad)

    def _decoder_stack(self, section, layers, dec_in, self_blocked, memory, train, rng):
        cross_bias = self._bias_from_blocked(memory.src_pad[:, None, None, :])
        self_bias = self._bias_from_blocked(self_blocked)
        x = self._embed(dec_in)
        for i in range(layers):
            prefix = f"{section}.{i}"
            normed = self._ln(f"{prefix}.ln1", x)
            x = x + self._mha(f"{prefix}.self", normed, normed, self_bias, train, rng)
            x = x + self._mha(f"{prefix}.cross", self._ln(f"{prefix}.ln2", x), memory.states, cross_bias, train, rng)
            x = x + self._ffn(f"{prefix}.ffn", self._ln(f"{prefix}.ln3", x), train, rng)
        x = self._ln(f"{section}.ln_out", x)
        return ad.linear(x, self.params[f"{section}.proj.w"], self.params[f"{section}.proj.b"])

    def dialogue_logits(self, dec_in, dec_pad, memory, train=False, rng=None):
        """Causal decoder logits (batch, L, vocab); position i sees inputs <= i."""
        dec_in = self._check_ids(dec_in, "decoder")
        dec_pad = np.asarray(dec_pad, dtype=bool)
        length = dec_in.shape[1]
        blocked = build_causal_mask(length)[None, None, :, :] | dec_pad[:, None, None, :]
        return self._decoder_stack("dec", self.config.dec_layers, dec_in, blocked, memory, train, rng)

    def auxiliary_logits(self, dec_in, dec_pad, memory, train=False, rng=None):
        """Auxiliary decoder logits; position i is blind to input i+1 only."""
        dec_in = self._check_ids(dec_in, "decoder")
        dec_pad = np.asarray(dec_pad, dtype=bool)
        length = dec_in.shape[1]
        blocked = build_target_mask(length)[None, None, :, :] | dec_pad[:, None, None, :]
        return self._decoder_stack("aux", self.config.aux_layers, dec_in, blocked, memory, train, rng)
