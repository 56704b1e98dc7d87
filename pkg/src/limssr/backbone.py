"""Miniature decoder-only transformer used as the sequence reasoner.

Pre-norm blocks (attention then FFN, both residual), learned absolute
position embeddings, a final layer norm, and low-rank adapters on the
attention projections.  Input is an embedding matrix, not token ids; the
token table lives here too so prompts and special tokens share it.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import nn
from .numerics.nn import ADAPTER, BASE, EMBEDDING, LayerNorm, Module, Parameter
from .numerics.tensor import (
    ShapeError,
    add,
    causal_softmax,
    dropout,
    gather_rows,
    gelu,
    linear,
    matmul,
    mul,
    reshape,
    swapaxes,
    transpose,
)


@dataclass
class BackboneConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 0
    max_seq_len: int = 128
    dropout_rate: float = 0.0
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    lora_targets: tuple = ("q", "k", "v", "o")

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        self.lora_targets = tuple(self.lora_targets)


class LoraAdapter(Module):
    """Low-rank update ``(alpha / r) * x @ down @ up`` added to a base linear map.

    ``down`` is (d_in, r), ``up`` is (r, d_out).  ``up`` starts at zero so the
    adapted layer equals the base layer at initialisation.
    """

    def __init__(self, rng, d_in, d_out, rank, alpha, dropout_rate, dtype):
        self.down = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank)).astype(dtype), group=ADAPTER)
        self.up = Parameter(np.zeros((rank, d_out), dtype=dtype), group=ADAPTER)
        self.scale = alpha / rank
        self.dropout_rate = dropout_rate

    def __call__(self, x, train, rng):
        h = dropout(x, self.dropout_rate, train, rng)
        return mul(matmul(matmul(h, self.down), self.up), self.scale)


class AdaptedLinear(Module):
    def __init__(self, rng, d_in, d_out, cfg, dtype, adapt):
        self.base = nn.Linear(rng, d_in, d_out, group=BASE, dtype=dtype)
        self.lora = (
            LoraAdapter(rng, d_in, d_out, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, dtype) if adapt else None
        )

    def __call__(self, x, train=False, rng=None, use_adapter=True):
        y = self.base(x)
        if self.lora is not None and use_adapter:
            y = add(y, self.lora(x, train, rng))
        return y


class CausalSelfAttention(Module):
    def __init__(self, rng, cfg, dtype):
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.q = AdaptedLinear(rng, d, d, cfg, dtype, "q" in cfg.lora_targets)
        self.k = AdaptedLinear(rng, d, d, cfg, dtype, "k" in cfg.lora_targets)
        self.v = AdaptedLinear(rng, d, d, cfg, dtype, "v" in cfg.lora_targets)
        self.o = AdaptedLinear(rng, d, d, cfg, dtype, "o" in cfg.lora_targets)

    def __call__(self, x, train, rng, use_adapter):
        b, s, d = x.shape
        h = self.num_heads
        dh = d // h

        def heads(t):
            return transpose(reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

        q = heads(self.q(x, train, rng, use_adapter))
        k = heads(self.k(x, train, rng, use_adapter))
        v = heads(self.v(x, train, rng, use_adapter))
        scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        att = causal_softmax(scores)
        ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, s, d))
        return self.o(ctx, train, rng, use_adapter)


class Block(Module):
    def __init__(self, rng, cfg, dtype):
        d = cfg.model_dim
        self.ln1 = LayerNorm(d, group=BASE, dtype=dtype)
        self.attn = CausalSelfAttention(rng, cfg, dtype)
        self.ln2 = LayerNorm(d, group=BASE, dtype=dtype)
        self.fc1 = nn.Linear(rng, d, cfg.ffn_dim, group=BASE, dtype=dtype)
        self.fc2 = nn.Linear(rng, cfg.ffn_dim, d, group=BASE, dtype=dtype)
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, x, train, rng, use_adapter):
        a = self.attn(self.ln1(x), train, rng, use_adapter)
        x = add(x, dropout(a, self.dropout_rate, train, rng))
        f = self.fc2(gelu(self.fc1(self.ln2(x))))
        return add(x, dropout(f, self.dropout_rate, train, rng))


class Backbone(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        if cfg.vocab_size <= 0:
            raise ValueError("BackboneConfig.vocab_size must be set before building the backbone")
        self.cfg = cfg
        d = cfg.model_dim
        self.token_embedding = Parameter(rng.normal(0.0, 0.5, size=(cfg.vocab_size, d)).astype(dtype), group=EMBEDDING)
        self.position_embedding = Parameter(
            rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d)).astype(dtype), group=EMBEDDING
        )
        self.blocks = [Block(rng, cfg, dtype) for _ in range(cfg.num_layers)]
        self.ln_f = LayerNorm(d, group=BASE, dtype=dtype)

    def embed(self, token_ids):
        """Rows of the shared token table, shape (len(token_ids), D)."""
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"embed: token id out of range [0, {self.cfg.vocab_size})")
        return gather_rows(self.token_embedding, ids)

    def forward(self, x, train=False, rng=None, use_adapter=True, positions=None):
        """Last-layer hidden states for embeddings ``x`` of shape (S, D) or (B, S, D).

        ``positions`` overrides the learned position table with explicit
        (S, D) or (B, S, D) values; the gradient check uses it to evaluate
        many perturbed tables in one batch.
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        b, s, d = x.shape
        if d != self.cfg.model_dim:
            raise ShapeError(f"backbone.forward: width {d} != model_dim {self.cfg.model_dim}")
        if s > self.cfg.max_seq_len:
            raise ValueError(f"backbone.forward: sequence length {s} exceeds max_seq_len {self.cfg.max_seq_len}")
        if not np.isfinite(x.data).all():
            raise FloatingPointError("backbone.forward: non-finite input embeddings")
        if positions is not None:
            pos = positions
        else:
            pos = self.position_embedding[:s] if s < self.cfg.max_seq_len else self.position_embedding
        h = add(x, pos)
        h = dropout(h, self.cfg.dropout_rate, train, rng)
        for blk in self.blocks:
            h = blk(h, train, rng, use_adapter)
        h = self.ln_f(h)
        if squeeze:
            h = reshape(h, (s, d))
        return h

    __call__ = forward

    def adapters(self):
        out = []
        for blk in self.blocks:
            for lin in (blk.attn.q, blk.attn.k, blk.attn.v, blk.attn.o):
                if lin.lora is not None:
                    out.append(lin.lora)
        return out


__all__ = ["Backbone", "BackboneConfig", "LoraAdapter", "linear"]
