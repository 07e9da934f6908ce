"""Transformer encoder with relative-orientation attention bias.

Each block is pre-norm: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``. The
attention logits get an additive bias ``b_ij = q_i . r_ij`` computed per head
from the block's own queries and the shared pairwise orientation embeddings
``r_ij``, so both terms scale together by ``1/sqrt(d_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embed import init_embed_params, relative_orientation_embedding
from .exceptions import NumericError
from .nn import init_layernorm, init_linear, init_mlp, layernorm, linear, mlp
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    dim: int = 96
    heads: int = 2
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    ri_oe: bool = True
    pe_every_layer: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")

    @classmethod
    def from_config(cls, cfg):
        m, a = cfg.model, cfg.ablation
        return cls(depth=m.depth, dim=m.dim, heads=m.heads, mlp_ratio=m.mlp_ratio,
                   dropout=m.dropout, ri_oe=a.ri_oe and not a.baseline,
                   pe_every_layer=m.pe_every_layer)


def init_block_params(params, name, dim, mlp_ratio, rng):
    init_layernorm(params, f"{name}.ln1", dim)
    for proj in ("wq", "wk", "wv"):
        init_linear(params, f"{name}.attn.{proj}", dim, dim, rng, bias=False)
    init_linear(params, f"{name}.attn.proj", dim, dim, rng)
    init_layernorm(params, f"{name}.ln2", dim)
    init_mlp(params, f"{name}.mlp", (dim, int(dim * mlp_ratio), dim), rng)


def init_encoder_params(cfg, rng):
    """Tokenizer, embedders, ``depth`` blocks and the final norm."""
    m = cfg.model
    params = {}
    init_embed_params(params, m.dim, rng, ori_embedding=cfg.ablation.ori_embedding)
    for i in range(m.depth):
        init_block_params(params, f"blocks.{i}", m.dim, m.mlp_ratio, rng)
    init_layernorm(params, "norm", m.dim)
    return params


def _split_heads(x, heads):
    b, g, d = x.shape
    return T.transpose(T.reshape(x, (b, g, heads, d // heads)), (0, 2, 1, 3))


def compute_ri_oe_bias(x, rel_embed, params, name, heads):
    """Per-head bias ``B[b, h, i, j] = (x_i W^Q)_h . (r_ij)_h``.

    ``x`` (B, G, D), ``rel_embed`` (B, G, G, D). With one head this is the
    plain bilinear form ``x_i W^Q r_ij^T``.
    """
    b, g, d = x.shape
    q = _split_heads(linear(x, params, f"{name}.wq"), heads)
    r = T.transpose(T.reshape(rel_embed, (b, g, g, heads, d // heads)), (0, 3, 1, 2, 4))
    return T.einsum("bhid,bhijd->bhij", q, r)


def biased_attention(x, bias, params, name, heads, dropout=0.0, rng=None):
    """Multi-head self-attention with ``softmax((QK^T + B) / sqrt(d_k)) V``."""
    b, g, d = x.shape
    dk = d // heads
    q = _split_heads(linear(x, params, f"{name}.wq"), heads)
    k = _split_heads(linear(x, params, f"{name}.wk"), heads)
    v = _split_heads(linear(x, params, f"{name}.wv"), heads)
    logits = T.matmul(q, T.transpose(k))
    if bias is not None:
        logits = T.add(logits, bias)
    attn = T.softmax(T.mul(logits, 1.0 / np.sqrt(dk)))
    attn = _dropout(attn, dropout, rng)
    out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, g, d))
    return linear(out, params, f"{name}.proj")


def _dropout(x, rate, rng):
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, Tensor(keep))


def block(x, rel_embed, params, name, heads, dropout=0.0, rng=None):
    h = layernorm(x, params, f"{name}.ln1")
    bias = None if rel_embed is None else compute_ri_oe_bias(h, rel_embed, params, f"{name}.attn", heads)
    x = T.add(x, biased_attention(h, bias, params, f"{name}.attn", heads, dropout, rng))
    h = mlp(layernorm(x, params, f"{name}.ln2"), params, f"{name}.mlp", 2)
    return T.add(x, _dropout(h, dropout, rng))


def run_blocks(x, pos, rel_embed, params, prefix, depth, heads, pe_every_layer=True,
               dropout=0.0, rng=None):
    if pos is not None:
        x = T.add(x, pos)
    for i in range(depth):
        if i > 0 and pos is not None and pe_every_layer:
            x = T.add(x, pos)
        try:
            x = block(x, rel_embed, params, f"{prefix}{i}", heads, dropout, rng)
        except NumericError as exc:
            raise NumericError(f"non-finite activations in block {i}: {exc}") from None
    return x


def encode(patch_tokens, config, params, rng=None):
    """Encode (a subset of) patches into latents of shape (B, G, D).

    ``config`` is an :class:`EncoderConfig`. The relative-orientation
    embedding is evaluated once and shared by all blocks.
    """
    rel = None
    if config.ri_oe:
        rel = relative_orientation_embedding(patch_tokens.rotations, patch_tokens.degenerate_mask, params)
    x = run_blocks(patch_tokens.tokens, patch_tokens.ripos, rel, params, "blocks.",
                   config.depth, config.heads, config.pe_every_layer, config.dropout, rng)
    return layernorm(x, params, "norm")
