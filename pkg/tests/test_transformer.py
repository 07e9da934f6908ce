import numpy as np
import pytest

from rimae import tensor as T
from rimae.config import desk_config
from rimae.embed import build_patch_tokens, relative_orientation_embedding
from rimae.geometry import random_rotation
from rimae.nn import init_linear, layernorm
from rimae.tensor import Tensor, no_grad
from rimae.transformer import (
    EncoderConfig,
    biased_attention,
    compute_ri_oe_bias,
    encode,
    init_block_params,
    init_encoder_params,
)

from _oracles import numeric_grad, rel_error


def small(depth=2, dim=32, heads=2, **ablation):
    cfg = desk_config(model={"dim": dim, "depth": depth, "heads": heads}, ablation=ablation)
    return cfg, EncoderConfig.from_config(cfg)


def tokens_for(cloud, cfg, params):
    return build_patch_tokens(cloud, cfg.model.g, cfg.model.k, params, cfg.ablation)


def reference_attention(x, params, name, heads):
    """Plain numpy multi-head attention without bias."""
    b, g, d = x.shape
    dk = d // heads
    q = x @ params[f"{name}.wq.w"].data
    k = x @ params[f"{name}.wk.w"].data
    v = x @ params[f"{name}.wv.w"].data
    out = np.zeros_like(x)
    for h in range(heads):
        s = slice(h * dk, (h + 1) * dk)
        logits = q[..., s] @ np.swapaxes(k[..., s], -1, -2) / np.sqrt(dk)
        a = np.exp(logits - logits.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        out[..., s] = a @ v[..., s]
    return out @ params[f"{name}.proj.w"].data + params[f"{name}.proj.b"].data


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        EncoderConfig(dim=10, heads=3)


def test_depth_zero_is_layernorm_of_sum(rng, asym_clouds):
    cfg, enc = small(depth=0)
    params = init_encoder_params(cfg, rng)
    pt = tokens_for(asym_clouds[0][0], cfg, params)
    out = encode(pt, enc, params).data
    ref = layernorm(T.add(pt.tokens, pt.ripos), params, "norm").data
    np.testing.assert_array_equal(out, ref)


def test_zero_bias_matches_reference(rng):
    params = {}
    init_block_params(params, "b", 8, 4, rng)
    x = rng.normal(size=(2, 5, 8))
    with no_grad():
        plain = biased_attention(Tensor(x), None, params, "b.attn", 2).data
        zero = biased_attention(Tensor(x), Tensor(np.zeros((2, 2, 5, 5))), params, "b.attn", 2).data
    ref = reference_attention(x, params, "b.attn", 2)
    assert np.abs(plain - ref).max() < 1e-12 and np.abs(zero - ref).max() < 1e-12


def test_large_bias_collapses_onto_column(rng):
    params = {}
    init_block_params(params, "b", 8, 4, rng)
    x = rng.normal(size=(1, 5, 8))
    bias = np.zeros((1, 2, 5, 5))
    bias[..., 3] = 1e4
    out = biased_attention(Tensor(x), Tensor(bias), params, "b.attn", 2).data
    v = x @ params["b.attn.wv.w"].data
    expect = np.broadcast_to(v[:, 3:4], v.shape) @ params["b.attn.proj.w"].data + params["b.attn.proj.b"].data
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_bias_hand_arithmetic():
    params = {"a.wq.w": Tensor(np.array([[2.0]])), "a.wq.b": Tensor(np.zeros(1))}
    x = Tensor(np.array([[[1.0], [3.0]]]))
    rel = Tensor(np.array([[[[0.5], [-1.0]], [[2.0], [0.25]]]]))
    b = compute_ri_oe_bias(x, rel, params, "a", 1).data
    np.testing.assert_allclose(b[0, 0], [[1.0, -2.0], [12.0, 1.5]], atol=0)


def test_equal_rotations_give_constant_bias_rows(rng):
    params = {}
    init_block_params(params, "b", 8, 4, rng)
    from rimae.embed import init_embed_params
    init_embed_params(params, 8, rng)
    R = np.broadcast_to(random_rotation(rng), (1, 6, 3, 3))
    rel = relative_orientation_embedding(R, None, params)
    b = compute_ri_oe_bias(Tensor(rng.normal(size=(1, 6, 8))), rel, params, "b.attn", 2).data
    np.testing.assert_allclose(b, np.broadcast_to(b[..., :1], b.shape), atol=1e-12)


def test_bias_invariant_under_rotation(rng, asym_clouds):
    cfg, enc = small()
    params = init_encoder_params(cfg, rng)
    cloud = asym_clouds[0][3]

    def bias(c):
        pt = tokens_for(c, cfg, params)
        rel = relative_orientation_embedding(pt.rotations, pt.degenerate_mask, params)
        h = layernorm(T.add(pt.tokens, pt.ripos), params, "blocks.0.ln1")
        return compute_ri_oe_bias(h, rel, params, "blocks.0.attn", 2).data

    ref = bias(cloud)
    for _ in range(5):
        assert np.abs(bias(cloud @ random_rotation(rng)) - ref).max() < 1e-9


def test_encoder_rotation_invariance(rng, asym_clouds):
    cfg, enc = small()
    params = init_encoder_params(cfg, rng)
    cloud = asym_clouds[0][4]
    ref = encode(tokens_for(cloud, cfg, params), enc, params).data
    for _ in range(20):
        out = encode(tokens_for(cloud @ random_rotation(rng), cfg, params), enc, params).data
        assert np.abs(out - ref).max() < 1e-8


def test_baseline_encoder_is_not_invariant(rng, asym_clouds):
    cfg, enc = small(baseline=True)
    params = init_encoder_params(cfg, rng)
    cloud = asym_clouds[0][4]
    ref = encode(tokens_for(cloud, cfg, params), enc, params).data
    out = encode(tokens_for(cloud @ random_rotation(rng), cfg, params), enc, params).data
    assert np.abs(out - ref).max() > 1e-2


def test_permutation_equivariance(rng, asym_clouds):
    cfg, enc = small()
    params = init_encoder_params(cfg, rng)
    pt = tokens_for(asym_clouds[0][5], cfg, params)
    perm = rng.permutation(cfg.model.g)
    shuffled = pt.subset(perm[None])
    a = encode(pt, enc, params).data
    b = encode(shuffled, enc, params).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_attention_gradient(rng):
    params = {}
    init_block_params(params, "b", 4, 2, rng)
    x = rng.normal(size=(1, 3, 4))
    bias = rng.normal(size=(1, 2, 3, 3))
    w = rng.normal(size=(1, 3, 4))
    xt = Tensor(x.copy(), requires_grad=True)
    bt = Tensor(bias.copy(), requires_grad=True)
    T.sum(T.mul(biased_attention(xt, bt, params, "b.attn", 2), Tensor(w))).backward()

    def f_of(which, arr):
        def f():
            with no_grad():
                args = (Tensor(arr), Tensor(bias)) if which == "x" else (Tensor(x), Tensor(arr))
                return float((biased_attention(*args, params, "b.attn", 2).data * w).sum())
        return f

    xs, bs = x.copy(), bias.copy()
    assert rel_error(xt.grad, numeric_grad(f_of("x", xs), xs)) < 1e-5
    assert rel_error(bt.grad, numeric_grad(f_of("b", bs), bs)) < 1e-5


def test_linear_init_bounds(rng):
    params = {}
    init_linear(params, "l", 16, 4, rng)
    assert np.abs(params["l.w"].data).max() <= 0.25 and np.all(params["l.b"].data == 0)
