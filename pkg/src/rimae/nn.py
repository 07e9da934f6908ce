"""Parameter trees and the small functional layers built on :mod:`rimae.tensor`.

Parameters live in flat dicts keyed by dotted names (``"blocks.0.attn.wq"``),
which keeps EMA, optimizer state and checkpoints trivial to line up.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_linear(params, name, fan_in, fan_out, rng, bias=True):
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def init_layernorm(params, name, dim):
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def init_mlp(params, name, sizes, rng):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(params, f"{name}.fc{i + 1}", a, b, rng)


def linear(x, params, name):
    w = params[f"{name}.w"]
    if x.ndim == 1:
        out = T.reshape(T.matmul(T.reshape(x, (1, x.shape[0])), w), (w.shape[1],))
    else:
        out = T.matmul(x, w)
    b = params.get(f"{name}.b")
    return out if b is None else T.add(out, b)


def mlp(x, params, name, n_layers, act=T.gelu):
    """Stack of linear layers with ``act`` between them (none after the last)."""
    for i in range(1, n_layers + 1):
        x = linear(x, params, f"{name}.fc{i}")
        if i < n_layers:
            x = act(x)
    return x


def layernorm(x, params, name, eps=1e-5):
    return T.layernorm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def subtree(params, prefix):
    """Entries under ``prefix.`` with the prefix stripped (shares the tensors)."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def prefixed(params, prefix):
    return {f"{prefix}.{k}": v for k, v in params.items()}


def clone_params(params, requires_grad=None):
    out = {}
    for k, v in params.items():
        rg = v.requires_grad if requires_grad is None else requires_grad
        out[k] = Tensor(v.data.copy(), requires_grad=rg)
    return out


def zero_grads(params):
    for v in params.values():
        v.grad = None


def count_parameters(params):
    return int(sum(v.size for v in params.values()))
