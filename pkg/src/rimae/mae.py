"""Dual-branch masked pretraining in latent space, plus the coordinate AE baseline.

The student encodes visible patches; a one-block predictor fills in the
masked ones from mask tokens (shared vector + position embedding of the
masked patch); the teacher, an EMA copy of the student encoder, encodes every
patch and supplies the regression targets for the masked rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embed import embed_patches, relative_orientation_embedding
from .nn import clone_params, init_layernorm, init_linear, init_mlp, layernorm, linear
from .tensor import Tensor, no_grad
from .transformer import EncoderConfig, encode, init_block_params, init_encoder_params, run_blocks


@dataclass
class MaskPlan:
    """Visible/masked patch indices; 1-d for one cloud or (B, n) for a batch."""

    visible: np.ndarray
    masked: np.ndarray
    alpha: float

    def batched(self, b):
        if self.visible.ndim == 2:
            return self
        return MaskPlan(np.tile(self.visible, (b, 1)), np.tile(self.masked, (b, 1)), self.alpha)


def n_masked(g, alpha):
    return int(np.floor(alpha * g))


def make_mask(g, alpha, rng):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {alpha}")
    m = n_masked(g, alpha)
    if m < 1 or m >= g:
        raise ValueError(f"mask ratio {alpha} with G={g} gives {m} masked patches")
    perm = rng.permutation(g)
    return MaskPlan(np.sort(perm[m:]), np.sort(perm[:m]), alpha)


def make_masks(b, g, alpha, rng):
    plans = [make_mask(g, alpha, rng) for _ in range(b)]
    return MaskPlan(np.stack([p.visible for p in plans]), np.stack([p.masked for p in plans]), alpha)


@dataclass
class DualBranchState:
    student: dict
    teacher: dict | None
    predictor: dict
    ema_m0: float = 0.996
    ema_momentum: float = 0.996
    step: int = 0
    mode: str = "dual_branch"

    @property
    def mask_token(self):
        return self.predictor["mask_token"]

    def trainable(self):
        out = {f"student.{k}": v for k, v in self.student.items()}
        out.update({f"predictor.{k}": v for k, v in self.predictor.items()})
        return out


def init_predictor_params(cfg, rng, head_out=0):
    m = cfg.model
    params = {}
    for i in range(m.predictor_depth):
        init_block_params(params, f"blocks.{i}", m.dim, m.mlp_ratio, rng)
    init_layernorm(params, "norm", m.dim)
    if cfg.ablation.ri_oe and not cfg.ablation.baseline:
        init_mlp(params, "oe", (9, m.dim, m.dim), rng)
    params["mask_token"] = Tensor(rng.normal(0.0, cfg.mae.mask_token_init, size=m.dim), requires_grad=True)
    if head_out:
        init_linear(params, "head", m.dim, head_out, rng)
    return params


def init_state(cfg, rng):
    """Student and teacher start from the same draw; teacher is grad-free."""
    student = init_encoder_params(cfg, rng)
    ae = cfg.ablation.dual_branch_vs_ae == "ae"
    predictor = init_predictor_params(cfg, rng, head_out=cfg.model.k * 3 if ae else 0)
    teacher = None if ae else clone_params(student, requires_grad=False)
    return DualBranchState(student=student, teacher=teacher, predictor=predictor,
                           ema_m0=cfg.mae.ema_m0, ema_momentum=cfg.mae.ema_m0,
                           mode="ae" if ae else "dual_branch")


def _predict_masked(z_vis, tokens, plan, params, cfg):
    """Run the predictor over [encoded visible; mask tokens], return masked rows."""
    b, v, d = z_vis.shape
    mcount = plan.masked.shape[1]
    tm = params["mask_token"]
    if tokens.ripos is None:
        mask_in = T.add(Tensor(np.zeros((b, mcount, d))), tm)
    else:
        mask_in = T.add(T.gather(tokens.ripos, plan.masked), tm)
    x = T.concat([z_vis, mask_in], axis=1)

    rel = None
    if "oe.fc1.w" in params:
        order = np.concatenate([plan.visible, plan.masked], axis=1)
        rows = np.arange(b)[:, None]
        rot = tokens.rotations[rows, order]
        deg = tokens.degenerate_mask[rows, order].copy()
        if not cfg.mae.expose_mask_orientation:
            deg[:, v:] = True
        rel = relative_orientation_embedding(rot, deg, params)
    x = run_blocks(x, None, rel, params, "blocks.", cfg.model.predictor_depth, cfg.model.heads)
    x = layernorm(x, params, "norm")
    tail = np.tile(np.arange(v, v + mcount), (b, 1))
    return T.gather(x, tail)


def student_forward(geom, plan, state, cfg, rng=None):
    """Predicted latents of the masked patches, (B, M, D)."""
    plan = plan.batched(geom.shape[0])
    enc = EncoderConfig.from_config(cfg)
    tokens = embed_patches(geom, state.student, cfg.ablation)
    z_vis = encode(tokens.subset(plan.visible), enc, state.student, rng)
    return _predict_masked(z_vis, tokens, plan, state.predictor, cfg)


def teacher_forward(geom, plan, state, cfg):
    """Teacher latents of all patches gathered at the masked rows (no graph)."""
    plan = plan.batched(geom.shape[0])
    enc = EncoderConfig.from_config(cfg)
    with no_grad():
        tokens = embed_patches(geom, state.teacher, cfg.ablation)
        z = encode(tokens, enc, state.teacher)
        target = T.gather(z, plan.masked).data
    if cfg.mae.target_norm:
        target = target - target.mean(-1, keepdims=True)
        target = target / np.sqrt(target.var(-1, keepdims=True) + 1e-6)
    return Tensor(target)


def latent_loss(zs, zt):
    """Mean over masked rows of the squared L2 distance."""
    return T.mse(zs, zt)


def teacher_variance(zt):
    """Mean per-feature variance of teacher targets across all masked rows."""
    data = zt.data if isinstance(zt, Tensor) else np.asarray(zt)
    flat = data.reshape(-1, data.shape[-1])
    return float(flat.var(axis=0).mean())


def ema_update(state, momentum=None):
    """``teacher <- m * teacher + (1 - m) * student`` for every encoder parameter."""
    m = state.ema_momentum if momentum is None else momentum
    if state.teacher is None:
        return state
    if state.teacher.keys() != state.student.keys():
        raise RuntimeError("teacher and student parameter trees differ")
    for name, s in state.student.items():
        t = state.teacher[name]
        if t.shape != s.shape:
            raise RuntimeError(f"teacher/student shape mismatch at {name}")
        t.data = m * t.data + (1.0 - m) * s.data
    return state


def dual_branch_loss(geom, plan, state, cfg, rng=None):
    zs = student_forward(geom, plan, state, cfg, rng)
    zt = teacher_forward(geom, plan, state, cfg)
    return latent_loss(zs, zt), zt


def ae_reconstruct(geom, plan, state, cfg, rng=None):
    """Decoder predictions (B, M, K, 3) and the matching masked-patch targets."""
    plan = plan.batched(geom.shape[0])
    enc = EncoderConfig.from_config(cfg)
    tokens = embed_patches(geom, state.student, cfg.ablation)
    z_vis = encode(tokens.subset(plan.visible), enc, state.student, rng)
    h = _predict_masked(z_vis, tokens, plan, state.predictor, cfg)
    b, m, _ = h.shape
    k = geom.points.shape[2]
    pred = T.reshape(linear(h, state.predictor, "head"), (b, m, k, 3))
    rows = np.arange(b)[:, None]
    return pred, geom.local[rows, plan.masked]


def ae_baseline_step(geom, plan, state, cfg, rng=None):
    """Coordinate-space reconstruction loss of the conventional masked AE.

    The decoder head predicts K points per masked patch (relative to its
    center) and is scored by Chamfer distance against the masked patches in
    the input frame, so the loss depends on the input orientation even when
    the encoder does not.
    """
    pred, target = ae_reconstruct(geom, plan, state, cfg, rng)
    return T.chamfer_l2(pred, Tensor(target))


def per_sample_losses(geom, plan, state, cfg):
    """Pretraining loss of each cloud in the batch, without building a graph."""
    with no_grad():
        if state.mode == "ae":
            pred, target = ae_reconstruct(geom, plan, state, cfg)
            return np.array([T.chamfer_l2(Tensor(pred.data[i]), Tensor(target[i])).item()
                             for i in range(target.shape[0])])
        zs = student_forward(geom, plan, state, cfg).data
        zt = teacher_forward(geom, plan, state, cfg).data
    return ((zs - zt) ** 2).sum(-1).mean(-1)


def pretrain_loss(geom, plan, state, cfg, rng=None):
    """Objective for the state's mode; returns (loss, teacher targets or None)."""
    if state.mode == "ae":
        return ae_baseline_step(geom, plan, state, cfg, rng), None
    return dual_branch_loss(geom, plan, state, cfg, rng)
