"""Stage-by-stage rotation residuals of the whole pipeline.

For every cloud and random rotation the pipeline is recomputed on ``X @ R``
and compared with ``X``: canonical points, patch frames (against
``R_i @ R``), relative rotations, the pre-MLP position feature, encoder
latents and the pretraining loss under a fixed mask. Clouds with an
ambiguous patch in either copy are counted separately and left out of the
maxima.
"""

from __future__ import annotations

import numpy as np

from .canonicalize import relative_rotations
from .embed import embed_patches, patch_geometry, position_feature
from .geometry import random_rotation
from .mae import MaskPlan, make_masks, per_sample_losses
from .tensor import no_grad
from .transformer import EncoderConfig, encode

TOLERANCES = {
    "canonical": 1e-9,
    "frame": 1e-9,
    "relative": 1e-9,
    "position": 1e-9,
    "encoder": 1e-8,
    "loss": 1e-8,
}


def _geometry(clouds, cfg):
    return patch_geometry(clouds, cfg.model.g, cfg.model.k, rng=np.random.default_rng(0))


def eval_invariance(state, cfg, clouds, trials=10, seed=0, batch=64):
    """Max residual per stage over ``trials`` rotations of every cloud.

    Returns a dict with ``residuals``, ``tolerances``, ``passed`` (per stage),
    ``ok`` and sample counts.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if len(clouds) == 0:
        raise ValueError("no clouds to evaluate")
    rng = np.random.default_rng([seed, 51])
    enc = EncoderConfig.from_config(cfg)
    worst = dict.fromkeys(TOLERANCES, 0.0)
    n_pairs = n_skipped = 0

    jobs = []
    for ci, cloud in enumerate(clouds):
        for _ in range(trials):
            jobs.append((ci, random_rotation(rng)))
    plans = make_masks(len(clouds), cfg.model.g, cfg.mae.alpha, rng)

    with no_grad():
        base = _geometry(clouds, cfg)
        base_rel = relative_rotations(base.rotations)
        base_pos = position_feature(base.centers, base.rotations)
        base_z = []
        base_loss = []
        for s in range(0, len(clouds), batch):
            sel = slice(s, s + batch)
            geom = base.select(sel)
            base_z.append(encode(embed_patches(geom, state.student, cfg.ablation), enc, state.student).data)
            plan = _subplan(plans, sel)
            base_loss.append(per_sample_losses(geom, plan, state, cfg))
        base_z = np.concatenate(base_z)
        base_loss = np.concatenate(base_loss)

        for s in range(0, len(jobs), batch):
            chunk = jobs[s:s + batch]
            idx = np.array([ci for ci, _ in chunk])
            rots = np.stack([R for _, R in chunk])
            geom = _geometry([clouds[ci] @ R for ci, R in chunk], cfg)
            clean = ~(geom.ambiguous.any(axis=1) | base.ambiguous[idx].any(axis=1))
            n_skipped += int((~clean).sum())
            n_pairs += int(clean.sum())
            if not clean.any():
                continue
            ref = base.select(idx)
            c = clean
            worst["canonical"] = max(worst["canonical"],
                                     float(np.abs(geom.canonical[c] - ref.canonical[c]).max()))
            expect = ref.rotations[c] @ rots[c][:, None]
            frob = np.sqrt(((geom.rotations[c] - expect) ** 2).sum(axis=(-2, -1)))
            worst["frame"] = max(worst["frame"], float(frob.max()))
            rel = relative_rotations(geom.rotations[c])
            worst["relative"] = max(worst["relative"], float(np.abs(rel - base_rel[idx][c]).max()))
            pos = position_feature(geom.centers[c], geom.rotations[c])
            worst["position"] = max(worst["position"], float(np.abs(pos - base_pos[idx][c]).max()))
            z = encode(embed_patches(geom, state.student, cfg.ablation), enc, state.student).data
            worst["encoder"] = max(worst["encoder"], float(np.abs(z[c] - base_z[idx][c]).max()))
            plan = _subplan(plans, idx)
            loss = per_sample_losses(geom, plan, state, cfg)
            worst["loss"] = max(worst["loss"], float(np.abs(loss[c] - base_loss[idx][c]).max()))

    passed = {k: bool(worst[k] < TOLERANCES[k]) for k in TOLERANCES}
    return {
        "residuals": worst,
        "tolerances": dict(TOLERANCES),
        "passed": passed,
        "ok": bool(n_pairs > 0 and all(passed.values())),
        "evaluated_pairs": n_pairs,
        "degenerate_pairs": n_skipped,
        "trials": trials,
        "clouds": len(clouds),
    }


def _subplan(plans, sel):
    return MaskPlan(plans.visible[sel], plans.masked[sel], plans.alpha)

