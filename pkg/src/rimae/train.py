"""Pretraining loop, checkpoints, classification heads and evaluation scenarios."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import SCENARIOS, Config, config_from_dict
from .embed import embed_patches, patch_geometry
from .exceptions import NumericError
from .geometry import scenario_rotation
from .io import load_checkpoint, save_checkpoint, write_metrics_csv
from .mae import DualBranchState, init_state, make_masks, pretrain_loss, teacher_variance, ema_update
from .nn import init_mlp, mlp
from .optim import OptimState, adamw_step, ema_momentum, grads_of
from .tensor import Tensor, no_grad
from .transformer import EncoderConfig, encode

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "loss", "teacher_variance", "lr", "m")


def steps_per_epoch(n, batch):
    return max(1, math.ceil(n / batch))


def planned_steps(cfg, n):
    return cfg.optim.steps or cfg.optim.epochs * steps_per_epoch(n, cfg.optim.batch)


@dataclass
class PretrainResult:
    state: DualBranchState
    opt: OptimState
    config: Config
    rng: np.random.Generator
    curve: list = field(default_factory=list)

    def save(self, path):
        save_pretrain_checkpoint(path, self)

    def write_curve(self, path):
        write_metrics_csv(path, self.curve, CURVE_COLUMNS)


def _rotated(clouds, kind, rng):
    return [np.asarray(c, dtype=np.float64) @ scenario_rotation(kind, rng) for c in clouds]


def pretrain(clouds, cfg, resume=None, progress=None, until=None):
    """Run dual-branch (or AE) pretraining on a list of clouds.

    Each step rotates the batch per the scenario's training leg, patches and
    canonicalizes it, draws fresh masks, backpropagates the loss into the
    student and predictor, applies AdamW and then the EMA teacher update.
    ``until`` stops early (after that many total steps) without changing the
    schedules, so the run can be resumed from its checkpoint.
    """
    if len(clouds) == 0:
        raise ValueError("pretraining needs at least one cloud")
    n = len(clouds)
    total = planned_steps(cfg, n)
    spe = steps_per_epoch(n, cfg.optim.batch)
    if resume is None:
        state = init_state(cfg, np.random.default_rng([cfg.seed, 0]))
        opt = OptimState.from_config(cfg.optim, spe, total)
        rng = np.random.default_rng([cfg.seed, 1])
        curve = []
    else:
        state, opt, rng, curve = resume.state, resume.opt, resume.rng, list(resume.curve)
        opt.total_steps = total
    train_kind = SCENARIOS[cfg.scenario][0]
    m, model = cfg.mae, cfg.model
    drop_rng = rng if model.dropout > 0 else None
    trainable = state.trainable()
    bs = cfg.optim.batch

    for step in range(state.step, total if until is None else min(until, total)):
        # the epoch order depends only on (seed, epoch) so a resumed run sees the same batches
        epoch, pos = divmod(step, spe)
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(n)
        take = [int(i) for i in order[pos * bs:(pos + 1) * bs]]
        batch = _rotated([clouds[i] for i in take], train_kind, rng)
        geom = patch_geometry(batch, model.g, model.k, rng=rng)
        plan = make_masks(len(take), model.g, m.alpha, rng)

        for p in trainable.values():
            p.grad = None
        try:
            loss, zt = pretrain_loss(geom, plan, state, cfg, drop_rng)
            loss.backward()
        except NumericError as exc:
            raise NumericError(f"pretraining diverged at step {step + 1} (samples {take}): {exc}") from None
        lr = adamw_step(trainable, grads_of(trainable), opt)
        mom = ema_momentum(step, total, m.ema_m0, m.ema_schedule)
        state.ema_momentum = mom
        ema_update(state, mom)
        state.step = step + 1
        row = {
            "step": step + 1,
            "loss": loss.item(),
            "teacher_variance": teacher_variance(zt) if zt is not None else float("nan"),
            "lr": float(lr),
            "m": float(mom) if state.teacher is not None else float("nan"),
        }
        curve.append(row)
        if progress is not None:
            progress(row)
        log.debug("step %d loss %.6f", row["step"], row["loss"])
    return PretrainResult(state=state, opt=opt, config=cfg, rng=rng, curve=curve)


# ---------------------------------------------------------------- checkpoints

def _state_arrays(state, opt):
    arrays = {f"student.{k}": v.data for k, v in state.student.items()}
    arrays.update({f"predictor.{k}": v.data for k, v in state.predictor.items()})
    if state.teacher is not None:
        arrays.update({f"teacher.{k}": v.data for k, v in state.teacher.items()})
    if opt is not None:
        arrays.update({f"opt.m.{k}": v for k, v in opt.m.items()})
        arrays.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    return arrays


def save_pretrain_checkpoint(path, result):
    opt = result.opt
    manifest = {
        "config": result.config.to_dict(),
        "step": result.state.step,
        "mode": result.state.mode,
        "ema_momentum": result.state.ema_momentum,
        "rng_state": result.rng.bit_generator.state,
        "optim": {
            "step": opt.step, "base_lr": opt.base_lr, "weight_decay": opt.weight_decay,
            "warmup_steps": opt.warmup_steps, "total_steps": opt.total_steps,
            "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        },
    }
    save_checkpoint(path, _state_arrays(result.state, opt), manifest)


def load_pretrain_checkpoint(path):
    """Rebuild a :class:`PretrainResult` (without its loss curve) from disk."""
    arrays, meta = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])

    def tree(prefix, grad):
        p = prefix + "."
        return {k[len(p):]: Tensor(v, requires_grad=grad) for k, v in arrays.items() if k.startswith(p)}

    teacher = tree("teacher", False) or None
    state = DualBranchState(
        student=tree("student", True),
        teacher=teacher,
        predictor=tree("predictor", True),
        ema_m0=cfg.mae.ema_m0,
        ema_momentum=meta["ema_momentum"],
        step=meta["step"],
        mode=meta["mode"],
    )
    o = meta["optim"]
    opt = OptimState(**o)
    opt.m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
    opt.v = {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return PretrainResult(state=state, opt=opt, config=cfg, rng=rng)


# -------------------------------------------------------------------- features

def encode_clouds(clouds, params, cfg, batch=64):
    """Frozen-encoder latents (n, G, D) and a per-cloud "has ambiguous patch" flag."""
    enc = EncoderConfig.from_config(cfg)
    g, k = cfg.model.g, cfg.model.k
    lat, amb = [], []
    with no_grad():
        for start in range(0, len(clouds), batch):
            chunk = clouds[start:start + batch]
            geom = patch_geometry(chunk, g, k, rng=np.random.default_rng(0))
            z = encode(embed_patches(geom, params, cfg.ablation), enc, params)
            lat.append(z.data)
            amb.append(geom.ambiguous.any(axis=1))
    return np.concatenate(lat), np.concatenate(amb)


def pool_latents(latents):
    """Mean and max over patches, concatenated: (n, G, D) -> (n, 2D)."""
    return np.concatenate([latents.mean(axis=1), latents.max(axis=1)], axis=1)


def extract_features(clouds, params, cfg, batch=64):
    lat, amb = encode_clouds(clouds, params, cfg, batch)
    return pool_latents(lat), amb


# ----------------------------------------------------------------------- heads

@dataclass
class Head:
    params: dict
    hidden: int
    mu: np.ndarray
    sd: np.ndarray

    def logits(self, features):
        x = Tensor((np.asarray(features) - self.mu) / self.sd)
        with no_grad():
            return head_forward(x, self.params, self.hidden).data

    def predict(self, features):
        return np.argmax(self.logits(features), axis=1)


def init_head_params(in_dim, n_classes, hidden, rng):
    params = {}
    sizes = (in_dim, hidden, n_classes) if hidden else (in_dim, n_classes)
    init_mlp(params, "head", sizes, rng)
    return params


def head_forward(features, params, hidden):
    return mlp(features, params, "head", 2 if hidden else 1)


def classify_head(latents, params, hidden=256):
    """Logits from encoder latents (B, G, D): mean+max pooling, then the MLP."""
    latents = latents if isinstance(latents, Tensor) else Tensor(latents)
    pooled = T.concat([T.mean(latents, axis=-2), T.amax(latents, axis=-2)], axis=-1)
    return head_forward(pooled, params, hidden)


def fit_head(features, labels, n_classes, probe_cfg, seed=0, hidden=None):
    """Train a head on frozen features with full-batch AdamW."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    hidden = probe_cfg.hidden if hidden is None else hidden
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-6
    x = Tensor((features - mu) / sd)
    params = init_head_params(features.shape[1], n_classes, hidden, np.random.default_rng([seed, 7]))
    opt = OptimState(base_lr=probe_cfg.lr, weight_decay=probe_cfg.weight_decay,
                     warmup_steps=0, total_steps=probe_cfg.epochs)
    for _ in range(probe_cfg.epochs):
        for p in params.values():
            p.grad = None
        loss = T.cross_entropy(head_forward(x, params, hidden), labels)
        loss.backward()
        adamw_step(params, grads_of(params), opt)
    return Head(params=params, hidden=hidden, mu=mu, sd=sd)


def n_classes_of(*label_sets):
    return int(max(int(np.max(l)) for l in label_sets)) + 1


# ------------------------------------------------------------------ scenarios

def evaluate_scenario(params, cfg, train, test, scenario, seed=0, hidden=None):
    """Probe accuracy under a train/test rotation scenario.

    ``train`` and ``test`` are ``(clouds, labels)``. The head is fitted on
    frozen features of training clouds rotated per the scenario's first leg;
    test clouds get fresh rotations from the second leg. Predictions on the
    unrotated test clouds are compared sample by sample.
    """
    (xtr, ytr), (xte, yte) = train, test
    if len(xtr) == 0 or len(xte) == 0:
        raise ValueError("evaluate_scenario needs non-empty train and test sets")
    train_kind, test_kind = SCENARIOS[scenario]
    ftr, _ = extract_features(_rotated(xtr, train_kind, np.random.default_rng([seed, 11])), params, cfg)
    head = fit_head(ftr, ytr, n_classes_of(ytr, yte), cfg.probe, seed, hidden)
    fte, amb = extract_features(_rotated(xte, test_kind, np.random.default_rng([seed, 12])), params, cfg)
    fref, amb_ref = extract_features(list(xte), params, cfg)
    pred = head.predict(fte)
    ref = head.predict(fref)
    clean = ~(amb | amb_ref)
    yte = np.asarray(yte)
    return {
        "scenario": scenario,
        "accuracy": float((pred == yte).mean()),
        "accuracy_nondegenerate": float((pred[clean] == yte[clean]).mean()) if clean.any() else float("nan"),
        "argmax_agreement": float((pred[clean] == ref[clean]).mean()) if clean.any() else float("nan"),
        "max_logit_diff": float(np.abs(head.logits(fte)[clean] - head.logits(fref)[clean]).max()) if clean.any() else float("nan"),
        "n_test": int(len(yte)),
        "n_degenerate": int((~clean).sum()),
        "predictions": pred,
    }


def few_shot_eval(params, cfg, clouds, labels, k_way, n_shot, runs=10, scenario="zso3",
                  seed=0, n_query=20):
    """Episodic linear-probe accuracy: mean and std over ``runs`` episodes."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    counts = {c: int((labels == c).sum()) for c in classes}
    eligible = [c for c in classes if counts[c] >= n_shot + n_query]
    if len(eligible) < k_way:
        raise ValueError(f"need {k_way} classes with >= {n_shot + n_query} samples, have {len(eligible)}")
    train_kind, test_kind = SCENARIOS[scenario]
    ftr, _ = extract_features(_rotated(clouds, train_kind, np.random.default_rng([seed, 21])), params, cfg)
    fte, _ = extract_features(_rotated(clouds, test_kind, np.random.default_rng([seed, 22])), params, cfg)
    rng = np.random.default_rng([seed, 23])
    accs = []
    for run in range(runs):
        chosen = rng.choice(eligible, size=k_way, replace=False)
        tr_idx, te_idx, tr_y, te_y = [], [], [], []
        for new_label, c in enumerate(chosen):
            pool = rng.permutation(np.nonzero(labels == c)[0])[: n_shot + n_query]
            tr_idx += list(pool[:n_shot])
            te_idx += list(pool[n_shot:])
            tr_y += [new_label] * n_shot
            te_y += [new_label] * n_query
        head = fit_head(ftr[tr_idx], tr_y, k_way, cfg.probe, seed + run, hidden=0)
        accs.append(float((head.predict(fte[te_idx]) == np.array(te_y)).mean()))
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "runs": accs}


# ------------------------------------------------------------------- finetune

def finetune(params, cfg, clouds, labels, steps=100, lr=None, seed=0, hidden=256):
    """End-to-end training of the encoder and a classification head.

    Returns ``(encoder_params, head_params)``; ``params`` is left untouched.
    """
    from .nn import clone_params

    labels = np.asarray(labels)
    enc = EncoderConfig.from_config(cfg)
    model = clone_params(params, requires_grad=True)
    rng = np.random.default_rng([seed, 31])
    head = init_head_params(2 * cfg.model.dim, n_classes_of(labels), hidden, rng)
    allp = {**{f"enc.{k}": v for k, v in model.items()}, **{f"head.{k}": v for k, v in head.items()}}
    opt = OptimState(base_lr=lr or cfg.optim.base_lr, weight_decay=cfg.optim.weight_decay,
                     warmup_steps=max(1, steps // 10), total_steps=steps)
    kind = SCENARIOS[cfg.scenario][0]
    batch = cfg.optim.batch
    for _ in range(steps):
        idx = rng.choice(len(clouds), size=min(batch, len(clouds)), replace=False)
        geom = patch_geometry(_rotated([clouds[i] for i in idx], kind, rng), cfg.model.g, cfg.model.k, rng=rng)
        for p in allp.values():
            p.grad = None
        z = encode(embed_patches(geom, model, cfg.ablation), enc, model)
        loss = T.cross_entropy(classify_head(z, head, hidden), labels[idx])
        loss.backward()
        adamw_step(allp, grads_of(allp), opt)
    return model, head


def predict_finetuned(model, head, cfg, clouds, hidden=256):
    lat, _ = encode_clouds(clouds, model, cfg)
    with no_grad():
        return np.argmax(classify_head(lat, head, hidden).data, axis=1)


# -------------------------------------------------------------------- ablation

ABLATION_ROWS = (
    ("#1", False, False, "dual_branch"),
    ("#2", True, False, "dual_branch"),
    ("#3", False, True, "dual_branch"),
    ("#4", True, True, "ae"),
    ("#5", True, True, "dual_branch"),
)


def loss_instability(state, cfg, clouds, trials=4, seed=0):
    """Mean |loss(X) - loss(XR)| for fixed weights and masks over random R.

    Pairs where either copy has an ambiguous patch frame are skipped; NaN if
    none are left.
    """
    from .geometry import random_rotation
    from .mae import make_mask

    rng = np.random.default_rng([seed, 41])
    diffs = []
    with no_grad():
        for cloud in clouds:
            plan = make_mask(cfg.model.g, cfg.mae.alpha, rng)
            base = patch_geometry([cloud], cfg.model.g, cfg.model.k)
            ref = pretrain_loss(base, plan, state, cfg)[0].item()
            for _ in range(trials):
                geom = patch_geometry([cloud @ random_rotation(rng)], cfg.model.g, cfg.model.k)
                if base.ambiguous.any() or geom.ambiguous.any():
                    continue
                diffs.append(abs(pretrain_loss(geom, plan, state, cfg)[0].item() - ref))
    return float(np.mean(diffs)) if diffs else float("nan")


def run_ablation(train, test, cfg, progress=None):
    """Five-row component grid: pretrain each variant, then probe under ``cfg.scenario``."""
    rows = []
    xtr, ytr = train
    for name, ri_oe, ri_pe, objective in ABLATION_ROWS:
        variant = cfg.with_updates(ablation={"ri_oe": ri_oe, "ri_pe": ri_pe,
                                             "dual_branch_vs_ae": objective})
        result = pretrain(xtr, variant)
        report = evaluate_scenario(result.state.student, variant, train, test, cfg.scenario, cfg.seed)
        row = {
            "row": name,
            "ri_oe": ri_oe,
            "ri_pe": ri_pe,
            "objective": objective,
            "accuracy": report["accuracy"],
            "final_loss": result.curve[-1]["loss"],
            "loss_instability": loss_instability(result.state, variant, test[0][:8], seed=cfg.seed),
        }
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows
