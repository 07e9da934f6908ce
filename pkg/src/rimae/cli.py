"""Command-line entry point: ``rimae <command> [options]``.

Commands: gen-data, pretrain, probe, finetune, eval-invariance, ablate, rotate.
Every command is deterministic under ``--seed``; ``RIMAE_THREADS`` caps the
worker threads used by gen-data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import SCENARIOS, desk_config, dump_config, load_config
from .geometry import apply_rotation, random_rotation, random_z_rotation, scenario_rotation
from .invariance import eval_invariance
from .io import load_dataset, read_cloud, write_cloud, write_json, write_labels, write_metrics_csv
from .synthetic import FAMILIES, generate_shape, make_specs
from .train import (
    evaluate_scenario,
    finetune,
    load_pretrain_checkpoint,
    predict_finetuned,
    pretrain,
    run_ablation,
)
from .validation import check_point_clouds

log = logging.getLogger("rimae")

ABLATION_COLUMNS = ("row", "ri_oe", "ri_pe", "objective", "accuracy", "final_loss", "loss_instability")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _threads():
    raw = os.environ.get("RIMAE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise SystemExit(f"RIMAE_THREADS must be an integer, got {raw!r}") from None


def _config(args):
    cfg = load_config(args.config) if args.config else desk_config()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "scenario", None):
        updates["scenario"] = args.scenario
    return cfg.with_updates(**updates) if updates else cfg


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(clouds, labels, seed, test_dir=None):
    """Held-out test set from ``test_dir``, else a seeded 80/20 split."""
    if test_dir is not None:
        xte, yte = load_dataset(test_dir)
        return (clouds, labels), (xte, yte)
    if len(clouds) < 2:
        raise ValueError("need at least 2 clouds to split into train and test")
    perm = np.random.default_rng([seed, 61]).permutation(len(clouds))
    cut = max(1, int(round(0.8 * len(clouds))))
    cut = min(cut, len(clouds) - 1)
    tr, te = np.sort(perm[:cut]), np.sort(perm[cut:])
    return ([clouds[i] for i in tr], labels[tr]), ([clouds[i] for i in te], labels[te])


# -------------------------------------------------------------------- commands

def cmd_gen_data(args):
    out = _out_dir(args)
    families = tuple(f.strip() for f in args.families.split(",")) if args.families else FAMILIES
    specs = make_specs(args.count, families, args.points, args.noise, args.variants)
    ext = "ripc" if args.format == "ripc" else "xyz"

    def make(i):
        spec = specs[i]
        pts = generate_shape(spec, np.random.default_rng([args.seed, i]))
        name = f"{i:05d}_{spec.family}.{ext}"
        write_cloud(out / name, pts)
        return name, spec.label

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(make, range(len(specs))))
    write_labels(out / "labels.csv", rows)
    print(f"wrote {len(rows)} clouds to {out}")
    return 0


def cmd_pretrain(args):
    cfg = _config(args)
    out = _out_dir(args)
    clouds, _ = load_dataset(args.data)
    check_point_clouds(clouds, min_points=cfg.model.k)
    resume = load_pretrain_checkpoint(args.resume) if args.resume else None
    result = pretrain(clouds, cfg, resume=resume, until=args.until_step)
    result.save(out / "checkpoint.zip")
    result.write_curve(out / "loss.csv")
    dump_config(cfg, out / "config.json")
    summary = {"steps": result.state.step, "mode": result.state.mode, "clouds": len(clouds)}
    if result.curve:
        first, last = result.curve[0], result.curve[-1]
        summary.update(initial_loss=first["loss"], final_loss=last["loss"],
                       final_teacher_variance=last["teacher_variance"])
    write_json(out / "summary.json", summary)
    if result.curve:
        print(f"step {summary['steps']}: loss {summary['initial_loss']:.6g} -> {summary['final_loss']:.6g}")
    return 0


def cmd_probe(args):
    result = load_pretrain_checkpoint(args.checkpoint)
    cfg = result.config.with_updates(**({"scenario": args.scenario} if args.scenario else {}))
    clouds, labels = load_dataset(args.data)
    train, test = _split(clouds, labels, cfg.seed, args.test_data)
    scenarios = [cfg.scenario] if args.scenario else list(SCENARIOS)
    report = {}
    for name in scenarios:
        rep = evaluate_scenario(result.state.student, cfg, train, test, name, cfg.seed)
        rep.pop("predictions")
        report[name] = rep
        print(f"{name}: accuracy {rep['accuracy']:.4f} "
              f"(argmax agreement {rep['argmax_agreement']:.4f}, {rep['n_degenerate']} degenerate)")
    if args.out:
        write_json(_out_dir(args) / "probe.json", report)
    return 0


def cmd_finetune(args):
    result = load_pretrain_checkpoint(args.checkpoint)
    cfg = result.config.with_updates(**({"scenario": args.scenario} if args.scenario else {}))
    clouds, labels = load_dataset(args.data)
    (xtr, ytr), (xte, yte) = _split(clouds, labels, cfg.seed, args.test_data)
    model, head = finetune(result.state.student, cfg, xtr, ytr, steps=args.steps, seed=cfg.seed)
    test_kind = SCENARIOS[cfg.scenario][1]
    rng = np.random.default_rng([cfg.seed, 12])
    rot = [c @ scenario_rotation(test_kind, rng) for c in xte]
    acc = float((predict_finetuned(model, head, cfg, rot) == yte).mean())
    print(f"{cfg.scenario}: finetuned accuracy {acc:.4f}")
    if args.out:
        write_json(_out_dir(args) / "finetune.json", {"scenario": cfg.scenario, "accuracy": acc,
                                                      "steps": args.steps})
    return 0


def cmd_eval_invariance(args):
    result = load_pretrain_checkpoint(args.checkpoint)
    clouds, _ = load_dataset(args.data)
    seed = result.config.seed if args.seed is None else args.seed
    report = eval_invariance(result.state, result.config, clouds, trials=args.trials, seed=seed)
    for stage, value in report["residuals"].items():
        flag = "PASS" if report["passed"][stage] else "FAIL"
        print(f"{flag} {stage:<10} max residual {value:.3e} (tol {report['tolerances'][stage]:.0e})")
    print(f"{report['evaluated_pairs']} pairs evaluated, {report['degenerate_pairs']} degenerate pairs excluded")
    if args.out:
        write_json(_out_dir(args) / "invariance.json", report)
    return 0 if report["ok"] else 1


def cmd_ablate(args):
    cfg = _config(args)
    clouds, labels = load_dataset(args.data)
    train, test = _split(clouds, labels, cfg.seed, args.test_data)
    rows = run_ablation(train, test, cfg, progress=lambda r: print(
        f"{r['row']}: ri_oe={r['ri_oe']} ri_pe={r['ri_pe']} {r['objective']} accuracy {r['accuracy']:.4f}"))
    out = _out_dir(args)
    write_metrics_csv(out / "ablation.csv", rows, ABLATION_COLUMNS)
    return 0


def _parse_rotation(text):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 9:
        raise ValueError(f"--rotation needs 9 numbers (row-major 3x3), got {len(vals)}")
    return np.array(vals).reshape(3, 3)


def cmd_rotate(args):
    out = _out_dir(args)
    rng = np.random.default_rng([args.seed or 0, 71])
    applied = {}
    for path in args.inputs:
        path = Path(path)
        if args.rotation:
            R = _parse_rotation(args.rotation)
        elif args.kind == "z":
            R = random_z_rotation(rng)
        else:
            R = random_rotation(rng)
        pts = apply_rotation(read_cloud(path), R)
        write_cloud(out / path.name, pts)
        applied[path.name] = R.tolist()
    write_json(out / "rotations.json", applied)
    print(f"rotated {len(applied)} files into {out}")
    return 0


# ---------------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="rimae", description="Rotation-invariant masked point modeling")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file (desk defaults otherwise)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--families", help=f"comma list from {','.join(FAMILIES)}")
    p.add_argument("--count", type=_positive_int, default=200)
    p.add_argument("--points", type=_positive_int, default=256)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--format", choices=("ripc", "xyz"), default="ripc")
    p.add_argument("--variants", action="store_true", help="two sub-classes per family")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked pretraining; writes checkpoint, loss.csv, summary.json")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", choices=tuple(SCENARIOS))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until-step", type=_positive_int, help="stop after this many steps (resumable)")
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("probe", cmd_probe, "probe accuracy on a frozen encoder"),
                                 ("finetune", cmd_finetune, "end-to-end classification")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--test-data")
        p.add_argument("--scenario", choices=tuple(SCENARIOS))
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name == "finetune":
            p.add_argument("--steps", type=_positive_int, default=100)
        p.set_defaults(func=func)

    p = sub.add_parser("eval-invariance", help="per-stage rotation residuals; exit 1 on failure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=_positive_int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_invariance)

    p = sub.add_parser("ablate", help="5-row ablation grid; writes ablation.csv")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--scenario", choices=tuple(SCENARIOS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rotate", help="apply a given or random rotation to cloud files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--rotation", help="9 numbers, row-major; points are rotated as X @ R")
    p.add_argument("--kind", choices=("so3", "z"), default="so3")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"rimae {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
