"""Command-line driver: ``gfkd <command> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 validation or I/O error, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from gfkd import experiments, metrics, results, train
from gfkd.checkpoint import CheckpointError, load_checkpoint
from gfkd.config import ConfigError, ExperimentConfig, load_config
from gfkd.data import dump_dataset, stack
from gfkd.graph_flow import check_patch
from gfkd.optim import NumericalError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    """Invalid request detected by a command (reported with exit code 1)."""


def _log(msg: str) -> None:
    print(f"[gfkd] {msg}", file=sys.stderr, flush=True)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _patches(text: str) -> list:
    out = []
    for v in text.split(","):
        try:
            out.append(check_patch("full" if v == "full" else int(v)))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return out


def _names(text: str) -> List[str]:
    return [v for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfkd", description="Graph-flow knowledge distillation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (sections data/teacher/student/distill/train/run)")
        p.add_argument("--profile", choices=("desk", "paper"), default="desk", help="defaults the config builds on")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--resume", action="store_true", help="continue runs from their epoch checkpoints")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for student seeds")
        return p

    add("gen-data", "generate the synthetic dataset and dump it under out_dir/data")
    add("train-teacher", "train one teacher per seed on the labeled split")
    p = add("distill", "train Graph-Flow students from a teacher checkpoint")
    p.add_argument("--teacher", help="teacher checkpoint (default: the first seed's teacher under out_dir)")
    p = add("eval", "evaluate a prediction dump or a network checkpoint on the validation split")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pred", help="checkpoint-format file with a 'pred' (N,H,W) entry and optional 'gt'")
    group.add_argument("--checkpoint", help="teacher or student checkpoint")
    p.add_argument("--net", choices=("teacher", "student"), default="student", help="network stored in --checkpoint")
    p = add("ablate-patch", "graph-only students for each patch size plus the scratch baseline")
    p.add_argument("--patches", type=_patches, default=list(experiments.PATCHES))
    p = add("ablate-components", "cumulative component ablation (scratch, graph, graph_adv, graph_adv_logits)")
    p.add_argument("--arms", type=_names, default=list(train.ARM_TOGGLES))
    p = add("semi-sweep", "labeled-fraction sweep over the four semi-supervised groups")
    p.add_argument("--fractions", type=_floats, default=list(experiments.SEMI_FRACTIONS))
    p.add_argument("--arms", type=_names, default=list(experiments.SEMI_ARMS))
    return parser


def _finish(cfg: ExperimentConfig, rows: Sequence[dict], name: str = "") -> None:
    out = os.path.join(cfg.run.out_dir, name) if name else cfg.run.out_dir
    summary = results.write_all(out, rows)
    for arm in summary["arms"]:
        m = arm["miou"]
        _log(f"{arm['arm']:>22} f={arm['labeled_fraction']:g} p={arm['patch']}: mIoU {m['mean']:.4f} +- {m['std']:.4f}")
    _log(f"wrote {os.path.join(out, 'metrics.csv')}, results.csv and summary.json")


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    dataset = experiments.dataset_for(cfg)
    out = os.path.join(cfg.run.out_dir, "data")
    dump_dataset(dataset, out)
    _log(f"{len(dataset.train)} train / {len(dataset.val)} val samples written to {out}")


def cmd_train_teacher(cfg: ExperimentConfig, args) -> None:
    dataset = experiments.dataset_for(cfg)
    rows = []
    for seed in cfg.run.seeds:
        _log(f"teacher seed {seed}")
        rows += train.train_teacher(cfg, dataset, seed, out_dir=cfg.run.out_dir, resume=args.resume).rows
    _finish(cfg, rows, "teacher")


def cmd_distill(cfg: ExperimentConfig, args) -> None:
    dataset = experiments.dataset_for(cfg)
    path = args.teacher or experiments.teacher_ckpt_path(cfg, dataset, cfg.run.seeds[0])
    if train.needs_teacher(cfg):
        if not os.path.exists(path):
            raise UsageError(
                f"teacher checkpoint {path} not found; run `gfkd train-teacher` with the same config first "
                "or pass --teacher PATH"
            )
        teacher = train.load_teacher(path, cfg, dataset.spec.num_classes)
        side = experiments.prepare_side(cfg, dataset, teacher, "all", _log)
    else:
        side = None
    jobs = [(cfg, seed, "all", "graphflow") for seed in cfg.run.seeds]
    rows = [r for res in experiments.run_students(jobs, dataset, side, args.jobs, args.resume) for r in res.rows]
    _finish(cfg, rows, "distill")


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    dataset = experiments.dataset_for(cfg)
    m = dataset.spec.num_classes
    if args.pred:
        entries = load_checkpoint(args.pred)
        if "pred" not in entries:
            raise UsageError(f"{args.pred} has no 'pred' entry")
        pred = entries["pred"].astype(np.int64)
        gt = entries["gt"].astype(np.int64) if "gt" in entries else stack(dataset.val)[1]
        params = flops = 0
        run_id, source = "eval-dump", args.pred
    else:
        entries = load_checkpoint(args.checkpoint)
        width = cfg.teacher.width if args.net == "teacher" else cfg.student.width
        net = train.load_net(entries, args.net, train.build_mini_unet(width, 1, m, 0))
        images, gt = stack(dataset.val)
        pred = net.predict(images)
        params = metrics.count_params(net)
        flops = metrics.count_flops(net, (1, dataset.spec.image_size, dataset.spec.image_size))
        run_id, source = f"eval-{args.net}", args.checkpoint
    if pred.shape != gt.shape:
        raise UsageError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    report = metrics.evaluate(pred, gt, m)
    row = {
        "run_id": run_id, "phase": "eval", "seed": 0, "arm": "eval", "labeled_fraction": dataset.spec.labeled_fraction,
        "patch": str(cfg.distill.patch_size), "epoch": 0, "split": "val", "acc": report.acc, "miou": report.miou,
        "dsc_mean": report.dsc_mean, "hd_mean": report.hd_mean, "params": params, "flops": flops,
    }
    out = os.path.join(cfg.run.out_dir, "eval")
    os.makedirs(out, exist_ok=True)
    results.write_csv(os.path.join(out, "results.csv"), [row])
    _log(f"{source}: acc {report.acc:.4f} mIoU {report.miou:.4f} DSC {report.dsc_mean:.4f} HD {report.hd_mean:.3f}")


def cmd_ablate_patch(cfg: ExperimentConfig, args) -> None:
    rows = experiments.run_patch_ablation(cfg, args.patches, args.jobs, args.resume, _log)
    _finish(cfg, rows, "ablate-patch")


def cmd_ablate_components(cfg: ExperimentConfig, args) -> None:
    unknown = set(args.arms) - set(train.ARM_TOGGLES)
    if unknown:
        raise UsageError(f"unknown arms {sorted(unknown)}; choose from {list(train.ARM_TOGGLES)}")
    rows = experiments.run_components(cfg, args.arms, args.jobs, args.resume, log=_log)
    _finish(cfg, rows, "ablate-components")


def cmd_semi_sweep(cfg: ExperimentConfig, args) -> None:
    if any(not 0 < f <= 1 for f in args.fractions):
        raise UsageError("labeled fractions must lie in (0, 1]")
    rows = experiments.run_semi_sweep(cfg, args.fractions, args.arms, args.jobs, args.resume, _log)
    _finish(cfg, rows, "semi-sweep")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate-patch": cmd_ablate_patch,
    "ablate-components": cmd_ablate_components,
    "semi-sweep": cmd_semi_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.profile)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        os.makedirs(cfg.run.out_dir, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        _log(f"numerical abort: {exc}")
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, UsageError, ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
