"""Multi-seed experiment drivers shared by the CLI and the acceptance suite.

Within one experiment a single teacher (initialised from the first seed of
``run.seeds``) serves every student seed, together with its paraphrasers
and cached outputs.
"""
from __future__ import annotations

import multiprocessing
import os
from dataclasses import asdict, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from gfkd import train
from gfkd.config import ExperimentConfig
from gfkd.data import Dataset, DatasetSpec, build_dataset
from gfkd.train import ARM_TOGGLES, PhaseResult, TeacherSide

SEMI_ARMS = ("teacher_labeled", "student_labeled", "student_gf_labeled", "student_gf_all")
SEMI_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
PATCHES = (1, 3, 5, 7, 9, "full")


def dataset_for(cfg: ExperimentConfig, labeled_fraction: Optional[float] = None) -> Dataset:
    doc = asdict(cfg.data)
    if labeled_fraction is not None:
        doc["labeled_fraction"] = labeled_fraction
    return build_dataset(DatasetSpec(**doc))


def with_patch(cfg: ExperimentConfig, patch) -> ExperimentConfig:
    return replace(cfg, distill=replace(cfg.distill, patch_size=patch)).validate()


def teacher_ckpt_path(cfg: ExperimentConfig, dataset: Dataset, seed: int) -> str:
    run_id = train.run_id_for("teacher", "teacher", seed, dataset.spec.labeled_fraction, cfg.distill.patch_size)
    return os.path.join(cfg.run.out_dir, "ckpt", f"{run_id}.gfkd")


# A forked worker reads the shared teacher side from here instead of unpickling it.
_SHARED: Dict[str, object] = {}


def _student_job(args: Tuple) -> PhaseResult:
    cfg, seed, pool_kind, arm, key, resume = args
    side: Optional[TeacherSide] = _SHARED.get(key)
    dataset = _SHARED[key + ".data"]
    return train.distill_student(
        cfg, dataset, seed, cache=side.cache if side is not None else None, pool_kind=pool_kind, arm=arm,
        out_dir=cfg.run.out_dir, resume=resume,
    )


def run_students(
    jobs: Sequence[Tuple[ExperimentConfig, int, str, str]],
    dataset: Dataset,
    side: Optional[TeacherSide],
    n_procs: int = 1,
    resume: bool = False,
) -> List[PhaseResult]:
    """Run (cfg, seed, pool_kind, arm) student jobs, sequentially or on forked workers."""
    key = f"side{id(side)}"
    _SHARED[key], _SHARED[key + ".data"] = side, dataset
    try:
        args = [(c, s, p, a, key, resume) for c, s, p, a in jobs]
        if n_procs <= 1 or len(args) <= 1:
            return [_student_job(a) for a in args]
        with multiprocessing.get_context("fork").Pool(n_procs) as pool:
            return pool.map(_student_job, args)
    finally:
        _SHARED.pop(key, None)
        _SHARED.pop(key + ".data", None)


def shared_teacher(
    cfg: ExperimentConfig, dataset: Dataset, resume: bool = False, log: Callable[[str], None] = lambda s: None
) -> PhaseResult:
    seed = cfg.run.seeds[0]
    log(f"teacher (seed {seed}, labeled fraction {dataset.spec.labeled_fraction:g})")
    return train.train_teacher(cfg, dataset, seed, out_dir=cfg.run.out_dir, resume=resume)


def prepare_side(cfg, dataset, teacher, pool_kind: str, log=lambda s: None) -> TeacherSide:
    log(f"paraphrasers and teacher cache ({pool_kind} pool, patch {cfg.distill.patch_size})")
    return train.prepare_teacher_side(cfg, dataset, teacher, cfg.run.seeds[0], pool_kind)


def run_components(
    cfg: ExperimentConfig,
    arms: Sequence[str] = tuple(ARM_TOGGLES),
    n_procs: int = 1,
    resume: bool = False,
    teacher: Optional[train.MiniUNet] = None,
    log: Callable[[str], None] = lambda s: None,
) -> List[dict]:
    """Cumulative component ablation: scratch, +graph, +graph+adv, +graph+adv+logits."""
    dataset = dataset_for(cfg)
    rows: List[dict] = []
    if teacher is None:
        t = shared_teacher(cfg, dataset, resume, log)
        rows += t.rows
        teacher = t.net
    full = train.with_toggles(cfg, *ARM_TOGGLES["graph_adv_logits"])
    side = prepare_side(full, dataset, teacher, "all", log)
    jobs = [(train.with_toggles(cfg, *ARM_TOGGLES[arm]), seed, "all", arm) for arm in arms for seed in cfg.run.seeds]
    log(f"{len(jobs)} student runs")
    for res in run_students(jobs, dataset, side, n_procs, resume):
        rows += res.rows
    return rows


def run_patch_ablation(
    cfg: ExperimentConfig,
    patches: Sequence = PATCHES,
    n_procs: int = 1,
    resume: bool = False,
    log: Callable[[str], None] = lambda s: None,
) -> List[dict]:
    """Graph-only students for each patch size, plus the from-scratch baseline."""
    dataset = dataset_for(cfg)
    t = shared_teacher(cfg, dataset, resume, log)
    rows = list(t.rows)
    graph_cfg = train.with_toggles(cfg, *ARM_TOGGLES["graph"])
    scratch = train.with_toggles(cfg, *ARM_TOGGLES["scratch"])
    rows += [r for res in run_students([(scratch, s, "all", "scratch") for s in cfg.run.seeds], dataset, None, n_procs, resume) for r in res.rows]
    paras = None
    for patch in patches:
        pcfg = with_patch(graph_cfg, patch)
        if paras is None:
            side = prepare_side(pcfg, dataset, t.net, "all", log)
            paras = side.paraphrasers
        else:
            pool = train.make_pool(dataset, "all")
            side = TeacherSide(t.net, paras, {}, train.build_teacher_cache(t.net, paras, pool.images, patch, True))
        jobs = [(pcfg, s, "all", f"graph_p{patch}") for s in cfg.run.seeds]
        rows += [r for res in run_students(jobs, dataset, side, n_procs, resume) for r in res.rows]
    return rows


def run_semi_sweep(
    cfg: ExperimentConfig,
    fractions: Sequence[float] = SEMI_FRACTIONS,
    arms: Sequence[str] = SEMI_ARMS,
    n_procs: int = 1,
    resume: bool = False,
    log: Callable[[str], None] = lambda s: None,
) -> List[dict]:
    """Labeled-fraction sweep over the four experiment groups.

    ``teacher_labeled`` trains one teacher per seed on the labeled subset;
    the student arms distil from the shared teacher of the first seed.
    """
    unknown = set(arms) - set(SEMI_ARMS)
    if unknown:
        raise ValueError(f"unknown semi-sweep arms {sorted(unknown)}")
    gf = train.with_toggles(cfg, *ARM_TOGGLES["graph_adv_logits"])
    scratch = train.with_toggles(cfg, *ARM_TOGGLES["scratch"])
    rows: List[dict] = []
    for frac in fractions:
        dataset = dataset_for(cfg, frac)
        teachers: Dict[int, PhaseResult] = {}
        needs_shared = any(a.startswith("student_gf") for a in arms)
        seeds = cfg.run.seeds if "teacher_labeled" in arms else (cfg.run.seeds[:1] if needs_shared else [])
        for seed in seeds:
            log(f"teacher (seed {seed}, labeled fraction {frac:g})")
            teachers[seed] = train.train_teacher(cfg, dataset, seed, arm="teacher_labeled", out_dir=cfg.run.out_dir, resume=resume)
            if "teacher_labeled" in arms:
                rows += teachers[seed].rows
        if "student_labeled" in arms:
            jobs = [(scratch, s, "labeled", "student_labeled") for s in cfg.run.seeds]
            rows += [r for res in run_students(jobs, dataset, None, n_procs, resume) for r in res.rows]
        for arm, pool_kind in (("student_gf_labeled", "labeled"), ("student_gf_all", "all")):
            if arm not in arms:
                continue
            side = prepare_side(gf, dataset, teachers[cfg.run.seeds[0]].net, pool_kind, log)
            jobs = [(gf, s, pool_kind, arm) for s in cfg.run.seeds]
            rows += [r for res in run_students(jobs, dataset, side, n_procs, resume) for r in res.rows]
    return rows
