"""Teacher training, paraphraser training and alternating critic/student distillation.

Every run is driven by an epoch loop that owns the batch RNG, the iteration
counter and the optimizer states, and checkpoints all of them at each epoch
boundary so an interrupted run resumes bit-for-bit.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gfkd import checkpoint as ckpt
from gfkd import graph_flow, metrics, objectives, ops
from gfkd.config import ExperimentConfig
from gfkd.data import AUGMENTATIONS, Dataset, apply_augmentation, stack
from gfkd.graph_flow import VariationGraph
from gfkd.networks import (
    TAP_SITES,
    Discriminator,
    MiniUNet,
    Module,
    Paraphraser,
    build_discriminator,
    build_mini_unet,
    build_paraphraser,
)
from gfkd.optim import NumericalError, OptimState, Schedule, adam, optimizer_step, poly_lr, sgd_momentum
from gfkd.tensor import Tensor, grads_for

_ROLES = {"teacher": 1, "student": 2, "critic": 3, "para.enc2": 4, "para.dec2": 5, "batches": 11, "para.batches": 12}
CACHE_BATCH = 32


def derive_seed(seed: int, role: str) -> int:
    """Independent 32-bit seed for one role (network init, batch order, ...) of a run."""
    return int(np.random.SeedSequence([seed, _ROLES[role]]).generate_state(1)[0])


# ------------------------------------------------------------------- pools


@dataclass
class Pool:
    """Training samples one phase iterates over, with their labeled flags."""

    images: np.ndarray  # (N, 1, H, W)
    labels: np.ndarray  # (N, H, W)
    labeled: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, idx: np.ndarray, codes: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.stack([apply_augmentation(self.images[i], c) for i, c in zip(idx, codes)])
        y = np.stack([apply_augmentation(self.labels[i], c) for i, c in zip(idx, codes)])
        return x, y, self.labeled[idx]


def make_pool(dataset: Dataset, which: str) -> Pool:
    """``which="labeled"`` keeps only labeled samples; ``"all"`` keeps every one."""
    if which not in ("labeled", "all"):
        raise ValueError(f"unknown pool {which!r}")
    keep = np.asarray(dataset.labeled, dtype=bool) if which == "labeled" else np.ones(len(dataset.train), dtype=bool)
    samples = [s for s, k in zip(dataset.train, keep) if k]
    if not samples:
        return Pool(np.zeros((0, 1, 1, 1)), np.zeros((0, 1, 1), dtype=np.int64), np.zeros(0, dtype=bool))
    images, labels = stack(samples)
    return Pool(images, labels, np.asarray(dataset.labeled, dtype=bool)[keep])


# ----------------------------------------------------------------- loop state


@dataclass
class RunInfo:
    run_id: str
    phase: str
    seed: int
    arm: str
    labeled_fraction: float
    patch: str


@dataclass
class LoopState:
    nets: Dict[str, Module]
    opts: Dict[str, OptimState]
    rng: np.random.Generator
    iteration: int = 0
    epoch: int = 0
    rows: List[dict] = field(default_factory=list)
    history: Dict[str, List[float]] = field(default_factory=dict)


def pack_state(state: LoopState, config_hash: str, info: RunInfo) -> Dict[str, np.ndarray]:
    entries: Dict[str, np.ndarray] = {}
    for name, net in state.nets.items():
        for k, v in net.params.items():
            entries[f"net/{name}/{k}"] = v
    for name, opt in state.opts.items():
        for k, v in opt.buffers().items():
            entries[f"opt/{name}/{k}"] = v
    entries["meta/iteration"] = np.array(float(state.iteration))
    entries["meta/epoch"] = np.array(float(state.epoch))
    entries["meta/config_hash"] = ckpt.bytes_entry(config_hash.encode())
    entries["meta/run"] = ckpt.json_entry(info.__dict__)
    entries["meta/rng"] = ckpt.json_entry(state.rng.bit_generator.state)
    entries["meta/rows"] = ckpt.json_entry(state.rows)
    entries["meta/history"] = ckpt.json_entry(state.history)
    return entries


def unpack_state(entries: Dict[str, np.ndarray], state: LoopState, config_hash: str) -> None:
    found = ckpt.entry_bytes(entries["meta/config_hash"]).decode()
    if found != config_hash:
        raise ckpt.CheckpointError("checkpoint was written by a different configuration")
    for name, net in state.nets.items():
        for k in net.params.names():
            net.params[k] = entries[f"net/{name}/{k}"]
    for name, opt in state.opts.items():
        prefix = f"opt/{name}/"
        opt.load_buffers({k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)})
    state.iteration = int(entries["meta/iteration"])
    state.epoch = int(entries["meta/epoch"])
    state.rng.bit_generator.state = ckpt.entry_json(entries["meta/rng"])
    state.rows = ckpt.entry_json(entries["meta/rows"])
    state.history = ckpt.entry_json(entries["meta/history"])


def load_net(entries: Dict[str, np.ndarray], name: str, net: Module) -> Module:
    prefix = f"net/{name}/"
    for k in net.params.names():
        if prefix + k not in entries:
            raise ckpt.CheckpointError(f"checkpoint lacks parameter {prefix + k}")
        net.params[k] = entries[prefix + k]
    return net


StepFn = Callable[..., None]


def run_epochs(
    state: LoopState,
    pool: Pool,
    batch: int,
    epochs: int,
    step: StepFn,
    end_of_epoch: Callable[[LoopState], None],
    ckpt_path: Optional[str] = None,
    save: Optional[Callable[[LoopState], Dict[str, np.ndarray]]] = None,
    stop_after_epoch: Optional[int] = None,
) -> None:
    """Shuffle, augment and step through ``pool`` until ``epochs`` are done.

    ``step(x, y, flags, iteration, epoch, maxiter)`` performs one update.
    """
    iters = math.ceil(len(pool) / batch)
    maxiter = epochs * iters
    while state.epoch < epochs:
        order = state.rng.permutation(len(pool))
        for b in range(iters):
            idx = order[b * batch : (b + 1) * batch]
            codes = state.rng.integers(len(AUGMENTATIONS), size=len(idx))
            x, y, flags = pool.batch(idx, codes)
            step(x, y, flags, state.iteration, state.epoch, maxiter, idx=idx, codes=codes)
            state.iteration += 1
        state.epoch += 1
        end_of_epoch(state)
        if ckpt_path is not None:
            ckpt.save_checkpoint(ckpt_path, save(state))
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            return


def _abort_if_nonfinite(value: Tensor, iteration: int, breakdown: Dict[str, float]) -> None:
    if not np.isfinite(value.data).all():
        parts = ", ".join(f"{k}={v:.6g}" for k, v in breakdown.items())
        raise NumericalError(f"non-finite loss at iteration {iteration}: {parts}")


# ----------------------------------------------------------------- results


@dataclass
class PhaseResult:
    info: RunInfo
    net: MiniUNet
    rows: List[dict]
    report: metrics.MetricReport
    nets: Dict[str, Module] = field(default_factory=dict)
    history: Dict[str, List[float]] = field(default_factory=dict)


def validation_report(net: MiniUNet, dataset: Dataset) -> metrics.MetricReport:
    images, labels = stack(dataset.val)
    return metrics.evaluate(net.predict(images), labels, dataset.spec.num_classes)


def _row(info: RunInfo, epoch: int, report: metrics.MetricReport, params: int, flops: int) -> dict:
    return {
        "run_id": info.run_id, "phase": info.phase, "seed": info.seed, "arm": info.arm,
        "labeled_fraction": info.labeled_fraction, "patch": info.patch, "epoch": epoch, "split": "val",
        "acc": report.acc, "miou": report.miou, "dsc_mean": report.dsc_mean, "hd_mean": report.hd_mean,
        "params": params, "flops": flops,
    }


def run_id_for(phase: str, arm: str, seed: int, fraction: float, patch) -> str:
    return f"{phase}-{arm}-s{seed}-f{fraction:g}-p{patch}"


def _ckpt_path(out_dir: Optional[str], run_id: str) -> Optional[str]:
    if out_dir is None:
        return None
    os.makedirs(os.path.join(out_dir, "ckpt"), exist_ok=True)
    return os.path.join(out_dir, "ckpt", f"{run_id}.gfkd")


def _schedule(cfg: ExperimentConfig, base_lr: float, maxiter: int, step_decay: bool = True) -> Schedule:
    t = cfg.train
    return Schedule(base_lr, maxiter, t.power, t.step_decay_every if step_decay else 0, t.step_decay_factor)


def _resume(state: LoopState, path: Optional[str], resume: bool, config_hash: str) -> None:
    if resume and path is not None and os.path.exists(path):
        unpack_state(ckpt.load_checkpoint(path), state, config_hash)


# ----------------------------------------------------------------- teacher


def train_teacher(
    cfg: ExperimentConfig,
    dataset: Dataset,
    seed: int,
    *,
    arm: str = "teacher",
    out_dir: Optional[str] = None,
    resume: bool = False,
    stop_after_epoch: Optional[int] = None,
) -> PhaseResult:
    """Cross-entropy training of the teacher on the labeled split only."""
    pool = make_pool(dataset, "labeled")
    if len(pool) == 0:
        raise ValueError("the labeled training split is empty; the teacher needs annotated data")
    spec = dataset.spec
    net = build_mini_unet(cfg.teacher.width, 1, spec.num_classes, derive_seed(seed, "teacher"))
    info = RunInfo(run_id_for("teacher", arm, seed, spec.labeled_fraction, cfg.distill.patch_size),
                   "teacher", seed, arm, spec.labeled_fraction, str(cfg.distill.patch_size))
    state = LoopState({"teacher": net}, {"teacher": adam(cfg.train.base_lr, cfg.train.weight_decay)},
                      np.random.default_rng(derive_seed(seed, "batches")))
    n_params = metrics.count_params(net)
    flops = metrics.count_flops(net, (1, spec.image_size, spec.image_size))
    opt = state.opts["teacher"]

    def step(x, y, flags, it, ep, maxiter, **_):
        p = net.bind()
        loss = ops.cross_entropy(net.forward(x, p), y)
        _abort_if_nonfinite(loss, it, {"l_ce": float(loss.data)})
        optimizer_step(opt, net.params, grads_for(loss, p), poly_lr(it, ep, _schedule(cfg, cfg.train.base_lr, maxiter)))

    def end_of_epoch(s: LoopState):
        s.rows.append(_row(info, s.epoch, validation_report(net, dataset), n_params, flops))

    path = _ckpt_path(out_dir, info.run_id)
    digest = cfg.digest()
    _resume(state, path, resume, digest)
    run_epochs(state, pool, cfg.train.batch, cfg.train.epochs, step, end_of_epoch, path,
               lambda s: pack_state(s, digest, info), stop_after_epoch)
    return PhaseResult(info, net, state.rows, validation_report(net, dataset), dict(state.nets))


def load_teacher(path: str, cfg: ExperimentConfig, num_classes: int) -> MiniUNet:
    entries = ckpt.load_checkpoint(path)
    net = build_mini_unet(cfg.teacher.width, 1, num_classes, 0)
    return load_net(entries, "teacher", net).freeze()


# ------------------------------------------------------------- paraphrasers


def teacher_taps(teacher: MiniUNet, images: np.ndarray, batch: int = CACHE_BATCH) -> Dict[str, np.ndarray]:
    p = teacher.frozen_view()
    out: Dict[str, List[np.ndarray]] = {site: [] for site in TAP_SITES}
    for i in range(0, len(images), batch):
        _, taps = teacher.forward_with_taps(Tensor(images[i : i + batch]), p)
        for site in TAP_SITES:
            out[site].append(taps[site].data)
    return {site: np.concatenate(v) for site, v in out.items()}


def train_paraphrasers(
    teacher: MiniUNet, cfg: ExperimentConfig, images: np.ndarray, seed: int
) -> Tuple[Dict[str, Paraphraser], Dict[str, List[float]]]:
    """One paraphraser per tap site, trained by reconstruction with SGD-momentum.

    The teacher is frozen: its taps are computed once on the un-augmented
    images and its parameters are verified unchanged afterwards. Returns the
    paraphrasers and the per-epoch mean reconstruction loss of each.
    """
    c_t = teacher.tap_channels
    if c_t != 2 * cfg.teacher.width:
        raise ValueError(f"teacher tap channels {c_t} do not match config teacher.width {cfg.teacher.width}")
    c_s = 2 * cfg.student.width
    digest = teacher.params.digest()
    taps = teacher_taps(teacher, images)
    paras = {site: build_paraphraser(c_t, c_s, derive_seed(seed, f"para.{site}")) for site in TAP_SITES}
    opts = {site: sgd_momentum(cfg.train.base_lr, cfg.train.weight_decay) for site in TAP_SITES}
    history: Dict[str, List[float]] = {site: [] for site in TAP_SITES}
    rng = np.random.default_rng(derive_seed(seed, "para.batches"))
    batch, epochs = cfg.train.batch, cfg.train.paraphraser_epochs
    iters = math.ceil(len(images) / batch)
    sched = _schedule(cfg, cfg.train.base_lr, epochs * iters)
    it = 0
    for ep in range(epochs):
        order = rng.permutation(len(images))
        sums = {site: 0.0 for site in TAP_SITES}
        for b in range(iters):
            idx = order[b * batch : (b + 1) * batch]
            lr = poly_lr(it, ep, sched)
            for site in TAP_SITES:
                para = paras[site]
                f_t = Tensor(taps[site][idx])
                p = para.bind()
                loss = objectives.rec_loss(f_t, para.reconstruct(f_t, p))
                _abort_if_nonfinite(loss, it, {f"l_rec.{site}": float(loss.data)})
                optimizer_step(opts[site], para.params, grads_for(loss, p), lr)
                sums[site] += float(loss.data) * len(idx)
            it += 1
        for site in TAP_SITES:
            history[site].append(sums[site] / len(images))
    if teacher.params.digest() != digest:
        raise RuntimeError("teacher parameters changed during paraphraser training")
    for para in paras.values():
        para.freeze()
    return paras, history


def save_paraphrasers(path: str, paras: Dict[str, Paraphraser], history: Dict[str, List[float]]) -> None:
    entries = {f"net/{site}/{k}": v for site, para in paras.items() for k, v in para.params.items()}
    entries["meta/history"] = ckpt.json_entry(history)
    ckpt.save_checkpoint(path, entries)


def load_paraphrasers(path: str, cfg: ExperimentConfig) -> Tuple[Dict[str, Paraphraser], Dict[str, List[float]]]:
    entries = ckpt.load_checkpoint(path)
    paras = {}
    for site in TAP_SITES:
        para = build_paraphraser(2 * cfg.teacher.width, 2 * cfg.student.width, 0)
        paras[site] = load_net(entries, site, para).freeze()
    return paras, ckpt.entry_json(entries["meta/history"])


# ------------------------------------------------------------ teacher cache


@dataclass
class TeacherCache:
    """Frozen-teacher outputs for every (pool sample, augmentation code).

    ``logits`` is (N, A, M, H, W); ``v`` and ``e`` hold the teacher-side
    variation graph built from paraphrased taps (absent when graph
    distillation is off).
    """

    logits: np.ndarray
    v: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None

    def lookup(self, idx: np.ndarray, codes: np.ndarray) -> Tuple[np.ndarray, Optional[VariationGraph]]:
        logits = self.logits[idx, codes]
        if self.v is None:
            return logits, None
        return logits, VariationGraph(Tensor(self.v[idx, codes]), Tensor(self.e[idx, codes]))


def teacher_graph(teacher_taps_: Dict[str, Tensor], paras: Optional[Dict[str, Paraphraser]], patch) -> VariationGraph:
    f_i, f_j = teacher_taps_[TAP_SITES[0]], teacher_taps_[TAP_SITES[1]]
    if paras is not None:
        f_i = paras[TAP_SITES[0]].paraphrase(f_i, paras[TAP_SITES[0]].frozen_view())
        f_j = paras[TAP_SITES[1]].paraphrase(f_j, paras[TAP_SITES[1]].frozen_view())
    return graph_flow.variation_graph_of(f_i, f_j, patch)


def build_teacher_cache(
    teacher: MiniUNet,
    paras: Optional[Dict[str, Paraphraser]],
    images: np.ndarray,
    patch,
    with_graph: bool,
    batch: int = CACHE_BATCH,
) -> TeacherCache:
    n, a = len(images), len(AUGMENTATIONS)
    p = teacher.frozen_view()
    logits = np.zeros((n, a, teacher.num_classes) + images.shape[2:])
    v = e = None
    for code in range(a):
        for i in range(0, n, batch):
            x = apply_augmentation(images[i : i + batch], code)
            out, taps = teacher.forward_with_taps(Tensor(x), p)
            logits[i : i + batch, code] = out.data
            if with_graph:
                vg = teacher_graph(taps, paras, patch)
                if v is None:
                    c = vg.v.shape[1]
                    v, e = np.zeros((n, a, c)), np.zeros((n, a, c, c))
                v[i : i + batch, code] = vg.v.data
                e[i : i + batch, code] = vg.e.data
    return TeacherCache(logits, v, e)


# ----------------------------------------------------------------- student


ARM_TOGGLES = {
    "scratch": (False, False, False),
    "graph": (True, False, False),
    "graph_adv": (True, True, False),
    "graph_adv_logits": (True, True, True),
}


def with_toggles(cfg: ExperimentConfig, graph: bool, adv: bool, logits: bool) -> ExperimentConfig:
    out = replace(cfg, distill=replace(cfg.distill, enable_graph=graph, enable_adv=adv, enable_logits=logits))
    return out.validate()


def needs_teacher(cfg: ExperimentConfig) -> bool:
    d = cfg.distill
    return d.enable_graph or d.enable_adv or d.enable_logits


def student_losses(
    cfg: ExperimentConfig,
    critic: Optional[Discriminator],
    s_logits: Tensor,
    taps: Dict[str, Tensor],
    x: Tensor,
    y: np.ndarray,
    flags: np.ndarray,
    t_logits: Optional[np.ndarray],
    vg_t: Optional[VariationGraph],
) -> objectives.LossBundle:
    """Assemble the student's loss terms for one batch; disabled terms stay ``None``."""
    d = cfg.distill
    bundle = objectives.LossBundle(l_ce=ops.cross_entropy(s_logits, y, flags), lambdas=cfg.lambdas, labeled_flags=flags)
    if d.enable_graph:
        vg_s = graph_flow.variation_graph_of(taps[TAP_SITES[0]], taps[TAP_SITES[1]], d.patch_size)
        bundle.l_vertex, bundle.l_edge = graph_flow.vg_loss(vg_t, vg_s)
    if d.enable_adv:
        bundle.l_g = objectives.adv_loss_G(critic, ops.softmax_over_classes(s_logits, 1.0), x)
    if d.enable_logits:
        z_s = ops.softmax_over_classes(s_logits, d.tau)
        z_t = Tensor(ops.softmax_over_classes(Tensor(t_logits), d.tau).data)
        bundle.l_kd = objectives.kd_loss(z_s, z_t)
    return bundle


def distill_student(
    cfg: ExperimentConfig,
    dataset: Dataset,
    seed: int,
    *,
    cache: Optional[TeacherCache] = None,
    pool_kind: str = "all",
    arm: str = "graphflow",
    out_dir: Optional[str] = None,
    resume: bool = False,
    stop_after_epoch: Optional[int] = None,
) -> PhaseResult:
    """Train the student, alternating one critic step and one student step per batch.

    ``cache`` holds the frozen teacher's outputs for ``make_pool(dataset,
    pool_kind)``; it is required whenever any distillation component is on.
    With every component off this is plain supervised training.
    """
    d, t = cfg.distill, cfg.train
    pool = make_pool(dataset, pool_kind)
    if len(pool) == 0:
        raise ValueError(f"the {pool_kind!r} training pool is empty")
    if needs_teacher(cfg):
        if cache is None:
            raise ValueError("distillation needs a trained teacher; run train-teacher first")
        if len(cache.logits) != len(pool):
            raise ValueError(f"teacher cache covers {len(cache.logits)} samples, pool has {len(pool)}")
        if d.enable_graph and cache.v is None:
            raise ValueError("teacher cache was built without variation graphs")
    spec = dataset.spec
    student = build_mini_unet(cfg.student.width, 1, spec.num_classes, derive_seed(seed, "student"))
    nets: Dict[str, Module] = {"student": student}
    opts = {"student": adam(t.base_lr, t.weight_decay)}
    critic = None
    if d.enable_adv:
        critic = build_discriminator(spec.num_classes, 1, derive_seed(seed, "critic"))
        nets["critic"] = critic
        opts["critic"] = adam(t.critic_lr, t.weight_decay)
    info = RunInfo(run_id_for("student", arm, seed, spec.labeled_fraction, d.patch_size),
                   "student", seed, arm, spec.labeled_fraction, str(d.patch_size))
    state = LoopState(nets, opts, np.random.default_rng(derive_seed(seed, "batches")))
    n_params = metrics.count_params(student)
    flops = metrics.count_flops(student, (1, spec.image_size, spec.image_size))

    def step(x, y, flags, it, ep, maxiter, idx, codes):
        t_logits, vg_t = cache.lookup(idx, codes) if cache is not None else (None, None)
        x_t = Tensor(x)
        p_s = student.bind()
        s_logits, taps = student.forward_with_taps(x_t, p_s)
        if critic is not None:
            critic_step(s_logits, t_logits, x_t, it, maxiter)
        bundle = student_losses(cfg, critic, s_logits, taps, x_t, y, flags, t_logits, vg_t)
        total = objectives.total_loss(bundle)
        _abort_if_nonfinite(total, it, bundle.breakdown())
        lr = poly_lr(it, ep, _schedule(cfg, t.base_lr, maxiter))
        optimizer_step(opts["student"], student.params, grads_for(total, p_s), lr)

    def critic_step(s_logits, t_logits, x_t, it, maxiter):
        # adv_loss_D cuts the student/teacher lineage; the student is unchanged until its own step
        y_s = ops.softmax_over_classes(s_logits, 1.0)
        y_t = ops.softmax_over_classes(Tensor(t_logits), 1.0)
        p_d = critic.bind()
        l_d = objectives.adv_loss_D(critic, y_s, y_t, x_t, p_d)
        _abort_if_nonfinite(l_d, it, {"l_adv": float(l_d.data)})
        lr = poly_lr(it, 0, _schedule(cfg, t.critic_lr, maxiter, step_decay=False))
        optimizer_step(opts["critic"], critic.params, grads_for(l_d, p_d), lr)
        critic.clip(d.critic_clip)

    def end_of_epoch(s: LoopState):
        s.rows.append(_row(info, s.epoch, validation_report(student, dataset), n_params, flops))

    path = _ckpt_path(out_dir, info.run_id)
    digest = cfg.digest()
    _resume(state, path, resume, digest)
    run_epochs(state, pool, t.batch, t.epochs, step, end_of_epoch, path,
               lambda s: pack_state(s, digest, info), stop_after_epoch)
    return PhaseResult(info, student, state.rows, validation_report(student, dataset), dict(nets))


# ----------------------------------------------------------- orchestration


@dataclass
class TeacherSide:
    """A frozen teacher with its paraphrasers and per-pool output cache."""

    teacher: MiniUNet
    paraphrasers: Optional[Dict[str, Paraphraser]]
    history: Dict[str, List[float]]
    cache: TeacherCache


def prepare_teacher_side(
    cfg: ExperimentConfig, dataset: Dataset, teacher: MiniUNet, seed: int, pool_kind: str = "all"
) -> TeacherSide:
    """Train paraphrasers on the pool's images (if enabled) and cache teacher outputs."""
    teacher.freeze()
    pool = make_pool(dataset, pool_kind)
    paras, history = None, {}
    if cfg.distill.enable_graph and cfg.distill.enable_paraphraser:
        paras, history = train_paraphrasers(teacher, cfg, pool.images, seed)
    cache = build_teacher_cache(teacher, paras, pool.images, cfg.distill.patch_size, cfg.distill.enable_graph)
    return TeacherSide(teacher, paras, history, cache)
