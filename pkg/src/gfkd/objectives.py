"""Reconstruction, logits, adversarial losses and the total objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from gfkd import ops
from gfkd.networks import Discriminator
from gfkd.tensor import Function, Tensor, as_tensor

DEFAULT_LAMBDAS = (1e-5, 1e-9, 0.1, 1.0)
PROB_FLOOR = 1e-12


def rec_loss(f_t: Tensor, recon: Tensor) -> Tensor:
    """Mean squared reconstruction error."""
    if f_t.shape != recon.shape:
        raise ValueError(f"rec_loss: shape mismatch {f_t.shape} vs {recon.shape}")
    return ops.mean(ops.square(ops.sub(as_tensor(recon), as_tensor(f_t))))


class _KL(Function):
    def forward(self, zs, zt):
        zt_safe = np.maximum(zt, PROB_FLOOR)
        self.zs, self.zt, self.zt_safe = zs, zt, zt_safe
        self.n = zs.shape[0] * int(np.prod(zs.shape[2:]))
        ratio = np.log(np.where(zs > 0, zs, 1.0) / zt_safe)
        return np.asarray(np.where(zs > 0, zs * ratio, 0.0).sum() / self.n)

    def backward(self, g):
        zs = np.maximum(self.zs, np.finfo(np.float64).tiny)
        d_zs = (np.log(zs / self.zt_safe) + 1.0) * (g / self.n)
        d_zt = np.where(self.zt > PROB_FLOOR, -self.zs / self.zt_safe, 0.0) * (g / self.n)
        return d_zs, d_zt


def _check_distribution(z: np.ndarray, name: str) -> None:
    sums = z.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(z < 0):
        raise ValueError(f"kd_loss: {name} is not a per-pixel distribution (max row-sum error {np.abs(sums - 1).max():.3g})")


def kd_loss(z_s: Tensor, z_t: Tensor) -> Tensor:
    """Pixel-averaged KL(Z_s || Z_t) for (B, M, H, W) class distributions.

    The student distribution comes first. 0 log 0 is taken as 0 and the
    teacher probabilities are floored at 1e-12 inside the log ratio.
    """
    z_s, z_t = as_tensor(z_s), as_tensor(z_t)
    if z_s.shape != z_t.shape:
        raise ValueError(f"kd_loss: shape mismatch {z_s.shape} vs {z_t.shape}")
    _check_distribution(z_s.data, "student")
    _check_distribution(z_t.data, "teacher")
    return _KL.apply(z_s, z_t)


def adv_loss_D(critic: Discriminator, y_s, y_t, x, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Critic objective: mean D([Y_s, X]) - mean D([Y_t, X]).

    ``y_s`` and ``y_t`` are class probabilities; their lineage is cut so the
    critic step never touches the student or teacher.
    """
    y_s, y_t = as_tensor(y_s).detach(), as_tensor(y_t).detach()
    if y_s.shape[0] != y_t.shape[0]:
        raise ValueError(f"adv_loss_D: batch mismatch {y_s.shape[0]} vs {y_t.shape[0]}")
    p = critic.bind() if p is None else p
    return ops.sub(ops.mean(critic.discriminate(y_s, x, p)), ops.mean(critic.discriminate(y_t, x, p)))


def adv_loss_G(critic: Discriminator, y_s, x, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Generator-side score mean D([Y_s, X]); the student maximises it."""
    p = critic.frozen_view() if p is None else p
    return ops.mean(critic.discriminate(y_s, x, p))


@dataclass
class LossBundle:
    """Loss terms of one student step. ``None`` marks a disabled term."""

    l_ce: Tensor
    l_vertex: Optional[Tensor] = None
    l_edge: Optional[Tensor] = None
    l_g: Optional[Tensor] = None
    l_kd: Optional[Tensor] = None
    lambdas: Sequence[float] = DEFAULT_LAMBDAS
    labeled_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def breakdown(self) -> Dict[str, float]:
        out = {}
        for name in ("l_ce", "l_vertex", "l_edge", "l_g", "l_kd"):
            t = getattr(self, name)
            out[name] = float("nan") if t is None else float(t.data)
        return out


def total_loss(bundle: LossBundle) -> Tensor:
    """L_ce + l1 L_vertex + l2 L_edge - l3 L_g + l4 L_kd, skipping disabled terms."""
    l1, l2, l3, l4 = bundle.lambdas
    if min(bundle.lambdas) < 0:
        raise ValueError(f"lambda weights must be non-negative, got {tuple(bundle.lambdas)}")
    total = as_tensor(bundle.l_ce)
    if bundle.l_vertex is not None:
        total = ops.add(total, ops.scale(bundle.l_vertex, l1))
    if bundle.l_edge is not None:
        total = ops.add(total, ops.scale(bundle.l_edge, l2))
    if bundle.l_g is not None:
        total = ops.sub(total, ops.scale(bundle.l_g, l3))
    if bundle.l_kd is not None:
        total = ops.add(total, ops.scale(bundle.l_kd, l4))
    return total
