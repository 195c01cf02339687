"""Adam / SGD-momentum updates and the poly learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from gfkd.networks import ParamStore


class NumericalError(FloatingPointError):
    """Raised when training produces a non-finite gradient or loss."""


@dataclass
class OptimState:
    kind: str  # "adam" or "sgd_momentum"
    base_lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        if self.kind == "adam":
            out.update({f"v/{k}": v for k, v in self.v.items()})
        out["t"] = np.array(float(self.t))
        return out

    def load_buffers(self, entries: Mapping[str, np.ndarray]) -> None:
        self.t = int(entries["t"])
        self.m = {k[2:]: np.array(v) for k, v in entries.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in entries.items() if k.startswith("v/")}


def adam(base_lr: float, weight_decay: float = 0.0) -> OptimState:
    return OptimState("adam", base_lr, weight_decay)


def sgd_momentum(base_lr: float, weight_decay: float = 0.0, momentum: float = 0.9) -> OptimState:
    return OptimState("sgd_momentum", base_lr, weight_decay, momentum=momentum)


def optimizer_step(state: OptimState, params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> ParamStore:
    """One update of every parameter named in ``grads``; weight decay joins the gradient first."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    for name, g in grads.items():
        p = params[name]
        g = g + state.weight_decay * p if state.weight_decay else g
        if state.kind == "adam":
            m = state.m.get(name, np.zeros_like(p))
            v = state.v.get(name, np.zeros_like(p))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - state.beta1**state.t)
            v_hat = v / (1 - state.beta2**state.t)
            params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            vel = state.momentum * state.m.get(name, np.zeros_like(p)) + g
            state.m[name] = vel
            params[name] = p - lr * vel
    return params


@dataclass
class Schedule:
    base_lr: float
    maxiter: int
    power: float = 0.9
    step_every: int = 50  # epochs; 0 disables the step decay
    step_factor: float = 0.1


def poly_lr(iteration: int, epoch: int, schedule: Schedule) -> float:
    """base * (1 - iter/maxiter)^power * factor^floor(epoch/every)."""
    if schedule.maxiter <= 0 or iteration >= schedule.maxiter:
        return 0.0
    lr = schedule.base_lr * (1.0 - iteration / schedule.maxiter) ** schedule.power
    if schedule.step_every > 0:
        lr *= schedule.step_factor ** (epoch // schedule.step_every)
    return lr
