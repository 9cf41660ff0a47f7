"""AdamW with decoupled weight decay and a linear warm-up schedule."""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Mapping

import numpy as np

from utils.errors import DivergenceError, UsageError
from utils.numerics import Tensor

if TYPE_CHECKING:
    from utils.config import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer_state(params: Mapping[str, Tensor]) -> OptimizerState:
    state = OptimizerState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.values)
        state.v[name] = np.zeros_like(p.values)
    return state


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr_t: float, cfg: "TrainConfig") -> None:
    """One in-place AdamW update of ``params``.

    Decay is applied to the weights directly, not through the gradient.
    Parameters absent from ``params`` are never touched.
    """
    bad = sorted(name for name, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise DivergenceError(f"non-finite gradients at step {state.step + 1} in: {', '.join(bad)}")

    state.step += 1
    bias1 = 1.0 - cfg.beta1 ** state.step
    bias2 = 1.0 - cfg.beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p.values *= 1.0 - lr_t * cfg.weight_decay
        p.values -= lr_t * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def lr_at_step(step: int, steps_per_epoch: int, cfg: "TrainConfig") -> float:
    """Linear ramp from warmup_floor_lr to lr over the warm-up epochs, constant after."""
    if step < 0:
        raise UsageError(f"step must be >= 0, got {step}")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if warmup_steps <= 0 or step >= warmup_steps:
        return cfg.lr
    return cfg.warmup_floor_lr + (cfg.lr - cfg.warmup_floor_lr) * step / warmup_steps


def grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))
