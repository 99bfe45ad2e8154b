"""
Adam with classic L2 regularization and a one-step learning-rate drop.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import OptimizerConfig
from errors import NumericError
from models.tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the shared step counter."""
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> 'AdamState':
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def scheduled_lr(base_lr: float, epoch: int, cfg: OptimizerConfig) -> float:
    """Base lr, divided by lr_drop_factor from lr_drop_epoch on."""
    return base_lr / cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else base_lr


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              cfg: OptimizerConfig, lr: float, names: Optional[Sequence[str]] = None) -> AdamState:
    """One in-place Adam update; the L2 term weight_decay * param is added to the gradient."""
    names = names or [f"param[{i}]" for i in range(len(params))]
    for name, grad in zip(names, grads):
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1 - b1 ** state.step
    bias2 = 1 - b2 ** state.step
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param)
        g = grad + cfg.weight_decay * param
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        param -= (lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(param.dtype)
    return state


class Adam:
    """Adam over named parameter groups, each with its own base learning rate."""

    def __init__(self, groups: Dict[str, List[Parameter]], base_lrs: Dict[str, float], cfg: OptimizerConfig,
                 names: Optional[Dict[int, str]] = None):
        self.cfg = cfg
        self.groups = {key: list(params) for key, params in groups.items() if params}
        self.base_lrs = base_lrs
        self.names = names or {}
        self.states = {key: AdamState.zeros_like([p.values for p in params])
                       for key, params in self.groups.items()}

    @classmethod
    def for_model(cls, model, cfg: OptimizerConfig) -> 'Adam':
        names = {id(p): name for name, p in model.named_parameters()}
        return cls(model.parameter_groups(), {'main': cfg.lr_main, 'image': cfg.lr_image_branch}, cfg, names)

    def lr(self, group: str, epoch: int) -> float:
        return scheduled_lr(self.base_lrs[group], epoch, self.cfg)

    def step(self, epoch: int) -> None:
        for params in self.groups.values():
            for p in params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericError(f"non-finite gradient in parameter {self.names.get(id(p), p.name)}")
        for key, params in self.groups.items():
            adam_step([p.values for p in params], [p.grad for p in params], self.states[key], self.cfg,
                      self.lr(key, epoch), [self.names.get(id(p), p.name or key) for p in params])

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params:
                p.grad = None
