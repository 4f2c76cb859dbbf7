"""SGD with momentum and weight decay.

Sign convention: the update *subtracts* the loss gradient (plain descent).
``grad_sum`` is the already-aggregated gradient for one layer and one clock;
workers pre-scale their local mean gradient by ``1/P`` so that the sum over
workers is the mean over the union batch.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .network import LayerParams, ModelState


class LrPolicy(str, enum.Enum):
    FIXED = "fixed"
    STEP = "step"
    POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_policy: LrPolicy = LrPolicy.FIXED
    gamma: float = 0.1
    step_size: int = 1
    power: float = 1.0
    total_iters: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lr_policy", LrPolicy(self.lr_policy))
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.total_iters <= 0:
            raise ConfigError("total_iters must be positive")
        if self.lr_policy is LrPolicy.STEP and self.step_size <= 0:
            raise ConfigError("step_size must be positive")


def lr_at(cfg: SolverConfig, t: int) -> float:
    """Step size for 0-based iteration ``t``.

    ``t == total_iters`` is accepted for the polynomial policy so the schedule
    can be read at its end point (where it is 0).
    """
    if t < 0 or t > cfg.total_iters or (t == cfg.total_iters and cfg.lr_policy is not LrPolicy.POLYNOMIAL):
        raise ConfigError(f"iteration {t} outside [0, {cfg.total_iters})")
    if cfg.lr_policy is LrPolicy.FIXED:
        return cfg.epsilon
    if cfg.lr_policy is LrPolicy.STEP:
        return cfg.epsilon * cfg.gamma ** (t // cfg.step_size)
    return cfg.epsilon * (1.0 - t / cfg.total_iters) ** cfg.power


@dataclass
class SolverState:
    """Momentum buffers per layer, shaped like the parameters."""

    velocity: dict = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def zeros_like(cls, state: ModelState) -> "SolverState":
        vel = {
            k: LayerParams(np.zeros_like(p.weight), None if p.bias is None else np.zeros_like(p.bias))
            for k, p in state.items()
        }
        return cls(vel, 0)

    def copy(self) -> "SolverState":
        return SolverState({k: v.copy() for k, v in self.velocity.items()}, self.iteration)


def _step(param: np.ndarray, grad: np.ndarray, vel: np.ndarray, lr: float, cfg: SolverConfig) -> None:
    if grad.shape != param.shape or vel.shape != param.shape:
        raise ShapeError(f"update shape mismatch: param {param.shape}, grad {grad.shape}")
    dt = param.dtype.type
    g = grad if cfg.weight_decay == 0 else grad + dt(cfg.weight_decay) * param
    vel *= dt(cfg.momentum)
    vel -= dt(lr) * g
    param += vel


def apply_update(
    params: LayerParams, grad_sum: LayerParams, velocity: LayerParams, cfg: SolverConfig, t: int
) -> LayerParams:
    """Apply one update in place for 0-based iteration ``t``; returns ``params``.

    v <- momentum*v - lr_t*(g + weight_decay*w);  w <- w + v
    """
    lr = lr_at(cfg, t)
    _step(params.weight, grad_sum.weight, velocity.weight, lr, cfg)
    if params.bias is not None:
        if grad_sum.bias is None or velocity.bias is None:
            raise ShapeError("bias gradient missing")
        _step(params.bias, grad_sum.bias, velocity.bias, lr, cfg)
    return params


def apply_model_update(state: ModelState, grads: dict, solver: SolverState, cfg: SolverConfig, t: int) -> None:
    for layer_id in sorted(grads):
        apply_update(state[layer_id], grads[layer_id], solver.velocity[layer_id], cfg, t)
    solver.iteration = t + 1

