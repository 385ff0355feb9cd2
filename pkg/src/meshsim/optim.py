"""Local optimizers (SGD, AdamW, NAdamW) and the learning-rate / EMA schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError

OPTIMIZERS = ("sgd", "adamw", "nadamw")


@dataclass
class OptimizerState:
    kind: str = "nadamw"
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer.kind: unknown optimizer {self.kind!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("kind", "beta1", "beta2", "eps", "weight_decay", "step_count")}
        for k in ("first_moment", "second_moment"):
            v = getattr(self, k)
            d[k] = None if v is None else v.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        d = dict(d)
        for k in ("first_moment", "second_moment"):
            if d.get(k) is not None:
                d[k] = np.array(d[k], dtype=np.float64)
        return cls(**d)


def make_state(kind="nadamw", **hyper) -> OptimizerState:
    if kind == "sgd":
        hyper.setdefault("weight_decay", 0.0)
    return OptimizerState(kind=kind, **hyper)


def apply_update(state: OptimizerState, params, grad, lr: float, step: int | None = None) -> np.ndarray:
    """One optimizer step. Returns new parameters and advances ``state`` in place.

    AdamW and NAdamW use decoupled weight decay: ``w - lr * (u + wd * w)`` where
    ``u`` is the normalised update. NAdamW replaces the bias-corrected first moment
    by its Nesterov look-ahead ``b1 * m / (1 - b1^(t+1)) + (1 - b1) * g / (1 - b1^t)``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        where = state.step_count if step is None else step
        raise FloatingPointError(f"non-finite gradient at step {where}")
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    params = np.asarray(params, dtype=np.float64)
    state.step_count += 1
    if state.kind == "sgd":
        if state.weight_decay:
            return params - lr * (grad + state.weight_decay * params)
        return params - lr * grad

    b1, b2, t = state.beta1, state.beta2, state.step_count
    if state.first_moment is None:
        state.first_moment = np.zeros_like(params)
        state.second_moment = np.zeros_like(params)
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * (grad * grad)
    state.first_moment, state.second_moment = m, v
    if state.kind == "adamw":
        m_hat = m / (1.0 - b1 ** t)
    else:
        m_hat = b1 * m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * grad / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    return params - lr * (update + state.weight_decay * params)


def clip_by_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = math.sqrt(float(np.dot(grad, grad)))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up followed by cosine decay; ``kind="constant"`` pins ``peak_lr``."""

    peak_lr: float = 3e-4
    warmup_steps: int = 3000
    floor_lr: float = 3e-5
    warmup_start: float = 1e-7
    total_steps: int = 30000
    kind: str = "warmup_cosine"

    def __post_init__(self):
        if self.kind not in ("warmup_cosine", "constant"):
            raise ConfigError(f"lr.kind: unknown schedule {self.kind!r}")
        if min(self.peak_lr, self.floor_lr, self.warmup_start) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.kind == "warmup_cosine" and not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("lr.warmup_steps must lie in [0, total_steps]")


def lr_at(schedule: LrSchedule, t: int) -> float:
    s = schedule
    if s.kind == "constant":
        return s.peak_lr
    if t < s.warmup_steps:
        frac = max(t, 0) / s.warmup_steps
        return s.warmup_start * (1.0 - frac) + s.peak_lr * frac
    if t >= s.total_steps:
        return s.floor_lr
    if t == s.warmup_steps:
        return s.peak_lr
    progress = (t - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.floor_lr + (s.peak_lr - s.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class EmaSchedule:
    """EMA coefficient schedule.

    ``cosine``: ``initial`` for ``hold_steps`` steps, then cosine decay to ``final``
    at ``total_steps``. ``power``: ``min(initial, t ** -power)``, which diverges in
    sum while its squares are summable. ``constant``: always ``initial``.
    """

    initial: float = 0.5
    hold_steps: int = 1000
    final: float = 0.01
    total_steps: int = 30000
    kind: str = "cosine"
    power: float = 0.6

    def __post_init__(self):
        if self.kind not in ("cosine", "power", "constant"):
            raise ConfigError(f"ema.kind: unknown schedule {self.kind!r}")
        if not 0.0 <= self.initial <= 1.0 or not 0.0 <= self.final <= 1.0:
            raise ConfigError("EMA coefficients must lie in [0, 1]")


def lambda_at(schedule: EmaSchedule, t: int) -> float:
    s = schedule
    if s.kind == "constant":
        return s.initial
    if s.kind == "power":
        return s.initial if t < 1 else min(s.initial, t ** -s.power)
    if t <= s.hold_steps:
        return s.initial
    if t >= s.total_steps:
        return s.final
    progress = (t - s.hold_steps) / (s.total_steps - s.hold_steps)
    return s.final + (s.initial - s.final) * 0.5 * (1.0 + math.cos(math.pi * progress))
