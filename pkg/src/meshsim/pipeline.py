"""Asynchronous pipeline updates modelled as stage-dependent gradient staleness.

Stage ``j`` at local step ``k`` applies the gradient taken at the weights and
minibatch of step ``k - delta_j``. Microbatch interleaving is not modelled; only
its effect on which weights a gradient was computed at.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError
from .optim import LrSchedule, apply_update, clip_by_norm, lr_at, make_state

DELAY_MODES = ("sync", "async_linear", "custom")


@dataclass(frozen=True)
class StageDelayConfig:
    num_stages: int = 1
    mode: str = "sync"
    delays: tuple | None = None

    def __post_init__(self):
        if self.mode not in DELAY_MODES:
            raise ConfigError(f"stage_delays.mode: unknown mode {self.mode!r}")
        if self.mode == "sync":
            d = (0,) * self.num_stages
        elif self.mode == "async_linear":
            # first stage waits longest; the last stage sees no staleness
            d = tuple(self.num_stages - j for j in range(1, self.num_stages + 1))
        else:
            if self.delays is None or len(self.delays) != self.num_stages:
                raise ConfigError("stage_delays.delays must list one delay per stage")
            d = tuple(int(x) for x in self.delays)
        if any(x < 0 for x in d):
            raise ConfigError("stage delays must be >= 0")
        object.__setattr__(self, "delays", d)

    @property
    def max_delay(self) -> int:
        return max(self.delays)


class WeightHistory:
    """Ring buffer of the last ``depth`` full-parameter snapshots, keyed by local step."""

    def __init__(self, depth: int):
        if depth < 1:
            raise ConfigError("history depth must be >= 1")
        self.depth = depth
        self._buf: deque = deque(maxlen=depth)

    def push(self, step: int, params: np.ndarray):
        self._buf.append((step, params.copy()))

    def get(self, step: int) -> np.ndarray:
        newest = self._buf[-1][0]
        offset = newest - step
        if not 0 <= offset < len(self._buf):
            raise RuntimeError(f"weight history underrun: step {step} not in the last {len(self._buf)} snapshots")
        s, w = self._buf[-1 - offset]
        assert s == step
        return w

    def __len__(self):
        return len(self._buf)


@dataclass
class WorkerReplica:
    """One data-parallel replica: a full pipe of ``P`` stages.

    ``params`` and ``ema`` are usually row views into the simulator's replica
    arrays, so writes here are visible to the averaging code and vice versa.
    """

    index: int
    params: np.ndarray
    optimizers: list
    history: WeightHistory
    ema: np.ndarray | None = None
    local_step: int = 0
    stats: dict = field(default_factory=dict)


def make_replica(index, params, num_stages, delays: StageDelayConfig, optimizer: dict, ema=None):
    opts = [make_state(**optimizer) for _ in range(num_stages)]
    return WorkerReplica(index, params, opts, WeightHistory(delays.max_delay + 1), ema)


def delayed_step(replica: WorkerReplica, model, delays: StageDelayConfig, lr_schedule: LrSchedule,
                 clip_norm: float | None = 1.0, seed: int = 0) -> WorkerReplica:
    """Advance ``replica`` by one local step with per-stage stale gradients.

    Stages whose delay reaches before step 0 skip the update. Stages sharing a
    delay share one backward pass. Clipping acts on the concatenated gradient of
    the stages that update this step.
    """
    k = replica.local_step
    replica.history.push(k, replica.params)
    off = model.stage_offsets
    if len(off) - 1 != delays.num_stages:
        raise ConfigError(f"model has {len(off) - 1} stages, delay config has {delays.num_stages}")
    active = [j for j in range(delays.num_stages) if k - delays.delays[j] >= 0]
    if active:
        full = {}
        for j in active:
            src = k - delays.delays[j]
            if src not in full:
                full[src] = model.gradient(replica.history.get(src), model.batch(replica.index, src, seed))
        if len(active) == delays.num_stages and len(full) == 1:
            grad = clip_by_norm(full[k - delays.delays[0]], clip_norm)
            pieces = [grad[off[j]:off[j + 1]] for j in active]
        else:
            pieces = [full[k - delays.delays[j]][off[j]:off[j + 1]] for j in active]
            cat = clip_by_norm(np.concatenate(pieces), clip_norm)
            bounds = np.cumsum([0] + [p.size for p in pieces])
            pieces = [cat[bounds[n]:bounds[n + 1]] for n in range(len(active))]
        lr = lr_at(lr_schedule, k)
        for j, g in zip(active, pieces):
            sl = slice(off[j], off[j + 1])
            replica.params[sl] = apply_update(replica.optimizers[j], replica.params[sl], g, lr, step=k)
    replica.local_step = k + 1
    return replica
