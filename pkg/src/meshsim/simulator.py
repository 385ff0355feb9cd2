"""Lock-step engine for an ``m`` replica x ``P`` stage mesh.

Time is counted in global ticks. On each tick every replica performs its local
steps (one, or ``s_i`` with heterogeneous speeds), then the data-parallel
strategy runs: synchronous strategies average on the spot, asynchronous ones
initiate an exchange every ``K`` ticks and apply those that are due.
"""
from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import averaging as avg
from .averaging import AveragingConfig
from .metrics import MetricsRecord, consensus_error, ema_variance
from .model import build_model
from .numerics import ConfigError, Rng, vec_mean
from .optim import EmaSchedule, LrSchedule, lambda_at
from .pipeline import StageDelayConfig, WorkerReplica, delayed_step, make_replica

__all__ = ["MeshConfig", "Trajectory", "WorkerReplica", "run", "heterogeneous_schedule",
           "evaluate_consensus_model"]


@dataclass(frozen=True)
class MeshConfig:
    num_stages: int = 1
    num_replicas: int = 4
    total_steps: int = 1000
    seed: int = 0
    model: dict = field(default_factory=lambda: {"kind": "quadratic", "dim": 32})
    optimizer: dict = field(default_factory=lambda: {"kind": "nadamw"})
    lr: LrSchedule = field(default_factory=LrSchedule)
    ema: EmaSchedule = field(default_factory=EmaSchedule)
    averaging: AveragingConfig = field(default_factory=AveragingConfig)
    stage_delays: StageDelayConfig | None = None
    speeds: tuple | None = None
    budget: int | None = None
    eval_every: int = 100
    clip_norm: float | None = 1.0
    # std-dev of per-replica perturbations of the shared initial point
    init_spread: float = 0.0

    def __post_init__(self):
        if self.num_stages < 1 or self.num_replicas < 1:
            raise ConfigError("num_stages and num_replicas must be >= 1")
        if self.total_steps < 0 or self.eval_every < 1:
            raise ConfigError("total_steps must be >= 0 and eval_every >= 1")
        if self.stage_delays is None:
            object.__setattr__(self, "stage_delays", StageDelayConfig(self.num_stages))
        if self.stage_delays.num_stages != self.num_stages:
            raise ConfigError("stage_delays.num_stages must equal num_stages")
        if self.speeds is not None:
            speeds = tuple(int(s) for s in self.speeds)
            if len(speeds) != self.num_replicas or min(speeds) < 1:
                raise ConfigError("speeds: need one integer >= 1 per replica")
            object.__setattr__(self, "speeds", speeds)
        if self.budget is not None and self.budget < 0:
            raise ConfigError("budget must be >= 0")

    def replace(self, **changes) -> "MeshConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeshConfig":
        """Build from a plain nested dict (as parsed from a config file)."""
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        nested = {"lr": LrSchedule, "ema": EmaSchedule, "averaging": AveragingConfig}
        for key, typ in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = _build(typ, d[key], key)
        sd = d.get("stage_delays")
        if isinstance(sd, dict):
            sd = dict(sd)
            sd.setdefault("num_stages", d.get("num_stages", 1))
            if sd.get("delays") is not None:
                sd["delays"] = tuple(sd["delays"])
            d["stage_delays"] = _build(StageDelayConfig, sd, "stage_delays")
        if d.get("speeds") is not None:
            d["speeds"] = tuple(d["speeds"])
        return cls(**d)


def _build(typ, values: dict, prefix: str):
    known = {f.name for f in dataclasses.fields(typ)}
    for k in values:
        if k not in known:
            raise ConfigError(f"{prefix}.{k}: unknown field")
    try:
        return typ(**values)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


@dataclass
class Trajectory:
    config: MeshConfig
    records: list = field(default_factory=list)
    local_steps: np.ndarray | None = None
    initiations: list = field(default_factory=list)
    completions: list = field(default_factory=list)
    skipped_corrections: int = 0
    params: np.ndarray | None = None
    ema: np.ndarray | None = None
    error: str | None = None

    @property
    def diverged(self) -> bool:
        return bool(self.records) and self.records[-1].diverged

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def heterogeneous_schedule(speeds, base_interval: int = 1):
    """Per-replica ``(steps_per_tick, averaging_interval)`` in local steps.

    A replica of speed ``s`` runs ``s`` local steps per tick, so between two
    globally aligned averaging initiations (every ``base_interval`` ticks) it
    performs ``s * base_interval`` steps.
    """
    speeds = [int(s) for s in speeds]
    if min(speeds) < 1:
        raise ConfigError("speeds must be positive integers")
    return [(s, s * base_interval) for s in speeds]


def _tick_plan(config: MeshConfig):
    """Number of ticks and the local steps each replica runs on a given tick."""
    m = config.num_replicas
    speeds = np.array(config.speeds or (1,) * m, dtype=np.int64)
    if config.budget is None:
        ticks = config.total_steps
        budget = int(speeds.sum()) * ticks
    else:
        budget = config.budget
        ticks = -(-budget // int(speeds.sum())) if budget else 0
    full_ticks = budget // int(speeds.sum())
    remainder = budget - full_ticks * int(speeds.sum())
    # the last, partial tick hands out the leftover steps in replica order
    last = np.zeros(m, dtype=np.int64)
    for i in range(m):
        last[i] = min(speeds[i], remainder)
        remainder -= last[i]

    def steps(t):
        return speeds if t <= full_ticks else last

    return ticks, steps


def evaluate_consensus_model(model, W) -> float:
    """Validation loss of the elementwise mean of all replicas."""
    return model.validation_loss(vec_mean(np.atleast_2d(W)))


def _record(t, model, W, D, strategy, inflight, prev_drift, diverged=False):
    m, dim = W.shape
    with np.errstate(all="ignore"):
        losses = tuple(model.train_loss(W[i], i) for i in range(m))
        closs = evaluate_consensus_model(model, W)
        cerr = consensus_error(W)
        if strategy == "ema_corrected":
            vmean, vmax = ema_variance(D)
        else:
            vmean, vmax = 0.0, 0.0
        drift = vec_mean(D)
        dnorm = float(np.linalg.norm(drift))
        dchange = float(np.linalg.norm(drift - prev_drift))
    diverged = diverged or not all(math.isfinite(x) for x in (*losses, closs, cerr))
    rec = MetricsRecord(step=t, replica_losses=losses, consensus_loss=closs, consensus_error=cerr,
                        ema_var_mean=vmean, ema_var_max=vmax, diverged=diverged, inflight=inflight,
                        consensus_error_mean=cerr / (m * dim), drift_norm=dnorm, drift_change_norm=dchange)
    return rec, drift


def init_replicas(config: MeshConfig, model):
    m = config.num_replicas
    base = model.init_params(config.seed)
    W = np.tile(base, (m, 1))
    if config.init_spread:
        g = Rng.for_stream(config.seed, "init_spread").generator()
        W += config.init_spread * g.normal(size=W.shape)
    return W


def run(config: MeshConfig, model=None) -> Trajectory:
    """Simulate the mesh and return its metrics trajectory.

    A non-finite loss or parameter ends the run early with ``diverged`` set on
    the final record; divergence is a result, not an exception.
    """
    m, P = config.num_replicas, config.num_stages
    if model is None:
        model = build_model(config.model, m, P, config.seed)
    if model.num_stages != P:
        raise ConfigError(f"model is split into {model.num_stages} stages, config asks for {P}")
    acfg, seed = config.averaging, config.seed
    off = model.stage_offsets
    W = init_replicas(config, model)
    D = np.zeros_like(W)
    replicas = [make_replica(i, W[i], P, config.stage_delays, config.optimizer, D[i]) for i in range(m)]
    ticks, steps_for = _tick_plan(config)
    traj = Trajectory(config=config)
    pending: deque = deque()
    drift = np.zeros(model.dim)

    rec, drift = _record(0, model, W, D, acfg.strategy, 0, drift)
    traj.records.append(rec)
    diverged = False
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, ticks + 1):
            try:
                for rep, n in zip(replicas, steps_for(t)):
                    for _ in range(int(n)):
                        delayed_step(rep, model, config.stage_delays, config.lr, config.clip_norm, seed)
                if m > 1:
                    _average(t, W, D, off, acfg, config, pending, traj)
            except FloatingPointError as exc:
                traj.error = str(exc)
                diverged = True
            if not diverged and not np.all(np.isfinite(W)):
                diverged = True
            if diverged or t % config.eval_every == 0 or t == ticks:
                rec, drift = _record(t, model, W, D, acfg.strategy, len(pending), drift, diverged)
                traj.records.append(rec)
                if rec.diverged:
                    break
    traj.local_steps = np.array([r.local_step for r in replicas])
    traj.params, traj.ema = W, D
    return traj


def _average(t, W, D, off, acfg: AveragingConfig, config: MeshConfig, pending: deque, traj: Trajectory):
    P = len(off) - 1
    s = acfg.strategy
    if s == "diloco":
        if t % acfg.period == 0:
            avg.diloco_outer_step(W, acfg.quant)
            traj.initiations.append(t)
        return
    if not acfg.is_async:
        if t % acfg.period == 0:
            for j in range(P):
                _, idx = avg.mask_for(config.seed, j, t, off, acfg)
                avg.sparse_average_sync(W, idx, acfg.quant)
            traj.initiations.append(t)
        return
    if t % acfg.period == 0:
        for j in range(P):
            pending.append(avg.initiate_averaging(W, t, j, off, acfg, config.seed))
        traj.initiations.append(t)
    lam = lambda_at(config.ema, t)
    while pending and pending[0].completes_at <= t:
        ev = pending.popleft()
        if not avg.complete(W, D, ev, acfg, lam):
            traj.skipped_corrections += 1
        traj.completions.append((ev.initiated_at, t, ev.stage))
