"""Data-parallel weight synchronisation across replicas of one pipeline stage.

Replica weights are held as an ``(m, d)`` array ``W`` (one row per replica) and
every operation writes in place. Index arrays are global coordinates into the
flat parameter vector, so one helper serves every stage block.

Synchronous strategies average immediately. Asynchronous strategies split an
exchange into :func:`initiate_averaging`, which snapshots and "sends" the masked
coordinates, and a completion that lands ``tau`` steps later, when the replicas
have already moved on. The completions differ only in what they write over the
stale mean:

``async_sparta``       the stale mean itself
``ablation_raw_diff``  stale mean + the replica's own drift since initiation
``ema_corrected``      stale mean + an EMA of that drift (per replica, per coordinate)
``eager_diloco``       stale mean + drift / m, on every coordinate
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, QuantScheme, Rng, SampleMode, SubsetMask, quantize, sample_subset, vec_mean

STRATEGIES = (
    "fullsync_dpavg",
    "sparta",
    "async_sparta",
    "ema_corrected",
    "diloco",
    "eager_diloco",
    "ablation_raw_diff",
)
ASYNC_STRATEGIES = ("async_sparta", "ema_corrected", "eager_diloco", "ablation_raw_diff")


@dataclass(frozen=True)
class AveragingConfig:
    strategy: str = "ema_corrected"
    subset_fraction: float = 0.05
    async_delay: int = 10
    interval: int = 1
    quant: str = "none"
    sample_mode: str = "fixed_count"
    diloco_interval: int = 10
    # "inv_m" divides the drift by the replica count before it enters the EMA,
    # which turns ema_corrected into eager DiLoCo when p=1, tau=K and lambda=1
    ema_diff_scale: str = "one"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"averaging.strategy: unknown strategy {self.strategy!r}")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError(f"averaging.subset_fraction must lie in (0, 1], got {self.subset_fraction}")
        if self.async_delay < 0:
            raise ConfigError("averaging.async_delay must be >= 0")
        if self.interval < 1 or self.diloco_interval < 1:
            raise ConfigError("averaging intervals must be >= 1")
        if self.strategy == "eager_diloco" and self.subset_fraction < 1.0:
            raise ConfigError("averaging.subset_fraction: eager_diloco communicates every parameter (needs 1.0)")
        if self.ema_diff_scale not in ("one", "inv_m"):
            raise ConfigError(f"averaging.ema_diff_scale: expected 'one' or 'inv_m', got {self.ema_diff_scale!r}")
        QuantScheme(self.quant)
        SampleMode(self.sample_mode)

    @property
    def is_async(self) -> bool:
        return self.strategy in ASYNC_STRATEGIES

    @property
    def fraction(self) -> float:
        if self.strategy in ("fullsync_dpavg", "diloco"):
            return 1.0
        return self.subset_fraction

    @property
    def delay(self) -> int:
        return self.async_delay if self.is_async else 0

    @property
    def period(self) -> int:
        return self.diloco_interval if self.strategy == "diloco" else self.interval


@dataclass
class PendingAverage:
    """An in-flight exchange for one stage.

    ``payloads`` is what went over the wire (quantized); ``snapshots`` are the
    replicas' own full-precision values at initiation, kept locally.
    """

    initiated_at: int
    completes_at: int
    mask: SubsetMask
    index: np.ndarray
    payloads: np.ndarray
    snapshots: np.ndarray | None

    @property
    def stage(self) -> int:
        return self.mask.stage


def mask_for(seed: int, stage: int, step: int, offsets, config: AveragingConfig) -> tuple[SubsetMask, np.ndarray]:
    """Mask for ``(stage, step)`` in stage-local and global coordinates.

    The stream depends only on the shared seed, stage and step, so every replica
    derives the same subset without exchanging it.
    """
    lo, hi = int(offsets[stage]), int(offsets[stage + 1])
    mask = sample_subset(Rng.for_stream(seed, "mask", stage, step), hi - lo, config.fraction,
                         config.sample_mode, step=step, stage=stage)
    return mask, mask.indices + lo


def sparse_average_sync(W: np.ndarray, index, quant="none") -> np.ndarray:
    """Replace the masked coordinates of every replica by their cross-replica mean."""
    index = np.asarray(index, dtype=np.int64)
    if index.size:
        W[:, index] = vec_mean(quantize(W[:, index], quant))
    return W


def diloco_outer_step(W: np.ndarray, quant="none") -> np.ndarray:
    """Blocking full average; an outer step with learning rate 1."""
    W[:] = vec_mean(quantize(W, quant))
    return W


def initiate_averaging(W: np.ndarray, step: int, stage: int, offsets, config: AveragingConfig,
                       seed: int) -> PendingAverage:
    mask, index = mask_for(seed, stage, step, offsets, config)
    current = W[:, index]
    return PendingAverage(
        initiated_at=step,
        completes_at=step + config.delay,
        mask=mask,
        index=index,
        payloads=quantize(current, config.quant),
        snapshots=current.copy(),
    )


def stale_mean(event: PendingAverage) -> np.ndarray:
    return vec_mean(event.payloads)


def complete_async_sparta(W: np.ndarray, event: PendingAverage) -> np.ndarray:
    if event.index.size:
        W[:, event.index] = stale_mean(event)
    return W


def complete_ema_corrected(W: np.ndarray, D: np.ndarray, event: PendingAverage, lam: float,
                           diff_scale: float = 1.0) -> bool:
    """EMA-corrected write on the masked coordinates.

    ``D`` holds one EMA row per replica and is only touched on ``event.index``.
    Returns ``False`` when the event carries no snapshots, in which case the
    plain stale mean is written instead.
    """
    idx = event.index
    if not idx.size:
        return True
    if event.snapshots is None:
        W[:, idx] = stale_mean(event)
        return False
    drift = W[:, idx] - event.snapshots
    if diff_scale != 1.0:
        drift = diff_scale * drift
    d = (1.0 - lam) * D[:, idx] + lam * drift
    D[:, idx] = d
    W[:, idx] = stale_mean(event) + d
    return True


def complete_ablation_raw_diff(W: np.ndarray, event: PendingAverage) -> bool:
    idx = event.index
    if not idx.size:
        return True
    if event.snapshots is None:
        W[:, idx] = stale_mean(event)
        return False
    W[:, idx] = stale_mean(event) + (W[:, idx] - event.snapshots)
    return True


def complete_eager_diloco(W: np.ndarray, event: PendingAverage) -> bool:
    idx = event.index
    if event.snapshots is None:
        W[:, idx] = stale_mean(event)
        return False
    m = W.shape[0]
    W[:, idx] = stale_mean(event) + (1.0 / m) * (W[:, idx] - event.snapshots)
    return True


def complete(W: np.ndarray, D: np.ndarray, event: PendingAverage, config: AveragingConfig,
             lam: float) -> bool:
    """Dispatch a due event to the completion rule of ``config.strategy``."""
    s = config.strategy
    if s == "async_sparta":
        complete_async_sparta(W, event)
        return True
    if s == "ema_corrected":
        scale = 1.0 / W.shape[0] if config.ema_diff_scale == "inv_m" else 1.0
        return complete_ema_corrected(W, D, event, lam, scale)
    if s == "ablation_raw_diff":
        return complete_ablation_raw_diff(W, event)
    if s == "eager_diloco":
        return complete_eager_diloco(W, event)
    raise ConfigError(f"strategy {s!r} has no asynchronous completion")
