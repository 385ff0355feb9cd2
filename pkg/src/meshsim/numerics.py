"""Flat-vector arithmetic, counter-based random streams and payload quantization."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid user-facing configuration."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def stream_id(purpose: str, *ids: int) -> int:
    """Stable 64-bit id for a named stream, e.g. ``stream_id("mask", stage, step)``."""
    key = "|".join([purpose, *(str(int(i)) for i in ids)]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Rng:
    """A (seed, stream) pair. Every call to :meth:`generator` restarts the stream."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id])
        return np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def for_stream(cls, seed: int, purpose: str, *ids: int) -> "Rng":
        return cls(int(seed), stream_id(purpose, *ids))


def derive_seed(master: int, *ids: int) -> int:
    return stream_id("seed", master, *ids) & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

@dataclass
class ParamVector:
    values: np.ndarray
    stage_offsets: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.stage_offsets is None:
            self.stage_offsets = np.array([0, self.values.size])
        self.stage_offsets = np.asarray(self.stage_offsets, dtype=np.int64)
        off = self.stage_offsets
        if off[0] != 0 or off[-1] != self.values.size or np.any(np.diff(off) <= 0):
            raise ConfigError(f"invalid stage offsets {off.tolist()} for length {self.values.size}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_offsets) - 1

    def __len__(self):
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.stage_offsets.copy())


def _check_same(x, y):
    if np.shape(x) != np.shape(y):
        raise ValueError(f"length mismatch: {np.shape(x)} vs {np.shape(y)}")


def _raw(v):
    return v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)


def vec_axpy(a: float, x, y) -> np.ndarray:
    """``a * x + y``."""
    x, y = _raw(x), _raw(y)
    _check_same(x, y)
    return a * x + y


def vec_sub(x, y) -> np.ndarray:
    x, y = _raw(x), _raw(y)
    _check_same(x, y)
    return x - y


def vec_mean(vectors) -> np.ndarray:
    """Elementwise mean, accumulated left to right and then divided by the count.

    The summation order is fixed so that any other code that sums the same rows
    in index order reproduces the result bit for bit.
    """
    rows = [_raw(v) for v in vectors]
    if not rows:
        raise ValueError("mean of zero vectors")
    acc = rows[0].copy()
    for r in rows[1:]:
        _check_same(acc, r)
        acc += r
    return acc / len(rows)


def slice_stage(v, stage_offsets, stage: int) -> np.ndarray:
    """View of the block for ``stage`` (0-based)."""
    off = stage_offsets.stage_offsets if isinstance(stage_offsets, ParamVector) else stage_offsets
    if not 0 <= stage < len(off) - 1:
        raise ConfigError(f"stage {stage} out of range for {len(off) - 1} stages")
    return _raw(v)[off[stage]:off[stage + 1]]


# ---------------------------------------------------------------------------
# Subset sampling
# ---------------------------------------------------------------------------

class SampleMode(str, enum.Enum):
    FIXED_COUNT = "fixed_count"
    BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class SubsetMask:
    indices: np.ndarray
    sampled_at_step: int
    stage: int = 0

    def __len__(self):
        return self.indices.size


def sample_subset(rng: Rng, block_len: int, fraction: float, mode="fixed_count",
                  step: int = 0, stage: int = 0) -> SubsetMask:
    """Sample the coordinates of one stage block that take part in an averaging event.

    ``fixed_count`` draws exactly ``round(fraction * block_len)`` distinct indices
    (at least one); ``bernoulli`` keeps each index independently with probability
    ``fraction``. Indices come back sorted.
    """
    mode = SampleMode(mode)
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"subset fraction must lie in (0, 1], got {fraction}")
    if block_len < 1:
        raise ConfigError(f"block_len must be >= 1, got {block_len}")
    if fraction == 1.0:
        idx = np.arange(block_len)
    elif mode is SampleMode.FIXED_COUNT:
        k = max(1, int(np.floor(fraction * block_len + 0.5)))
        idx = np.sort(rng.generator().choice(block_len, size=k, replace=False))
    else:
        idx = np.flatnonzero(rng.generator().random(block_len) < fraction)
    return SubsetMask(idx.astype(np.int64), step, stage)


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

class QuantScheme(str, enum.Enum):
    NONE = "none"
    BF16 = "bf16"
    FP8_E4M3 = "fp8_e4m3"


# (explicit mantissa bits, smallest normal exponent, largest finite value)
_FORMATS = {
    QuantScheme.BF16: (7, -126, (2.0 - 2.0 ** -7) * 2.0 ** 127),
    QuantScheme.FP8_E4M3: (3, -6, 448.0),
}


def max_finite(scheme) -> float:
    scheme = QuantScheme(scheme)
    return np.inf if scheme is QuantScheme.NONE else _FORMATS[scheme][2]


def quantize(x, scheme) -> np.ndarray:
    """Round every element to the nearest value of ``scheme`` (ties to even).

    Magnitudes beyond the format's largest finite value saturate to it.
    """
    scheme = QuantScheme(scheme)
    x = np.asarray(x, dtype=np.float64)
    if scheme is QuantScheme.NONE:
        return x.copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    mbits, emin, vmax = _FORMATS[scheme]
    _, e = np.frexp(x)
    # frexp mantissa is in [0.5, 1): the leading bit sits at exponent e - 1
    e = np.maximum(e - 1, emin)
    quantum = np.ldexp(1.0, e - mbits)
    q = np.rint(x / quantum) * quantum
    return np.clip(q, -vmax, vmax)


def quantize_roundtrip(v: float, scheme) -> float:
    if not np.isfinite(v):
        raise ValueError(f"cannot quantize non-finite value {v}")
    return float(quantize(np.array([v]), scheme)[0])
