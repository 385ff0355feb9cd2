"""Small differentiable objectives that split into contiguous pipeline-stage blocks.

Two models share one duck-typed surface:

* ``QuadraticModel`` -- ``f_i(w) = 0.5 (w - a_i)^T A (w - a_i)`` with optional
  Gaussian gradient noise. The smoothness constant is known exactly, which makes
  the consensus results checkable.
* ``MlpModel`` -- a fully connected tanh/relu network trained with squared error
  on synthetic regression data split i.i.d. into per-replica shards.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, Rng


@dataclass(frozen=True)
class Minibatch:
    """Identifies the data a replica consumes at a local step.

    Batches are pure functions of ``(seed, replica, step)`` so a delayed stage
    can regenerate the batch it saw ``delta`` steps ago.
    """

    replica: int
    step: int
    seed: int = 0
    x: np.ndarray | None = None
    y: np.ndarray | None = None


def even_offsets(sizes, num_stages: int) -> np.ndarray:
    """Group consecutive blocks of the given sizes into ``num_stages`` stages.

    Blocks are assigned as evenly as possible, earlier stages taking the extra
    block when the count does not divide.
    """
    sizes = list(sizes)
    if not 1 <= num_stages <= len(sizes):
        raise ConfigError(f"cannot split {len(sizes)} blocks into {num_stages} stages")
    groups = np.array_split(np.arange(len(sizes)), num_stages)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return np.array([0] + [bounds[g[-1] + 1] for g in groups], dtype=np.int64)


class _StageMixin:
    stage_offsets: np.ndarray

    @property
    def num_stages(self) -> int:
        return len(self.stage_offsets) - 1

    def stage_gradient(self, params, batch, stage: int, rng=None) -> np.ndarray:
        """Gradient block for ``stage`` (0-based); a slice of :meth:`gradient`."""
        if not 0 <= stage < self.num_stages:
            raise ConfigError(f"stage {stage} out of range for {self.num_stages} stages")
        g = self.gradient(params, batch, rng)
        return g[self.stage_offsets[stage]:self.stage_offsets[stage + 1]]

    def _check(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.dim,):
            raise ConfigError(f"expected {self.dim} parameters, got shape {params.shape}")
        return params


class QuadraticModel(_StageMixin):
    def __init__(self, curvature, centers, noise_std=0.0, num_stages=1):
        curvature = np.asarray(curvature, dtype=np.float64)
        self.centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        self.dim = self.centers.shape[1]
        self.diagonal = curvature.ndim == 1
        if self.diagonal:
            if curvature.shape != (self.dim,):
                raise ConfigError("diagonal curvature must match the dimension")
            eig = curvature
        else:
            if curvature.shape != (self.dim, self.dim) or not np.allclose(curvature, curvature.T):
                raise ConfigError("curvature must be a symmetric d x d matrix")
            eig = np.linalg.eigvalsh(curvature)
        if np.any(eig <= 0):
            raise ConfigError("curvature must be positive definite")
        self.curvature = curvature
        self.lipschitz = float(np.max(eig))
        self.noise_std = float(noise_std)
        self.optimum = np.mean(self.centers, axis=0)
        self.stage_offsets = even_offsets([1] * self.dim, num_stages)

    @classmethod
    def random(cls, dim, num_replicas, seed=0, condition=10.0, center_spread=0.1,
               noise_std=0.0, num_stages=1, diagonal=True):
        """Eigenvalues log-spaced in ``[1, condition]``; centers scattered around a common point."""
        g = Rng.for_stream(seed, "quadratic").generator()
        eig = np.geomspace(1.0, condition, dim)
        g.shuffle(eig)
        if diagonal:
            curvature = eig
        else:
            q, _ = np.linalg.qr(g.normal(size=(dim, dim)))
            curvature = (q * eig) @ q.T
            curvature = 0.5 * (curvature + curvature.T)
        base = g.normal(size=dim)
        centers = base + center_spread * g.normal(size=(num_replicas, dim))
        return cls(curvature, centers, noise_std, num_stages)

    def _matvec(self, v):
        return self.curvature * v if self.diagonal else self.curvature @ v

    def _center(self, replica):
        return self.centers[replica % len(self.centers)]

    def batch(self, replica, step, seed=0) -> Minibatch:
        return Minibatch(replica, step, seed)

    def loss(self, params, batch) -> float:
        r = self._check(params) - self._center(batch.replica)
        return 0.5 * float(r @ self._matvec(r))

    def gradient(self, params, batch, rng=None) -> np.ndarray:
        g = self._matvec(self._check(params) - self._center(batch.replica))
        if self.noise_std > 0:
            if rng is None:
                rng = Rng.for_stream(batch.seed, "noise", batch.replica, batch.step)
            gen = rng.generator() if isinstance(rng, Rng) else rng
            g = g + self.noise_std * gen.normal(size=self.dim)
        return g

    def train_loss(self, params, replica) -> float:
        return self.loss(params, Minibatch(replica, 0))

    def validation_loss(self, params) -> float:
        """Loss against the minimiser of the summed replica objectives."""
        r = self._check(params) - self.optimum
        return 0.5 * float(r @ self._matvec(r))

    def init_params(self, seed) -> np.ndarray:
        return np.zeros(self.dim)


_ACT = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
}


class MlpModel(_StageMixin):
    """Squared-error regression MLP on a synthetic teacher dataset.

    Parameters are flattened layer by layer, each layer as its weight matrix
    (``fan_out x fan_in``, row-major) followed by its bias.
    """

    def __init__(self, layer_dims=(8, 32, 32, 1), activation="tanh", num_replicas=1,
                 num_stages=1, samples_per_replica=512, val_samples=1024, batch_size=16,
                 label_noise=0.05, seed=0):
        if activation not in _ACT:
            raise ConfigError(f"unknown activation {activation!r}")
        if len(layer_dims) < 2:
            raise ConfigError("need at least an input and an output width")
        self.layer_dims = tuple(int(n) for n in layer_dims)
        self.activation = activation
        self.batch_size = int(batch_size)
        self.shapes = list(zip(self.layer_dims[1:], self.layer_dims[:-1]))
        sizes = [o * i + o for o, i in self.shapes]
        self.dim = int(sum(sizes))
        self.layer_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.stage_offsets = even_offsets(sizes, num_stages)
        self._make_data(num_replicas, samples_per_replica, val_samples, label_noise, seed)
        # delayed stages re-read recent batches; keep them instead of resampling
        self.batch = functools.lru_cache(maxsize=256)(self._batch)

    def _make_data(self, m, per_replica, n_val, label_noise, seed):
        g = Rng.for_stream(seed, "dataset").generator()
        n_in, n_out = self.layer_dims[0], self.layer_dims[-1]
        hidden = 16
        t1 = g.normal(size=(hidden, n_in)) / np.sqrt(n_in)
        t2 = g.normal(size=(n_out, hidden)) / np.sqrt(hidden)
        n = m * per_replica + n_val
        x = g.normal(size=(n, n_in))
        y = np.tanh(x @ t1.T) @ t2.T + label_noise * g.normal(size=(n, n_out))
        perm = g.permutation(n)
        self.val_x, self.val_y = x[perm[:n_val]], y[perm[:n_val]]
        self.shard_index = [perm[n_val + i * per_replica:n_val + (i + 1) * per_replica]
                            for i in range(m)]
        self.data_x, self.data_y = x, y

    def unflatten(self, params):
        layers = []
        for (o, i), start in zip(self.shapes, self.layer_offsets[:-1]):
            w = params[start:start + o * i].reshape(o, i)
            b = params[start + o * i:start + o * i + o]
            layers.append((w, b))
        return layers

    def init_params(self, seed) -> np.ndarray:
        g = Rng.for_stream(seed, "init").generator()
        out = np.zeros(self.dim)
        for (o, i), start in zip(self.shapes, self.layer_offsets[:-1]):
            out[start:start + o * i] = g.normal(size=o * i) / np.sqrt(i)
        return out

    def _batch(self, replica, step, seed=0) -> Minibatch:
        shard = self.shard_index[replica]
        pick = Rng.for_stream(seed, "batch", replica, step).generator().choice(
            shard.size, size=self.batch_size, replace=False)
        rows = shard[pick]
        return Minibatch(replica, step, seed, self.data_x[rows], self.data_y[rows])

    def _forward(self, params, x):
        act, _ = _ACT[self.activation]
        acts, pre = [x], []
        layers = self.unflatten(params)
        for k, (w, b) in enumerate(layers):
            z = acts[-1] @ w.T + b
            pre.append(z)
            acts.append(z if k == len(layers) - 1 else act(z))
        return layers, pre, acts

    def _loss_xy(self, params, x, y):
        _, _, acts = self._forward(self._check(params), x)
        r = acts[-1] - y
        return 0.5 * float(np.sum(r * r)) / x.shape[0]

    def loss(self, params, batch) -> float:
        return self._loss_xy(params, batch.x, batch.y)

    def gradient(self, params, batch, rng=None) -> np.ndarray:
        _, dact = _ACT[self.activation]
        layers, pre, acts = self._forward(self._check(params), batch.x)
        grad = np.empty(self.dim)
        dz = (acts[-1] - batch.y) / batch.x.shape[0]
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            o, i = self.shapes[k]
            start = self.layer_offsets[k]
            grad[start:start + o * i] = (dz.T @ acts[k]).ravel()
            grad[start + o * i:start + o * i + o] = dz.sum(axis=0)
            if k:
                dz = (dz @ w) * dact(pre[k - 1], acts[k])
        return grad

    def train_loss(self, params, replica) -> float:
        rows = self.shard_index[replica]
        return self._loss_xy(params, self.data_x[rows], self.data_y[rows])

    def validation_loss(self, params) -> float:
        return self._loss_xy(params, self.val_x, self.val_y)


def build_model(spec: dict, num_replicas: int, num_stages: int, seed: int):
    """Construct a model from a plain dict such as ``{"kind": "mlp", "layer_dims": [...]}``."""
    spec = dict(spec)
    kind = spec.pop("kind", "quadratic")
    if kind == "quadratic":
        spec.setdefault("seed", seed)
        return QuadraticModel.random(num_replicas=num_replicas, num_stages=num_stages, **spec)
    if kind == "mlp":
        spec.setdefault("seed", seed)
        return MlpModel(num_replicas=num_replicas, num_stages=num_stages, **spec)
    raise ConfigError(f"model.kind: unknown model {kind!r}")
