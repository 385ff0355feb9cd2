"""Brute-force reference mesh used by the tests.

Nothing here is optimised. Every replica keeps its whole weight history as a
Python list, exchanges are recomputed from those lists when they land, and
cross-replica means are summed element by element in replica order. The
building blocks that have their own independent checks (model gradients, the
optimizer step, quantization, mask sampling, schedules) are shared with the
main path; the orchestration around them is not.
"""
from __future__ import annotations

import math

import numpy as np

from .model import build_model
from .numerics import Rng, quantize, sample_subset
from .optim import apply_update, clip_by_norm, lambda_at, lr_at, make_state

ORACLE_LIMITS = {"dim": 64, "steps": 500, "replicas": 4}


def naive_mean(rows) -> list:
    """Mean of equal-length sequences, one Python float at a time."""
    rows = [list(map(float, r)) for r in rows]
    out = []
    for c in range(len(rows[0])):
        s = 0.0
        for r in rows:
            s += r[c]
        out.append(s / len(rows))
    return out


class NaiveMesh:
    """Full mesh state: weights, per-stage optimizer states, EMA rows and all history.

    ``history[i][k]`` is replica ``i``'s full parameter vector before its local
    step ``k``; ``tick_states[t]`` is the whole ``(m, d)`` weight array after the
    local steps of tick ``t`` and before any exchange on that tick.
    """

    def __init__(self, config, model=None):
        self.config = config
        m, P = config.num_replicas, config.num_stages
        self.model = model if model is not None else build_model(config.model, m, P, config.seed)
        if self.model.dim > ORACLE_LIMITS["dim"] or m > ORACLE_LIMITS["replicas"]:
            raise ValueError("the oracle only handles tiny instances")
        self.offsets = [int(o) for o in self.model.stage_offsets]
        base = self.model.init_params(config.seed)
        self.weights = [base.copy() for _ in range(m)]
        if config.init_spread:
            noise = Rng.for_stream(config.seed, "init_spread").generator().normal(size=(m, self.model.dim))
            self.weights = [w + config.init_spread * noise[i] for i, w in enumerate(self.weights)]
        self.ema = [np.zeros(self.model.dim) for _ in range(m)]
        self.opt = [[make_state(**config.optimizer) for _ in range(P)] for _ in range(m)]
        self.history = [[] for _ in range(m)]
        self.tick_states = {}
        self.events = []
        self.tick = 0

    # -- local steps -------------------------------------------------------
    def local_step(self, i):
        cfg, model = self.config, self.model
        k = len(self.history[i])
        self.history[i].append(self.weights[i].copy())
        delays = cfg.stage_delays.delays
        active = [j for j in range(cfg.num_stages) if k - delays[j] >= 0]
        if not active:
            return
        pieces = []
        for j in active:
            src = k - delays[j]
            g = model.gradient(self.history[i][src], model.batch(i, src, cfg.seed))
            pieces.append(g[self.offsets[j]:self.offsets[j + 1]])
        flat = clip_by_norm(np.concatenate(pieces), cfg.clip_norm)
        lr = lr_at(cfg.lr, k)
        new = self.weights[i].copy()
        pos = 0
        for j in active:
            lo, hi = self.offsets[j], self.offsets[j + 1]
            g = flat[pos:pos + hi - lo]
            pos += hi - lo
            new[lo:hi] = apply_update(self.opt[i][j], self.weights[i][lo:hi], g, lr, step=k)
        self.weights[i] = new

    # -- exchanges ---------------------------------------------------------
    def _mask(self, stage, t):
        a = self.config.averaging
        lo, hi = self.offsets[stage], self.offsets[stage + 1]
        mask = sample_subset(Rng.for_stream(self.config.seed, "mask", stage, t), hi - lo, a.fraction,
                             a.sample_mode, step=t, stage=stage)
        return [lo + int(c) for c in mask.indices]

    def _wire_mean(self, state, idx):
        q = quantize(np.array([[row[c] for c in idx] for row in state]), self.config.averaging.quant)
        return naive_mean(q)

    def _write(self, i, idx, values):
        for c, v in zip(idx, values):
            self.weights[i][c] = v

    def exchange(self, t):
        a = self.config.averaging
        m = self.config.num_replicas
        s = a.strategy
        state = self.tick_states[t]
        if s == "diloco":
            if t % a.period == 0:
                idx = list(range(self.model.dim))
                mean = self._wire_mean(state, idx)
                for i in range(m):
                    self._write(i, idx, mean)
            return
        if not a.is_async:
            if t % a.period == 0:
                for j in range(self.config.num_stages):
                    idx = self._mask(j, t)
                    mean = self._wire_mean(state, idx)
                    for i in range(m):
                        self._write(i, idx, mean)
            return
        if t % a.period == 0:
            for j in range(self.config.num_stages):
                self.events.append((t, j, self._mask(j, t)))
        lam = lambda_at(self.config.ema, t)
        due = [e for e in self.events if e[0] + a.delay <= t]
        self.events = [e for e in self.events if e[0] + a.delay > t]
        for t0, _, idx in due:
            old = self.tick_states[t0]
            mean = self._wire_mean(old, idx)
            for i in range(m):
                vals = []
                for n, c in enumerate(idx):
                    drift = self.weights[i][c] - old[i][c]
                    if s == "async_sparta":
                        v = mean[n]
                    elif s == "ablation_raw_diff":
                        v = mean[n] + drift
                    elif s == "eager_diloco":
                        v = mean[n] + (1.0 / m) * drift
                    else:
                        if a.ema_diff_scale == "inv_m":
                            drift = (1.0 / m) * drift
                        d = (1.0 - lam) * self.ema[i][c] + lam * drift
                        self.ema[i][c] = d
                        v = mean[n] + d
                    vals.append(v)
                self._write(i, idx, vals)

    def advance(self):
        """One global tick: every replica's local steps, then the exchange."""
        cfg = self.config
        self.tick += 1
        t = self.tick
        speeds = cfg.speeds or (1,) * cfg.num_replicas
        for i, n in enumerate(speeds):
            for _ in range(n):
                self.local_step(i)
        self.tick_states[t] = [w.copy() for w in self.weights]
        if cfg.num_replicas > 1:
            self.exchange(t)
        return self

    def stacked(self) -> np.ndarray:
        return np.array(self.weights)


def naive_mesh_step(mesh: NaiveMesh, config=None) -> NaiveMesh:
    """Advance a :class:`NaiveMesh` by one global tick (``config`` is the mesh's own if omitted)."""
    if config is not None and config is not mesh.config:
        mesh.config = config
    return mesh.advance()


def naive_run(config, model=None):
    """Run ``config.total_steps`` ticks; returns ``(weights, ema)`` after every tick (tick 0 first)."""
    if config.total_steps > ORACLE_LIMITS["steps"] or config.budget is not None:
        raise ValueError("the oracle only handles short, tick-counted runs")
    mesh = NaiveMesh(config, model)
    weights, emas = [mesh.stacked()], [np.array(mesh.ema)]
    for _ in range(config.total_steps):
        mesh.advance()
        weights.append(mesh.stacked())
        emas.append(np.array(mesh.ema))
    return weights, emas


def shrinkage_monte_carlo(state, p: float, trials: int = 2000, seed: int = 0):
    """Mean and standard error of post/pre consensus-error ratio under Bernoulli masks.

    Each trial keeps every coordinate with probability ``p`` and replaces the
    kept coordinates of all rows by their row mean; the state itself is frozen.
    """
    W = np.asarray(state, dtype=np.float64)
    dev = W - W.sum(axis=0) / W.shape[0]
    per_coord = (dev * dev).sum(axis=0)
    before = per_coord.sum()
    if before == 0:
        raise ValueError("consensus error of the frozen state is zero")
    g = np.random.Generator(np.random.PCG64(seed))
    ratios = np.empty(trials)
    for n in range(trials):
        keep = g.random(W.shape[1]) < p
        ratios[n] = per_coord[~keep].sum() / before
    mean = float(ratios.mean())
    stderr = float(ratios.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, stderr
