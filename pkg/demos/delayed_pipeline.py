"""
Stale gradients in a pipeline
=============================

A single replica split into stages, where stage ``j`` of ``P`` computes its
gradient from weights that are ``P - 1 - j`` steps old. Compare it with the same
model trained without delays.
"""

# %%
from meshsim.model import QuadraticModel
from meshsim.optim import LrSchedule
from meshsim.pipeline import StageDelayConfig, delayed_step, make_replica

model = QuadraticModel.random(64, 1, seed=0, noise_std=0.05, num_stages=4)
lr = LrSchedule(kind="constant", peak_lr=0.01)


def train(delays, steps=500):
    rep = make_replica(0, model.init_params(0), 4, delays, {"kind": "nadamw"})
    for _ in range(steps):
        delayed_step(rep, model, delays, lr, clip_norm=1.0)
    return model.validation_loss(rep.params)


# %%
sync = StageDelayConfig(4)
stale = StageDelayConfig(4, "async_linear")
print("delays", stale.delays)
print(f"no delay   {train(sync):.5f}")
print(f"with delay {train(stale):.5f}")

# %%
# The first stage waits longest. Only the gradient is stale: each stage's
# optimizer still updates the current weights.
