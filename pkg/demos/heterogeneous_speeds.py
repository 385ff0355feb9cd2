"""
Replicas of different speeds
============================

Replicas run ``speeds[i]`` local steps per tick and all join the same averaging
events. A total step budget is split across ticks and the last tick hands out
the remainder in replica order.
"""

# %%
from meshsim.averaging import AveragingConfig
from meshsim.optim import LrSchedule
from meshsim.simulator import MeshConfig, heterogeneous_schedule, run

speeds = (10, 8, 1, 21)
print("(steps per tick, steps between averages):", heterogeneous_schedule(speeds))

cfg = MeshConfig(num_replicas=4, speeds=speeds, budget=4013, total_steps=0, eval_every=25,
                 model={"kind": "quadratic", "dim": 32, "noise_std": 0.1}, optimizer={"kind": "sgd"},
                 lr=LrSchedule(kind="constant", peak_lr=0.01),
                 averaging=AveragingConfig(strategy="ema_corrected", async_delay=5))
traj = run(cfg)
print("local steps", traj.local_steps.tolist(), "total", int(traj.local_steps.sum()))
print("ticks with an averaging start:", len(traj.initiations))
print(f"final consensus loss {traj.final.consensus_loss:.5f}")
