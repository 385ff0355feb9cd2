"""
Sweeps from a YAML spec
=======================

The same thing the ``meshsim run`` and ``meshsim compare`` commands do, called
from Python. The spec in ``specs/strategies.yaml`` sweeps the averaging
strategy on a small quadratic.
"""

# %%
import csv
import tempfile
from pathlib import Path

from meshsim.cli import compare_trajectories, load_spec, run_experiment

spec = load_spec(Path(__file__).parent / "specs" / "strategies.yaml", ["total_steps=200"])
print(spec.name, "grid size", spec.grid_size)

out = Path(tempfile.mkdtemp())
run_experiment(spec, out)
with open(out / "summary.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        print(row["overrides"], row["final_consensus_loss"], row["config_sha256"][:12])

# %%
files = sorted(out.glob("point_*.csv"))
gap = compare_trajectories(files[1], files[3])
for row in gap:
    print(row["step"], f"{row['loss_gap']:+.5f}")
