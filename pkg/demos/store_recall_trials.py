"""
Store-recall trials
===================

Prints a few trials as text rasters and writes one to disk in the exchange
format (``step,channel`` CSV plus a JSON descriptor).
"""
import tempfile
from pathlib import Path

import numpy as np

from bayes_eprop import TaskConfig, generate_novel_both, generate_trial
from bayes_eprop.task import read_raster, write_raster

task = TaskConfig()
rng = np.random.default_rng(3)


def show(raster, title):
    print(title)
    groups = {"down": slice(0, 10), "up": slice(10, 20), "cue": slice(20, 30)}
    for name, cols in groups.items():
        row = "".join("|" if s else "." for s in raster.spikes[:, cols].any(axis=1))
        print(f"  {name:>4} {row}")
    print("  loss " + "".join("^" if m else " " for m in raster.loss_mask))


for _ in range(2):
    spec, raster = generate_trial(task, rng)
    show(raster, f"{spec.direction} trial, delay {spec.delay_steps} steps, target {spec.target}")

spec, raster = generate_novel_both(task, rng)
show(raster, "both directions at once (probe only, no target)")

# round trip through the file format
with tempfile.TemporaryDirectory() as tmp:
    spec, raster = generate_trial(task, rng)
    csv_path, _ = write_raster(raster, spec, Path(tmp) / "trial")
    desc, back = read_raster(Path(tmp) / "trial")
    print(csv_path.read_text().splitlines()[:4], desc)
    assert np.array_equal(back.spikes, raster.spikes)
