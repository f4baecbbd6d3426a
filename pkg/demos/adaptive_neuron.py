"""
One adaptive neuron
===================

A single neuron driven by a constant input. Each spike subtracts the base
threshold from the membrane and raises the threshold, so the firing rate
drops over time and recovers slowly.
"""
import numpy as np

from bayes_eprop import NetworkConfig, WeightSet, run_trial

cfg = NetworkConfig(n_in=1, n_rec=1)
w = WeightSet(w_in=np.array([[1.6]]), w_rec=np.zeros((1, 1)),
              w_out=np.array([[1.0]]), b_out=np.zeros(1))

# 40 steps of drive, then 40 steps of silence, then drive again
x = np.zeros((120, 1))
x[:40] = 1.0
x[80:] = 1.0
traj = run_trial(w, x, cfg)

for start in (0, 20, 80, 100):
    rate = traj.spikes[start:start + 20, 0].mean()
    print(f"steps {start:3d}-{start + 19:3d}: rate {rate:.2f}, "
          f"threshold at end {traj.thresholds[start + 19, 0]:.2f}")

# the threshold decays back towards 1 during the silent gap, but slowly
print("threshold after the gap:", round(float(traj.thresholds[79, 0]), 3))
