"""
Training and probing a Bayesian network
=======================================

Trains with weight transport for a few hundred updates, evaluates on fresh
trials, then asks the posterior how sure it is on Up, Down and on the
unseen input where both directions fire together.

Usage: ``python demos/train_and_probe.py [epochs]`` (default 300, about
half a minute). The acceptance suite runs the same thing for 1500 epochs.
"""
import sys

import numpy as np

from bayes_eprop import RunConfig, evaluate, probe_uncertainty, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = RunConfig().with_train(feedback_mode="weight_transport", epochs=epochs)


def progress(rec):
    if rec.epoch % 50 == 0:
        print(f"epoch {rec.epoch:5d}  nll {rec.mean_nll:.3f}  "
              f"P(up|up) {rec.ema_p_up_given_up:.2f}  P(up|down) {rec.ema_p_up_given_down:.2f}  "
              f"KL {rec.kl_forward:.0f}")


ckpt = train(cfg, on_epoch=progress)

ev = evaluate(ckpt.params, cfg, 500, seed=99)
print(f"fresh trials: accuracy {ev.accuracy:.2f}, "
      f"P(correct|up) {ev.p_correct_up:.2f}, P(correct|down) {ev.p_correct_down:.2f}")

# posterior-predictive 10/50/90% quantiles of the readout during recall
res = probe_uncertainty(ckpt.params, cfg, 200)
scored = res.scored != 0
for kind, q in res.quantiles.items():
    lo, mid, hi = (np.round(r[scored], 2) for r in q)
    print(f"{kind:>4}: median {mid}  q10 {lo}  q90 {hi}")
print("spreads:", {k: round(v, 3) for k, v in res.report().items()})
