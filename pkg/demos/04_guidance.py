"""Classifier guidance and classifier-free guidance on labeled mixtures.

Run: python3 demos/04_guidance.py
"""

import numpy as np

from driftlab import fields, oracle, samplers, schedule, training
from driftlab.fields import GuidanceSpec
from driftlab.training import Denoiser, TrainConfig

sched = schedule.vp_constant(2.0)

# Overlapping classes: guidance strength moves mass toward class 1 gradually.
mix = oracle.GaussianMixture([0.5, 0.5], [[-0.3], [0.3]], [0.5, 0.5], labels=[0, 1])
model = fields.oracle_noise_model(mix, sched)
grad = fields.analytic_classifier_grad(mix, sched)
for gamma in (0.0, 1.0, 2.0, 4.0, 8.0):
    spec = GuidanceSpec("classifier", gamma=gamma, classifier_grad=grad)
    out = samplers.em_reverse_sde(model, sched, samplers.power_grid(50, sched), 4000, 1,
                                  guidance=spec, cond=1, record=False).terminal[:, 0]
    print(f"gamma={gamma:3.1f}  fraction nearer +0.3: {np.mean(out > 0):.3f}  mean {out.mean():+.3f}")

# One network trained with label dropout serves both roles.
bench = oracle.benchmark_mixture()
net = Denoiser.build(1, sched, n_classes=2, rng=1)
training.train(net, "cfg", TrainConfig(lr=3e-2, steps=3000), 0, mix=bench, sched=sched)
ds = schedule.discretize(sched, 50)
for s in (0.0, 1.0, 3.0):
    spec = GuidanceSpec("cfg", s=s)
    out = samplers.ddim(net.field_model(), ds, 2000, 0.0, 2, guidance=spec, cond=0).terminal[:, 0]
    print(f"cfg s={s:.0f}: fraction in the class-0 mode {np.mean(out < 0):.3f}")
