"""Learned-perturbation explanation on a small HMM slice.

A mask and a recurrent perturbation generator are optimized jointly: the
mask pays for every cell it keeps, the generator pays for the magnitude of
its output, and the cross-entropy between original and perturbed
predictions pays for any information lost. What survives is the saliency.

Run: python3 demos/learned_explainer.py (about a minute)
"""

import numpy as np

from tempex import data, explainers as ex, metrics as mt, nets

ds = data.generate_hmm(data.HmmConfig(n_series=200, n_steps=100, seed=0))
model = nets.init_classifier(np.random.default_rng(0), 3, 32)
model, _ = nets.train_classifier(ds, model, nets.TrainConfig(epochs=20,
                                                             seed=0))
model.freeze()

sub = ds.subset(np.arange(20))
out = ex.explain_learned(
    sub.X, model, ex.ExplainerConfig(iterations=150, seed=0))
m = out.scores
print("ran", out.metadata["iterations_run"], "iterations")
print("mask mean", round(m.mean(), 3),
      "| on true cells", round(m[sub.true_saliency].mean(), 3),
      "| elsewhere", round(m[~sub.true_saliency].mean(), 3))
aup, aur = mt.aup_aur(m, sub.true_saliency)
print(f"aup {aup:.3f}  aur {aur:.3f}")

# deletion mode answers the complementary question: what is the least that
# must be removed to destroy the prediction? importance is then 1 - m
out_del = ex.explain_learned(
    sub.X, model,
    ex.ExplainerConfig(mode=ex.DELETION, iterations=150, seed=0))
aup_d, aur_d = mt.aup_aur(1.0 - out_del.scores, sub.true_saliency)
print(f"deletion: aup {aup_d:.3f}  aur {aur_d:.3f}")

# a crude ASCII look at one series: * marks the generating feature
sal = m[0]
print("\nfirst series, mask by timestep (feature with highest score):")
for t in range(0, 40, 4):
    best = int(np.argmax(sal[t]))
    true = int(np.argmax(sub.true_saliency[0, t]))
    bar = "#" * int(10 * sal[t, best])
    mark = "*" if best == true else " "
    print(f"  t={t:3d} feature {best} {mark} {bar}")
