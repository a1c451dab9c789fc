"""
Reading ISO and camera gains off a trained model
================================================

The gain layer learns one log-gain per ISO level and one per camera. Only
ratios are identifiable (an overall factor trades off against the NLF
coefficients), so we compare them as ratios.
"""

import numpy as np

from noiseflow.config import RunConfig
from noiseflow.data import SyntheticSpec, generate_synthetic
from noiseflow.model import build
from noiseflow.training import train

spec = SyntheticSpec(patches_per_cell=80, shape=(16, 16, 4), seed=2)
ds = generate_synthetic(spec)
model = build("S-G-CAM", iso_set=spec.iso_set, camera_count=len(spec.psi))
train(model, ds, RunConfig(arch="S-G-CAM", cameras=3, lr=2e-3, epochs=20,
                           lr_final_fraction=0.05, log_every=10**9))

s = model.named_scalars()
isos = np.array(spec.iso_set)
gain = np.exp([s[f"v_{i}"] for i in isos]) * isos
print("ISO gain ratios  fitted", np.round(gain / gain[0], 3), " expected", isos / isos[0])

w = np.array([s[f"w_{m}"] for m in range(len(spec.psi))])
print("camera ratios    fitted", np.round(np.exp(w - w[1]), 3), " expected", np.array(spec.psi))
