"""
Sampling camera noise from a fitted model
=========================================

Fit the two-layer signal/gain model to synthetic raw noise, then draw new
noise for one clean patch at every ISO level.
"""

import numpy as np

from noiseflow.config import RunConfig
from noiseflow.data import SyntheticSpec, generate_synthetic
from noiseflow.layers import ConditioningContext
from noiseflow.model import build
from noiseflow.numerics import RngStream
from noiseflow.training import train

# A small oracle dataset: one camera, four ISO levels.
spec = SyntheticSpec(psi=(1.0,), patches_per_cell=60, shape=(16, 16, 4), seed=0)
ds = generate_synthetic(spec)
print(len(ds), "patches, noise std", ds.noise.std())

model = build("S-G", iso_set=spec.iso_set, camera_count=1)
cfg = RunConfig(arch="S-G", iso_set=spec.iso_set, cameras=1, lr=5e-3, epochs=30, batch_size=8,
                lr_final_fraction=0.05, log_every=10**9)
train(model, ds, cfg)
print("fitted:", {k: round(v, 3) for k, v in model.named_scalars().items()})

# Same clean patch, increasing ISO: the sampled noise should grow with gain.
clean = np.repeat(ds.clean[:1].astype(np.float64), 50, axis=0)
for iso in spec.iso_set:
    ctx = ConditioningContext(clean, iso=iso, camera_id=0)
    sampled = model.sample(ctx, RngStream(1))
    print(f"ISO {iso:>4}: sampled std {sampled.std():.5f}   "
          f"true std {spec.gamma(iso, 0) * np.sqrt((spec.beta1 * clean + spec.beta2).mean()):.5f}")
