"""
Four ways to shrink a masked weight
===================================

One scalar weight sits outside the 2:4 mask, its loss gradient is zero, and
each update rule tries to pull it to zero.  AdamS blends momentum toward the
decay direction on a t/T schedule, Adam-L1 folds the decay into the
normalized gradient, AdamW-L1 subtracts it after the step, and SR-STE applies
plain L2 shrinkage.
"""
import numpy as np

from castlab.optim import (AdamSConfig, MomentState, adam_l1_step, adams_step, adamw_l1_step,
                           srste_step)

T, lr, lam = 2000, 1e-3, 0.01
cfg = AdamSConfig(lam=lam, total_steps=T)

paths = {name: [0.5] for name in ("AdamS", "Adam-L1", "AdamW-L1", "SR-STE")}
states = {name: MomentState.zeros_like(0.5) for name in paths}
for t in range(T):
    x = paths["AdamS"][-1]
    new, states["AdamS"] = adams_step(x, 0.0, 0, states["AdamS"], cfg, lr)
    paths["AdamS"].append(float(new))
    x = paths["Adam-L1"][-1]
    new, states["Adam-L1"] = adam_l1_step(x, 0.0, 0, states["Adam-L1"], lam, lr)
    paths["Adam-L1"].append(float(new))
    x = paths["AdamW-L1"][-1]
    new, states["AdamW-L1"] = adamw_l1_step(x, 0.0, 0, states["AdamW-L1"], lam, lr)
    paths["AdamW-L1"].append(float(new))
    paths["SR-STE"].append(float(srste_step(paths["SR-STE"][-1], 0.0, 0, lam, 0.1)))

# AdamS and Adam-L1 move about lr per step regardless of lam; AdamW-L1 moves lr*lam;
# SR-STE shrinks geometrically by (1 - 0.1*lam)
for name, p in paths.items():
    p = np.abs(p)
    print(f"{name:9s} |w| at t=0,500,1000,2000: " + "  ".join(f"{p[i]:.4f}" for i in (0, 500, 1000, T)))
