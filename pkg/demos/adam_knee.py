"""Steady-state Adam step versus gradient size: flat at the learning rate
for large gradients, linear in the gradient below epsilon."""

import numpy as np

from tdscale.oracle import adam_fixed_point

lr, eps = 2e-4, 1e-6
for g in np.logspace(-10, 2, 13):
    step = float(adam_fixed_point(g, lr, eps))
    print(f"|g|={g:8.1e}  step={step:.3e}  step/lr={step / lr:.3f}")
