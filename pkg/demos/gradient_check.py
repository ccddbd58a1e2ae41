"""
Reverse-mode gradients of a guidance function
=============================================

Guided sampling needs dF/dx_t for every reverse step. The autodiff engine
returns it in one backward pass; here it is compared with central
differences on a small random input.
"""

import numpy as np

from semguide import tensor as T
from semguide.encoders import TimeConditionedEncoder
from semguide.guidance import RefNoise, Style, guidance_gradient, guidance_value
from semguide.schedule import build_schedule

sched = build_schedule()
enc = TimeConditionedEncoder(dim=16, seed=0)
rng = np.random.default_rng(0)
x = rng.standard_normal((3, 8, 8))
ref = rng.uniform(-1, 1, (3, 8, 8))
spec = Style(ref)

# "fixed" reference noise makes F a deterministic function of x.
noise = RefNoise(np.random.default_rng(1), "fixed")
value, g = guidance_gradient(spec, x, 60, enc, None, noise, sched)
print("F =", value)

h = 1e-5
fd = np.empty_like(x)
for i in np.ndindex(x.shape):
    xp, xm = x.copy(), x.copy()
    xp[i] += h
    xm[i] -= h
    with T.no_grad():
        fd[i] = (guidance_value(spec, xp, 60, enc, None, noise, sched).data
                 - guidance_value(spec, xm, 60, enc, None, noise, sched).data) / (2 * h)

# Plain float64 differences; the test suite repeats this in extended
# precision and compares coordinate by coordinate.
print("max |g - fd| / max|g| = %.1e" % (np.abs(g - fd).max() / np.abs(g).max()))
