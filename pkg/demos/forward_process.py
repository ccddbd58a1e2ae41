"""
Noising images with the closed-form forward process
===================================================

x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps. Sampling starts from pure
noise, so ideally abar_T is close to zero. The shipped config squeezes the
usual 1000-step betas (1e-4 to 0.02) into T = 200 and stops at abar_T of
about 0.13, which leaves a third of the image amplitude in x_T. Scaling
the betas by 1000 / T would bring abar_T down to about 3e-5.
"""

import sys
from pathlib import Path

import numpy as np

from semguide.corpus import Attributes, render
from semguide.io import write_ppm
from semguide.schedule import build_schedule, q_sample

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

for lo, hi in ((1e-4, 0.02), (5e-4, 0.1)):
    s = build_schedule("linear", 200, lo, hi)
    print(f"beta {lo:g}..{hi:g}: abar at t = 1, 50, 100, 200:",
          [float("%.3g" % s.alpha_bar[t]) for t in (1, 50, 100, 200)])

sched = build_schedule("linear", 200, 1e-4, 0.02)

x0 = render(Attributes("triangle", "green", "large", "light"), 16.0, 16.0, 0.4)
rng = np.random.default_rng(0)
eps = rng.standard_normal(x0.shape)

# Same noise at every t, so the strip shows the signal fading out.
strip = [q_sample(x0, t, eps, sched).data for t in (1, 25, 50, 100, 150, 200)]
write_ppm(out / "forward_strip.ppm", np.concatenate(strip, axis=2))

# Signal-to-noise ratio abar / (1 - abar) in decibels.
for t in (1, 50, 100, 200):
    ab = sched.alpha_bar[t]
    print("t=%3d  snr %6.1f dB" % (t, 10 * np.log10(ab / (1 - ab))))
