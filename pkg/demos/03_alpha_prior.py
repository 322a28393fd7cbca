"""
What honest alphas look like
============================

The server cannot check a client's alpha against its true volume; it only
sees the claim. Instead it trains shadow clients of known sizes on data it
holds itself and records which alphas honest clients of each size produce.
"""

import numpy as np

from feddua.harness import build_setup, calibrate, parse_config

# a small federation; calibration is the slow part
cfg = parse_config(
    """
    num_clients = 40
    clients_per_round = 8
    rounds = 12
    num_classes = 5
    input_dim = 8
    samples_per_class = 600
    branch_hidden = 4
    calib_volumes = 20, 40, 80, 160
    """
)
setup = build_setup(cfg)
prior = calibrate(setup)

# band per round and calibrated volume
print("volumes:", prior.volumes.astype(int))
for t in range(0, prior.horizon, 3):
    cells = "  ".join(f"[{lo:.3f}, {hi:.3f}]" for lo, hi in zip(prior.lo[t], prior.hi[t]))
    print(f"round {t:2d}: {cells}")

# bigger clients take more, less aligned steps: alpha falls with volume
print("median alpha, last round:", np.round(prior.medians[-1], 3))

# a client claiming 3x its size is compared against the band for the claim
lo, hi = prior.band(8, 40)
lo3, hi3 = prior.band(8, 120)
print(f"round 8, volume 40 : [{lo:.3f}, {hi:.3f}]")
print(f"round 8, volume 120: [{lo3:.3f}, {hi3:.3f}]")
print("disjoint:", hi3 < lo)

# Often they are not: label skew moves alpha about as much as tripling the
# volume does, so a band wide enough for every honest label mix at 40 tends
# to reach the band at 120. The band alone is then a weak test, and the
# check that carries detection is the comparison of the re-estimated volume
# with the claim (see 04_catching_a_misreport.py).
