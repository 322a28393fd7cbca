"""
How many steps did this epoch take?
===================================

One epoch of plain SGD moves the model by ``-eta`` times the sum of the
step gradients. Comparing the length of that move with the average step
length tells us roughly how many steps were taken, up to a factor alpha
that measures how well the steps lined up.
"""

import numpy as np

from feddua.client import EpochObservation, alpha_direct, estimate_volume
from feddua.datagen import make_blobs
from feddua.numcore import ModelSpec, init_params, make_batches, make_rng, sgd_epoch

# a small 3-class problem and a one-hidden-layer network
rng = make_rng(0, "demo")
data = make_blobs(num_classes=3, input_dim=4, samples_per_class=40, spread=0.6, rng=rng)
spec = ModelSpec("mlp1", input_dim=4, num_classes=3, hidden_dim=16)
theta = init_params(spec, rng)

# one epoch, batch size 8: 120 samples -> 15 steps
eta, batch = 0.2, 8
batches = make_batches(data.features, data.labels, batch, rng)
theta_new, step_norms, delta = sgd_epoch(spec, theta, eta, batches)
print("steps taken:", len(batches))
print("||delta||   :", np.linalg.norm(delta))
print("mean ||g||  :", np.mean(step_norms))

# with perfectly aligned steps, ||delta|| = eta * R * gbar, so alpha = 1
obs = EpochObservation(float(np.linalg.norm(delta)), float(np.mean(step_norms)), eta, batch_size=batch)
print("volume if alpha were 1:", estimate_volume(obs, 1.0))

# the alpha that recovers the true volume exactly
a = alpha_direct(obs, len(data))
print("alpha_direct:", a, "-> volume", estimate_volume(obs, a))

# alpha shrinks as training goes on and steps start to cancel each other
for epoch in range(1, 6):
    batches = make_batches(data.features, data.labels, batch, rng)
    theta_new, step_norms, delta = sgd_epoch(spec, theta_new, eta, batches)
    obs = EpochObservation(float(np.linalg.norm(delta)), float(np.mean(step_norms)), eta, batch_size=batch)
    print(f"epoch {epoch}: alpha_direct = {alpha_direct(obs, len(data)):.3f}")
