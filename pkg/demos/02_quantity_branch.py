"""
A tiny network that predicts alpha
==================================

Each client carries a small branch network next to its model. After every
epoch the branch is nudged so its alpha reproduces the client's true data
volume; the server later inverts the same formula to estimate the volume
from what the client uploads.
"""

import numpy as np

from feddua import strategies as st
from feddua.client import (
    ClientState,
    LocalConfig,
    QuantityBranch,
    client_embedding,
    estimate_volume,
    init_branch,
    local_round,
)
from feddua.datagen import make_blobs
from feddua.numcore import ModelSpec, init_params, make_rng

spec = ModelSpec("mlp1", input_dim=4, num_classes=3, hidden_dim=40)
cfg = LocalConfig(spec, epochs=2, batch_size=8, eta=0.2)

# the branch is a 12 -> H -> 1 network; it must stay under 10% of the model
print("model parameters :", spec.num_params)
print("branch parameters:", QuantityBranch.param_count(2))

rng = make_rng(1, "demo")
theta = init_params(spec, rng)
branch = init_branch(2, 0.01, rng, spec.num_params)
client = ClientState(7, make_blobs(3, 4, 30, 0.6, make_rng(1, "data")), client_embedding(1, 7))
ctx = st.make_ctx(st.FEDAVG, spec.num_params, num_clients=1)
print("true volume      :", client.volume)

# a lone client training for a few rounds; the branch travels with it
for t in range(8):
    up = local_round(client, theta, branch, ctx, cfg, make_rng(1, "round", t))
    est = [estimate_volume(o, a) for o, a in zip(up.observations, up.alphas)]
    print(f"round {t}: alphas {np.round(up.alphas, 3)} -> volume estimates {np.round(est, 1)}")
    theta = theta + up.model_delta
    branch = branch.with_phi(up.phi)
