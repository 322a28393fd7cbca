"""
Catching a client that claims three times its data
==================================================

Client 0 trains honestly but reports three times its true volume, which
would triple its say in the weighted average. With verification on, the
server re-estimates the volume from the upload and weights the client by
that estimate instead.
"""

from dataclasses import replace

import numpy as np

from feddua.harness import final_accuracy, parse_config, run_experiment

cfg = parse_config(
    """
    num_clients = 40
    clients_per_round = 8
    rounds = 15
    num_classes = 5
    input_dim = 8
    samples_per_class = 600
    branch_hidden = 4
    calib_volumes = 20, 40, 80, 160
    attackers = 0
    w_exclude = 0
    """
)
on = run_experiment(cfg)

# what the server saw about client 0 in the last few rounds
for r in on.records[-4:]:
    i = r.clients.index(0)
    print(
        f"round {r.round}: claimed {r.claimed[i]}, true {r.true[i]}, estimated {r.estimated[i]}, "
        f"{r.verdicts[i]} ({r.reasons[i]}), weight {r.weights[i]:.3f}, unverified shift {r.delta_w[i]:+.3f}"
    )

# honest clients, for comparison
honest = [(r.verdicts[i], r.estimated[i] / r.true[i]) for r in on.records[5:] for i, c in enumerate(r.clients) if c != 0]
print("honest flag rate:", np.mean([v == "FLAG" for v, _ in honest]))
print("honest median |estimate/true - 1|:", np.median([abs(q - 1) for _, q in honest]))

# the same run with verification off and with no attacker at all
off = run_experiment(replace(cfg, feddua=False), prior=on.prior)
clean = run_experiment(replace(cfg, feddua=False, misreport_factor=1.0))
for name, res in (("verified", on), ("unverified", off), ("honest", clean)):
    print(f"{name:10s} final accuracy {final_accuracy(res.records):.4f}")
