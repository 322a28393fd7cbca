"""Data-quantity-aware weighted averaging for federated learning.

Clients fit a small branch that predicts an adjustment factor alpha linking
one epoch's parameter change to the number of SGD steps taken; the server
uses alpha to re-estimate each client's training-data volume, checks it
against bands calibrated on shadow clients, and weights aggregation by the
verified volume.
"""

from .client import (
    ClientUpdate,
    EpochObservation,
    NotEstimable,
    QuantityBranch,
    alpha_direct,
    branch_loss,
    estimate_volume,
    local_round,
    predict_alpha,
)
from .datagen import Dataset, dirichlet_partition, load_csv, make_blobs
from .harness import ExperimentConfig, emit_outputs, load_config, run_experiment
from .numcore import ConfigError, ContractError, ModelSpec, make_rng
from .server import AlphaPrior, TrustLedger, Verdict, aggregate, calibrate_prior, verify

__version__ = "0.1.0"
