"""Client side: local training, the quantity-aware branch and the upload.

Volumes are exchanged in samples. Internally the estimator works in
"batch units" R = samples / batch_size, because the epoch update
``delta = -eta * sum_r g_r`` counts optimizer steps, not samples.

Per epoch the client records ``||delta||`` and the mean of the per-step
direction norms ``gbar``. Since ``||delta|| <= eta * R * gbar``, the exact
adjustment factor ``alpha = ||delta|| / (eta * gbar * R)`` lies in (0, 1]
and measures how coherent the epoch's steps were.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import strategies as st
from .datagen import Dataset
from .numcore import (
    ConfigError,
    ContractError,
    ModelSpec,
    make_batches,
    make_rng,
    sgd_epoch,
)

log = logging.getLogger(__name__)

__all__ = [
    "EMBED_DIM",
    "STATS_DIM",
    "NotEstimable",
    "BranchInput",
    "QuantityBranch",
    "EpochObservation",
    "ClientState",
    "ClientUpdate",
    "LocalConfig",
    "client_embedding",
    "branch_input",
    "init_branch",
    "predict_alpha",
    "alpha_and_jacobian",
    "estimate_volume",
    "alpha_direct",
    "branch_loss",
    "branch_grad_alpha",
    "branch_grad_phi",
    "branch_step",
    "fit_branch",
    "local_round",
]

EMBED_DIM = 8
STATS_DIM = 4
LOG_FLOOR = 1e-12
MAX_BRANCH_FRACTION = 0.10
MAX_PHI_STEP = 0.1


class NotEstimable(ArithmeticError):
    """The epoch carries no gradient signal (``gbar == 0``)."""


def client_embedding(experiment_seed: int, client_id: int) -> np.ndarray:
    """Fixed unit-norm vector for ``client_id``; depends only on the seed and id."""
    v = make_rng(experiment_seed, "embedding", client_id).standard_normal(EMBED_DIM)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class EpochObservation:
    delta_norm: float
    mean_grad_norm: float
    eta: float
    epoch_index: int = 0
    batch_size: int = 1
    num_batches: int = 0
    max_grad_norm: float = 0.0


@dataclass(frozen=True)
class BranchInput:
    embedding: np.ndarray
    round_stats: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.embedding, self.round_stats])


def branch_input(embedding: np.ndarray, obs: EpochObservation, num_epochs: int) -> BranchInput:
    """``[log||delta||, log gbar, log eta, (epoch+1)/E]`` next to the embedding."""
    stats = np.array(
        [
            np.log(max(obs.delta_norm, LOG_FLOOR)),
            np.log(max(obs.mean_grad_norm, LOG_FLOOR)),
            np.log(max(obs.eta, LOG_FLOOR)),
            (obs.epoch_index + 1) / num_epochs,
        ]
    )
    return BranchInput(np.asarray(embedding, dtype=float), stats)


@dataclass(frozen=True)
class QuantityBranch:
    """``12 -> hidden (tanh) -> 1 (softplus)`` network predicting alpha."""

    phi: np.ndarray
    hidden: int
    lr: float = 0.01

    @property
    def input_dim(self) -> int:
        return EMBED_DIM + STATS_DIM

    @staticmethod
    def param_count(hidden: int) -> int:
        return hidden * (EMBED_DIM + STATS_DIM) + 2 * hidden + 1

    def unpack(self, phi: np.ndarray | None = None):
        phi = self.phi if phi is None else phi
        h, d = self.hidden, self.input_dim
        w1 = phi[: h * d].reshape(h, d)
        b1 = phi[h * d : h * d + h]
        w2 = phi[h * d + h : h * d + 2 * h]
        return w1, b1, w2, phi[-1]

    def with_phi(self, phi: np.ndarray) -> "QuantityBranch":
        return replace(self, phi=phi)


def init_branch(hidden: int, lr: float, rng: np.random.Generator, main_params: int | None = None) -> QuantityBranch:
    """Fresh branch; refuses to exceed 10% of the main model's size."""
    if hidden < 1 or not lr > 0:
        raise ConfigError("branch needs hidden >= 1 and lr > 0")
    n = QuantityBranch.param_count(hidden)
    if main_params is not None and n > MAX_BRANCH_FRACTION * main_params:
        raise ConfigError(
            f"branch has {n} parameters, more than 10% of the {main_params}-parameter model"
        )
    d = EMBED_DIM + STATS_DIM
    phi = np.zeros(n)
    phi[: hidden * d] = rng.uniform(-1.0, 1.0, hidden * d) / np.sqrt(d)
    phi[hidden * d + hidden : hidden * d + 2 * hidden] = rng.uniform(-1.0, 1.0, hidden) / np.sqrt(hidden)
    return QuantityBranch(phi, hidden, lr)


def _softplus(z: float) -> float:
    return float(np.logaddexp(0.0, z))


def _sigmoid(z: float) -> float:
    return float(0.5 * (1.0 + np.tanh(0.5 * z)))


def _check_input(branch: QuantityBranch, inp: BranchInput) -> np.ndarray:
    x = inp.vector()
    if x.shape != (branch.input_dim,):
        raise ContractError(f"branch input has {x.shape[0]} features, expected {branch.input_dim}")
    if not np.isfinite(x).all():
        raise ContractError("non-finite branch input")
    return x


def predict_alpha(branch: QuantityBranch, inp: BranchInput) -> float:
    """alpha = softplus(w2 . tanh(W1 x + b1) + b2), always > 0."""
    x = _check_input(branch, inp)
    w1, b1, w2, b2 = branch.unpack()
    a = _softplus(float(w2 @ np.tanh(w1 @ x + b1) + b2))
    # softplus underflows to 0 below z ~ -745
    return max(a, np.finfo(float).tiny)


def alpha_and_jacobian(branch: QuantityBranch, inp: BranchInput):
    """``(alpha, d alpha / d phi)`` by backpropagation."""
    x = _check_input(branch, inp)
    w1, b1, w2, b2 = branch.unpack()
    h = np.tanh(w1 @ x + b1)
    z = float(w2 @ h + b2)
    s = _sigmoid(z)
    jac = np.empty_like(branch.phi)
    gw1, gb1, gw2, _ = branch.unpack(jac)
    da = s * w2 * (1.0 - h * h)
    gw1[...] = np.outer(da, x)
    gb1[...] = da
    gw2[...] = s * h
    jac[-1] = s
    return max(_softplus(z), np.finfo(float).tiny), jac


def _batches_estimate(obs: EpochObservation, alpha: float) -> float:
    if not obs.eta > 0:
        raise ContractError("eta must be positive")
    if not alpha > 0:
        raise ContractError("alpha must be positive")
    if not obs.mean_grad_norm > 0:
        raise NotEstimable("mean gradient norm is zero")
    return obs.delta_norm / (obs.eta * obs.mean_grad_norm * alpha)


def estimate_volume(obs: EpochObservation, alpha: float) -> float:
    """Samples implied by one epoch: ``||delta|| / (eta * gbar * alpha) * batch_size``."""
    return _batches_estimate(obs, alpha) * obs.batch_size


def alpha_direct(obs: EpochObservation, true_volume: float) -> float:
    """The alpha for which :func:`estimate_volume` returns ``true_volume``."""
    if not true_volume > 0:
        raise ContractError("true_volume must be positive")
    if not obs.eta > 0:
        raise ContractError("eta must be positive")
    if not obs.mean_grad_norm > 0:
        raise NotEstimable("mean gradient norm is zero")
    return obs.delta_norm / (obs.eta * obs.mean_grad_norm * (true_volume / obs.batch_size))


def _residual(obs: EpochObservation, alpha: float, true_volume: float) -> tuple[float, float]:
    """``(R_hat - R, R_hat)`` in batch units.

    Written as ``R * (alpha_direct / alpha - 1)`` so the residual is exactly
    zero at ``alpha = alpha_direct`` instead of off by a rounding error.
    """
    if not alpha > 0:
        raise ContractError("alpha must be positive")
    r = true_volume / obs.batch_size
    ratio = alpha_direct(obs, true_volume) / alpha
    return r * (ratio - 1.0), r * ratio


def branch_loss(obs: EpochObservation, alpha: float, true_volume: float) -> float:
    """Half squared error between estimated and true volume, in batch units."""
    d, _ = _residual(obs, alpha, true_volume)
    return 0.5 * d * d


def branch_grad_alpha(obs: EpochObservation, alpha: float, true_volume: float) -> float:
    d, r_hat = _residual(obs, alpha, true_volume)
    return d * (-r_hat / alpha)


def branch_grad_phi(branch: QuantityBranch, inp: BranchInput, obs: EpochObservation, true_volume: float):
    """``(loss, d loss / d phi)`` via the chain rule through alpha."""
    alpha, jac = alpha_and_jacobian(branch, inp)
    return branch_loss(obs, alpha, true_volume), branch_grad_alpha(obs, alpha, true_volume) * jac


def branch_step(
    branch: QuantityBranch,
    inp: BranchInput,
    obs: EpochObservation,
    true_volume: float,
    lr: float | None = None,
    events: list | None = None,
) -> QuantityBranch:
    """One gradient step ``phi <- phi - lr * dLoss/dphi`` (lr defaults to ``branch.lr``).

    A non-finite gradient leaves the branch unchanged and appends a note to
    ``events`` when given.
    """
    lr = branch.lr if lr is None else lr
    if not lr > 0:
        raise ConfigError("branch learning rate must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        _, grad = branch_grad_phi(branch, inp, obs, true_volume)
    if not np.isfinite(grad).all():
        msg = f"non-finite branch gradient at epoch {obs.epoch_index}; step skipped"
        log.warning(msg)
        if events is not None:
            events.append(msg)
        return branch
    return branch.with_phi(branch.phi - lr * grad)


def fit_branch(
    branch: QuantityBranch,
    inp: BranchInput,
    obs: EpochObservation,
    true_volume: float,
    steps: int,
    events: list | None = None,
    max_halvings: int = 30,
    max_step: float = MAX_PHI_STEP,
) -> QuantityBranch:
    """``steps`` branch updates with step halving.

    Each step starts at ``branch.lr`` (shortened so ``||d phi|| <= max_step``)
    and halves the rate until the loss does not increase and alpha moves by
    at most a factor of two. The loss is steep in alpha for large volumes,
    and for alpha far below its target a long step can also "improve" the
    loss by jumping onto the flat region at huge alpha, where the gradient
    vanishes. The norm cap matters after aggregation: a long step that
    barely moves this client's alpha can still wreck everyone else's.
    """
    for _ in range(steps):
        alpha = predict_alpha(branch, inp)
        loss = branch_loss(obs, alpha, true_volume)
        if loss == 0.0:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            gnorm = float(np.linalg.norm(branch_grad_phi(branch, inp, obs, true_volume)[1]))
        lr = branch.lr
        if np.isfinite(gnorm) and lr * gnorm > max_step:
            lr = max_step / gnorm
        for _ in range(max_halvings):
            cand = branch_step(branch, inp, obs, true_volume, lr=lr, events=events)
            if cand is branch:
                return branch
            new_alpha = predict_alpha(cand, inp)
            if (
                0.5 * alpha <= new_alpha <= 2.0 * alpha
                and branch_loss(obs, new_alpha, true_volume) <= loss
            ):
                branch = cand
                break
            lr *= 0.5
        else:
            break
    return branch


@dataclass
class ClientState:
    client_id: int
    data: Dataset
    embedding: np.ndarray
    misreport_factor: float = 1.0

    @property
    def volume(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class LocalConfig:
    spec: ModelSpec
    epochs: int = 2
    batch_size: int = 16
    eta: float = 0.05
    branch_steps: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.branch_steps < 0:
            raise ConfigError("epochs and batch_size must be >= 1, branch_steps >= 0")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")


@dataclass
class ClientUpdate:
    client_id: int
    model_delta: np.ndarray
    alphas: list[float]
    phi: np.ndarray
    observations: list[EpochObservation]
    claimed_volume: int
    true_volume: int = 0
    strategy_state: dict = field(default_factory=dict)
    events: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.alphas) != len(self.observations):
            raise ContractError("one alpha per epoch observation")
        if self.claimed_volume < 1:
            raise ContractError("claimed_volume must be >= 1")


def local_round(
    client: ClientState,
    theta_global: np.ndarray,
    branch: QuantityBranch,
    ctx: st.StrategyCtx,
    cfg: LocalConfig,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Train ``cfg.epochs`` epochs from the global model and build the upload.

    After every epoch the branch is fitted on that epoch's observation
    against the client's true volume, then predicts the epoch's alpha.
    """
    n = client.volume
    if n == 0:
        raise ContractError(f"client {client.client_id} has no data")
    x, y = client.data.features, client.data.labels
    cid = client.client_id
    theta = theta_global.copy()
    direction = st.local_direction(ctx, cid, theta_global)

    observations, alphas, events = [], [], []
    steps = 0
    for e in range(cfg.epochs):
        batches = make_batches(x, y, cfg.batch_size, rng)
        theta, norms, delta = sgd_epoch(cfg.spec, theta, cfg.eta, batches, direction)
        steps += len(batches)
        obs = EpochObservation(
            delta_norm=float(np.linalg.norm(delta)),
            mean_grad_norm=float(np.mean(norms)),
            eta=cfg.eta,
            epoch_index=e,
            batch_size=cfg.batch_size,
            num_batches=len(batches),
            max_grad_norm=float(max(norms)),
        )
        inp = branch_input(client.embedding, obs, cfg.epochs)
        if obs.mean_grad_norm > 0:
            branch = fit_branch(branch, inp, obs, n, cfg.branch_steps, events)
        else:
            events.append(f"epoch {e}: zero gradient, branch not trained")
        observations.append(obs)
        alphas.append(predict_alpha(branch, inp))

    state = {}
    if ctx.kind == st.SCAFFOLD:
        state["c_delta"] = st.scaffold_control_update(ctx, cid, theta_global, theta, cfg.eta, steps)
    elif ctx.kind == st.DITTO:
        state["personal"] = _train_personal(client, theta_global, ctx, cfg, rng)

    claimed = max(1, int(round(n * client.misreport_factor)))
    return ClientUpdate(
        client_id=cid,
        model_delta=theta - theta_global,
        alphas=alphas,
        phi=branch.phi,
        observations=observations,
        claimed_volume=claimed,
        true_volume=n,
        strategy_state=state,
        events=events,
    )


def _train_personal(client, theta_global, ctx, cfg, rng) -> np.ndarray:
    v = ctx.personal.get(client.client_id)
    v = theta_global.copy() if v is None else v.copy()
    direction = st.personal_rule(ctx, theta_global)
    for _ in range(cfg.epochs):
        batches = make_batches(client.data.features, client.data.labels, cfg.batch_size, rng)
        v, _, _ = sgd_epoch(cfg.spec, v, cfg.eta, batches, direction)
    return v
