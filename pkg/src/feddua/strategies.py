"""FedAvg, FedProx, Scaffold and Ditto local update rules.

Every strategy only changes the per-batch direction a client steps along;
server-side aggregation is shared (see :func:`feddua.server.aggregate`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import ConfigError, ContractError

__all__ = [
    "FEDAVG",
    "FEDPROX",
    "SCAFFOLD",
    "DITTO",
    "STRATEGIES",
    "StrategyCtx",
    "make_ctx",
    "local_direction",
    "local_rule",
    "personal_rule",
    "scaffold_control_update",
    "post_round",
]

FEDAVG = "fedavg"
FEDPROX = "fedprox"
SCAFFOLD = "scaffold"
DITTO = "ditto"
STRATEGIES = (FEDAVG, FEDPROX, SCAFFOLD, DITTO)


@dataclass
class StrategyCtx:
    kind: str
    dim: int
    mu: float = 0.01
    lambda_d: float = 0.1
    num_clients: int = 1
    c_global: np.ndarray | None = None
    c_local: dict[int, np.ndarray] = field(default_factory=dict)
    personal: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; pick one of {STRATEGIES}")
        if self.mu < 0 or self.lambda_d < 0:
            raise ConfigError("mu and lambda_d must be non-negative")
        if self.kind == SCAFFOLD and self.c_global is None:
            self.c_global = np.zeros(self.dim)

    def control(self, client_id: int) -> np.ndarray:
        c = self.c_local.get(client_id)
        return np.zeros(self.dim) if c is None else c


def make_ctx(kind: str, dim: int, num_clients: int, mu: float = 0.01, lambda_d: float = 0.1) -> StrategyCtx:
    return StrategyCtx(kind, dim, mu=mu, lambda_d=lambda_d, num_clients=num_clients)


def local_direction(ctx: StrategyCtx, client_id: int, theta_global: np.ndarray):
    """Return ``f(theta, grad) -> d`` for the SGD step ``theta -= eta * d``."""
    kind = ctx.kind
    if kind in (FEDAVG, DITTO):
        return None
    if kind == FEDPROX:
        mu = ctx.mu
        if mu == 0.0:
            return None
        return lambda theta, g: g + mu * (theta - theta_global)
    if ctx.c_global is None:
        raise ConfigError("scaffold context has no server control variate")
    correction = ctx.c_global - ctx.control(client_id)
    if not correction.any():
        return None
    return lambda theta, g: g + correction


def local_rule(ctx: StrategyCtx, theta, grad, eta: float, client_id: int = 0, theta_global=None) -> np.ndarray:
    """The step a client applies for one batch under ``ctx.kind``.

    FedAvg and the global half of Ditto: ``-eta*g``. FedProx:
    ``-eta*(g + mu*(theta - theta_g))``. Scaffold: ``-eta*(g - c_i + c)``.
    """
    if theta.shape != grad.shape or theta.shape[0] != ctx.dim:
        raise ContractError("theta/grad dimension mismatch")
    if ctx.kind == FEDPROX and theta_global is None:
        raise ConfigError("fedprox needs the round's global model")
    f = local_direction(ctx, client_id, theta_global)
    return -eta * (grad if f is None else f(theta, grad))


def personal_rule(ctx: StrategyCtx, theta_global: np.ndarray):
    """Ditto's personal-model direction ``g + lambda_d*(v - theta_g)``."""
    lam = ctx.lambda_d
    if lam == 0.0:
        return None
    return lambda v, g: g + lam * (v - theta_global)


def scaffold_control_update(ctx: StrategyCtx, client_id: int, theta_global, theta_local, eta: float, steps: int) -> np.ndarray:
    """Client control delta under option II of Scaffold.

    ``c_i+ = c_i - c + (theta_g - theta_i) / (steps * eta)``; returns
    ``c_i+ - c_i``.
    """
    return (theta_global - theta_local) / (steps * eta) - ctx.c_global


def post_round(ctx: StrategyCtx, updates) -> StrategyCtx:
    """Fold this round's client-side strategy state into a new context.

    Scaffold: ``c_i += dc_i`` for participants and ``c += sum(dc_i) / N``.
    Ditto: store each participant's personal model. Others: unchanged.
    """
    if ctx.kind in (FEDAVG, FEDPROX):
        return ctx
    if ctx.kind == SCAFFOLD:
        c_local = dict(ctx.c_local)
        total = np.zeros(ctx.dim)
        for u in updates:
            dc = u.strategy_state["c_delta"]
            c_local[u.client_id] = ctx.control(u.client_id) + dc
            total += dc
        return replace(ctx, c_local=c_local, c_global=ctx.c_global + total / ctx.num_clients)
    personal = dict(ctx.personal)
    for u in updates:
        personal[u.client_id] = u.strategy_state["personal"]
    return replace(ctx, personal=personal)
