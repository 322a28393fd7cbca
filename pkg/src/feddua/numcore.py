"""Small deterministic numerical kernel.

Parameter vectors are flat float64 numpy arrays. Two classifiers are
supported (multinomial logistic regression and a one-hidden-layer tanh MLP),
both with hand-written gradients, plus a plain SGD stepper.

Random streams come from numpy's counter-based Philox bit generator keyed by
a tuple of non-negative integers, so ``make_rng(seed, 3, 7)`` always yields
the same stream on every platform regardless of how many other streams were
drawn before it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "ConfigError",
    "ModelSpec",
    "make_rng",
    "stream_key",
    "init_params",
    "forward_loss",
    "backward",
    "loss_and_grad",
    "predict",
    "accuracy",
    "make_batches",
    "sgd_epoch",
]

LOGREG = "logreg"
MLP1 = "mlp1"


class ContractError(ValueError):
    """An argument violated a documented precondition."""


class ConfigError(ValueError):
    """Invalid experiment or optimizer configuration."""


def stream_key(name: str) -> int:
    """Stable integer tag for a named random stream."""
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *keys)``.

    String keys are hashed with CRC32 so call sites can name their streams.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(stream_key(k) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in (LOGREG, MLP1):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigError("input_dim must be >= 1 and num_classes >= 2")
        if self.kind == MLP1 and self.hidden_dim < 1:
            raise ConfigError("mlp1 needs hidden_dim >= 1")

    @property
    def num_params(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == LOGREG:
            return c * d + c
        return h * d + h + c * h + c

    def unpack(self, theta: np.ndarray):
        """Views of the weight matrices inside ``theta`` (no copies)."""
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == LOGREG:
            return theta[: c * d].reshape(c, d), theta[c * d :]
        i = 0
        w1 = theta[i : i + h * d].reshape(h, d)
        i += h * d
        b1 = theta[i : i + h]
        i += h
        w2 = theta[i : i + c * h].reshape(c, h)
        i += c * h
        return w1, b1, w2, theta[i:]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    theta = np.zeros(spec.num_params)
    parts = spec.unpack(theta)
    if spec.kind == LOGREG:
        w, _ = parts
        w[...] = rng.uniform(-1.0, 1.0, w.shape) / np.sqrt(spec.input_dim)
    else:
        w1, _, w2, _ = parts
        w1[...] = rng.uniform(-1.0, 1.0, w1.shape) / np.sqrt(spec.input_dim)
        w2[...] = rng.uniform(-1.0, 1.0, w2.shape) / np.sqrt(spec.hidden_dim)
    return theta


def _check(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> None:
    if theta.ndim != 1 or theta.shape[0] != spec.num_params:
        raise ContractError(
            f"theta has shape {theta.shape}, expected ({spec.num_params},)"
        )
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != spec.input_dim:
        raise ContractError(
            f"batch features have shape {x.shape}, expected (n>=1, {spec.input_dim})"
        )
    if y.shape != (x.shape[0],):
        raise ContractError("labels must be a 1-d array matching the batch size")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ContractError("labels out of range")
    if not (np.isfinite(theta).all() and np.isfinite(x).all()):
        raise ContractError("non-finite parameters or features")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _logits(spec: ModelSpec, theta: np.ndarray, x: np.ndarray):
    if spec.kind == LOGREG:
        w, b = spec.unpack(theta)
        return x @ w.T + b, None
    w1, b1, w2, b2 = spec.unpack(theta)
    h = np.tanh(x @ w1.T + b1)
    return h @ w2.T + b2, h


def _loss_grad(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    n = x.shape[0]
    z, h = _logits(spec, theta, x)
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n
    grad = np.empty_like(theta)
    if spec.kind == LOGREG:
        gw, gb = spec.unpack(grad)
        gw[...] = dz.T @ x
        gb[...] = dz.sum(axis=0)
    else:
        _, _, w2, _ = spec.unpack(theta)
        gw1, gb1, gw2, gb2 = spec.unpack(grad)
        gw2[...] = dz.T @ h
        gb2[...] = dz.sum(axis=0)
        da = (dz @ w2) * (1.0 - h * h)
        gw1[...] = da.T @ x
        gb1[...] = da.sum(axis=0)
    return loss, grad


def forward_loss(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of the batch ``(x, y)`` under ``theta``."""
    _check(spec, theta, x, y)
    z, _ = _logits(spec, theta, x)
    logp = _log_softmax(z)
    return float(-logp[np.arange(x.shape[0]), y].mean())


def backward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean batch cross-entropy with respect to ``theta``."""
    _check(spec, theta, x, y)
    return _loss_grad(spec, theta, x, y)[1]


def loss_and_grad(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    _check(spec, theta, x, y)
    loss, grad = _loss_grad(spec, theta, x, y)
    return float(loss), grad


def predict(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _logits(spec, theta, x)[0].argmax(axis=1)


def accuracy(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(spec, theta, x) == y).mean())


def make_batches(
    x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle once and cut into consecutive batches; the last may be short."""
    order = rng.permutation(x.shape[0])
    return [
        (x[order[i : i + batch_size]], y[order[i : i + batch_size]])
        for i in range(0, x.shape[0], batch_size)
    ]


# direction(theta, grad) -> the vector actually stepped along
Direction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def sgd_epoch(
    spec: ModelSpec,
    theta: np.ndarray,
    eta: float,
    batches: Sequence[tuple[np.ndarray, np.ndarray]],
    direction: Direction | None = None,
):
    """One epoch of plain constant-step SGD.

    Each batch applies ``theta <- theta - eta * d`` where ``d`` is the batch
    gradient, or ``direction(theta, grad)`` when a strategy adjusts it.

    Returns ``(theta_new, step_norms, delta)``: the L2 norm of every applied
    direction in order, and ``delta = theta_new - theta``. Because nothing
    but the current direction enters a step, ``delta == -eta * sum(d_r)``
    up to floating-point association.
    """
    if not eta > 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")
    if len(batches) == 0:
        raise ContractError("sgd_epoch needs at least one batch")
    for xb, yb in batches:
        _check(spec, theta, xb, yb)

    start = theta.copy()
    cur = theta.copy()
    norms = []
    for xb, yb in batches:
        _, g = _loss_grad(spec, cur, xb, yb)
        d = g if direction is None else direction(cur, g)
        norms.append(float(np.linalg.norm(d)))
        cur -= eta * d
    if not np.isfinite(cur).all():
        raise ContractError("SGD produced non-finite parameters; lower the learning rate")
    return cur, norms, cur - start
