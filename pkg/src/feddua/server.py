"""Server side: alpha-prior calibration, upload verification, trust policy
and volume-weighted aggregation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import strategies as st
from .client import (
    ClientState,
    ClientUpdate,
    LocalConfig,
    NotEstimable,
    QuantityBranch,
    client_embedding,
    estimate_volume,
    local_round,
)
from .datagen import Dataset
from .numcore import ConfigError, ContractError, make_rng

log = logging.getLogger(__name__)

__all__ = [
    "AlphaPrior",
    "Status",
    "Reason",
    "Verdict",
    "VerifyConfig",
    "TrustState",
    "TrustLedger",
    "calibrate_prior",
    "verify",
    "apply_trust",
    "aggregate",
    "weight_perturbation",
    "format_ledger_line",
    "parse_ledger_line",
    "check_ledger",
]

MIN_CELL_SAMPLES = 20


def _widen(lo: float, hi: float) -> tuple[float, float]:
    eps = 1e-6 * abs(lo) + 1e-9
    if hi - lo < eps:
        return lo - eps, hi + eps
    return lo, hi


@dataclass
class AlphaPrior:
    """Empirical alpha bands per (round, calibration volume).

    ``lo``/``hi``/``n_samples`` have shape ``(horizon, len(volumes))``.
    Lookups between calibrated volumes interpolate ``log alpha`` linearly in
    ``log volume``; outside the grid the nearest segment is extended. Rounds
    past the horizon reuse the last calibrated round.
    """

    volumes: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_samples: np.ndarray
    strategy: str = st.FEDAVG
    medians: np.ndarray | None = None

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.n_samples = np.asarray(self.n_samples, dtype=np.int64)
        if self.lo.shape != self.hi.shape or self.lo.shape != self.n_samples.shape:
            raise ContractError("band arrays must share a shape")
        if self.lo.ndim != 2 or self.lo.shape[1] != self.volumes.size or self.lo.shape[0] < 1:
            raise ContractError("bands must be (rounds, volumes)")
        if np.any(np.diff(self.volumes) <= 0):
            raise ContractError("calibration volumes must be strictly ascending")
        if np.any(self.lo <= 0) or np.any(self.hi < self.lo):
            raise ContractError("bands must satisfy 0 < lo <= hi")

    @property
    def horizon(self) -> int:
        return self.lo.shape[0]

    def cell(self, round_index: int, j: int) -> tuple[float, float]:
        t = min(max(round_index, 0), self.horizon - 1)
        return _widen(float(self.lo[t, j]), float(self.hi[t, j]))

    def band(self, round_index: int, volume: float) -> tuple[float, float]:
        """Acceptance interval for alpha at ``round_index`` and ``volume``."""
        if not volume > 0:
            raise ContractError("volume must be positive")
        t = min(max(round_index, 0), self.horizon - 1)
        lv = np.log(self.volumes)
        if lv.size == 1:
            return self.cell(t, 0)
        x = np.log(volume)
        j = int(np.clip(np.searchsorted(lv, x) - 1, 0, lv.size - 2))
        f = (x - lv[j]) / (lv[j + 1] - lv[j])
        out = []
        for q in (self.lo[t], self.hi[t]):
            lq = np.log(q)
            out.append(float(np.exp(lq[j] + f * (lq[j + 1] - lq[j]))))
        lo, hi = min(out), max(out)
        return _widen(lo, hi)

    def to_json(self) -> dict:
        d = {
            "strategy": self.strategy,
            "volumes": self.volumes.tolist(),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "n_samples": self.n_samples.tolist(),
        }
        if self.medians is not None:
            d["medians"] = self.medians.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AlphaPrior":
        med = d.get("medians")
        return cls(
            np.array(d["volumes"]),
            np.array(d["lo"]),
            np.array(d["hi"]),
            np.array(d["n_samples"]),
            d.get("strategy", st.FEDAVG),
            None if med is None else np.array(med),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AlphaPrior":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _simulated_clients(class_sizes: np.ndarray, num_clients: int, beta: float, rng, draws: int = 40):
    """Sizes and label mixes of clients from simulated label-skew partitions."""
    sizes, mixes = [], []
    for _ in range(draws):
        shares = rng.dirichlet(np.full(num_clients, beta), size=class_sizes.size)
        counts = shares * class_sizes[:, None]
        tot = counts.sum(axis=0)
        keep = tot > 0
        sizes.append(tot[keep])
        mixes.append((counts[:, keep] / tot[keep]).T)
    return np.concatenate(sizes), np.concatenate(mixes)


def _skewed_subset(labels: np.ndarray, size: int, mix: np.ndarray, rng) -> np.ndarray:
    """``size`` indices drawn without replacement, class weights from ``mix``."""
    counts = np.bincount(labels, minlength=mix.size).astype(float)
    mix = mix + 1e-9
    w = np.where(counts[labels] > 0, mix[labels] / np.maximum(counts[labels], 1.0), 0.0)
    return np.sort(rng.choice(labels.size, size=size, replace=False, p=w / w.sum()))


def calibrate_prior(
    local_cfg: LocalConfig,
    strategy: str,
    volumes: Sequence[int],
    rounds: int,
    shadow: Dataset,
    theta0: np.ndarray,
    branch0: QuantityBranch,
    *,
    replicas: int = MIN_CELL_SAMPLES,
    beta: float = 0.5,
    quantiles: tuple[float, float] = (0.005, 0.995),
    seed: int = 0,
    mu: float = 0.01,
    lambda_d: float = 0.1,
    id_offset: int = 1_000_000,
    aggregate_k: int = 0,
    round_window: int = 2,
    partition_clients: int = 0,
    pool_size: int = 0,
    participation: float = 0.0,
    pool=None,
) -> AlphaPrior:
    """Learn alpha bands from honest shadow clients on server-held data.

    Each (volume, replica) pair becomes a persistent shadow client holding a
    label-skewed subset of ``shadow``. With ``partition_clients`` and
    ``pool_size`` set, label mixes are taken from simulated clients of a
    Dirichlet(beta) label-skew split of ``pool_size`` samples over that
    many clients, choosing among those whose size is within a factor 1.5
    of the target volume and spreading the replicas evenly over label
    concentration; otherwise the mix is a plain Dirichlet(beta) draw.
    Every round all of them train from a
    shadow global model with the full client pipeline and their median alpha
    feeds the (round, volume) cell. The shadow model then advances by
    aggregating, by true volume, ``aggregate_k`` randomly chosen replicas
    (all of them when 0); see :func:`feddua.harness.shadow_aggregate_k`.
    With ``participation`` > 0, Scaffold control variates are refreshed for
    that fraction of replicas each round (plus the aggregated ones), the
    rate at which real clients are sampled; otherwise only the aggregated
    replicas update theirs.

    The band for round ``t`` pools the replica alphas of rounds
    ``t - round_window .. t + round_window``: with only ``replicas`` draws
    the 0.5%/99.5% quantiles collapse to the sample extremes, which a fresh
    honest draw exceeds with probability ``2 / (replicas + 1)``.
    """
    volumes = [int(v) for v in volumes]
    if not volumes or any(b <= a for a, b in zip(volumes, volumes[1:])):
        raise ConfigError("calibration volumes must be non-empty and strictly ascending")
    if volumes[0] < local_cfg.batch_size:
        raise ConfigError("smallest calibration volume is below one batch")
    if volumes[-1] > len(shadow):
        raise ConfigError(
            f"shadow set has {len(shadow)} samples, calibration needs {volumes[-1]}"
        )
    if replicas < MIN_CELL_SAMPLES:
        raise ConfigError(f"need at least {MIN_CELL_SAMPLES} replicas per cell")
    if rounds < 1:
        raise ConfigError("calibration needs at least one round")
    if round_window < 0:
        raise ConfigError("round_window must be >= 0")
    q_lo, q_hi = quantiles
    if not 0.0 <= q_lo < q_hi <= 1.0:
        raise ConfigError("quantiles must satisfy 0 <= lo < hi <= 1")

    rng = make_rng(seed, "shadow-subsets")
    pick_rng = make_rng(seed, "shadow-sampling")
    n_cls = shadow.num_classes
    sim = None
    if partition_clients > 0 and pool_size > 0:
        frac = np.bincount(shadow.labels, minlength=n_cls) / len(shadow)
        sim = _simulated_clients(frac * pool_size, partition_clients, beta, rng)
    clients = []
    for j, v in enumerate(volumes):
        if sim is not None:
            near = np.flatnonzero(np.abs(np.log(sim[0] / v)) < np.log(1.5))
            if near.size < replicas:
                near = np.argsort(np.abs(np.log(sim[0] / v)))[: 4 * replicas]
            # spread replicas evenly over label concentration so both tails are seen
            near = near[np.argsort(np.sum(sim[1][near] ** 2, axis=1), kind="stable")]
            strata = np.round(np.linspace(0, near.size - 1, replicas)).astype(int)
        for r in range(replicas):
            cid = id_offset + j * replicas + r
            if sim is None:
                mix = rng.dirichlet(np.full(n_cls, beta))
            else:
                mix = sim[1][near[strata[r]]]
            idx = _skewed_subset(shadow.labels, v, mix, rng)
            clients.append(ClientState(cid, shadow.subset(idx), client_embedding(seed, cid)))

    ctx = st.make_ctx(strategy, theta0.size, len(clients), mu=mu, lambda_d=lambda_d)
    theta, branch = theta0.copy(), branch0
    n_vol = len(volumes)
    samples = np.empty((rounds, n_vol, replicas))

    for t in range(rounds):
        def work(c, t=t, theta=theta, branch=branch, ctx=ctx):
            return local_round(c, theta, branch, ctx, local_cfg, make_rng(seed, "shadow", c.client_id, t))

        ups = list(pool.map(work, clients)) if pool is not None else [work(c) for c in clients]
        samples[t] = np.array([np.median(u.alphas) for u in ups]).reshape(n_vol, replicas)
        picked = np.arange(len(ups))
        if 0 < aggregate_k < len(ups):
            picked = np.sort(pick_rng.choice(len(ups), aggregate_k, replace=False))
        merged = [ups[i] for i in picked]
        theta, phi, _ = aggregate(merged, [Verdict(Status.ACCEPT)] * len(merged), theta, branch.phi)
        branch = branch.with_phi(phi)
        if participation > 0 and ctx.kind == st.SCAFFOLD:
            # refresh control variates at the real sampling rate, not only for the merged few
            m = int(round(participation * len(ups)))
            picked = np.union1d(picked, pick_rng.choice(len(ups), m, replace=False))
        ctx = st.post_round(ctx, [ups[i] for i in picked])

    lo = np.empty((rounds, n_vol))
    hi = np.empty((rounds, n_vol))
    med = np.empty((rounds, n_vol))
    counts = np.empty((rounds, n_vol), dtype=np.int64)
    for t in range(rounds):
        pooled = samples[max(0, t - round_window) : t + round_window + 1]
        pooled = pooled.transpose(1, 0, 2).reshape(n_vol, -1)
        lo[t] = np.quantile(pooled, q_lo, axis=1)
        hi[t] = np.quantile(pooled, q_hi, axis=1)
        med[t] = np.median(pooled, axis=1)
        counts[t] = pooled.shape[1]
    return AlphaPrior(np.array(volumes, float), lo, hi, counts, strategy, med)


class Status(str, Enum):
    ACCEPT = "ACCEPT"
    FLAG = "FLAG"


class Reason(str, Enum):
    NONE = "NONE"
    ALPHA_OUT_OF_BAND = "ALPHA_OUT_OF_BAND"
    VOLUME_INCONSISTENT = "VOLUME_INCONSISTENT"
    NOT_ESTIMABLE = "NOT_ESTIMABLE"


@dataclass(frozen=True)
class Verdict:
    status: Status
    reason: Reason = Reason.NONE
    estimated_volume: int | None = None

    def __post_init__(self):
        if self.status == Status.FLAG and self.reason == Reason.NONE:
            raise ContractError("a flag needs a reason")
        if (
            self.status == Status.FLAG
            and self.reason != Reason.NOT_ESTIMABLE
            and self.estimated_volume is None
        ):
            raise ContractError("a flag with an estimate reason needs the estimate")


@dataclass(frozen=True)
class VerifyConfig:
    tau: float = 0.5
    band_check: bool = True
    w_exclude: int = 3
    w_clear: int = 2

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.w_exclude < 0 or self.w_clear < 1:
            raise ConfigError("w_exclude >= 0 (0 disables exclusion), w_clear >= 1")


def estimate_update_volume(update: ClientUpdate) -> float | None:
    """Median over estimable epochs of the implied volume, or None."""
    est = []
    for obs, a in zip(update.observations, update.alphas):
        try:
            est.append(estimate_volume(obs, a))
        except NotEstimable:
            continue
    return float(np.median(est)) if est else None


def verify(update: ClientUpdate, prior: AlphaPrior | None, round_index: int, cfg: VerifyConfig) -> Verdict:
    """Check an upload against the prior band and its own volume estimate.

    Both checks use the median of the uploaded per-epoch alphas; the band
    check is skipped when ``prior`` is None or ``cfg.band_check`` is off.
    """
    d_hat = estimate_update_volume(update)
    if d_hat is None:
        return Verdict(Status.FLAG, Reason.NOT_ESTIMABLE)
    est = max(1, int(round(d_hat)))
    claimed = update.claimed_volume
    if prior is not None and cfg.band_check:
        lo, hi = prior.band(round_index, claimed)
        abar = float(np.median(update.alphas))
        if not lo <= abar <= hi:
            return Verdict(Status.FLAG, Reason.ALPHA_OUT_OF_BAND, est)
    if abs(d_hat - claimed) / claimed > cfg.tau:
        return Verdict(Status.FLAG, Reason.VOLUME_INCONSISTENT, est)
    return Verdict(Status.ACCEPT, Reason.NONE, est)


class TrustState(str, Enum):
    HONEST = "HONEST"
    WARNED = "WARNED"
    EXCLUDED = "EXCLUDED"


@dataclass
class _Entry:
    state: TrustState = TrustState.HONEST
    warnings: int = 0
    accepts: int = 0


@dataclass
class TrustLedger:
    entries: dict[int, _Entry] = field(default_factory=dict)
    history: list[tuple[int, int, Verdict]] = field(default_factory=list)

    def status(self, client_id: int) -> TrustState:
        e = self.entries.get(client_id)
        return TrustState.HONEST if e is None else e.state

    def warnings(self, client_id: int) -> int:
        e = self.entries.get(client_id)
        return 0 if e is None else e.warnings

    def label(self, client_id: int) -> str:
        s = self.status(client_id)
        return f"WARNED:{self.warnings(client_id)}" if s == TrustState.WARNED else s.value

    def excluded(self) -> set[int]:
        return {c for c, e in self.entries.items() if e.state == TrustState.EXCLUDED}


def apply_trust(ledger: TrustLedger, client_id: int, verdict: Verdict, cfg: VerifyConfig, round_index: int = -1) -> TrustLedger:
    """Escalate on flags, forgive after ``w_clear`` consecutive accepts.

    ``w_exclude`` consecutive flags exclude the client for good;
    ``w_exclude = 0`` never excludes. Updates ``ledger`` in place.
    """
    e = ledger.entries.setdefault(client_id, _Entry())
    ledger.history.append((round_index, client_id, verdict))
    if e.state == TrustState.EXCLUDED:
        return ledger
    if verdict.status == Status.ACCEPT:
        e.accepts += 1
        if e.state == TrustState.WARNED and e.accepts >= cfg.w_clear:
            e.state, e.warnings = TrustState.HONEST, 0
        return ledger
    e.accepts = 0
    e.warnings += 1
    e.state = TrustState.WARNED
    if cfg.w_exclude and e.warnings >= cfg.w_exclude:
        e.state = TrustState.EXCLUDED
    return ledger


def effective_volume(update: ClientUpdate, verdict: Verdict) -> int | None:
    if verdict.status == Status.ACCEPT:
        return update.claimed_volume
    return verdict.estimated_volume


def aggregate(
    updates: Sequence[ClientUpdate],
    verdicts: Sequence[Verdict],
    global_theta: np.ndarray,
    global_phi: np.ndarray,
):
    """Volume-weighted average of deltas (and branch parameters).

    Accepted uploads count with their claimed volume, flagged ones with the
    server estimate, and unestimable ones are dropped. Returns
    ``(theta, phi, weights)`` with ``weights`` keyed by client id; if every
    upload is dropped the globals come back unchanged with empty weights.
    """
    if len(updates) != len(verdicts):
        raise ContractError("one verdict per update")
    kept = []
    for u, v in zip(updates, verdicts):
        vol = effective_volume(u, v)
        if vol is None:
            log.info("client %d dropped from aggregation (%s)", u.client_id, v.reason.value)
            continue
        kept.append((u, float(vol)))
    if not kept:
        log.warning("every upload dropped; round skipped")
        return global_theta.copy(), global_phi.copy(), {}

    total = sum(v for _, v in kept)
    w = [v / total for _, v in kept]
    w[-1] = 1.0 - sum(w[:-1])
    theta = global_theta.copy()
    phi = global_phi.copy()
    for (u, _), wi in zip(kept, w):
        theta += wi * u.model_delta
        phi += wi * (u.phi - global_phi)
    return theta, phi, {u.client_id: wi for (u, _), wi in zip(kept, w)}


def weight_perturbation(claimed: Sequence[float], true: Sequence[float]) -> list[float]:
    """Per-client shift ``claimed_j / sum(claimed) - true_j / sum(true)``."""
    if len(claimed) != len(true):
        raise ContractError("claimed and true volumes must have equal length")
    c = np.asarray(claimed, dtype=float)
    t = np.asarray(true, dtype=float)
    if c.size and (c.min() <= 0 or t.min() <= 0):
        raise ContractError("volumes must be positive")
    return (c / c.sum() - t / t.sum()).tolist() if c.size else []


# Ledger lines: round<TAB>client<TAB>verdict<TAB>reason<TAB>claimed<TAB>estimated<TAB>trust
LEDGER_FIELDS = ("round", "client_id", "verdict", "reason", "claimed", "estimated", "trust")


def format_ledger_line(round_index: int, client_id: int, verdict: Verdict, claimed: int, trust: str) -> str:
    est = "-" if verdict.estimated_volume is None else str(verdict.estimated_volume)
    return "\t".join(
        [str(round_index), str(client_id), verdict.status.value, verdict.reason.value, str(claimed), est, trust]
    )


def parse_ledger_line(line: str) -> dict:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(LEDGER_FIELDS):
        raise ValueError(f"expected {len(LEDGER_FIELDS)} tab-separated fields, got {len(parts)}")
    rnd, cid, status, reason, claimed, est, trust = parts
    verdict = Verdict(Status(status), Reason(reason), None if est == "-" else int(est))
    if not (trust in ("HONEST", "EXCLUDED") or (trust.startswith("WARNED:") and trust[7:].isdigit())):
        raise ValueError(f"bad trust state {trust!r}")
    return {
        "round": int(rnd),
        "client_id": int(cid),
        "verdict": verdict,
        "claimed": int(claimed),
        "trust": trust,
    }


def check_ledger(path) -> list[str]:
    """Offline sanity checks on a verdict log; returns a list of problems.

    Checks line syntax, non-decreasing rounds, at most one line per client
    per round, and that no client reappears after being excluded.
    """
    problems = []
    excluded_at: dict[int, int] = {}
    seen: set[tuple[int, int]] = set()
    last_round = -1
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = parse_ledger_line(line)
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            r, c = rec["round"], rec["client_id"]
            if r < last_round:
                problems.append(f"line {lineno}: round {r} after round {last_round}")
            last_round = max(last_round, r)
            if (r, c) in seen:
                problems.append(f"line {lineno}: client {c} verified twice in round {r}")
            seen.add((r, c))
            if c in excluded_at:
                problems.append(
                    f"line {lineno}: client {c} sampled in round {r} after exclusion in round {excluded_at[c]}"
                )
            if rec["trust"] == "EXCLUDED":
                excluded_at.setdefault(c, r)
    return problems
