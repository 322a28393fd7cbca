"""Experiment orchestration: config, client sampling, the round loop, outputs.

Config files are flat ``key = value`` lines; ``#`` starts a comment and
list values are comma separated. Every key of :class:`ExperimentConfig`
is accepted, unknown keys are an error.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import strategies as st
from .client import (
    ClientState,
    LocalConfig,
    QuantityBranch,
    client_embedding,
    init_branch,
    local_round,
)
from .datagen import Dataset, dirichlet_partition, load_csv, make_blobs, train_test_split
from .numcore import ConfigError, ModelSpec, accuracy, init_params, make_rng
from .server import (
    AlphaPrior,
    Status,
    TrustLedger,
    Verdict,
    VerifyConfig,
    aggregate,
    apply_trust,
    calibrate_prior,
    effective_volume,
    format_ledger_line,
    verify,
    weight_perturbation,
)

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "RoundRecord",
    "ExperimentResult",
    "Setup",
    "load_config",
    "parse_config",
    "dump_config",
    "build_setup",
    "calibrate",
    "shadow_aggregate_k",
    "sample_clients",
    "run_experiment",
    "emit_outputs",
    "read_metrics",
    "final_accuracy",
    "METRICS_HEADER",
]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 50
    epochs: int = 2
    batch_size: int = 8
    eta: float = 0.3
    beta: float = 0.5
    min_samples: int = 0  # 0 -> 2 * batch_size
    strategy: str = st.FEDAVG
    mu: float = 0.01
    lambda_d: float = 0.1
    feddua: bool = True
    attackers: tuple[int, ...] = (0,)
    misreport_factor: float = 3.0
    attackers_always_sampled: bool = True
    tau: float = 0.5
    quantile_lo: float = 0.005
    quantile_hi: float = 0.995
    band_check: bool = True
    w_exclude: int = 3
    w_clear: int = 2
    calib_volumes: tuple[int, ...] = (32, 55, 96, 166, 288, 499)
    calib_replicas: int = 20
    calib_rounds: int = 0  # 0 -> rounds
    calib_window: int = 2
    shadow_fraction: float = 0.1
    test_fraction: float = 0.2
    dataset: str = "blobs"  # or a CSV path
    num_classes: int = 10
    input_dim: int = 16
    samples_per_class: int = 2500
    spread: float = 0.5
    model: str = "mlp1"
    hidden_dim: int = 64
    branch_hidden: int = 8
    branch_lr: float = 0.01
    branch_steps: int = 5
    prior: str = ""  # path to a saved prior; empty -> calibrate
    out_dir: str = "out"

    def __post_init__(self):
        pos = [
            "num_clients", "clients_per_round", "rounds", "epochs", "batch_size",
            "calib_replicas", "branch_hidden", "hidden_dim", "input_dim",
            "samples_per_class",
        ]
        for name in pos:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.clients_per_round > self.num_clients:
            raise ConfigError("clients_per_round must not exceed num_clients")
        for name in ("eta", "beta", "misreport_factor", "tau", "branch_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.spread < 0:
            raise ConfigError("spread must be non-negative")
        if not 0 <= self.quantile_lo < self.quantile_hi <= 1:
            raise ConfigError("need 0 <= quantile_lo < quantile_hi <= 1")
        if not 0 < self.shadow_fraction < 1 or not 0 < self.test_fraction < 1:
            raise ConfigError("shadow_fraction and test_fraction must lie in (0, 1)")
        if self.strategy not in st.STRATEGIES:
            raise ConfigError(f"strategy must be one of {st.STRATEGIES}")
        bad = [a for a in self.attackers if not 0 <= a < self.num_clients]
        if bad:
            raise ConfigError(f"attacker ids {bad} are not client ids")
        if self.min_samples < 0 or self.calib_rounds < 0 or self.calib_window < 0 or self.w_exclude < 0 or self.w_clear < 1:
            raise ConfigError("min_samples, calib_rounds, w_exclude must be >= 0; w_clear >= 1")

    @property
    def min_client_samples(self) -> int:
        return self.min_samples or 2 * self.batch_size

    @property
    def calibration_rounds(self) -> int:
        return self.calib_rounds or self.rounds

    def verify_config(self) -> VerifyConfig:
        return VerifyConfig(self.tau, self.band_check, self.w_exclude, self.w_clear)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        try:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{name}: expected comma-separated integers, got {raw!r}") from None
    try:
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, overrides=(), base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from file text plus ``key=value`` overrides (applied last)."""
    values = {}
    lines = [(i, l) for i, l in enumerate(text.splitlines(), start=1)]
    lines += [(f"--set {o}", o) for o in overrides]
    for where, line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return replace(base or ExperimentConfig(), **values)


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    out = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{name} = {v}")
    return "\n".join(out) + "\n"


@dataclass
class Setup:
    """Everything derived from a config before round 0."""

    cfg: ExperimentConfig
    spec: ModelSpec
    local: LocalConfig
    clients: list[ClientState]
    test: Dataset
    shadow: Dataset
    theta0: np.ndarray
    branch0: QuantityBranch


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "blobs":
        return make_blobs(
            cfg.num_classes, cfg.input_dim, cfg.samples_per_class, cfg.spread,
            make_rng(cfg.seed, "data"),
        )
    return load_csv(cfg.dataset)


def build_setup(cfg: ExperimentConfig) -> Setup:
    data = _load_dataset(cfg)
    spec = ModelSpec(cfg.model, data.input_dim, data.num_classes, cfg.hidden_dim if cfg.model == "mlp1" else 0)
    # raises ConfigError when the branch would exceed 10% of the model
    branch0 = init_branch(cfg.branch_hidden, cfg.branch_lr, make_rng(cfg.seed, "branch-init"), spec.num_params)
    theta0 = init_params(spec, make_rng(cfg.seed, "model-init"))
    local = LocalConfig(spec, cfg.epochs, cfg.batch_size, cfg.eta, cfg.branch_steps)

    pool, test = train_test_split(data, cfg.test_fraction, make_rng(cfg.seed, "test-split"))
    train, shadow = train_test_split(pool, cfg.shadow_fraction, make_rng(cfg.seed, "shadow-split"))
    part = dirichlet_partition(
        train, cfg.num_clients, cfg.beta, cfg.min_client_samples, make_rng(cfg.seed, "partition"), cfg.seed
    )
    attackers = set(cfg.attackers)
    clients = [
        ClientState(
            k,
            train.subset(idx, f"client-{k}"),
            client_embedding(cfg.seed, k),
            cfg.misreport_factor if k in attackers else 1.0,
        )
        for k, idx in enumerate(part.assignments)
    ]
    return Setup(cfg, spec, local, clients, test, shadow, theta0, branch0)


def shadow_aggregate_k(cfg: ExperimentConfig, shadow_size: int) -> int:
    """Replicas per shadow round that match the real per-sample exposure.

    A real sample reaches the global model with probability K/N per round.
    Shadow replicas share one small pool, so aggregating ``k`` of them
    exposes each shadow sample about ``k * mean(volume) / shadow_size``
    times; a shadow model that sees its data more often overfits it and
    yields less coherent (lower alpha) epochs than real clients do.
    """
    rate = cfg.clients_per_round / cfg.num_clients
    return max(1, int(round(rate * shadow_size / float(np.mean(cfg.calib_volumes)))))


def calibrate(setup: Setup, threads: int = 1) -> AlphaPrior:
    cfg = setup.cfg
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        return calibrate_prior(
            setup.local,
            cfg.strategy,
            cfg.calib_volumes,
            cfg.calibration_rounds,
            setup.shadow,
            setup.theta0,
            setup.branch0,
            replicas=cfg.calib_replicas,
            beta=cfg.beta,
            quantiles=(cfg.quantile_lo, cfg.quantile_hi),
            seed=cfg.seed,
            mu=cfg.mu,
            lambda_d=cfg.lambda_d,
            aggregate_k=shadow_aggregate_k(cfg, len(setup.shadow)),
            round_window=cfg.calib_window,
            partition_clients=cfg.num_clients,
            pool_size=sum(len(c.data) for c in setup.clients),
            participation=cfg.clients_per_round / cfg.num_clients,
            pool=pool,
        )
    finally:
        if pool is not None:
            pool.shutdown()


def sample_clients(rng: np.random.Generator, eligible, k: int) -> list[int]:
    """``min(k, len(eligible))`` distinct ids uniformly at random, ascending."""
    eligible = sorted(eligible)
    if not eligible:
        raise ConfigError("no eligible clients left to sample")
    if k >= len(eligible):
        return eligible
    picked = rng.choice(len(eligible), size=k, replace=False)
    return sorted(eligible[i] for i in picked)


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    clients: list[int]
    claimed: list[int]
    true: list[int]
    estimated: list[int | None]
    verdicts: list[str]
    reasons: list[str]
    alphas: list[float]
    delta_w: list[float]
    weights: list[float]
    trust: list[str]
    num_excluded: int
    wall_clock: float = 0.0

    @property
    def num_flagged(self) -> int:
        return sum(v == Status.FLAG.value for v in self.verdicts)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    ledger_lines: list[str] = field(default_factory=list)
    prior: AlphaPrior | None = None
    events: list[str] = field(default_factory=list)
    theta: np.ndarray | None = None


def _round_sample(cfg: ExperimentConfig, rng, excluded: set[int]) -> list[int]:
    eligible = [c for c in range(cfg.num_clients) if c not in excluded]
    forced = []
    if cfg.attackers_always_sampled:
        forced = [a for a in sorted(set(cfg.attackers)) if a not in excluded]
    rest = [c for c in eligible if c not in forced]
    k = cfg.clients_per_round - len(forced)
    picked = sample_clients(rng, rest, k) if k > 0 and rest else []
    return sorted(forced + picked)


def run_experiment(
    cfg: ExperimentConfig,
    threads: int = 1,
    prior: AlphaPrior | None = None,
    setup: Setup | None = None,
) -> ExperimentResult:
    """Run the full federated loop; deterministic in ``cfg.seed``.

    Per round: sample clients (excluded ones never), run local training,
    verify and update trust when FedDua is on (otherwise accept every
    claimed volume), aggregate, and evaluate on the held-out test split.
    """
    setup = setup or build_setup(cfg)
    if cfg.feddua and prior is None:
        prior = AlphaPrior.load(cfg.prior) if cfg.prior else calibrate(setup, threads)
    vcfg = cfg.verify_config()
    ledger = TrustLedger()
    theta, branch = setup.theta0.copy(), setup.branch0
    ctx = st.make_ctx(cfg.strategy, theta.size, cfg.num_clients, cfg.mu, cfg.lambda_d)
    sample_rng = make_rng(cfg.seed, "sampling")
    records, lines, events = [], [], []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    try:
        for t in range(cfg.rounds):
            start = time.perf_counter()
            ids = _round_sample(cfg, sample_rng, ledger.excluded())
            participants = [setup.clients[i] for i in ids]

            def work(c, t=t, theta=theta, branch=branch, ctx=ctx):
                return local_round(c, theta, branch, ctx, setup.local, make_rng(cfg.seed, "client", c.client_id, t))

            ups = list(pool.map(work, participants)) if pool else [work(c) for c in participants]
            for u in ups:
                events.extend(f"round {t} client {u.client_id}: {e}" for e in u.events)

            if cfg.feddua:
                verdicts = [verify(u, prior, t, vcfg) for u in ups]
                for u, v in zip(ups, verdicts):
                    apply_trust(ledger, u.client_id, v, vcfg, t)
                    lines.append(format_ledger_line(t, u.client_id, v, u.claimed_volume, ledger.label(u.client_id)))
            else:
                verdicts = [Verdict(Status.ACCEPT) for _ in ups]

            theta, phi, weights = aggregate(ups, verdicts, theta, branch.phi)
            if not weights:
                events.append(f"round {t}: every upload dropped, global model unchanged")
            branch = branch.with_phi(phi)
            ctx = st.post_round(ctx, ups)

            acc = accuracy(setup.spec, theta, setup.test.features, setup.test.labels)
            records.append(
                RoundRecord(
                    round=t,
                    accuracy=acc,
                    clients=ids,
                    claimed=[u.claimed_volume for u in ups],
                    true=[u.true_volume for u in ups],
                    estimated=[v.estimated_volume for v in verdicts],
                    verdicts=[v.status.value for v in verdicts],
                    reasons=[v.reason.value for v in verdicts],
                    alphas=[float(np.median(u.alphas)) for u in ups],
                    delta_w=weight_perturbation([u.claimed_volume for u in ups], [u.true_volume for u in ups]),
                    weights=[weights.get(u.client_id, 0.0) for u in ups],
                    trust=[ledger.label(u.client_id) for u in ups],
                    num_excluded=len(ledger.excluded()),
                    wall_clock=time.perf_counter() - start,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(cfg, records, lines, prior, events, theta)


METRICS_HEADER = [
    "round", "accuracy", "num_sampled", "num_flagged", "num_excluded",
    "clients", "claimed", "true", "estimated", "verdicts", "reasons",
    "alpha", "delta_w", "weights", "trust",
]


def _join(values) -> str:
    return ";".join("-" if v is None else (repr(v) if isinstance(v, float) else str(v)) for v in values)


def emit_outputs(result: ExperimentResult, out_dir) -> dict[str, Path]:
    """Write metrics.csv, verdicts.log, config.resolved and accuracy_curve.tsv.

    Wall-clock times go to a separate timing.tsv so metrics.csv stays
    byte-identical across runs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            name: out / name
            for name in ("metrics.csv", "verdicts.log", "config.resolved", "accuracy_curve.tsv", "timing.tsv")
        }
        with paths["metrics.csv"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for r in result.records:
                w.writerow([
                    r.round, repr(r.accuracy), len(r.clients), r.num_flagged, r.num_excluded,
                    _join(r.clients), _join(r.claimed), _join(r.true), _join(r.estimated),
                    _join(r.verdicts), _join(r.reasons), _join(r.alphas), _join(r.delta_w), _join(r.weights),
                    _join(r.trust),
                ])
        paths["verdicts.log"].write_text("".join(l + "\n" for l in result.ledger_lines), encoding="utf-8")
        paths["config.resolved"].write_text(dump_config(result.config), encoding="utf-8")
        paths["accuracy_curve.tsv"].write_text(
            "round\taccuracy\n" + "".join(f"{r.round}\t{r.accuracy!r}\n" for r in result.records),
            encoding="utf-8",
        )
        paths["timing.tsv"].write_text(
            "round\tseconds\n" + "".join(f"{r.round}\t{r.wall_clock:.6f}\n" for r in result.records),
            encoding="utf-8",
        )
    except OSError as exc:
        raise OSError(f"cannot write outputs under {out}: {exc}") from exc
    return paths


def read_metrics(path) -> list[dict]:
    """Parse metrics.csv back into typed rows."""

    def split(s, conv):
        return [None if v == "-" else conv(v) for v in s.split(";")] if s else []

    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "round": int(row["round"]),
                "accuracy": float(row["accuracy"]),
                "num_sampled": int(row["num_sampled"]),
                "num_flagged": int(row["num_flagged"]),
                "num_excluded": int(row["num_excluded"]),
                "clients": split(row["clients"], int),
                "claimed": split(row["claimed"], int),
                "true": split(row["true"], int),
                "estimated": split(row["estimated"], int),
                "verdicts": split(row["verdicts"], str),
                "reasons": split(row["reasons"], str),
                "alpha": split(row["alpha"], float),
                "delta_w": split(row["delta_w"], float),
                "weights": split(row["weights"], float),
                "trust": split(row["trust"], str),
            })
    return rows


def final_accuracy(records, window: int = 5) -> float:
    """Mean test accuracy over the last ``window`` rounds."""
    if not records:
        return float("nan")
    return float(np.mean([r.accuracy for r in records[-window:]]))
