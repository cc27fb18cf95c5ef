"""Federated training loop: FedPCA, FedAvg and a loss-weighted fair baseline.

Every client-local random stream is derived from (seed, round, client), and
all reductions run in ascending client order, so a run is a pure function of
(scenario, config, method, seed).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis as an
from .evaluation import RoundRecord, RunReport, evaluate
from .nn_core import MlpParams, SgdState, backward, cross_entropy, forward, predict, sgd_step
from .synth_data import ClientDataset, ConfigError, TestSets, make_rng, make_seed

log = logging.getLogger(__name__)

METHODS = ("FedPCA", "FedAvg", "LossWeighted")

# RNG stream tags
_INIT, _TRAIN, _KMEANS, _GMM = 101, 102, 103, 104


class NoTrainableDataError(RuntimeError):
    """Every client was dropped in a round, so there is nothing to aggregate."""


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "drop"  # drop | hs
    tau_min: float = 0.9

    def __post_init__(self) -> None:
        if self.kind not in ("drop", "hs"):
            raise ConfigError(f"strategy must be drop or hs, got {self.kind!r}")
        if not 0.0 < self.tau_min < 1.0:
            raise ConfigError("tau_min must lie in (0, 1)")

    @property
    def label(self) -> str:
        return "D" if self.kind == "drop" else "HS"


@dataclass(frozen=True)
class RoundConfig:
    total_rounds: int = 50
    warmup_rounds: int = 10
    local_epochs: int = 1
    q: float = 1.0
    strategy: SelectionStrategy = field(default_factory=SelectionStrategy)
    weight_smoothing: float = 0.5
    id_smoothing: float = 0.7
    id_threshold: float = 0.5
    batch_size: int = 32
    hidden: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    final_window: int = 5
    baseline_q: float = 1.0
    normalize_dispersion: bool = False
    l2_features: bool = True
    noisy_min_offset: float = an.MIN_RELATIVE_OFFSET

    def __post_init__(self) -> None:
        if isinstance(self.strategy, dict):
            object.__setattr__(self, "strategy", SelectionStrategy(**self.strategy))
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")
        if not 0 <= self.warmup_rounds < self.total_rounds:
            raise ConfigError("warmup_rounds must satisfy 0 <= warmup_rounds < total_rounds")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.q < 0 or self.baseline_q < 0:
            raise ConfigError("q must be nonnegative")
        if not 0.0 <= self.weight_smoothing < 1.0:
            raise ConfigError("weight_smoothing must lie in [0, 1)")
        if not 0.0 <= self.id_smoothing < 1.0:
            raise ConfigError("id_smoothing must lie in [0, 1)")
        if self.batch_size < 1 or self.hidden < 1 or self.final_window < 1:
            raise ConfigError("batch_size, hidden and final_window must be >= 1")
        SgdState(self.learning_rate, self.momentum, self.weight_decay)

    def new_sgd(self) -> SgdState:
        return SgdState(self.learning_rate, self.momentum, self.weight_decay)


@dataclass
class ReliableDataset:
    features: np.ndarray
    labels: np.ndarray
    reliability: float

    @property
    def size(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------- data selection


def tau_from_correct_probs(per_client: list[np.ndarray], t: int, total_rounds: int, tau_min: float) -> float:
    """Mean over clients of the top ceil(t/T * n) correct-sample probabilities, floored at tau_min."""
    if not 1 <= t <= total_rounds:
        raise ValueError(f"round {t} outside 1..{total_rounds}")
    stats = []
    for probs in per_client:
        probs = np.sort(np.asarray(probs, dtype=np.float64))[::-1]
        n = probs.shape[0]
        if n == 0:
            continue
        top = -(-t * n // total_rounds)
        stats.append(float(np.mean(probs[:top])))
    if not stats:
        return tau_min
    return max(float(np.mean(stats)), tau_min)


def compute_tau(t: int, total_rounds: int, common_clients: list[ClientDataset], model: MlpParams, tau_min: float) -> float:
    """Confidence threshold from the top t/T share of correctly classified probabilities."""
    per_client = []
    for client in common_clients:
        cls, conf = predict(model, client.features)
        per_client.append(conf[cls == client.observed_labels])
    return tau_from_correct_probs(per_client, t, total_rounds, tau_min)


def high_confidence(confidences: np.ndarray, tau: float) -> tuple[np.ndarray, float]:
    """Mask of samples strictly above tau and their mean confidence (0 when none pass)."""
    conf = np.asarray(confidences, dtype=np.float64)
    keep = conf > tau
    return keep, float(np.mean(conf[keep])) if keep.any() else 0.0


def build_reliable_dataset(
    client: ClientDataset, membership: str, model: MlpParams, tau: float, strategy: SelectionStrategy
) -> ReliableDataset:
    if membership != "n":
        return ReliableDataset(client.features, client.observed_labels, 1.0)
    d = client.features.shape[1]
    if strategy.kind == "drop":
        return ReliableDataset(np.zeros((0, d)), np.zeros(0, dtype=np.int64), 0.0)
    cls, conf = predict(model, client.features)
    keep, reliability = high_confidence(conf, tau)
    return ReliableDataset(client.features[keep], cls[keep], reliability)


# ---------------------------------------------------------------- aggregation weights


def _normalize(num: np.ndarray) -> np.ndarray:
    return num / num.sum()


def fedpca_weights(sizes, reliabilities, dispersions, q: float) -> np.ndarray:
    """w_k proportional to N_k * r_k * exp(-q * S_k)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    rel = np.asarray(reliabilities, dtype=np.float64)
    disp = np.asarray(dispersions, dtype=np.float64)
    if not sizes.shape == rel.shape == disp.shape:
        raise ValueError("sizes, reliabilities and dispersions must have equal length")
    if q < 0:
        raise ValueError("q must be nonnegative")
    if not np.any(sizes > 0):
        raise NoTrainableDataError("no trainable data this round")
    # Shift by the smallest dispersion among contributors; cancels on normalisation.
    s0 = disp[sizes > 0].min()
    num = sizes * rel * np.exp(-q * (disp - s0))
    if num.sum() <= 0:
        return _normalize((sizes > 0).astype(np.float64))
    return _normalize(num)


def fedavg_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or sizes.sum() <= 0:
        raise ValueError("fedavg_weights needs a positive total size")
    return _normalize(sizes)


def loss_weighted_baseline(sizes, losses, q: float) -> np.ndarray:
    """Simplified q-FedAvg: w_k proportional to N_k * loss_k^q."""
    sizes = np.asarray(sizes, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if q < 0:
        raise ValueError("q must be nonnegative")
    num = sizes * (losses**q if q > 0 else np.ones_like(losses))
    if num.sum() <= 0:
        return np.full(sizes.shape, 1.0 / sizes.shape[0])
    return _normalize(num)


def aggregate(models: list[MlpParams], weights) -> MlpParams:
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) != weights.shape[0] or not models:
        raise ValueError("one weight per model required")
    shapes = [a.shape for a in models[0].arrays()]
    if any([a.shape for a in m.arrays()] != shapes for m in models):
        raise ValueError("all models must share parameter shapes")
    out = []
    for i in range(4):
        acc = np.zeros(shapes[i])
        for w, m in zip(weights, models):
            if w != 0.0:
                acc = acc + w * m.arrays()[i]
        out.append(acc)
    return MlpParams(*out)


def smooth_weights(previous: np.ndarray | None, current: np.ndarray, beta: float, active: np.ndarray) -> np.ndarray:
    """EMA of aggregation weights; inactive clients are pinned to exactly 0."""
    if previous is None or beta == 0.0:
        return current
    w = beta * previous + (1.0 - beta) * current
    w = np.where(active, w, 0.0)
    if w.sum() <= 0:
        return current
    return w / w.sum()


# ---------------------------------------------------------------- local training


def local_train(model: MlpParams, features: np.ndarray, labels: np.ndarray, epochs: int, config: RoundConfig, seed: int) -> MlpParams:
    """Mini-batch momentum SGD from the downloaded model; fresh optimizer state."""
    n = features.shape[0]
    if n == 0:
        return model.copy()
    rng = make_rng(seed)
    params = model.copy()
    state = config.new_sgd()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            trace = forward(params, features[idx])
            params, state = sgd_step(params, backward(params, trace, labels[idx]), state)
    return params


# ---------------------------------------------------------------- orchestration


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")


def run_experiment(
    clients: list[ClientDataset],
    tests: TestSets,
    config: RoundConfig,
    method: str,
    seed: int,
    num_classes: int,
    scenario_hash: str = "",
    method_label: str | None = None,
) -> RunReport:
    _check_method(method)
    K = len(clients)
    if method == "FedPCA" and K < 3:
        raise ConfigError("FedPCA needs at least 3 clients")
    d = clients[0].features.shape[1]
    T = config.total_rounds
    sizes = np.array([c.size for c in clients], dtype=np.float64)

    model = MlpParams.init(d, config.hidden, num_classes, make_rng(seed, _INIT))
    smoothing = an.SmoothingState.fresh(K, config.id_smoothing, config.id_threshold)
    prev_w: np.ndarray | None = None
    records: list[RoundRecord] = []
    analysis_rows: list[dict] = []

    for t in range(1, T + 1):
        tau = float("nan")
        sets = None
        warning = ""
        if method == "FedPCA" and t > config.warmup_rounds:
            pairs = [
                an.client_vector(
                    model, c, num_classes, config.normalize_dispersion, make_seed(seed, _KMEANS, t, k), config.l2_features
                )
                for k, c in enumerate(clients)
            ]
            resp = np.full((K, 3), np.nan)
            try:
                gmm = an.fit_gmm3(pairs, make_seed(seed, _GMM, t))
                partition = an.assign_sets(gmm, an.select_noisy_component(gmm, config.noisy_min_offset), pairs)
                resp = gmm.responsibilities
            except (an.AnalysisError, np.linalg.LinAlgError) as exc:
                warning = f"gmm fallback: {exc}"
                log.warning("round %d: %s", t, warning)
                partition = an.fallback_partition(K)
            effective, smoothing = an.smooth_identification(smoothing, partition)
            sets = effective.labels(K)
            tau = compute_tau(t, T, [clients[k] for k in sorted(effective.s_common)], model, config.strategy.tau_min)
            reliable = [build_reliable_dataset(c, sets[k], model, tau, config.strategy) for k, c in enumerate(clients)]
            locals_ = [
                local_train(model, r.features, r.labels, config.local_epochs, config, make_seed(seed, _TRAIN, t, k))
                for k, r in enumerate(reliable)
            ]
            n_hat = np.array([r.size for r in reliable], dtype=np.float64)
            rel = np.array([r.reliability for r in reliable])
            disp = np.array([p.dispersion for p in pairs])
            inst = partition.labels(K)
            for k, p in enumerate(pairs):
                analysis_rows.append({
                    "round": t, "client": k, "loss": p.loss, "dispersion": p.dispersion,
                    "resp_0": float(resp[k, 0]), "resp_1": float(resp[k, 1]), "resp_2": float(resp[k, 2]),
                    "assigned_set": inst[k], "effective_set": sets[k],
                })
            try:
                w = fedpca_weights(n_hat, rel, disp, config.q)
            except NoTrainableDataError as exc:
                warning = (warning + "; " if warning else "") + str(exc)
                log.warning("round %d: %s, keeping previous global model", t, exc)
                w = np.zeros(K)
            else:
                w = smooth_weights(prev_w, w, config.weight_smoothing, n_hat > 0)
                prev_w = w
                model = aggregate(locals_, w)
        else:
            if method == "LossWeighted":
                losses = [cross_entropy(forward(model, c.features), c.observed_labels) for c in clients]
                w = loss_weighted_baseline(sizes, losses, config.baseline_q)
            else:
                w = fedavg_weights(sizes)
            locals_ = [
                local_train(model, c.features, c.observed_labels, config.local_epochs, config, make_seed(seed, _TRAIN, t, k))
                for k, c in enumerate(clients)
            ]
            model = aggregate(locals_, w)
        if not model.is_finite():
            raise FloatingPointError(f"non-finite global model after round {t}")
        records.append(RoundRecord(t, evaluate(model, tests, num_classes), np.asarray(w, dtype=np.float64), tau, sets, warning))

    return RunReport(
        method=method_label or method,
        seed=seed,
        scenario_hash=scenario_hash,
        num_clients=K,
        warmup_rounds=config.warmup_rounds,
        rare_clients=frozenset(k for k, c in enumerate(clients) if not c.is_common),
        mislabeled_clients=frozenset(k for k, c in enumerate(clients) if c.truly_mislabeled),
        records=records,
        final_window=config.final_window,
        analysis_rows=analysis_rows if method == "FedPCA" else None,
    )
