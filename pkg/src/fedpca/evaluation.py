"""Accuracy, Mann-Whitney AUC, and cross-distribution summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .nn_core import MlpParams, forward, predict_from_probs


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class DistributionMetrics:
    acc_common: float
    acc_rare: float
    auc_common: float
    auc_rare: float


@dataclass(frozen=True)
class Summary:
    worst_acc: float
    avg_acc: float
    worst_auc: float
    avg_auc: float
    std_acc: float
    std_auc: float

    FIELDS = ("worst_acc", "avg_acc", "worst_auc", "avg_auc", "std_acc", "std_auc")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)


def accuracy_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    if probs.shape[0] == 0:
        raise MetricError("accuracy of an empty set is undefined")
    pred, _ = predict_from_probs(probs)
    return float(np.mean(pred == np.asarray(labels)))


def accuracy(model: MlpParams, features: np.ndarray, labels: np.ndarray) -> float:
    return accuracy_from_probs(forward(model, features).probs, labels)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney U / (n_pos * n_neg) via midranks, so ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    # Rank sums of integers and half-integers are exact in float64 at these sizes.
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Binary AUC for C == 2 (positive = class 1), else macro one-vs-rest."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores = np.column_stack([1.0 - scores, scores])
    if num_classes == 2:
        return binary_auc(scores[:, 1], labels == 1)
    aucs = []
    for c in range(num_classes):
        pos = labels == c
        if 0 < pos.sum() < pos.shape[0]:
            aucs.append(binary_auc(scores[:, c], pos))
    if not aucs:
        raise MetricError("no class has both positive and negative examples")
    return float(np.mean(aucs))


def evaluate(model: MlpParams, tests, num_classes: int) -> DistributionMetrics:
    pc = forward(model, tests.common_features).probs
    pr = forward(model, tests.rare_features).probs
    return DistributionMetrics(
        accuracy_from_probs(pc, tests.common_labels),
        accuracy_from_probs(pr, tests.rare_labels),
        auc(pc, tests.common_labels, num_classes),
        auc(pr, tests.rare_labels, num_classes),
    )


def summarize(m: DistributionMetrics) -> Summary:
    accs = (m.acc_common, m.acc_rare)
    aucs = (m.auc_common, m.auc_rare)
    return Summary(
        min(accs), (accs[0] + accs[1]) / 2.0,
        min(aucs), (aucs[0] + aucs[1]) / 2.0,
        abs(accs[0] - accs[1]) / 2.0, abs(aucs[0] - aucs[1]) / 2.0,
    )


def final_window_summary(per_round: list[DistributionMetrics], window: int = 5) -> Summary:
    """Mean of the per-round summaries over the last ``window`` rounds."""
    if not per_round:
        raise MetricError("no rounds recorded")
    tail = [summarize(m).as_tuple() for m in per_round[-window:]]
    return Summary(*np.mean(np.array(tail), axis=0).tolist())


def weight_diagnostic(weights_per_round: list[np.ndarray], rare: set[int], mislabeled: set[int]) -> float:
    """Mean over the given rounds of w_r * (1 - w_m)."""
    if not weights_per_round:
        return 0.0
    vals = []
    for w in weights_per_round:
        w = np.asarray(w)
        w_r = float(sum(w[k] for k in rare))
        w_m = float(sum(w[k] for k in mislabeled))
        vals.append(w_r * (1.0 - w_m))
    return float(np.mean(vals))


@dataclass
class RoundRecord:
    round: int
    metrics: DistributionMetrics
    weights: np.ndarray
    tau: float = float("nan")
    sets: list[str] | None = None  # effective per-client set label: c / r / n
    warning: str = ""


@dataclass
class RunReport:
    method: str
    seed: int
    scenario_hash: str
    num_clients: int
    warmup_rounds: int
    rare_clients: frozenset[int]
    mislabeled_clients: frozenset[int]
    records: list[RoundRecord]
    final_window: int = 5
    # per-round per-client analysis rows (FedPCA rounds only)
    analysis_rows: list[dict] | None = None

    @property
    def summary(self) -> Summary:
        return final_window_summary([r.metrics for r in self.records], self.final_window)

    @property
    def post_warmup(self) -> list[RoundRecord]:
        return [r for r in self.records if r.round > self.warmup_rounds]

    @property
    def weight_diagnostic(self) -> float:
        return weight_diagnostic(
            [r.weights for r in self.post_warmup], set(self.rare_clients), set(self.mislabeled_clients)
        )

    def summary_dict(self) -> dict:
        d = {"method": self.method, "scenario_hash": self.scenario_hash, "seed": self.seed}
        s = self.summary
        for f in Summary.FIELDS:
            d[f] = getattr(s, f)
        d["weight_diagnostic"] = self.weight_diagnostic
        return d

    def csv_header(self) -> list[str]:
        k = self.num_clients
        return (
            ["round", "method", *Summary.FIELDS, "tau"]
            + [f"w_{i}" for i in range(k)]
            + [f"set_{i}" for i in range(k)]
            + ["acc_common", "acc_rare", "auc_common", "auc_rare", "warning"]
        )

    def csv_rows(self) -> list[list[str]]:
        rows = []
        for r in self.records:
            sets = r.sets if r.sets is not None else [""] * self.num_clients
            m = r.metrics
            rows.append(
                [str(r.round), self.method]
                + [repr(v) for v in summarize(m).as_tuple()]
                + [repr(float(r.tau))]
                + [repr(float(w)) for w in r.weights]
                + list(sets)
                + [repr(m.acc_common), repr(m.acc_rare), repr(m.auc_common), repr(m.auc_rare), r.warning]
            )
        return rows
