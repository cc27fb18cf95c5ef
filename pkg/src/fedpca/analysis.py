"""Performance-capacity analysis of clients.

Each client is summarised by the global model's loss on its observed labels
and a label-free dispersion score of its hidden features. A 3-component GMM
over those pairs splits the clients into common, rare and noisy sets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_core import MlpParams, cross_entropy, forward
from .synth_data import ClientDataset, make_rng

DISPERSION_FLOOR = 1e-12
KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 100
KMEANS_RESTARTS = 5
EM_TOL = 1e-8
EM_MAX_ITER = 200
COV_REG = 1e-6
DEGENERATE_SPREAD = 1e-6
MIN_RELATIVE_OFFSET = 0.5


class AnalysisError(ValueError):
    pass


@dataclass
class LossDispersionPair:
    loss: float
    dispersion: float


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    counts: np.ndarray
    global_mean: np.ndarray
    iterations: int = 0


@dataclass
class Gmm3:
    weights: np.ndarray  # mixing proportions, (3,)
    means: np.ndarray  # (3, 2) in original units, columns (loss, dispersion)
    covariances: np.ndarray  # (3, 2, 2) in standardized units
    log_likelihood: float
    responsibilities: np.ndarray  # (K, 3)
    log_likelihood_trace: list[float] = field(default_factory=list)
    std_means: np.ndarray | None = None  # (3, 2) in standardized units


@dataclass
class ClientPartition:
    s_common: frozenset[int]
    s_rare: frozenset[int]
    s_noisy: frozenset[int]

    def label_of(self, k: int) -> str:
        if k in self.s_noisy:
            return "n"
        if k in self.s_rare:
            return "r"
        return "c"

    def labels(self, num_clients: int) -> list[str]:
        return [self.label_of(k) for k in range(num_clients)]


@dataclass
class SmoothingState:
    scores: np.ndarray
    decay: float = 0.7
    threshold: float = 0.5

    @classmethod
    def fresh(cls, num_clients: int, decay: float = 0.7, threshold: float = 0.5) -> SmoothingState:
        if not 0.0 <= decay < 1.0:
            raise AnalysisError("decay must lie in [0, 1)")
        return cls(np.zeros(num_clients), decay, threshold)


# ---------------------------------------------------------------- k-means


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers, dtype=np.float64)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(features: np.ndarray, k: int, seed: int, n_init: int = KMEANS_RESTARTS) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations, best of ``n_init`` starts.

    An empty cluster is re-seeded at the point farthest from its assigned
    centroid, so every returned cluster is nonempty. The run with the lowest
    inertia wins; ties keep the earliest run.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise AnalysisError(f"kmeans needs at least k={k} samples, got {n}")
    if n_init < 1:
        raise AnalysisError("n_init must be >= 1")
    rng = make_rng(seed)
    best, best_inertia = None, math.inf
    for _ in range(n_init):
        result = _lloyd(x, k, rng)
        inertia = float(np.sum((x - result.centroids[result.assignments]) ** 2))
        if inertia < best_inertia:
            best, best_inertia = result, inertia
    return best


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator) -> KMeansResult:
    n = x.shape[0]
    centroids = _kmeans_pp(x, k, rng)
    assign = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, KMEANS_MAX_ITER + 1):
        d2 = _sq_dists(x, centroids)
        assign = _fill_empty(x, centroids, np.argmin(d2, axis=1), d2)
        new = np.array([x[assign == j].mean(axis=0) for j in range(k)])
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < KMEANS_TOL:
            break
    d2 = _sq_dists(x, centroids)
    assign = _fill_empty(x, centroids, np.argmin(d2, axis=1), d2)
    centroids = np.array([x[assign == j].mean(axis=0) for j in range(k)])
    counts = np.bincount(assign, minlength=k)
    return KMeansResult(centroids, assign, counts, x.mean(axis=0), it)


def _fill_empty(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray, d2: np.ndarray) -> np.ndarray:
    k = centroids.shape[0]
    assign = assign.copy()
    for j in range(k):
        if np.any(assign == j):
            continue
        own = d2[np.arange(x.shape[0]), assign]
        # only steal from clusters that keep at least one point
        counts = np.bincount(assign, minlength=k)
        own = np.where(counts[assign] > 1, own, -1.0)
        far = int(np.argmax(own))
        centroids[j] = x[far]
        assign[far] = j
    return assign


def dispersion_score(km: KMeansResult, num_classes: int, normalize_by_size: bool = False) -> float:
    """Log of size-weighted between-cluster scatter divided by C - 1."""
    if num_classes < 2:
        raise AnalysisError("dispersion score needs C >= 2")
    counts = km.counts.astype(np.float64)
    if normalize_by_size:
        counts = counts / counts.sum()
    scatter = np.sum(counts * np.sum((km.centroids - km.global_mean) ** 2, axis=1))
    return math.log(max(scatter / (num_classes - 1), DISPERSION_FLOOR))


def l2_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.maximum(norms, 1e-12)


def client_vector(
    params: MlpParams,
    client: ClientDataset,
    num_classes: int,
    normalize_by_size: bool = False,
    seed: int = 0,
    l2_features: bool = True,
) -> LossDispersionPair:
    """Global-model loss on the observed labels and dispersion of hidden features.

    With ``l2_features`` each hidden feature vector is projected to the unit
    sphere before clustering. Additive input corruption inflates raw ReLU
    activations, which would make rare clients look *more* dispersed; on the
    sphere only the angular class separation is scored.
    """
    trace = forward(params, client.features)
    loss = cross_entropy(trace, client.observed_labels)
    z = l2_rows(trace.features) if l2_features else trace.features
    km = kmeans(z, min(num_classes, client.size), seed)
    return LossDispersionPair(loss, dispersion_score(km, num_classes, normalize_by_size))


# ---------------------------------------------------------------- GMM


def _standardize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = points.mean(axis=0)
    sd = points.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (points - mu) / sd, mu, sd


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    diff = np.linalg.solve(chol, (x - mean).T)
    maha = np.sum(diff * diff, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + x.shape[1] * math.log(2.0 * math.pi))


def _e_step(x, weights, means, covs) -> tuple[float, np.ndarray]:
    """Penalized log-likelihood and responsibilities.

    The ridge on each covariance is the MAP update under a prior
    proportional to exp(-lam/2 * tr(cov^-1)); adding that log-prior makes the
    recorded objective exactly the quantity EM never decreases.
    """
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    lp = np.column_stack([logw[j] + _log_gauss(x, means[j], covs[j]) for j in range(3)])
    m = lp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(lp - m), axis=1))
    lam = COV_REG * x.shape[0]
    penalty = sum(-0.5 * lam * np.trace(np.linalg.inv(c)) for c in covs)
    return float(np.sum(lse) + penalty), np.exp(lp - lse[:, None])


def _m_step(x, resp) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    safe = np.maximum(nk, 1e-12)
    means = (resp.T @ x) / safe[:, None]
    # lam / n_k >= COV_REG because n_k <= K
    lam = COV_REG * x.shape[0]
    covs = np.empty((3, 2, 2))
    for j in range(3):
        diff = x - means[j]
        covs[j] = ((resp[:, j, None] * diff).T @ diff + lam * np.eye(2)) / safe[j]
    return weights, means, covs


def fit_gmm3(pairs: list[LossDispersionPair], seed: int = 0) -> Gmm3:
    """EM for a full-covariance 3-component GMM on z-scored (loss, dispersion) points."""
    if len(pairs) < 3:
        raise AnalysisError(f"fit_gmm3 needs at least 3 clients, got {len(pairs)}")
    raw = np.array([[p.loss, p.dispersion] for p in pairs], dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise AnalysisError("loss/dispersion pairs must be finite")
    x, mu, sd = _standardize(raw)
    km = kmeans(x, 3, seed)
    means = km.centroids.copy()
    covs = np.repeat((np.cov(x.T, bias=True) + COV_REG * np.eye(2))[None], 3, axis=0)
    weights = np.full(3, 1.0 / 3.0)

    trace: list[float] = []
    ll, resp = _e_step(x, weights, means, covs)
    trace.append(ll)
    for _ in range(EM_MAX_ITER):
        weights, means, covs = _m_step(x, resp)
        ll_new, resp = _e_step(x, weights, means, covs)
        trace.append(ll_new)
        if ll_new - ll < EM_TOL:
            ll = ll_new
            break
        ll = ll_new
    return Gmm3(weights, means * sd + mu, covs, ll, resp, trace, means)


# ---------------------------------------------------------------- set assignment


def _anchor_roles(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(common, rare) among two (dispersion, loss) means: higher dispersion, then lower loss, is common."""
    if (a[0], -a[1]) >= (b[0], -b[1]):
        return a, b
    return b, a


def noisy_offset(candidate: np.ndarray, a: np.ndarray, b: np.ndarray, min_relative_offset: float = MIN_RELATIVE_OFFSET) -> float:
    """Offset of ``candidate`` into the high-loss, high-dispersion side of the a-b line.

    Points are (dispersion, loss). Returns -inf unless the candidate deviates
    upward and rightward:

    * the a-b line falls from upper-left to lower-right, so its upper side is
      also its right side;
    * the candidate is strictly above the line;
    * its loss exceeds the common anchor's and its dispersion is at least the
      rare anchor's;
    * the perpendicular offset is at least ``min_relative_offset`` times the
      a-b distance, which rejects a spurious split of one real group.

    Coinciding anchors use the midpoint vector instead: loss must rise and
    dispersion must not fall.
    """
    u = b - a
    norm = math.hypot(u[0], u[1])
    if norm == 0.0:
        v = candidate - 0.5 * (a + b)
        return math.hypot(v[0], v[1]) if (v[1] > 0 and v[0] >= 0) else -math.inf
    n = np.array([-u[1], u[0]]) / norm
    if n[1] < 0:
        n = -n
    if not (n[0] > 0 and n[1] > 0):
        return -math.inf
    off = float(n @ (candidate - a))
    common, rare = _anchor_roles(a, b)
    if off <= 0 or candidate[1] <= common[1] or candidate[0] < rare[0]:
        return -math.inf
    if off < min_relative_offset * norm:
        return -math.inf
    return off


def select_noisy_component(gmm: Gmm3, min_relative_offset: float = MIN_RELATIVE_OFFSET) -> int | None:
    """Index of the component sitting upper-right of the other two, or None."""
    xy = gmm.means[:, ::-1]  # (dispersion, loss)
    std = gmm.std_means if gmm.std_means is not None else gmm.means
    if np.max(np.ptp(std, axis=0)) <= DEGENERATE_SPREAD:
        return None
    best, best_off = None, 0.0
    for j in range(3):
        a, b = (xy[i] for i in range(3) if i != j)
        off = noisy_offset(xy[j], a, b, min_relative_offset)
        if off > best_off:
            best, best_off = j, off
    return best


def assign_sets(gmm: Gmm3, noisy_component: int | None, pairs: list[LossDispersionPair] | None = None) -> ClientPartition:
    """Map each client to its most responsible component, then components to sets."""
    comp = np.argmax(gmm.responsibilities, axis=1)
    loss_mean, disp_mean = gmm.means[:, 0], gmm.means[:, 1]
    if noisy_component is None:
        merged = int(np.argmax(loss_mean))
        rest = [j for j in range(3) if j != merged]
    else:
        merged = None
        rest = [j for j in range(3) if j != noisy_component]
    a, b = rest
    if (disp_mean[a], -loss_mean[a]) >= (disp_mean[b], -loss_mean[b]):
        common, rare = a, b
    else:
        common, rare = b, a
    role = {common: "c", rare: "r"}
    if noisy_component is not None:
        role[noisy_component] = "n"
    else:
        role[merged] = "r"
    sets: dict[str, set[int]] = {"c": set(), "r": set(), "n": set()}
    for k, j in enumerate(comp):
        sets[role[int(j)]].add(k)
    return ClientPartition(frozenset(sets["c"]), frozenset(sets["r"]), frozenset(sets["n"]))


def fallback_partition(num_clients: int) -> ClientPartition:
    """Everyone trusted: used when the GMM cannot be fitted."""
    return ClientPartition(frozenset(range(num_clients)), frozenset(), frozenset())


def smooth_identification(state: SmoothingState, partition: ClientPartition) -> tuple[ClientPartition, SmoothingState]:
    k = state.scores.shape[0]
    flagged = np.array([i in partition.s_noisy for i in range(k)], dtype=np.float64)
    scores = state.decay * state.scores + (1.0 - state.decay) * flagged
    noisy = {i for i in range(k) if scores[i] >= state.threshold}
    # Flagged-but-not-yet-noisy clients are parked in S_r so they never feed the tau statistic.
    common = {i for i in range(k) if i not in noisy and i in partition.s_common}
    rare = {i for i in range(k) if i not in noisy and i not in partition.s_common}
    new_state = SmoothingState(scores, state.decay, state.threshold)
    return ClientPartition(frozenset(common), frozenset(rare), frozenset(noisy)), new_state


# ---------------------------------------------------------------- diagnostics

ANALYSIS_COLUMNS = [
    "round", "client", "loss", "dispersion", "resp_0", "resp_1", "resp_2", "assigned_set", "effective_set",
]


def write_analysis_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ANALYSIS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
