"""Synthetic decentralized data: common/rare clients, label noise, partitions.

Every sample is drawn from one of ``C`` unit-variance Gaussian clusters whose
means sit on a regular simplex with pairwise distance 6. Rare data is the
same draw with extra Gaussian feature corruption. All generators are pure
functions of their arguments and an integer seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

MEAN_SEPARATION = 6.0
DIRICHLET_RETRIES = 100

# Stream tags keep the per-purpose RNGs of a scenario independent.
_COMMON, _RARE_NOISE, _FLIP, _DIRICHLET, _TEST_COMMON, _TEST_RARE, _MIX = range(7)


class ConfigError(ValueError):
    """Invalid or unsatisfiable scenario configuration."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass(frozen=True)
class ScenarioConfig:
    num_clients: int = 20
    num_classes: int = 3
    input_dim: int = 10
    samples_per_client: int = 200
    rare_client_fraction: float = 0.2
    corruption_sigma: float = 2.0
    rho: float = 0.2
    eta: float = 1.0
    partition: str = "iid"  # iid | dirichlet | mixed
    dirichlet_beta: float = 2.0
    mixed_alphas: tuple[float, ...] = ()
    noise_placement: str = "common_only"  # common_only | uniform
    test_samples: int = 20000
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mixed_alphas", tuple(float(a) for a in self.mixed_alphas))
        self.validate()

    def validate(self) -> None:
        if self.num_clients < 3:
            raise ConfigError("num_clients must be >= 3")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < max(2, self.num_classes - 1):
            raise ConfigError("input_dim must be >= max(2, num_classes - 1)")
        if self.samples_per_client < 1:
            raise ConfigError("samples_per_client must be >= 1")
        if self.test_samples < self.num_classes:
            raise ConfigError("test_samples must be >= num_classes")
        for name in ("rare_client_fraction", "rho", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.corruption_sigma < 0:
            raise ConfigError("corruption_sigma must be nonnegative")
        if self.partition not in ("iid", "dirichlet", "mixed"):
            raise ConfigError(f"partition must be iid, dirichlet or mixed, got {self.partition!r}")
        if self.dirichlet_beta <= 0:
            raise ConfigError("dirichlet_beta must be > 0")
        if self.noise_placement not in ("common_only", "uniform"):
            raise ConfigError(f"noise_placement must be common_only or uniform, got {self.noise_placement!r}")
        if any(not 0.0 <= a <= 1.0 for a in self.mixed_alphas):
            raise ConfigError("mixed_alphas values must lie in [0, 1]")
        if self.partition == "mixed":
            if not self.mixed_alphas:
                raise ConfigError("mixed partition needs a nonempty mixed_alphas list")
            if len(self.mixed_alphas) > self.num_clients:
                raise ConfigError("more mixed_alphas than clients")

    @property
    def num_special(self) -> int:
        """Clients that hold rare (or, under ``mixed``, mixed) data."""
        if self.partition == "mixed":
            return len(self.mixed_alphas)
        return round_half_up(self.rare_client_fraction * self.num_clients)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixed_alphas"] = list(self.mixed_alphas)
        return d

    def scenario_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> ScenarioConfig:
        data = yaml.safe_load(Path(path).read_text())
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ClientDataset:
    features: np.ndarray
    observed_labels: np.ndarray
    true_labels: np.ndarray  # evaluation only
    distribution_tag: str  # "common", "rare" or "mixed(<alpha>)"
    truly_mislabeled: bool = False  # evaluation only
    rare_mask: np.ndarray = field(default=None)  # per-sample: drawn from the rare distribution

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        if n < 1 or self.observed_labels.shape != (n,) or self.true_labels.shape != (n,):
            raise ConfigError("client features and labels must have the same nonzero length")
        if self.rare_mask is None:
            self.rare_mask = np.full(n, self.distribution_tag == "rare")
        if not self.truly_mislabeled and not np.array_equal(self.observed_labels, self.true_labels):
            raise ConfigError("a clean client must have observed labels equal to true labels")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def is_common(self) -> bool:
        return self.distribution_tag == "common"


@dataclass
class TestSets:
    common_features: np.ndarray
    common_labels: np.ndarray
    rare_features: np.ndarray
    rare_labels: np.ndarray


def class_means(num_classes: int, input_dim: int) -> np.ndarray:
    """Regular simplex vertices in R^d with pairwise distance ``MEAN_SEPARATION``."""
    if input_dim < num_classes - 1:
        raise ConfigError("a simplex of C vertices needs input_dim >= C - 1")
    eye = np.eye(num_classes) * (MEAN_SEPARATION / math.sqrt(2.0))
    centred = eye - eye.mean(axis=0)
    # Rotate the (C-1)-dimensional affine hull onto the first coordinates.
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    coords = centred @ vt[: num_classes - 1].T
    out = np.zeros((num_classes, input_dim))
    out[:, : num_classes - 1] = coords
    return out


def generate_base(num_classes: int, input_dim: int, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced Gaussian cluster samples: ``n // C`` or ``n // C + 1`` per class."""
    if num_classes < 2 or input_dim < 2 or n < num_classes:
        raise ConfigError("generate_base needs C >= 2, d >= 2, n >= C")
    rng = make_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    means = class_means(num_classes, input_dim)
    features = means[labels] + rng.standard_normal((n, input_dim))
    return features, labels.astype(np.int64)


def corrupt(features: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ConfigError("sigma must be nonnegative")
    if sigma == 0:
        return features.copy()
    rng = make_rng(seed)
    return features + rng.normal(0.0, sigma, size=features.shape)


def flip_labels(labels: np.ndarray, eta: float, num_classes: int, seed: int) -> np.ndarray:
    """Flip exactly round(eta * N) labels, each to a uniformly chosen different class."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError("eta must lie in [0, 1]")
    out = np.asarray(labels, dtype=np.int64).copy()
    m = round_half_up(eta * out.shape[0])
    if m == 0:
        return out
    rng = make_rng(seed)
    idx = rng.choice(out.shape[0], size=m, replace=False)
    out[idx] = (out[idx] + rng.integers(1, num_classes, size=m)) % num_classes
    return out


def partition_dirichlet(labels: np.ndarray, num_clients: int, beta: float, seed: int) -> list[np.ndarray]:
    """Per-class Dir(beta) split of sample indices across clients.

    A client left with fewer than C samples or fewer than 2 classes triggers a
    redraw of the whole allocation, at most ``DIRICHLET_RETRIES`` times.
    """
    if beta <= 0:
        raise ConfigError("beta must be > 0")
    labels = np.asarray(labels)
    if num_clients == 1:
        return [np.arange(labels.shape[0])]
    classes = np.unique(labels)
    num_classes = classes.shape[0]
    rng = make_rng(seed)
    for _ in range(DIRICHLET_RETRIES):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(num_clients, beta))
            cuts = np.floor(np.cumsum(props)[:-1] * idx.shape[0]).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        parts = [np.sort(np.concatenate(b)) for b in buckets]
        if all(p.shape[0] >= num_classes and np.unique(labels[p]).shape[0] >= 2 for p in parts):
            return parts
    raise ConfigError(f"dirichlet partition failed after {DIRICHLET_RETRIES} draws")


def _mislabeled_clients(config: ScenarioConfig, tags: list[str]) -> list[int]:
    k_noisy = round_half_up(config.rho * config.num_clients)
    if k_noisy == 0:
        return []
    if config.noise_placement == "common_only":
        common = [k for k, t in enumerate(tags) if t == "common"]
        if k_noisy > len(common):
            raise ConfigError(
                f"rho={config.rho} asks for {k_noisy} mislabeled common clients but only {len(common)} exist"
            )
        return common[:k_noisy]
    rng = make_rng(config.seed, _FLIP, 10**6)
    return sorted(int(k) for k in rng.choice(config.num_clients, size=k_noisy, replace=False))


def build_scenario(config: ScenarioConfig) -> tuple[list[ClientDataset], TestSets]:
    """Build all client datasets plus clean and corrupted test sets.

    The special (rare or mixed) clients are the highest-indexed ones, so the
    lowest-indexed clients are always common.
    """
    config.validate()
    K, C, d, seed = config.num_clients, config.num_classes, config.input_dim, config.seed
    n_special = config.num_special
    first_special = K - n_special

    if config.partition == "dirichlet":
        pool_x, pool_y = generate_base(C, d, K * config.samples_per_client, make_seed(seed, _COMMON))
        parts = partition_dirichlet(pool_y, K, config.dirichlet_beta, make_seed(seed, _DIRICHLET))
        raw = [(pool_x[p], pool_y[p]) for p in parts]
    else:
        raw = [generate_base(C, d, config.samples_per_client, make_seed(seed, _COMMON, k)) for k in range(K)]

    tags: list[str] = []
    feats: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    for k, (x, _) in enumerate(raw):
        n = x.shape[0]
        if k < first_special:
            tags.append("common")
            feats.append(x)
            masks.append(np.zeros(n, dtype=bool))
        elif config.partition == "mixed":
            alpha = config.mixed_alphas[k - first_special]
            n_rare = round_half_up((1.0 - alpha) * n)
            mask = np.zeros(n, dtype=bool)
            mask[make_rng(seed, _MIX, k).choice(n, size=n_rare, replace=False)] = True
            x = x.copy()
            x[mask] = corrupt(x[mask], config.corruption_sigma, make_seed(seed, _RARE_NOISE, k))
            tags.append(f"mixed({alpha:g})")
            feats.append(x)
            masks.append(mask)
        else:
            tags.append("rare")
            feats.append(corrupt(x, config.corruption_sigma, make_seed(seed, _RARE_NOISE, k)))
            masks.append(np.ones(n, dtype=bool))

    noisy = set(_mislabeled_clients(config, tags)) if config.eta > 0 else set()
    clients = []
    for k, ((_, y), x, tag, mask) in enumerate(zip(raw, feats, tags, masks)):
        observed = flip_labels(y, config.eta, C, make_seed(seed, _FLIP, k)) if k in noisy else y.copy()
        clients.append(ClientDataset(x, observed, y.copy(), tag, k in noisy, mask))

    ct_x, ct_y = generate_base(C, d, config.test_samples, make_seed(seed, _TEST_COMMON))
    rt_x, rt_y = generate_base(C, d, config.test_samples, make_seed(seed, _TEST_RARE))
    rt_x = corrupt(rt_x, config.corruption_sigma, make_seed(seed, _TEST_RARE, 1))
    return clients, TestSets(ct_x, ct_y, rt_x, rt_y)


def make_seed(*key: int) -> int:
    """Collapse a key tuple into one 63-bit seed for the single-seed generators."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(2, np.uint64)[0] >> np.uint64(1))
