import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpca.synth_data import (
    ConfigError,
    ScenarioConfig,
    build_scenario,
    class_means,
    corrupt,
    flip_labels,
    generate_base,
    partition_dirichlet,
    round_half_up,
)


def small(**kw):
    base = dict(num_clients=10, samples_per_client=40, test_samples=60)
    base.update(kw)
    return ScenarioConfig(**base)


def test_round_half_up():
    assert [round_half_up(v) for v in (0.5, 1.5, 2.5, 2.4999, 4.0)] == [1, 2, 3, 2, 4]


@pytest.mark.parametrize("c,d", [(2, 2), (3, 10), (5, 4), (4, 3)])
def test_class_means_pairwise_distance_six(c, d):
    m = class_means(c, d)
    for i, j in itertools.combinations(range(c), 2):
        assert np.linalg.norm(m[i] - m[j]) == pytest.approx(6.0, abs=1e-12)


def test_class_means_needs_room():
    with pytest.raises(ConfigError):
        class_means(5, 3)


def test_generate_base_one_per_class():
    _, y = generate_base(4, 3, 4, seed=7)
    assert sorted(y.tolist()) == [0, 1, 2, 3]


def test_generate_base_deterministic():
    a = generate_base(3, 5, 50, seed=11)
    b = generate_base(3, 5, 50, seed=11)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_generate_base_linearly_separable():
    x, y = generate_base(2, 2, 10000, seed=3)
    tr, te = slice(0, 5000), slice(5000, None)
    design = np.column_stack([x, np.ones(len(x))])
    coef, *_ = np.linalg.lstsq(design[tr], 2.0 * y[tr] - 1.0, rcond=None)
    pred = (design[te] @ coef > 0).astype(int)
    assert np.mean(pred == y[te]) > 0.99


def test_corrupt_identity_and_determinism():
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(corrupt(x, 0.0, seed=1), x)
    assert corrupt(x, 2.0, seed=5).tobytes() == corrupt(x, 2.0, seed=5).tobytes()


def test_corrupt_variance():
    x = np.zeros((1000, 100))
    delta = corrupt(x, 2.0, seed=9) - x
    assert abs(delta.var() / 4.0 - 1.0) < 0.05


def test_flip_labels_examples():
    y = np.arange(100) % 3
    np.testing.assert_array_equal(flip_labels(y, 0.0, 3, seed=1), y)
    assert np.all(flip_labels(y, 1.0, 3, seed=1) != y)
    assert int(np.sum(flip_labels(y, 0.5, 3, seed=1) != y)) == 50


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.floats(0, 1), st.integers(2, 6), st.integers(0, 2**31))
def test_flip_labels_count_and_never_self(n, eta, c, seed):
    y = np.random.default_rng(seed).integers(0, c, size=n)
    out = flip_labels(y, eta, c, seed)
    assert int(np.sum(out != y)) == round_half_up(eta * n)
    assert out.min() >= 0 and out.max() < c


def test_dirichlet_large_beta_matches_global():
    _, y = generate_base(3, 2, 30000, seed=2)
    parts = partition_dirichlet(y, 5, 1e6, seed=4)
    glob = np.bincount(y, minlength=3) / len(y)
    for p in parts:
        local = np.bincount(y[p], minlength=3) / len(p)
        assert np.max(np.abs(local - glob)) < 0.02


def test_dirichlet_single_client_and_determinism():
    y = np.arange(30) % 3
    (only,) = partition_dirichlet(y, 1, 0.5, seed=0)
    np.testing.assert_array_equal(only, np.arange(30))
    a = partition_dirichlet(y, 4, 2.0, seed=8)
    b = partition_dirichlet(y, 4, 2.0, seed=8)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.floats(0.3, 20.0), st.integers(0, 2**31))
def test_dirichlet_disjoint_cover_and_retry_guarantee(k, beta, seed):
    y = np.arange(600) % 3
    try:
        parts = partition_dirichlet(y, k, beta, seed)
    except ConfigError:
        return
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(600))
    for p in parts:
        assert len(p) >= 3 and len(np.unique(y[p])) >= 2


def test_dirichlet_exhausted_retries():
    y = np.arange(6) % 3
    with pytest.raises(ConfigError):
        partition_dirichlet(y, 6, 0.01, seed=0)


def test_reference_scenario_layout():
    cfg = ScenarioConfig(test_samples=300)
    clients, tests = build_scenario(cfg)
    tags = [c.distribution_tag for c in clients]
    noisy = [k for k, c in enumerate(clients) if c.truly_mislabeled]
    rare = [k for k, t in enumerate(tags) if t == "rare"]
    assert len(noisy) == 4 and len(rare) == 4
    assert all(tags[k] == "common" for k in noisy)
    for k in noisy:
        assert np.all(clients[k].observed_labels != clients[k].true_labels)
    for k in rare:
        np.testing.assert_array_equal(clients[k].observed_labels, clients[k].true_labels)
    assert tests.common_features.shape == (300, 10) and tests.rare_labels.shape == (300,)


def test_no_noise_when_rho_zero():
    clients, _ = build_scenario(small(rho=0.0))
    assert not any(c.truly_mislabeled for c in clients)


def test_mixed_rare_counts():
    alphas = [0.8, 0.6, 0.4, 0.2, 0.0]
    clients, _ = build_scenario(small(num_clients=8, partition="mixed", mixed_alphas=alphas, rho=0.0))
    mixed = clients[-5:]
    for a, c in zip(alphas, mixed):
        assert c.distribution_tag.startswith("mixed")
        assert int(c.rare_mask.sum()) == round_half_up((1 - a) * c.size)


def test_too_many_mislabeled_common_clients():
    with pytest.raises(ConfigError):
        build_scenario(small(num_clients=5, rare_client_fraction=0.6, rho=0.6))


def test_uniform_placement_may_hit_rare():
    clients, _ = build_scenario(small(num_clients=10, rho=0.5, noise_placement="uniform", seed=3))
    assert sum(c.truly_mislabeled for c in clients) == 5


@pytest.mark.parametrize("partition", ["iid", "dirichlet"])
def test_mislabeled_flag_matches_flipping(partition):
    clients, _ = build_scenario(small(partition=partition, rho=0.3, eta=0.5))
    for c in clients:
        assert c.truly_mislabeled == bool(np.any(c.observed_labels != c.true_labels))


def test_build_is_pure():
    a, ta = build_scenario(small(partition="dirichlet", seed=5))
    b, tb = build_scenario(small(partition="dirichlet", seed=5))
    for u, v in zip(a, b):
        assert u.features.tobytes() == v.features.tobytes()
        assert u.observed_labels.tobytes() == v.observed_labels.tobytes()
    assert ta.rare_features.tobytes() == tb.rare_features.tobytes()


@pytest.mark.parametrize(
    "kw",
    [dict(rho=1.5), dict(eta=-0.1), dict(num_clients=2), dict(partition="zipf"), dict(dirichlet_beta=0.0),
     dict(partition="mixed"), dict(noise_placement="rare_only"), dict(mixed_alphas=[1.2])],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw)


def test_config_yaml_round_trip(tmp_path):
    cfg = ScenarioConfig(partition="mixed", mixed_alphas=[0.5, 0.0], seed=4)
    cfg.save(tmp_path / "s.yaml")
    back = ScenarioConfig.load(tmp_path / "s.yaml")
    assert back == cfg and back.scenario_hash() == cfg.scenario_hash()
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"bogus": 1})
