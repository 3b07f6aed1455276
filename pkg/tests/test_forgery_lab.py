import numpy as np
import pandas as pd
import pytest

from maskproof.errors import BadParams, NoCandidates, NoSameClassNeighbor
from maskproof.forgery_lab import (attack_neighbor_replacement, attack_random_sampling, collision_success_probability,
                                   detect_replicas, forging_advantage, search_space_sizes, write_draw_report)
from maskproof.ingestion import plant_replica, synthetic_regression
from maskproof.training import FixedDataset, ModelParams, ModelShape, grad_distance, masked_gradient

LR2 = ModelShape("lr", 2)


@pytest.mark.parametrize("size,forging,target", [
    (256, "2.7E+17", "5.8E+76"),
    (512, "3.1E+20", "6.7E+153"),
    (768, "1.8E+22", "7.8E+230"),
    (1024, "3.3E+23", "9.0E+307"),
])
def test_search_space_table(size, forging, target):
    report = search_space_sizes(size, 1, 10)
    assert report.forging_sci == forging
    assert report.target_sci == target


def test_vrf_restriction_shrinks_the_space():
    report = search_space_sizes(256, 1, 10)
    assert report.reduced == 26
    assert report.forging > 10 ** 17
    assert search_space_sizes(11, 1, 10).forging == 1
    for bad in ((10, 10, 1), (10, 1, 0), (10, 1, 10), (10, -1, 2)):
        with pytest.raises(BadParams):
            search_space_sizes(*bad)


def test_collision_probability():
    assert collision_success_probability(0.5, 2) == pytest.approx(0.75)
    assert collision_success_probability(1e-30, 1e10) == pytest.approx(1e-20, rel=1e-6)
    with pytest.raises(BadParams):
        collision_success_probability(0.0, 5)
    advantage = forging_advantage(1e-6, 256, 1, 10)
    assert advantage["restricted"] < advantage["unrestricted"]
    assert advantage["ratio"] > 1e15


@pytest.fixture
def planted(rng):
    # row 5 is an exact replica of the unlearned row 0
    data = plant_replica(synthetic_regression(8, 2, seed=9), source=0, target=5)
    return data, ModelParams.random(LR2, rng)


def test_random_sampling_finds_the_replica(planted):
    data, params = planted
    found = attack_random_sampling(data, [0], [0], 1, budget=60, rng=np.random.default_rng(0), params=params)
    assert found.candidate == (5,)
    assert found.epsilon == 0.0
    assert found.epsilon == min(found.draws)
    assert 0 not in found.candidate


def test_larger_budget_never_does_worse(planted):
    data, params = planted
    target = [0, 1, 2]
    small = attack_random_sampling(data, [0], target, 3, budget=5, rng=np.random.default_rng(7), params=params)
    large = attack_random_sampling(data, [0], target, 3, budget=40, rng=np.random.default_rng(7), params=params)
    assert large.draws[:5] == small.draws
    assert large.epsilon <= small.epsilon


def test_random_sampling_is_bounded_by_brute_force(planted):
    from itertools import combinations

    data, params = planted
    target = [0, 3]
    goal = masked_gradient(params, data.take(target)).flatten()
    best = min(grad_distance(masked_gradient(params, data.take(list(c))).flatten(), goal)
               for c in combinations(range(1, 8), 2))
    found = attack_random_sampling(data, [0], target, 2, budget=30, rng=np.random.default_rng(3), params=params)
    assert found.epsilon >= best - 1e-12


def test_random_sampling_guards(planted):
    data, params = planted
    with pytest.raises(BadParams):
        attack_random_sampling(data, [0], [1, 2], 2, budget=5, rng=np.random.default_rng(0), params=params)
    with pytest.raises(BadParams):
        attack_random_sampling(data, [0], [0], 2, budget=0, rng=np.random.default_rng(0), params=params)
    with pytest.raises(NoCandidates):
        attack_random_sampling(data, [0], [0], 8, budget=1, rng=np.random.default_rng(0), params=params)


def classes(x, labels):
    return FixedDataset.from_real(x, labels, "classification")


def test_neighbor_replacement_uses_the_duplicate(rng):
    data = classes([[0.0, 0.0], [2.0, 1.0], [0.0, 0.0], [3.0, 3.0]], [[1], [1], [1], [0]])
    params = ModelParams.random(ModelShape("nn", 2, 2, 1), rng)
    found = attack_neighbor_replacement(data, [0], [0, 3], params)
    assert found.candidate == (2, 3)
    assert found.epsilon == 0.0


def test_neighbor_ties_prefer_the_smaller_index(rng):
    data = classes([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]], [[1], [1], [1], [1]])
    params = ModelParams.random(ModelShape("nn", 2, 2, 1), rng)
    found = attack_neighbor_replacement(data, [0], [0, 3], params)
    assert found.candidate == (1, 3)


def test_neighbor_needs_a_same_class_survivor(rng):
    data = classes([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [[1], [0], [0]])
    with pytest.raises(NoSameClassNeighbor):
        attack_neighbor_replacement(data, [0], [0, 1], ModelParams.random(ModelShape("nn", 2, 2, 1), rng))


def test_detector_flags_replicas_only(planted):
    data, params = planted
    batch = [1, 2, 5, 6]
    fixed = detect_replicas(data, batch, 0, 0.0, params)
    assert fixed == [0, 0, 1, 0]
    assert detect_replicas(data, batch, 0, 0.0, params, representation="float") == fixed
    # a loose threshold flags everything
    assert detect_replicas(data, batch, 0, 1e6, params) == [1, 1, 1, 1]
    with pytest.raises(BadParams):
        detect_replicas(data, batch, 0, -1.0, params)
    with pytest.raises(BadParams):
        detect_replicas(data, batch, 0, 0.0, params, representation="decimal")


def test_draw_report(planted, tmp_path):
    data, params = planted
    found = attack_random_sampling(data, [0], [0, 1], 2, budget=12, rng=np.random.default_rng(2), params=params)
    frame = pd.read_csv(write_draw_report(found, tmp_path / "draws.csv"))
    assert list(frame.columns) == ["candidate_id", "epsilon"]
    assert len(frame) == 12
    assert frame["epsilon"].min() == pytest.approx(found.epsilon)
