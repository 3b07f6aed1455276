import numpy as np
import pytest

from maskproof.errors import BadBatchSize, MalformedKey, ZeroModulus
from maskproof.randomness import (EpochSchedule, VrfKeypair, derive_index, full_batch, minibatch_count, partition,
                                  sample_epoch, uniformity_pvalue, verify_epoch, vrf_eval, vrf_input, vrf_verify)

KEY = VrfKeypair.from_seed(b"vrf-test-key")
SESSION = "session-under-test"


@pytest.fixture(scope="module")
def schedule():
    return sample_epoch(KEY, SESSION, 3, 40, 6)


def test_vrf_is_deterministic_and_verifiable():
    mu = vrf_input(SESSION, 0, 0)
    first, second = vrf_eval(KEY, mu), vrf_eval(KEY, mu)
    assert first.value == second.value
    assert vrf_verify(KEY.public_key, mu, first.value, first.proof)
    assert not vrf_verify(KEY.public_key, mu, first.value + 1, first.proof)
    assert not vrf_verify(KEY.public_key, vrf_input(SESSION, 0, 1), first.value, first.proof)
    other = VrfKeypair.from_seed(b"another key")
    assert not vrf_verify(other.public_key, mu, first.value, first.proof)


def test_malformed_keys():
    with pytest.raises(MalformedKey):
        VrfKeypair(5, 7)
    with pytest.raises(MalformedKey):
        vrf_verify(1, b"mu", 0, vrf_eval(KEY, b"mu").proof)


def test_derive_index():
    assert derive_index(7, 5) == 2
    assert derive_index(123456789, 1) == 0
    with pytest.raises(ZeroModulus):
        derive_index(7, 0)


def test_minibatch_counts():
    assert minibatch_count(256, 10) == 26
    assert len(partition(range(256), 10)) == 26
    assert full_batch(3) == [[0, 1, 2]]
    with pytest.raises(BadBatchSize):
        partition(range(4), 0)


def test_epoch_is_a_permutation(schedule):
    assert sorted(schedule.order()) == list(range(40))
    assert schedule.count == minibatch_count(40, 6)
    assert [len(b) for b in schedule.minibatches] == [6] * 6 + [4]
    accepted = [d.index for d in schedule.draws if d.index is not None]
    assert accepted == schedule.order()


def test_epoch_replays(schedule):
    assert verify_epoch(KEY.public_key, SESSION, 3, schedule)
    assert EpochSchedule.from_bytes(schedule.to_bytes()) == schedule


def test_schedule_is_unique_per_epoch():
    again = sample_epoch(KEY, SESSION, 3, 12, 4)
    assert again == sample_epoch(KEY, SESSION, 3, 12, 4)
    assert again.order() != sample_epoch(KEY, SESSION, 4, 12, 4).order()


def test_tampered_schedules_fail(schedule):
    batches = [list(b) for b in schedule.minibatches]
    batches[0][0], batches[1][0] = batches[1][0], batches[0][0]
    assert not verify_epoch(KEY.public_key, SESSION, 3, schedule.model_copy(update={"minibatches": batches}))

    draws = list(schedule.draws)
    draws[2] = draws[2].model_copy(update={"value": hex(int(draws[2].value, 16) + 1)})
    assert not verify_epoch(KEY.public_key, SESSION, 3, schedule.model_copy(update={"draws": draws}))

    truncated = schedule.model_copy(update={"draws": schedule.draws[:-1]})
    assert not verify_epoch(KEY.public_key, SESSION, 3, truncated)

    assert not verify_epoch(KEY.public_key, SESSION, 4, schedule)
    assert not verify_epoch(VrfKeypair.from_seed(b"x").public_key, SESSION, 3, schedule)


def test_batch_size_bounds():
    with pytest.raises(BadBatchSize):
        sample_epoch(KEY, SESSION, 0, 5, 6)
    with pytest.raises(BadBatchSize):
        sample_epoch(KEY, SESSION, 0, 5, 0)


def test_uniformity_pvalue():
    assert uniformity_pvalue(np.tile(np.arange(10), 100), 10) == pytest.approx(1.0)
    assert uniformity_pvalue([0] * 900 + list(range(10)) * 10, 10) < 1e-6


def test_vrf_indices_look_uniform():
    values = [derive_index(vrf_eval(KEY, vrf_input(SESSION, 9, c)).value, 10) for c in range(3000)]
    assert uniformity_pvalue(values, 10) > 0.001
