import pytest

from maskproof.commitments import (CHAIN_SCHEME, Commitment, OpeningPath, commit_packed, commit_vector,
                                   commitment_gadget, hash_field, hash_gadget, open_vector, verify_opening)
from maskproof.constraint_system import ConstraintSystem, is_satisfied
from maskproof.errors import EmptyVector, IndexOutOfRange

VALUES = [11, 22, 33, 44, 55]
R = 987654321


def test_hash_is_deterministic_and_input_sensitive():
    assert hash_field([1, 2]) == hash_field([1, 2])
    assert hash_field([1, 2]) != hash_field([2, 1])
    digests = {hash_field([x]) for x in range(100)}
    assert len(digests) == 100


def test_single_leaf_root_is_the_leaf():
    com = commit_vector([7], R)
    assert com.root == hash_field([7, R, 0])
    assert com.leaf_count == 1


def test_openings_verify():
    com = commit_vector(VALUES, R)
    for i, v in enumerate(VALUES):
        path = open_vector(VALUES, R, i)
        assert len(path.siblings) == 3
        assert verify_opening(com, i, v, R, path)


def test_openings_reject_wrong_data():
    com = commit_vector(VALUES, R)
    path = open_vector(VALUES, R, 2)
    assert not verify_opening(com, 2, VALUES[2] + 1, R, path)
    assert not verify_opening(com, 2, VALUES[2], R + 1, path)
    swapped = OpeningPath(2, tuple(reversed(path.siblings)))
    assert not verify_opening(com, 2, VALUES[2], R, swapped)
    assert not verify_opening(com, 3, VALUES[2], R, OpeningPath(3, path.siblings))
    with pytest.raises(IndexOutOfRange):
        verify_opening(com, 5, 0, R, path)


def test_randomness_changes_the_root():
    assert commit_vector(VALUES, R).root != commit_vector(VALUES, R + 1).root
    assert commit_packed(VALUES, R).root != commit_packed(VALUES, R + 1).root


def test_packed_commitment():
    com = commit_packed([1, 2, 3], 5)
    assert com.scheme == CHAIN_SCHEME
    assert com.root == hash_field([1, 2, 3, 5])
    assert Commitment.from_dict(com.to_dict()) == com


def test_empty_vector():
    with pytest.raises(EmptyVector):
        commit_vector([], R)
    with pytest.raises(EmptyVector):
        commit_packed([], R)


def _commitment_circuit(values, randomness, root):
    cs = ConstraintSystem(values=True)
    public = cs.alloc_public(root)
    inputs = [cs.alloc(lambda v=v: v) for v in values]
    r = cs.alloc(lambda: randomness)
    commitment_gadget(cs, public, inputs, r)
    cs.finalize()
    return cs, inputs


def test_commitment_gadget_accepts_honest_values():
    com = commit_vector(VALUES, R)
    cs, _ = _commitment_circuit(VALUES, R, com.root)
    assert is_satisfied(cs, cs.witness())


def test_commitment_gadget_rejects_perturbed_value():
    com = commit_vector(VALUES, R)
    cs, inputs = _commitment_circuit(VALUES, R, com.root)
    (index,) = inputs[1].terms
    witness = cs.witness()
    assert not is_satisfied(cs, witness.with_value(index, VALUES[1] + 1))


def test_hash_gadget_matches_native_hash():
    cs = ConstraintSystem(values=True, check=True)
    inputs = [cs.alloc(lambda v=v: v) for v in (3, 1, 4)]
    assert cs.eval(hash_gadget(cs, inputs)) == hash_field([3, 1, 4])
    # four constraints per round
    assert cs.count == 3 * 91 * 4
