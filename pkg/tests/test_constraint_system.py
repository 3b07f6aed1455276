import pytest

from maskproof.constraint_system import (ConstraintSystem, Proof, ReferenceBackend, StoredCircuit, Witness,
                                         circuit_digest, constraint_count, first_unsatisfied, gadget_and,
                                         gadget_bit_decompose, gadget_bool, gadget_is_zero, gadget_leq, gadget_not,
                                         gadget_or, gadget_select, gadget_truncate, gadget_xor, is_satisfied)
from maskproof.errors import LengthMismatch, RangeOverflow, Unsatisfiable
from maskproof.fixed_point import BN254_SCALAR_FIELD

P = BN254_SCALAR_FIELD


def build_sum_times(values=None):
    """e = (a + b) * c with e public"""
    cs = ConstraintSystem(values=values is not None)
    e = cs.alloc_public(values and values[3])
    a = cs.alloc(values and (lambda: values[0]))
    b = cs.alloc(values and (lambda: values[1]))
    c = cs.alloc(values and (lambda: values[2]))
    cs.enforce(a + b, c, e)
    return cs.finalize()


def test_single_constraint_circuit():
    structure = build_sum_times()
    assert constraint_count(structure) == 1
    assert structure.num_public == 1
    assert structure.num_vars == 5

    good = Witness((1, 9, 1, 2, 3))
    assert is_satisfied(structure, good)
    assert first_unsatisfied(structure, good.with_value(1, 10)) == 0


def test_witness_mode_matches_structure():
    witness = build_sum_times((1, 2, 3, 9)).witness()
    assert witness.assignments == (1, 9, 1, 2, 3)
    assert witness.public_inputs(1) == (9,)


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        first_unsatisfied(build_sum_times(), Witness((1, 9, 1, 2)))
    with pytest.raises(ValueError):
        Witness((2, 9, 1, 2, 3))


def test_digest_is_structural():
    assert circuit_digest(build_sum_times()) == circuit_digest(build_sum_times((1, 2, 3, 9)))


def _checked():
    return ConstraintSystem(values=True, check=True)


def test_bit_decompose_and_overflow():
    cs = _checked()
    v = cs.alloc(lambda: 13)
    bits = gadget_bit_decompose(cs, v, 4)
    assert [cs.eval(b) for b in bits] == [1, 0, 1, 1]
    with pytest.raises(Unsatisfiable):
        gadget_bit_decompose(cs, v, 3)


def test_leq_flags():
    cs = _checked()
    a, b = cs.alloc(lambda: 7), cs.alloc(lambda: 9)
    assert cs.eval(gadget_leq(cs, a, b, 8)) == 1
    assert cs.eval(gadget_leq(cs, b, a, 8)) == 0
    assert cs.eval(gadget_leq(cs, a, a, 8)) == 1
    with pytest.raises(RangeOverflow):
        gadget_leq(cs, cs.alloc(lambda: 300), b, 8)


def test_boolean_gadgets():
    cs = _checked()
    assert cs.eval(gadget_is_zero(cs, cs.alloc(lambda: 0))) == 1
    assert cs.eval(gadget_is_zero(cs, cs.alloc(lambda: 5))) == 0
    one, zero = cs.alloc(lambda: 1), cs.alloc(lambda: 0)
    assert cs.eval(gadget_xor(cs, one, zero)) == 1
    assert cs.eval(gadget_xor(cs, one, one)) == 0
    assert cs.eval(gadget_and(cs, one, zero)) == 0
    assert cs.eval(gadget_or(cs, one, zero)) == 1
    assert cs.eval(gadget_or(cs, zero, zero)) == 0
    assert cs.eval(gadget_not(zero)) == 1
    gadget_bool(cs, one)
    with pytest.raises(Unsatisfiable):
        gadget_bool(cs, cs.alloc(lambda: 2))


def test_truncate_floors_signed_values():
    cs = _checked()
    q = gadget_truncate(cs, cs.alloc(lambda: -1), 16, 64)
    assert cs.signed(q) == -1
    q = gadget_truncate(cs, cs.alloc(lambda: 3 * 65536 + 5), 16, 64)
    assert cs.signed(q) == 3


def test_select_picks_indexed_item():
    cs = _checked()
    items = [cs.alloc(lambda k=k: 10 + k) for k in range(5)]
    index = cs.alloc(lambda: 3)
    bits = gadget_bit_decompose(cs, index, 3)
    assert cs.eval(gadget_select(cs, items, bits)) == 13


def test_reference_backend_round_trip():
    backend = ReferenceBackend()
    circuit = StoredCircuit(build_sum_times())
    _, vk = backend.setup(circuit)
    witness = build_sum_times((1, 2, 3, 9)).witness()
    proof = backend.prove(circuit, witness)
    assert backend.verify(vk, (9,), proof)
    assert not backend.verify(vk, (10,), proof)
    assert Proof.from_bytes(proof.to_bytes()) == proof

    with pytest.raises(Unsatisfiable):
        backend.prove(circuit, witness.with_value(1, 10))


def test_reference_backend_rejects_foreign_digest():
    backend = ReferenceBackend()
    circuit = StoredCircuit(build_sum_times())
    _, vk = backend.setup(circuit)
    proof = backend.prove(circuit, build_sum_times((1, 2, 3, 9)).witness())
    forged = Proof(proof.scheme, "00" * 32, proof.public_inputs, proof.payload)
    assert not backend.verify(vk, (9,), forged)


def test_witness_serialization():
    witness = Witness((1, P - 1, 0, 42))
    assert Witness.from_bytes(witness.to_bytes()) == witness
