import numpy as np
import pytest

from maskproof.circuits import (CircuitRegistry, FadRandomness, FadShape, MaskUpdateShape, StepRandomness, StepShape,
                                StepStatement, build_fad_circuit, build_lr_step_circuit, build_mask_update_circuit,
                                build_nn_step_circuit, fad_scaling, get_circuit, shape_from_dict, step_scaling,
                                synthesize_fad_witness, synthesize_mask_update_witness, synthesize_witness)
from maskproof.constraint_system import ReferenceBackend, circuit_digest, is_satisfied
from maskproof.errors import BadShape, EmptyEffectiveSet, SlotOverflow, Unsatisfiable
from maskproof.fixed_point import to_fixed
from maskproof.forgery_lab import detect_replicas, minibatch_flags
from maskproof.ingestion import plant_replica, synthetic_classification, synthetic_regression
from maskproof.masking import BitMatrix, MaskKind, MaskState, identity
from maskproof.training import ModelParams, ModelShape, encode_eta, fixed_step

LR2 = ModelShape("lr", 2)
RANDOMNESS = StepRandomness(dataset=11, model_in=22, model_out=33, state=44)
ETA = encode_eta(0.1)


@pytest.fixture
def four_rows():
    return synthetic_regression(4, 2, seed=1)


@pytest.fixture
def params(rng):
    return ModelParams.random(LR2, rng).encode()


def lr_state(bits):
    return MaskState.initial(4, 2, "feature").advance(BitMatrix(MaskKind.FEATURE, bits, 1))


PARTIAL = [[1, 1], [1, 0], [0, 0], [1, 1]]


def test_lr_step_witness_satisfies_and_matches_twin(four_rows, params):
    circuit = get_circuit(StepShape(LR2, 4, 4, "feature"))
    masks = lr_state(PARTIAL)
    witness = synthesize_witness(circuit, four_rows, masks, params, ETA, indices=[0, 1, 2, 3], randomness=RANDOMNESS)
    assert circuit.check(witness) is None

    publics = witness.public_inputs(circuit.num_public)
    trace = fixed_step(params, four_rows.features, four_rows.labels, ETA, removal_rows=masks.removal.bits.tolist())
    assert trace.n_hat == 3
    assert publics[0] == four_rows.commit(11).root
    assert publics[1] == params.commit(22).root
    assert publics[2] == trace.params_out.commit(33).root
    assert publics[3] == ETA
    assert publics[4] == masks.commit(44).root
    assert list(publics[5:]) == [0, 1, 2, 3]


def test_tampered_model_output_is_rejected(four_rows, params):
    circuit = get_circuit(StepShape(LR2, 4, 4, "feature"))
    witness = synthesize_witness(circuit, four_rows, lr_state(PARTIAL), params, ETA, indices=[0, 1, 2, 3],
                                 randomness=RANDOMNESS)
    model_out = witness.assignments[3]
    assert circuit.check(witness.with_value(3, model_out + 1)) is not None


def test_one_structure_serves_every_mask(four_rows, params):
    structure = build_lr_step_circuit(4, 2, "feature", dataset_size=4)
    circuit = get_circuit(StepShape(LR2, 4, 4, "feature"))
    assert circuit_digest(structure) == circuit.digest
    for bits in (PARTIAL, [[1, 1]] * 4, [[0, 1], [1, 0], [1, 1], [0, 0]]):
        witness = synthesize_witness(circuit, four_rows, lr_state(bits), params, ETA, indices=[3, 1, 0, 2],
                                     randomness=RANDOMNESS)
        assert is_satisfied(structure, witness)


def test_swapped_dataset_row_fails_the_statement(four_rows, params):
    circuit = get_circuit(StepShape(LR2, 4, 4, "feature"))
    backend = ReferenceBackend()
    _, vk = backend.setup(circuit)
    masks = lr_state(PARTIAL)
    forged = plant_replica(four_rows, source=0, target=2)
    witness = synthesize_witness(circuit, forged, masks, params, ETA, indices=[0, 1, 2, 3], randomness=RANDOMNESS)
    proof = backend.prove(circuit, witness)
    trace = fixed_step(params, forged.features, forged.labels, ETA, removal_rows=masks.removal.bits.tolist())
    statement = StepStatement(four_rows.commit(11).root, params.commit(22).root,
                              trace.params_out.commit(33).root, ETA, masks.commit(44).root, (0, 1, 2, 3))
    assert not backend.verify(vk, statement.public_inputs(), proof)


def test_empty_minibatch_guard(four_rows, params):
    circuit = get_circuit(StepShape(LR2, 2, 4, "feature"))
    masks = lr_state([[1, 1], [0, 0], [0, 0], [1, 1]])
    with pytest.raises(EmptyEffectiveSet):
        synthesize_witness(circuit, four_rows, masks, params, ETA, indices=[2, 1], randomness=RANDOMNESS)
    witness = synthesize_witness(circuit, four_rows, masks, params, ETA, indices=[2, 1], randomness=RANDOMNESS,
                                 allow_empty=True)
    assert circuit.check(witness) is None
    # nothing survives, so the model does not move
    assert witness.public_inputs(circuit.num_public)[2] == params.commit(33).root


def test_unmasked_circuit_takes_no_state(four_rows, params):
    circuit = get_circuit(StepShape(LR2, 4, 4, "none"))
    witness = synthesize_witness(circuit, four_rows, None, params, ETA, indices=[0, 1, 2, 3], randomness=RANDOMNESS)
    assert circuit.check(witness) is None
    with pytest.raises(BadShape):
        synthesize_witness(circuit, four_rows, lr_state(PARTIAL), params, ETA, indices=[0, 1, 2, 3])


def test_nn_step_with_class_correction(rng):
    data = synthetic_classification(4, 2, 2, seed=2)
    shape = ModelShape("nn", 2, 2, 2)
    params = ModelParams.random(shape, rng).encode()
    circuit = get_circuit(StepShape(shape, 4, 4, "feature", class_masked=True))
    flips = BitMatrix(MaskKind.CLASS, [[1, 0], [0, 0], [0, 1], [0, 0]], 1)
    masks = MaskState.initial(4, 2, "feature", class_width=2).advance(identity(MaskKind.FEATURE, 4, 2, 1), flips)
    witness = synthesize_witness(circuit, data, masks, params, ETA, indices=[0, 1, 2, 3], randomness=RANDOMNESS)
    assert circuit.check(witness) is None

    trace = fixed_step(params, data.features, data.labels, ETA, removal_rows=masks.removal.bits.tolist(),
                       class_rows=masks.classes.bits.tolist())
    assert witness.public_inputs(circuit.num_public)[2] == trace.params_out.commit(33).root
    uncorrected = fixed_step(params, data.features, data.labels, ETA)
    assert uncorrected.params_out.flatten().tolist() != trace.params_out.flatten().tolist()


BATCHES = (20, 30, 40, 50)


def test_masking_overhead_is_small_and_linear():
    report = step_scaling(ModelShape("lr", 4), BATCHES, 64, "feature")
    assert all(ratio <= 1.05 for ratio in report.overhead)
    assert report.r2 > 0.999


def test_nn_masking_overhead_is_small_and_linear():
    report = step_scaling(ModelShape("nn", 4, 4, 4), BATCHES, 64, "feature", class_masked=True)
    assert len(report.overhead) == 4
    assert all(1.0 < ratio <= 1.05 for ratio in report.overhead)
    assert report.r2 > 0.999


def test_fad_constraints_grow_linearly_in_the_batch():
    report = fad_scaling(ModelShape("lr", 4), BATCHES, 64)
    assert report.slope > 0
    assert report.r2 > 0.999
    assert report.counts == sorted(report.counts)


def test_fad_flags_planted_replica(rng):
    base = synthetic_regression(8, 2, seed=4)
    data = plant_replica(base, source=0, target=5)
    params = ModelParams.random(LR2, rng).encode()
    removal = np.ones((8, 2), dtype=np.uint8)
    removal[0] = 0
    masks = MaskState.initial(8, 2, "feature").advance(BitMatrix(MaskKind.FEATURE, removal, 1))
    batch = [1, 3, 5, 6]
    circuit = get_circuit(FadShape(LR2, 4, 8, xi=0))
    witness = synthesize_fad_witness(circuit, data, masks, params, indices=batch, unlearned=[0],
                                     randomness=FadRandomness(1, 2, 3))
    assert circuit.check(witness) is None
    flags = list(witness.public_inputs(circuit.num_public)[3 + len(batch):])
    assert flags == [0, 0, 1, 0]
    assert flags == minibatch_flags(data, batch, [0], 0, params, masks)


def unlearn(n_rows, rows):
    removal = np.ones((n_rows, 2), dtype=np.uint8)
    removal[list(rows)] = 0
    return MaskState.initial(n_rows, 2, "feature").advance(BitMatrix(MaskKind.FEATURE, removal, 1))


def test_fad_circuit_is_the_same_for_any_unlearned_count(rng):
    data = synthetic_regression(8, 2, seed=4)
    params = ModelParams.random(LR2, rng).encode()
    circuit = get_circuit(FadShape(LR2, 4, 8, xi=0, slots=3))
    assert "s3" in circuit.name and "slots" in circuit.shape.to_dict()
    public_counts = set()
    for rows in ([], [0], [0, 6], [0, 2, 6]):
        witness = synthesize_fad_witness(circuit, data, unlearn(8, rows), params, indices=[1, 3, 5, 7],
                                         unlearned=rows)
        assert circuit.check(witness) is None
        public_counts.add(len(witness.public_inputs(circuit.num_public)))
    assert public_counts == {3 + 4 + 4}


def test_fad_slots_must_cover_every_unlearned_row(rng):
    data = synthetic_regression(8, 2, seed=4)
    params = ModelParams.random(LR2, rng).encode()
    masks = unlearn(8, [0, 6])
    circuit = get_circuit(FadShape(LR2, 4, 8, xi=0, slots=2))
    # claiming a strict subset leaves the unlearned count unmatched
    with pytest.raises(Unsatisfiable):
        synthesize_fad_witness(circuit, data, masks, params, indices=[1, 3, 5, 7], unlearned=[0])
    with pytest.raises(SlotOverflow):
        synthesize_fad_witness(get_circuit(FadShape(LR2, 4, 8, xi=0, slots=1)), data, masks, params,
                               indices=[1, 3, 5, 7], unlearned=[0, 6])


def test_fad_flags_match_the_plain_detector_on_random_instances():
    rng = np.random.default_rng(99)
    ones = 0
    for trial in range(100):
        data = synthetic_regression(4, 2, seed=trial)
        removal = rng.integers(0, 2, size=(4, 2)).astype(np.uint8)
        rows = sorted(int(r) for r in rng.choice(4, size=int(rng.integers(0, 3)), replace=False))
        for r in range(4):
            if r in rows:
                removal[r] = 0
            elif not removal[r].any():
                removal[r, int(rng.integers(0, 2))] = 1
        batch = [int(i) for i in rng.choice(4, size=2, replace=False)]
        if rows and rng.random() < 0.5:
            target = batch[int(rng.integers(0, 2))]
            if target not in rows:
                data = plant_replica(data, rows[0], target)
                removal[target] = 1
        masks = MaskState.initial(4, 2, "feature").advance(BitMatrix(MaskKind.FEATURE, removal, 1))
        params = ModelParams.random(LR2, rng).encode()
        xi = float(rng.choice([0.0, 0.25, 1.0]))
        circuit = get_circuit(FadShape(LR2, 2, 4, xi=to_fixed(xi), slots=2))
        witness = synthesize_fad_witness(circuit, data, masks, params, indices=batch, unlearned=rows)
        flags = list(witness.public_inputs(circuit.num_public)[3 + len(batch):])
        expected = [0] * len(batch)
        for u in rows:
            expected = [a | b for a, b in zip(expected, detect_replicas(data, batch, u, xi, params, masks))]
        assert flags == expected, trial
        ones += sum(flags)
    assert ones > 0


def test_fad_requires_the_true_unlearned_set(rng):
    data = synthetic_regression(8, 2, seed=4)
    params = ModelParams.random(LR2, rng).encode()
    masks = MaskState.initial(8, 2, "feature").advance(identity(MaskKind.FEATURE, 8, 2, 1))
    circuit = get_circuit(FadShape(LR2, 4, 8, xi=0))
    # row 0 was never unlearned, so its survivor bit cannot be zero
    with pytest.raises(Unsatisfiable):
        synthesize_fad_witness(circuit, data, masks, params, indices=[1, 2, 3, 4], unlearned=[0])


def test_mask_update_circuit():
    shape = MaskUpdateShape((4, 4), 2)
    circuit = get_circuit(shape)
    prev = MaskState.initial(8, 2, "feature")
    owner_a = np.array([[1, 0], [1, 1], [1, 1], [0, 0]], dtype=np.uint8)
    owner_b = np.ones((4, 2), dtype=np.uint8)
    witness = synthesize_mask_update_witness(circuit, prev, [owner_a, owner_b], [5, 0], 0, 77)
    assert circuit.check(witness) is None

    expected = prev.advance(BitMatrix(MaskKind.FEATURE, np.vstack([owner_a, owner_b]), 1))
    publics = witness.public_inputs(circuit.num_public)
    assert publics[0] == prev.commit(0).root
    assert publics[1] == expected.commit(77).root
    assert circuit.check(witness.with_value(2, publics[1] + 1)) is not None


def test_shapes_serialize_and_registry_pins():
    shapes = [StepShape(LR2, 4, 8, "sample"), FadShape(LR2, 4, 8, xi=3, slots=2, granularity="sample"),
              MaskUpdateShape((3, 5), 1)]
    registry = CircuitRegistry()
    for shape in shapes:
        assert shape_from_dict(shape.to_dict()) == shape
        circuit = registry.pin(shape)
        assert registry.resolve(circuit.digest) is circuit
    rebuilt = CircuitRegistry.from_entries(registry.entries())
    assert [e["digest"] for e in rebuilt.entries()] == [e["digest"] for e in registry.entries()]


def test_bad_shapes():
    with pytest.raises(BadShape):
        StepShape(LR2, 9, 8)
    with pytest.raises(BadShape):
        StepShape(LR2, 4, 8, "feature", class_masked=True)
    with pytest.raises(BadShape):
        FadShape(LR2, 4, 8, xi=0, granularity="none")


def test_builders_share_the_cached_structures():
    nn = ModelShape("nn", 2, 2, 2)
    pairs = [
        (build_nn_step_circuit(4, 2, 2, 2, dataset_size=4), StepShape(nn, 4, 4, "feature", class_masked=True)),
        (build_fad_circuit(4, LR2, 0, dataset_size=8), FadShape(LR2, 4, 8, xi=0)),
        (build_mask_update_circuit((4, 4), 2), MaskUpdateShape((4, 4), 2)),
    ]
    for structure, shape in pairs:
        assert circuit_digest(structure) == get_circuit(shape).digest
