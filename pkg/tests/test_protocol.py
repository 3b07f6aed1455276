import copy
import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_owners, make_settings, start_session
from maskproof.errors import BadSignature, DimMismatch, RoundSkew, SlotOverflow, UnknownOwner
from maskproof.fixed_point import FIELD_BYTES
from maskproof.masking import BitMatrix, MaskKind, UnlearningRequest
from maskproof.protocol import Trainer, Transcript, open_backend, verify_transcript
from maskproof.training import ModelParams, ModelShape, encode_eta, fixed_step

PRIVATE_KEYS = {"labels", "masks", "bits", "removal", "n_hat", "witness"}


def drop_row(owner, settings, row, round=1, session_id=None):
    bits = [[1]] * owner.dataset.n_rows
    bits[row] = [0]
    return owner.request(session_id, round, {MaskKind.SAMPLE: bits}, settings)


@pytest.fixture
def msgd_round(tmp_path, regression_data):
    """One MSGD round in which owner-0 unlearns its second row"""
    settings = make_settings(tmp_path, optimizer="msgd")
    trainer, owners = start_session(settings, regression_data)
    trainer.submit_request(drop_row(owners["owner-0"], settings, 1, session_id=trainer.session.session_id))
    rt = trainer.run_round()
    return trainer, rt


def tampered(transcript, **round_updates):
    rounds = dict(transcript.rounds)
    rounds[1] = replace(rounds[1], **round_updates)
    return Transcript(transcript.header, transcript.log, rounds)


def test_session_id_is_deterministic(tmp_path, regression_data):
    first, _ = start_session(make_settings(tmp_path / "a"), regression_data)
    second, _ = start_session(make_settings(tmp_path / "b"), regression_data)
    assert first.session.session_id == second.session.session_id
    assert first.transcript.header.dataset == second.transcript.header.dataset
    third, _ = start_session(make_settings(tmp_path / "c", seed=8), regression_data)
    assert third.session.session_id != first.session.session_id


def test_request_admission(lr_session):
    trainer, owners = lr_session
    sid = trainer.session.session_id
    settings = trainer.settings
    with pytest.raises(UnknownOwner):
        trainer.submit_request(UnlearningRequest("owner-9", 1))
    with pytest.raises(RoundSkew):
        trainer.submit_request(drop_row(owners["owner-0"], settings, 0, round=2, session_id=sid))
    short = UnlearningRequest("owner-0", 1, {MaskKind.SAMPLE: BitMatrix(MaskKind.SAMPLE, [[1], [0]], 1)})
    with pytest.raises(DimMismatch):
        trainer.submit_request(short)
    forged = replace(drop_row(owners["owner-0"], settings, 0, session_id=sid), signature=b"\x00" * 64)
    with pytest.raises(BadSignature):
        trainer.submit_request(forged)
    # signed by owner-0 but filed under owner-1
    stolen = replace(drop_row(owners["owner-0"], settings, 0, session_id=sid), owner_id="owner-1")
    with pytest.raises(BadSignature):
        trainer.submit_request(stolen)
    pending = trainer.submit_request(drop_row(owners["owner-1"], settings, 3, session_id=sid))
    assert list(pending) == ["owner-1"]


def test_bgd_round_without_requests_verifies(lr_session):
    trainer, _ = lr_session
    rt = trainer.run_round("bgd")
    assert len(rt.steps) == 1 and not rt.fads and not rt.schedules
    assert rt.steps[0].indices == list(range(8))
    ok, report = verify_transcript(trainer.transcript, trainer.backend)
    assert ok, report
    assert report.checked[-1] == "model chain"


def test_bgd_removal_equals_retraining_without_the_row(tmp_path, regression_data, rng):
    settings = make_settings(tmp_path, optimizer="bgd")
    trainer = Trainer(settings)
    owners = make_owners(regression_data)
    initial = ModelParams.random(ModelShape("lr", 2), rng)
    trainer.init_session(owners, initial)
    trainer.submit_request(drop_row(owners[1], settings, 2, session_id=trainer.session.session_id))
    trainer.run_round()

    kept = [i for i in range(8) if i != 6]
    reduced = fixed_step(initial.encode(), regression_data.features[kept], regression_data.labels[kept],
                         encode_eta(0.1))
    assert trainer.params.flatten().tolist() == reduced.params_out.flatten().tolist()
    assert trainer.state.survivors().tolist() == [1, 1, 1, 1, 1, 1, 0, 1]
    assert verify_transcript(trainer.transcript, trainer.backend)[0]


def test_msgd_round_with_removal_verifies(msgd_round):
    trainer, rt = msgd_round
    assert len(rt.schedules) == 1
    assert len(rt.steps) == 2 and len(rt.fads) == 2
    assert all(len(f.flags) == len(f.indices) == 4 for f in rt.fads)
    assert sorted(i for s in rt.steps for i in s.indices) == list(range(8))
    ok, report = verify_transcript(trainer.transcript, trainer.backend,
                                   {"dataset": trainer.transcript.header.dataset.root,
                                    "model": rt.record.models[-1]})
    assert ok, report


def test_transcript_on_disk_verifies_with_auditor_backend(msgd_round):
    trainer, _ = msgd_round
    settings = trainer.settings
    transcript = Transcript.load(settings.resolved_transcript_dir)
    backend = open_backend(settings, transcript.header.session_id)
    assert verify_transcript(transcript, backend)[0]
    ok, report = verify_transcript(transcript, backend, {"model": hex(12345)})
    assert not ok and report.locus == "public"


def test_tampered_schedule_is_rejected(msgd_round):
    trainer, rt = msgd_round
    schedules = copy.deepcopy(rt.schedules)
    batches = schedules[0]["minibatches"]
    batches[0][0], batches[1][0] = batches[1][0], batches[0][0]
    ok, report = verify_transcript(tampered(trainer.transcript, schedules=schedules), trainer.backend)
    assert not ok
    assert report.locus == "round-1/schedule.bin/epoch-0"


def test_tampered_learning_rate_is_rejected(msgd_round):
    trainer, rt = msgd_round
    steps = [rt.steps[0].model_copy(update={"eta": rt.steps[0].eta + 1})] + rt.steps[1:]
    ok, report = verify_transcript(tampered(trainer.transcript, steps=steps), trainer.backend)
    assert not ok
    assert report.locus == "round-1/step-0.proof"


def test_tampered_proof_is_rejected(msgd_round):
    trainer, rt = msgd_round
    proof = rt.fads[1].proof
    flipped = proof[:-2] + ("00" if proof[-2:] != "00" else "01")
    fads = rt.fads[:1] + [rt.fads[1].model_copy(update={"proof": flipped})]
    ok, report = verify_transcript(tampered(trainer.transcript, fads=fads), trainer.backend)
    assert not ok
    assert report.locus == "round-1/fad-1.proof"


def test_flipped_detection_flag_is_rejected(msgd_round):
    trainer, rt = msgd_round
    fad = rt.fads[0]
    flags = [1 - v for v in fad.flags]
    fads = [fad.model_copy(update={"flags": flags})] + rt.fads[1:]
    ok, report = verify_transcript(tampered(trainer.transcript, fads=fads), trainer.backend)
    assert not ok
    assert report.locus == "round-1/fad-0.proof"


def test_tampered_request_signature_is_rejected(msgd_round):
    trainer, rt = msgd_round
    requests = list(rt.record.requests)
    requests[0] = requests[0].model_copy(update={"signature": "ab" * 64})
    record = rt.record.model_copy(update={"requests": requests})
    ok, report = verify_transcript(tampered(trainer.transcript, record=record), trainer.backend)
    assert not ok
    assert report.locus == "commitments.json/round-1/owner-0"


def test_missing_step_is_rejected(msgd_round):
    trainer, rt = msgd_round
    ok, report = verify_transcript(tampered(trainer.transcript, steps=rt.steps[:1], fads=rt.fads[:1]),
                                   trainer.backend)
    assert not ok
    assert report.locus == "round-1/steps"


def test_foreign_circuit_digest_is_rejected(msgd_round):
    trainer, rt = msgd_round
    steps = [rt.steps[0].model_copy(update={"circuit": rt.fads[0].circuit})] + rt.steps[1:]
    ok, report = verify_transcript(tampered(trainer.transcript, steps=steps), trainer.backend)
    assert not ok
    assert report.locus == "round-1/step-0.proof"


def test_transcript_leaks_no_private_data(msgd_round):
    trainer, _ = msgd_round
    root = trainer.settings.resolved_transcript_dir
    found = set()

    def keys(node):
        if isinstance(node, dict):
            for k, v in node.items():
                found.add(k)
                keys(v)
        elif isinstance(node, list):
            for v in node:
                keys(v)

    files = [p for p in root.rglob("*") if p.is_file()]
    assert files
    for path in files:
        data = path.read_bytes()
        # binary records carry a 10-byte frame before their JSON body
        keys(json.loads(data if path.suffix == ".json" else data[10:]))
    assert not found & PRIVATE_KEYS
    assert trainer.vault.get_json("dataset", "rows") is not None


def field_encodings(value, p):
    v = int(value) % p
    return [f'"{hex(v)}"'.encode(), v.to_bytes(FIELD_BYTES, "little").hex().encode()]


def test_transcript_bytes_hold_no_rows_or_mask_words(msgd_round):
    trainer, _ = msgd_round
    p = trainer.settings.modulus
    ds = trainer.dataset
    secrets = [v for v in list(ds.features.ravel()) + list(ds.labels.ravel()) if abs(int(v)) >= 256]
    secrets += [w for w in trainer.state.words() if w >= 256]
    assert secrets
    blobs = [path.read_bytes() for path in trainer.settings.resolved_transcript_dir.rglob("*") if path.is_file()]
    for value in secrets:
        for needle in field_encodings(value, p):
            assert not any(needle in blob for blob in blobs), hex(int(value) % p)


def unlearn_rows(tmp_path, regression_data, rows):
    settings = make_settings(tmp_path, optimizer="msgd")
    trainer, owners = start_session(settings, regression_data)
    bits = [[1]] * 4
    for row in rows:
        bits[row] = [0]
    owner = owners["owner-0"]
    trainer.submit_request(owner.request(trainer.session.session_id, 1, {MaskKind.SAMPLE: bits}, settings))
    return trainer, trainer.run_round()


def test_detection_proofs_do_not_depend_on_the_unlearned_count(tmp_path, regression_data):
    one, rt_one = unlearn_rows(tmp_path / "one", regression_data, [1])
    two, rt_two = unlearn_rows(tmp_path / "two", regression_data, [1, 2])
    assert int((two.state.survivors() == 0).sum()) == 2
    circuits = [sorted((c.key, c.digest) for c in t.transcript.header.circuits) for t in (one, two)]
    assert circuits[0] == circuits[1]
    assert [(f.circuit, len(f.flags)) for f in rt_one.fads] == [(f.circuit, len(f.flags)) for f in rt_two.fads]
    for trainer in (one, two):
        for path in trainer.settings.resolved_transcript_dir.rglob("*"):
            if path.is_file():
                assert b"unlearned" not in path.read_bytes()
        assert verify_transcript(trainer.transcript, trainer.backend)[0]


def test_detection_capacity_is_checked_before_the_state_moves(tmp_path, regression_data):
    settings = make_settings(tmp_path, optimizer="msgd", fad_slots=1)
    trainer, owners = start_session(settings, regression_data)
    bits = [[0], [0], [1], [1]]
    trainer.submit_request(owners["owner-0"].request(trainer.session.session_id, 1, {MaskKind.SAMPLE: bits},
                                                     settings))
    with pytest.raises(SlotOverflow):
        trainer.run_round()
    assert trainer.state.survivors().tolist() == [1] * 8
    assert trainer.session.round == 0
    # full-batch rounds carry no detection proof, so the capacity does not apply
    trainer.run_round("bgd")
    assert trainer.state.survivors().tolist() == [0, 0, 1, 1, 1, 1, 1, 1]


def test_resume_continues_the_session(msgd_round):
    trainer, _ = msgd_round
    resumed = Trainer.resume(trainer.settings)
    assert resumed.session.session_id == trainer.session.session_id
    assert resumed.session.round == 1
    assert resumed.params.flatten().tolist() == trainer.params.flatten().tolist()
    np.testing.assert_array_equal(resumed.state.removal.bits, trainer.state.removal.bits)
    resumed.run_round("bgd")
    ok, report = verify_transcript(resumed.transcript, resumed.backend)
    assert ok, report
    assert sorted(resumed.transcript.rounds) == [1, 2]


def test_three_round_nn_session(tmp_path, classification_data):
    settings = make_settings(tmp_path, model="nn", hidden=2, classes=2, optimizer="bgd")
    trainer, owners = start_session(settings, classification_data)
    sid = trainer.session.session_id

    trainer.submit_request(owners["owner-0"].request(sid, 1, {MaskKind.FEATURE: [[1, 0], [1, 1], [1, 1], [1, 1]]},
                                                     settings))
    trainer.run_round()
    trainer.submit_request(drop_row(owners["owner-1"], settings, 0, round=2, session_id=sid))
    trainer.run_round()
    flips = [[0, 0], [0, 1], [0, 0], [0, 0]]
    trainer.submit_request(owners["owner-0"].request(sid, 3, {MaskKind.CLASS: flips}, settings))
    trainer.run_round()

    assert trainer.state.survivors().tolist() == [1, 1, 1, 1, 0, 1, 1, 1]
    assert trainer.state.removal.bits[0].tolist() == [1, 0]
    assert trainer.state.classes.bits[1].tolist() == [0, 1]
    ok, report = verify_transcript(trainer.transcript, trainer.backend)
    assert ok, report
    assert len(trainer.transcript.rounds) == 3
