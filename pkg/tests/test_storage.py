import pytest

from maskproof.errors import TranscriptFormatError
from maskproof.schemas import VerificationReport, canonical_json, pack_record, unpack_record
from maskproof.storage import TranscriptStore, Vault, VaultEscrow


@pytest.fixture
def database_url(tmp_path):
    return f"sqlite:///{tmp_path / 'vault.db'}"


def test_vault_round_trip(database_url):
    vault = Vault(database_url, "session-a", b"secret")
    vault.put("dataset", "features", b"\x00\x01")
    vault.put("dataset", "features", b"\x02")
    vault.put_json("masks", "round-1", {"bits": [1, 0]})
    assert vault.get("dataset", "features") == b"\x02"
    assert vault.get_json("masks", "round-1") == {"bits": [1, 0]}
    assert vault.get("dataset", "labels") is None
    assert vault.keys("dataset") == ["features"]


def test_vault_is_keyed_per_session(database_url):
    Vault(database_url, "session-a", b"secret").put("dataset", "features", b"private")
    assert Vault(database_url, "session-a", b"other secret").get("dataset", "features") is None
    assert Vault(database_url, "session-b", b"secret").get("dataset", "features") is None


def test_vault_stores_ciphertext(tmp_path, database_url):
    Vault(database_url, "session-a", b"secret").put("dataset", "features", b"plain-marker-bytes")
    assert b"plain-marker-bytes" not in (tmp_path / "vault.db").read_bytes()


def test_escrow(database_url):
    escrow = VaultEscrow(Vault(database_url, "s", b"k"))
    escrow.put(b"\xab\xcd", b"witness")
    assert escrow.get(b"\xab\xcd") == b"witness"


def test_record_frames():
    blob = pack_record(b"MPST", {"b": 1, "a": [2]})
    assert blob.endswith(canonical_json({"a": [2], "b": 1}))
    assert unpack_record(b"MPST", blob) == {"a": [2], "b": 1}
    with pytest.raises(TranscriptFormatError):
        unpack_record(b"MPFD", blob)
    with pytest.raises(TranscriptFormatError):
        unpack_record(b"MPST", blob[:-1])
    with pytest.raises(TranscriptFormatError):
        unpack_record(b"MPST", pack_record(b"MPST", {}, version=2))
    with pytest.raises(TranscriptFormatError):
        unpack_record(b"MPST", b"MP")


def test_transcript_store_errors(tmp_path):
    store = TranscriptStore(tmp_path / "transcript")
    assert store.rounds() == []
    with pytest.raises(TranscriptFormatError):
        store.read_header()
    (tmp_path / "transcript").mkdir()
    (tmp_path / "transcript" / "commitments.json").write_text("{not json")
    with pytest.raises(TranscriptFormatError):
        store.read_log()


def test_schedules_and_rounds(tmp_path):
    store = TranscriptStore(tmp_path)
    store.write_schedules(2, [{"epoch": 0}])
    (tmp_path / "round-x").mkdir()
    assert store.rounds() == [2]
    assert store.read_schedules(2) == [{"epoch": 0}]
    assert store.read_schedules(3) == []
    assert store.read_steps(2) == []
    assert store.read_mask_update(2) is None


def test_failed_report_keeps_what_was_checked():
    report = VerificationReport(ok=True, checked=["public"]).fail("round-1/steps", "missing step")
    assert not report.ok
    assert report.checked == ["public"]
    assert report.locus == "round-1/steps"
