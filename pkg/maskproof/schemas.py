"""Public transcript records.

JSON files hold these models directly; binary files wrap their canonical JSON in
a versioned, length-prefixed frame (`pack_record`).
"""
import json
import struct
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import TranscriptFormatError

RECORD_VERSION = 1
_FRAME = "<4sHI"


def canonical_json(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def pack_record(magic: bytes, payload: Any, version: int = RECORD_VERSION) -> bytes:
    body = canonical_json(payload)
    return struct.pack(_FRAME, magic, version, len(body)) + body


def unpack_record(magic: bytes, data: bytes, version: int = RECORD_VERSION) -> Any:
    size = struct.calcsize(_FRAME)
    try:
        found, found_version, length = struct.unpack_from(_FRAME, data, 0)
    except struct.error as e:
        raise TranscriptFormatError(f"truncated record header: {e}") from e
    if found != magic:
        raise TranscriptFormatError(f"expected a {magic!r} record, found {found!r}")
    if found_version != version:
        raise TranscriptFormatError(f"unsupported record version {found_version}")
    if len(data) != size + length:
        raise TranscriptFormatError(f"record length {len(data) - size} does not match header {length}")
    try:
        return json.loads(data[size:])
    except ValueError as e:
        raise TranscriptFormatError(f"record body is not JSON: {e}") from e


class Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def parse(cls, payload: Any):
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            raise TranscriptFormatError(f"malformed {cls.__name__}: {e.error_count()} field errors") from e


class CommitmentRecord(Record):
    root: str
    scheme: str
    arity: int
    leaf_count: int


class OwnerRecord(Record):
    owner_id: str
    start: int
    stop: int
    public_key: str
    dataset: CommitmentRecord
    acknowledgement: str = ""


class CircuitRecord(Record):
    key: str
    digest: str
    shape: Dict[str, Any]


class SessionHeader(Record):
    session_id: str
    settings: Dict[str, Any]
    task: str
    n_rows: int
    vrf_public_key: str
    dataset: CommitmentRecord
    owners: List[OwnerRecord]
    initial_model: str
    initial_state: str
    circuits: List[CircuitRecord] = Field(default_factory=list)


class RequestRecord(Record):
    owner_id: str
    commitment: str
    signature: str = ""


class RoundRecord(Record):
    round: int
    optimizer: str
    epochs: int
    learning_rate: int
    xi: int
    requests: List[RequestRecord]
    state: str
    models: List[str]
    steps: int


class CommitmentLog(Record):
    session_id: str
    rounds: List[RoundRecord] = Field(default_factory=list)


class StepRecord(Record):
    round: int
    step: int
    epoch: int
    indices: List[int]
    eta: int
    model_in: str
    model_out: str
    state: Optional[str]
    circuit: str
    proof: str


class FadRecord(Record):
    round: int
    step: int
    indices: List[int]
    model: str
    state: str
    flags: List[int]
    circuit: str
    proof: str


class MaskUpdateRecord(Record):
    round: int
    prev_state: str
    new_state: str
    requests: List[str]
    circuit: str
    proof: str


class VerificationReport(BaseModel):
    """Outcome of a transcript check; `locus` names the first failing record"""

    ok: bool
    checked: List[str] = Field(default_factory=list)
    locus: Optional[str] = None
    reason: Optional[str] = None

    def fail(self, locus: str, reason: str) -> "VerificationReport":
        return self.model_copy(update={"ok": False, "locus": locus, "reason": reason})
