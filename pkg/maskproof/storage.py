"""Persistence: the public transcript directory and the trainer's encrypted vault.

The vault is a single SQLAlchemy table of Fernet-encrypted blobs. The Fernet
key is derived per session from a secret, so one database can hold several
sessions without one key opening another.
"""
import base64
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, List, Optional

from cryptography.fernet import Fernet, InvalidToken
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from sqlalchemy import Column, DateTime, Integer, LargeBinary, String, UniqueConstraint, create_engine, select
from sqlalchemy.orm import declarative_base, sessionmaker

from .errors import TranscriptFormatError
from .schemas import (CommitmentLog, FadRecord, MaskUpdateRecord, SessionHeader, StepRecord, pack_record,
                      unpack_record)

logger = logging.getLogger(__name__)

Base = declarative_base()

STEP_MAGIC = b"MPST"
FAD_MAGIC = b"MPFD"
MASK_MAGIC = b"MPMU"
SCHEDULES_MAGIC = b"MPSL"


class VaultEntry(Base):
    __tablename__ = "vault_entries"
    __table_args__ = (UniqueConstraint("session_id", "kind", "key"),)

    id = Column(Integer, primary_key=True, index=True)
    session_id = Column(String(64), nullable=False, index=True)
    kind = Column(String(32), nullable=False)
    key = Column(String(160), nullable=False)
    blob = Column(LargeBinary, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)


def session_key(secret: bytes, session_id: str) -> bytes:
    """Fernet key for one session, derived with HKDF-SHA256"""
    raw = HKDF(algorithm=hashes.SHA256(), length=32, salt=session_id.encode(), info=b"maskproof.vault").derive(secret)
    return base64.urlsafe_b64encode(raw)


class Vault:
    """Encrypted key-value store for data the public transcript must never contain"""

    def __init__(self, database_url: str, session_id: str, secret: bytes):
        if "sqlite" in database_url:
            path = database_url.split("sqlite:///", 1)[-1]
            if path and path != ":memory:":
                Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.engine = create_engine(database_url, connect_args={"check_same_thread": False})
        else:
            self.engine = create_engine(database_url)
        Base.metadata.create_all(self.engine)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
        self.session_id = session_id
        self._fernet = Fernet(session_key(secret, session_id))

    def get_session(self):
        return self.SessionLocal()

    def put(self, kind: str, key: str, blob: bytes) -> None:
        token = self._fernet.encrypt(blob)
        with self.get_session() as session:
            entry = session.execute(select(VaultEntry).filter_by(session_id=self.session_id, kind=kind, key=key)
                                    ).scalar_one_or_none()
            if entry is None:
                session.add(VaultEntry(session_id=self.session_id, kind=kind, key=key, blob=token))
            else:
                entry.blob = token
            session.commit()

    def get(self, kind: str, key: str) -> Optional[bytes]:
        with self.get_session() as session:
            entry = session.execute(select(VaultEntry).filter_by(session_id=self.session_id, kind=kind, key=key)
                                    ).scalar_one_or_none()
            if entry is None:
                return None
            token = entry.blob
        try:
            return self._fernet.decrypt(token)
        except InvalidToken:
            logger.error(f"Vault entry {kind}/{key} does not decrypt under this session key")
            return None

    def keys(self, kind: str) -> List[str]:
        with self.get_session() as session:
            rows = session.execute(select(VaultEntry.key).filter_by(session_id=self.session_id, kind=kind))
            return sorted(row[0] for row in rows)

    def put_json(self, kind: str, key: str, payload: Any) -> None:
        self.put(kind, key, json.dumps(payload, sort_keys=True).encode())

    def get_json(self, kind: str, key: str) -> Optional[Any]:
        blob = self.get(kind, key)
        return None if blob is None else json.loads(blob)


class VaultEscrow:
    """Witness escrow backed by the vault (auditor access goes through the session key)"""

    def __init__(self, vault: Vault):
        self.vault = vault

    def put(self, key: bytes, blob: bytes) -> None:
        self.vault.put("witness", key.hex(), blob)

    def get(self, key: bytes) -> Optional[bytes]:
        return self.vault.get("witness", key.hex())


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError as e:
        raise TranscriptFormatError(f"missing transcript file {path}") from e


class TranscriptStore:
    """Directory layout: session.json, commitments.json and round-<t>/ record files"""

    def __init__(self, root: Path):
        self.root = Path(root)

    def round_dir(self, t: int) -> Path:
        return self.root / f"round-{t}"

    def rounds(self) -> List[int]:
        if not self.root.exists():
            return []
        found = []
        for child in self.root.iterdir():
            if child.is_dir() and child.name.startswith("round-") and child.name[6:].isdigit():
                found.append(int(child.name[6:]))
        return sorted(found)

    # json documents
    def write_header(self, header: SessionHeader) -> None:
        _write_atomic(self.root / "session.json", header.model_dump_json(indent=2).encode())

    def read_header(self) -> SessionHeader:
        return SessionHeader.parse(self._json(self.root / "session.json"))

    def write_log(self, log: CommitmentLog) -> None:
        _write_atomic(self.root / "commitments.json", log.model_dump_json(indent=2).encode())

    def read_log(self) -> CommitmentLog:
        return CommitmentLog.parse(self._json(self.root / "commitments.json"))

    @staticmethod
    def _json(path: Path) -> Any:
        try:
            return json.loads(_read(path))
        except ValueError as e:
            raise TranscriptFormatError(f"{path.name} is not JSON: {e}") from e

    # binary records
    def write_schedules(self, t: int, schedules: List[dict]) -> None:
        _write_atomic(self.round_dir(t) / "schedule.bin", pack_record(SCHEDULES_MAGIC, schedules))

    def read_schedules(self, t: int) -> List[dict]:
        path = self.round_dir(t) / "schedule.bin"
        if not path.exists():
            return []
        payload = unpack_record(SCHEDULES_MAGIC, path.read_bytes())
        if not isinstance(payload, list):
            raise TranscriptFormatError("schedule file must hold a list of epochs")
        return payload

    def write_step(self, record: StepRecord) -> None:
        path = self.round_dir(record.round) / f"step-{record.step}.proof"
        _write_atomic(path, pack_record(STEP_MAGIC, record.model_dump(mode="json")))

    def write_fad(self, record: FadRecord) -> None:
        path = self.round_dir(record.round) / f"fad-{record.step}.proof"
        _write_atomic(path, pack_record(FAD_MAGIC, record.model_dump(mode="json")))

    def write_mask_update(self, record: MaskUpdateRecord) -> None:
        path = self.round_dir(record.round) / "mask-update.proof"
        _write_atomic(path, pack_record(MASK_MAGIC, record.model_dump(mode="json")))

    def _numbered(self, t: int, prefix: str) -> List[Path]:
        directory = self.round_dir(t)
        if not directory.exists():
            return []
        paths = [p for p in directory.glob(f"{prefix}-*.proof") if p.stem[len(prefix) + 1:].isdigit()]
        return sorted(paths, key=lambda p: int(p.stem[len(prefix) + 1:]))

    def read_steps(self, t: int) -> List[StepRecord]:
        return [StepRecord.parse(unpack_record(STEP_MAGIC, p.read_bytes())) for p in self._numbered(t, "step")]

    def read_fads(self, t: int) -> List[FadRecord]:
        return [FadRecord.parse(unpack_record(FAD_MAGIC, p.read_bytes())) for p in self._numbered(t, "fad")]

    def read_mask_update(self, t: int) -> Optional[MaskUpdateRecord]:
        path = self.round_dir(t) / "mask-update.proof"
        if not path.exists():
            return None
        return MaskUpdateRecord.parse(unpack_record(MASK_MAGIC, path.read_bytes()))
