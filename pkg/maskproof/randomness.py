"""Publicly verifiable minibatch sampling.

The reference VRF is a Diffie-Hellman style construction in the multiplicative
group of the scalar field: Gamma = H1(mu)^sk, value = SHA-256(Gamma), and the
proof is a Chaum-Pedersen token showing log_g(pk) = log_H1(mu)(Gamma). Anyone
holding pk can replay a whole epoch schedule without the secret key.
"""
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict
from scipy import stats

from .errors import BadBatchSize, MalformedKey, TranscriptFormatError, ZeroModulus
from .fixed_point import BN254_SCALAR_FIELD, FIELD_BYTES
from .schemas import pack_record, unpack_record

logger = logging.getLogger(__name__)

VRF_SCHEME = "dh-vrf-sha256-v1"
GENERATOR = 5
DOMAIN = b"maskproof.vrf.v1"
SCHEDULE_MAGIC = b"MPSC"
DRAW_BLOCK = 64


def _b(value: int) -> bytes:
    return value.to_bytes(FIELD_BYTES, "big")


def _sha(*parts: bytes) -> int:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return int.from_bytes(h.digest(), "big")


@dataclass(frozen=True)
class VrfKeypair:
    secret_key: int
    public_key: int
    modulus: int = BN254_SCALAR_FIELD

    def __post_init__(self):
        p = self.modulus
        if not 1 <= self.secret_key < p - 1:
            raise MalformedKey("secret key outside [1, p-1)")
        if pow(GENERATOR, self.secret_key, p) != self.public_key:
            raise MalformedKey("public key does not match the secret key")

    @classmethod
    def from_secret(cls, secret_key: int, modulus: int = BN254_SCALAR_FIELD) -> "VrfKeypair":
        return cls(secret_key, pow(GENERATOR, secret_key, modulus), modulus)

    @classmethod
    def from_seed(cls, seed: bytes, modulus: int = BN254_SCALAR_FIELD) -> "VrfKeypair":
        return cls.from_secret(_sha(b"maskproof.vrf.key", seed) % (modulus - 2) + 1, modulus)


@dataclass(frozen=True)
class VrfProof:
    gamma: int
    c: int
    s: int

    def to_bytes(self) -> bytes:
        return _b(self.gamma) + _b(self.c) + _b(self.s)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VrfProof":
        if len(data) != 3 * FIELD_BYTES:
            raise TranscriptFormatError(f"VRF proof must be {3 * FIELD_BYTES} bytes")
        parts = [int.from_bytes(data[i * FIELD_BYTES:(i + 1) * FIELD_BYTES], "big") for i in range(3)]
        return cls(*parts)


@dataclass(frozen=True)
class VrfOutput:
    value: int
    proof: VrfProof
    mu: bytes


def vrf_input(session_id: str, epoch: int, counter: int) -> bytes:
    """mu, domain separated by session, epoch and draw counter"""
    sid = session_id.encode()
    return DOMAIN + struct.pack("<H", len(sid)) + sid + struct.pack("<IQ", epoch, counter)


def _hash_to_group(mu: bytes, p: int) -> int:
    h = _sha(b"h1", mu) % p
    while h in (0, 1, p - 1):
        h = _sha(b"h1", _b(h)) % p
    return h


def _challenge(pk: int, h: int, gamma: int, u: int, v: int, p: int) -> int:
    return _sha(b"chal", _b(GENERATOR), _b(pk), _b(h), _b(gamma), _b(u), _b(v)) % (p - 1)


def _output(gamma: int) -> int:
    return _sha(b"out", _b(gamma))


def vrf_eval(keypair: VrfKeypair, mu: bytes) -> VrfOutput:
    p, sk = keypair.modulus, keypair.secret_key
    h = _hash_to_group(mu, p)
    gamma = pow(h, sk, p)
    k = _sha(b"nonce", _b(sk), mu) % (p - 1) or 1
    c = _challenge(keypair.public_key, h, gamma, pow(GENERATOR, k, p), pow(h, k, p), p)
    s = (k + c * sk) % (p - 1)
    return VrfOutput(_output(gamma), VrfProof(gamma, c, s), mu)


def vrf_verify(public_key: int, mu: bytes, value: int, proof: VrfProof, modulus: int = BN254_SCALAR_FIELD) -> bool:
    p = modulus
    if not 1 < public_key < p:
        raise MalformedKey("public key outside the group")
    if not (1 < proof.gamma < p and 0 <= proof.c < p - 1 and 0 <= proof.s < p - 1):
        return False
    h = _hash_to_group(mu, p)
    u = pow(GENERATOR, proof.s, p) * pow(public_key, -proof.c, p) % p
    v = pow(h, proof.s, p) * pow(proof.gamma, -proof.c, p) % p
    if _challenge(public_key, h, proof.gamma, u, v, p) != proof.c:
        return False
    return value == _output(proof.gamma)


def derive_index(value: int, n: int) -> int:
    if n < 1:
        raise ZeroModulus("cannot derive an index from an empty range")
    return value % n


# ---------------------------------------------------------------------------
# epoch schedules

class DrawRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    counter: int
    mu: str
    value: str
    proof: str
    index: Optional[int] = None


class EpochSchedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    session_id: str
    epoch: int
    n_rows: int
    batch_size: int
    public_key: str
    minibatches: List[List[int]]
    draws: List[DrawRecord]

    @property
    def count(self) -> int:
        return len(self.minibatches)

    def order(self) -> List[int]:
        return [i for batch in self.minibatches for i in batch]

    def to_bytes(self) -> bytes:
        return pack_record(SCHEDULE_MAGIC, self.model_dump(mode="json"))

    @classmethod
    def from_bytes(cls, data: bytes) -> "EpochSchedule":
        return cls.model_validate(unpack_record(SCHEDULE_MAGIC, data))


def minibatch_count(n_rows: int, batch_size: int) -> int:
    return math.ceil(n_rows / batch_size)


def partition(order: Sequence[int], batch_size: int) -> List[List[int]]:
    if batch_size < 1:
        raise BadBatchSize("batch size must be positive")
    order = list(order)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def full_batch(n_rows: int) -> List[List[int]]:
    """BGD: a single minibatch holding the whole dataset"""
    return [list(range(n_rows))]


def _draw(keypair: VrfKeypair, session_id: str, epoch: int, counter: int) -> VrfOutput:
    return vrf_eval(keypair, vrf_input(session_id, epoch, counter))


def sample_epoch(keypair: VrfKeypair, session_id: str, epoch: int, n_rows: int, batch_size: int,
                 n_jobs: int = 1) -> EpochSchedule:
    """Rejection-sample a permutation of the rows and chunk it into minibatches"""
    if not 1 <= batch_size <= n_rows:
        raise BadBatchSize(f"batch size {batch_size} must lie in [1, {n_rows}]")
    seen, order, draws = set(), [], []
    counter = 0
    with Parallel(n_jobs=n_jobs) as parallel:
        while len(order) < n_rows:
            block = parallel(delayed(_draw)(keypair, session_id, epoch, c) for c in range(counter, counter + DRAW_BLOCK))
            for out in block:
                index = derive_index(out.value, n_rows)
                accepted = index not in seen
                if accepted:
                    seen.add(index)
                    order.append(index)
                draws.append(DrawRecord(counter=counter, mu=out.mu.hex(), value=hex(out.value),
                                        proof=out.proof.to_bytes().hex(), index=index if accepted else None))
                counter += 1
                if len(order) == n_rows:
                    break
    logger.debug(f"Epoch {epoch}: {n_rows} rows from {len(draws)} draws")
    return EpochSchedule(session_id=session_id, epoch=epoch, n_rows=n_rows, batch_size=batch_size,
                         public_key=hex(keypair.public_key), minibatches=partition(order, batch_size), draws=draws)


def verify_epoch(public_key: int, session_id: str, epoch: int, schedule: EpochSchedule,
                 modulus: int = BN254_SCALAR_FIELD) -> bool:
    """Replay every draw; true iff the schedule is the unique accepting one"""
    try:
        if (schedule.session_id != session_id or schedule.epoch != epoch
                or int(schedule.public_key, 16) != public_key):
            return False
        n = schedule.n_rows
        if not 1 <= schedule.batch_size <= n:
            return False
        seen, order = set(), []
        for position, draw in enumerate(schedule.draws):
            if len(order) == n or draw.counter != position:
                return False
            mu = vrf_input(session_id, epoch, position)
            if bytes.fromhex(draw.mu) != mu:
                return False
            value = int(draw.value, 16)
            if not vrf_verify(public_key, mu, value, VrfProof.from_bytes(bytes.fromhex(draw.proof)), modulus):
                return False
            index = derive_index(value, n)
            expected = None if index in seen else index
            if draw.index != expected:
                return False
            if expected is not None:
                seen.add(index)
                order.append(index)
        return len(order) == n and schedule.minibatches == partition(order, schedule.batch_size)
    except (MalformedKey, TranscriptFormatError, ValueError) as e:
        logger.warning(f"Schedule replay failed: {e}")
        return False


def uniformity_pvalue(indices: Sequence[int], n: int) -> float:
    """Chi-square goodness-of-fit p-value of indices against the uniform law on [0, n)"""
    counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=n)
    return float(stats.chisquare(counts).pvalue)
