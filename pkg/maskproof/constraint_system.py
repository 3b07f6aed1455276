"""Rank-1 constraint systems, gadgets and the reference proof backend.

A circuit is ordinary Python code that allocates variables and emits
constraints <a,z> * <b,z> = <c,z>. The same code runs in two modes:

* structure mode: no values, constraints are recorded (setup / digest);
* witness mode: values are computed as variables are allocated.

Because the structure never depends on values, every circuit here has one
digest per shape regardless of the masks or data it is run on.
"""
import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

from joblib import Parallel, delayed

from .errors import Finalized, LengthMismatch, MaskProofError, RangeOverflow, TranscriptFormatError, Unsatisfiable
from .fixed_point import BN254_SCALAR_FIELD, FIELD_BYTES, to_signed

logger = logging.getLogger(__name__)

ONE = 0  # index of the constant-one variable


class LC:
    """Sparse linear combination var -> coefficient (coefficients reduced lazily)."""

    __slots__ = ("terms",)

    def __init__(self, terms: Optional[Dict[int, int]] = None):
        self.terms = terms if terms is not None else {}

    @classmethod
    def var(cls, index: int) -> "LC":
        return cls({index: 1})

    @classmethod
    def const(cls, value: int) -> "LC":
        return cls({ONE: value}) if value else cls()

    def is_constant(self) -> bool:
        return all(v == ONE for v in self.terms)

    def constant_value(self) -> int:
        return self.terms.get(ONE, 0)

    def __add__(self, other) -> "LC":
        other = as_lc(other)
        out = dict(self.terms)
        for v, c in other.terms.items():
            total = out.get(v, 0) + c
            if total:
                out[v] = total
            else:
                out.pop(v, None)
        return LC(out)

    __radd__ = __add__

    def __neg__(self) -> "LC":
        return LC({v: -c for v, c in self.terms.items()})

    def __sub__(self, other) -> "LC":
        return self + (-as_lc(other))

    def __rsub__(self, other) -> "LC":
        return as_lc(other) - self

    def __mul__(self, k: int) -> "LC":
        if isinstance(k, LC):
            raise TypeError("LC * LC is not linear; use ConstraintSystem.mul")
        if not k:
            return LC()
        return LC({v: c * k for v, c in self.terms.items()})

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"LC({self.terms})"


Operand = Union[LC, int]


def as_lc(value: Operand) -> LC:
    return value if isinstance(value, LC) else LC.const(int(value))


def lc_sum(items: Iterable[Operand]) -> LC:
    out: Dict[int, int] = {}
    for item in items:
        for v, c in as_lc(item).terms.items():
            out[v] = out.get(v, 0) + c
    return LC({v: c for v, c in out.items() if c})


@dataclass(frozen=True)
class Witness:
    assignments: Tuple[int, ...]
    modulus: int = BN254_SCALAR_FIELD

    def __post_init__(self):
        if not self.assignments or self.assignments[0] != 1:
            raise ValueError("witness must start with the constant ONE")

    def __len__(self) -> int:
        return len(self.assignments)

    def public_inputs(self, num_public: int) -> Tuple[int, ...]:
        return tuple(self.assignments[1:1 + num_public])

    def with_value(self, index: int, value: int) -> "Witness":
        """Copy with one assignment replaced (tamper experiments)"""
        values = list(self.assignments)
        values[index] = value % self.modulus
        return replace(self, assignments=tuple(values))

    def to_bytes(self) -> bytes:
        body = b"".join(v.to_bytes(FIELD_BYTES, "little") for v in self.assignments)
        header = struct.pack("<4sHI", b"MPWT", 1, len(self.assignments))
        return header + self.modulus.to_bytes(FIELD_BYTES, "little") + zlib.compress(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Witness":
        try:
            magic, version, count = struct.unpack_from("<4sHI", data, 0)
            if magic != b"MPWT" or version != 1:
                raise TranscriptFormatError("not a witness record")
            offset = struct.calcsize("<4sHI")
            modulus = int.from_bytes(data[offset:offset + FIELD_BYTES], "little")
            body = zlib.decompress(data[offset + FIELD_BYTES:])
        except (struct.error, zlib.error) as e:
            raise TranscriptFormatError(f"corrupt witness: {e}") from e
        if len(body) != count * FIELD_BYTES:
            raise TranscriptFormatError("witness length does not match header")
        values = tuple(
            int.from_bytes(body[i * FIELD_BYTES:(i + 1) * FIELD_BYTES], "little") for i in range(count)
        )
        return cls(values, modulus)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()


class ConstraintSystem:
    """R1CS under construction (structure mode) or under assignment (witness mode)."""

    def __init__(self, modulus: int = BN254_SCALAR_FIELD, *, values: bool = False,
                 record: bool = True, check: bool = False, digest: bool = False,
                 against: Optional[Sequence[int]] = None, name: str = ""):
        self.modulus = modulus
        self.name = name
        self.shape = None
        self.num_vars = 1
        self.num_public = 0
        self.constraints: List[Tuple[Dict[int, int], Dict[int, int], Dict[int, int]]] = []
        self.values: Optional[List[Optional[int]]] = [1] if values else None
        self.record = record
        self.check = check and values
        self.finalized = False
        self.first_violation: Optional[int] = None
        self._hasher = hashlib.sha256() if digest else None
        self._against = against
        self._count = 0
        self._private_started = False
        self._pending_public: set = set()

    @property
    def has_values(self) -> bool:
        return self.values is not None

    # allocation
    def _new_var(self, value: Optional[int]) -> LC:
        if self.finalized:
            raise Finalized(f"circuit {self.name!r} is finalized")
        index = self.num_vars
        self.num_vars += 1
        if self.values is not None:
            self.values.append(None if value is None else value % self.modulus)
        return LC.var(index)

    def alloc_public(self, value: Optional[int] = None) -> LC:
        """Allocate the next public input; value may be filled later by reveal()"""
        if self._private_started:
            raise MaskProofError("public inputs must precede private variables")
        self.num_public += 1
        var = self._new_var(value)
        if self.values is not None and value is None:
            self._pending_public.add(self.num_vars - 1)
        return var

    def alloc(self, value_fn: Optional[Callable[[], int]] = None) -> LC:
        self._private_started = True
        if self.values is None or value_fn is None:
            return self._new_var(None)
        return self._new_var(int(value_fn()))

    # evaluation (witness mode)
    def eval(self, value: Operand) -> int:
        lc = as_lc(value)
        if self.values is None:
            raise MaskProofError("circuit has no values")
        total = 0
        for v, c in lc.terms.items():
            x = self.values[v]
            if x is None:
                raise MaskProofError(f"variable {v} has no value yet")
            total += x * c
        return total % self.modulus

    def signed(self, value: Operand) -> int:
        return to_signed(self.eval(value), self.modulus)

    # constraints
    def enforce(self, a: Operand, b: Operand, c: Operand, label: str = "") -> None:
        if self.finalized:
            raise Finalized(f"circuit {self.name!r} is finalized")
        a, b, c = as_lc(a), as_lc(b), as_lc(c)
        index = self._count
        self._count += 1
        if self.record or self._hasher is not None or self._against is not None:
            p = self.modulus
            rows = tuple({v: k % p for v, k in lc.terms.items() if k % p} for lc in (a, b, c))
            if self.record:
                self.constraints.append(rows)
            if self._hasher is not None:
                self._hasher.update(_serialize_constraint(rows))
            if self._against is not None and self.first_violation is None:
                z = self._against
                try:
                    bad = (_row_value(rows[0], z) * _row_value(rows[1], z) - _row_value(rows[2], z)) % p
                except IndexError:
                    bad = True
                if bad:
                    self.first_violation = index
        if self.check and (self.eval(a) * self.eval(b) - self.eval(c)) % self.modulus:
            raise Unsatisfiable(f"constraint {index} ({label or 'unlabelled'}) does not hold")

    def enforce_equal(self, a: Operand, b: Operand, label: str = "") -> None:
        self.enforce(as_lc(a) - as_lc(b), 1, 0, label)

    def mul(self, a: Operand, b: Operand, label: str = "") -> LC:
        """Allocate o = a * b"""
        o = self.alloc(lambda: self.eval(a) * self.eval(b))
        self.enforce(a, b, o, label)
        return o

    def reveal(self, slot: LC, value: Operand, label: str = "") -> None:
        """Bind a public slot to a computed linear combination"""
        (index,) = slot.terms.keys()
        if self.values is not None and index in self._pending_public:
            self.values[index] = self.eval(value)
            self._pending_public.discard(index)
        self.enforce_equal(value, slot, label or "reveal")

    def finalize(self) -> "ConstraintSystem":
        if self._pending_public:
            raise MaskProofError(f"public inputs {sorted(self._pending_public)} were never revealed")
        self.finalized = True
        return self

    def witness(self) -> Witness:
        if self.values is None:
            raise MaskProofError("structure-mode circuit has no witness")
        if any(v is None for v in self.values):
            raise MaskProofError("witness has unassigned variables")
        return Witness(tuple(self.values), self.modulus)

    @property
    def count(self) -> int:
        return self._count


# ---------------------------------------------------------------------------
# gadgets

def gadget_bool(cs: ConstraintSystem, v: Operand) -> None:
    cs.enforce(v, as_lc(v) - 1, 0, "bool")


def gadget_and(cs: ConstraintSystem, a: Operand, b: Operand) -> LC:
    return cs.mul(a, b, "and")


def gadget_or(cs: ConstraintSystem, a: Operand, b: Operand) -> LC:
    a, b = as_lc(a), as_lc(b)
    o = cs.alloc(lambda: cs.eval(a) + cs.eval(b) - cs.eval(a) * cs.eval(b))
    cs.enforce(a, b, a + b - o, "or")
    return o


def gadget_xor(cs: ConstraintSystem, a: Operand, b: Operand) -> LC:
    a, b = as_lc(a), as_lc(b)
    o = cs.alloc(lambda: cs.eval(a) + cs.eval(b) - 2 * cs.eval(a) * cs.eval(b))
    cs.enforce(a * 2, b, a + b - o, "xor")
    return o


def gadget_not(a: Operand) -> LC:
    return 1 - as_lc(a)


def alloc_bits(cs: ConstraintSystem, value_fn: Optional[Callable[[], int]], nbits: int) -> List[LC]:
    """Allocate nbits boolean variables holding the little-endian bits of value_fn()"""
    value = value_fn() if (cs.has_values and value_fn is not None) else None
    bits = []
    for i in range(nbits):
        bit = cs.alloc(None if value is None else (lambda i=i: (value >> i) & 1))
        gadget_bool(cs, bit)
        bits.append(bit)
    return bits


def pack(bits: Sequence[Operand]) -> LC:
    return lc_sum(as_lc(b) * (1 << i) for i, b in enumerate(bits))


def gadget_bit_decompose(cs: ConstraintSystem, v: Operand, nbits: int) -> List[LC]:
    v = as_lc(v)
    value = None
    if cs.has_values:
        value = cs.eval(v)
        if value >> nbits:
            raise Unsatisfiable(f"value does not fit in {nbits} bits")
    bits = alloc_bits(cs, None if value is None else (lambda: value), nbits)
    cs.enforce(pack(bits), 1, v, "decompose")
    return bits


def gadget_leq(cs: ConstraintSystem, a: Operand, b: Operand, nbits: int) -> LC:
    """flag = 1 iff a <= b, for a, b in [0, 2^nbits)"""
    a, b = as_lc(a), as_lc(b)
    if cs.has_values:
        for operand in (a, b):
            if cs.eval(operand) >> nbits:
                raise RangeOverflow(f"comparison operand exceeds {nbits} bits")
    bits = gadget_bit_decompose(cs, b - a + (1 << nbits), nbits + 1)
    return bits[nbits]


def gadget_is_zero(cs: ConstraintSystem, v: Operand) -> LC:
    """z = 1 iff v == 0 (two constraints)"""
    v = as_lc(v)
    p = cs.modulus
    inv = cs.alloc(lambda: pow(cs.eval(v), p - 2, p) if cs.eval(v) else 0)
    z = cs.alloc(lambda: 0 if cs.eval(v) else 1)
    cs.enforce(v, inv, 1 - z, "is_zero.inv")
    cs.enforce(v, z, 0, "is_zero.z")
    return z


def gadget_truncate(cs: ConstraintSystem, v: Operand, shift: int, range_bits: int) -> LC:
    """q = floor(v / 2^shift) on the signed interpretation, with q an R-bit signed value"""
    v = as_lc(v)
    bound = 1 << (range_bits - 1)
    q_value = None
    if cs.has_values:
        q_value = cs.signed(v) >> shift
        if not -bound <= q_value < bound:
            raise RangeOverflow(f"truncated value {q_value} exceeds {range_bits}-bit range")
    q = cs.alloc(None if q_value is None else (lambda: q_value))
    rem_bits = alloc_bits(cs, None if q_value is None else (lambda: cs.signed(v) - (q_value << shift)), shift)
    gadget_bit_decompose(cs, q + bound, range_bits)
    cs.enforce(q * (1 << shift) + pack(rem_bits), 1, v, "truncate")
    return q


def gadget_select(cs: ConstraintSystem, items: Sequence[Operand], bits: Sequence[Operand]) -> LC:
    """Binary multiplexer: items[index] where index = sum bits[i] * 2^i"""
    level = [as_lc(item) for item in items]
    level += [LC()] * ((1 << len(bits)) - len(level))
    for bit in bits:
        bit = as_lc(bit)
        nxt = []
        for left, right in zip(level[0::2], level[1::2]):
            if left.is_constant() and right.is_constant() and left.constant_value() == right.constant_value():
                nxt.append(left)
                continue
            out = cs.alloc(lambda left=left, right=right, bit=bit:
                           cs.eval(right) if cs.eval(bit) else cs.eval(left))
            cs.enforce(bit, right - left, out - left, "select")
            nxt.append(out)
        level = nxt
    return level[0]


def gadget_unpack(cs: ConstraintSystem, word: Operand, nbits: int) -> List[LC]:
    return gadget_bit_decompose(cs, word, nbits)


# ---------------------------------------------------------------------------
# checking

def _row_value(row: Dict[int, int], z: Sequence[int]) -> int:
    return sum(z[v] * c for v, c in row.items())


def _serialize_constraint(rows) -> bytes:
    parts = []
    for row in rows:
        parts.append(struct.pack("<I", len(row)))
        for v in sorted(row):
            parts.append(struct.pack("<I", v))
            parts.append(row[v].to_bytes(FIELD_BYTES, "little"))
    return b"".join(parts)


def _check_chunk(constraints, z, p) -> Optional[int]:
    for i, (a, b, c) in enumerate(constraints):
        if (_row_value(a, z) * _row_value(b, z) - _row_value(c, z)) % p:
            return i
    return None


def first_unsatisfied(cs: ConstraintSystem, witness: Witness, n_jobs: int = 1) -> Optional[int]:
    """Index of the first violated constraint, or None"""
    if not cs.record:
        raise MaskProofError("circuit was built without recording constraints")
    if len(witness) != cs.num_vars:
        raise LengthMismatch(f"witness has {len(witness)} values, circuit has {cs.num_vars} variables")
    if witness.assignments[0] != 1:
        return -1
    z, p = witness.assignments, cs.modulus
    if n_jobs == 1 or len(cs.constraints) < 10_000:
        return _check_chunk(cs.constraints, z, p)
    size = -(-len(cs.constraints) // n_jobs)
    chunks = [cs.constraints[i:i + size] for i in range(0, len(cs.constraints), size)]
    results = Parallel(n_jobs=n_jobs)(delayed(_check_chunk)(chunk, z, p) for chunk in chunks)
    for offset, result in zip(range(0, len(cs.constraints), size), results):
        if result is not None:
            return offset + result
    return None


def is_satisfied(cs: ConstraintSystem, witness: Witness, n_jobs: int = 1) -> bool:
    return first_unsatisfied(cs, witness, n_jobs) is None


def constraint_count(cs: ConstraintSystem) -> int:
    return cs.count


def _digest_trailer(cs: ConstraintSystem) -> bytes:
    return (struct.pack("<4sIII", b"R1CS", cs.num_vars, cs.num_public, cs.count)
            + cs.modulus.to_bytes(FIELD_BYTES, "little"))


def circuit_digest(cs: ConstraintSystem) -> str:
    """SHA-256 over the canonical serialization of (A, B, C) followed by the shape trailer"""
    if cs._hasher is not None:
        h = cs._hasher.copy()
    elif cs.record:
        h = hashlib.sha256()
        for rows in cs.constraints:
            h.update(_serialize_constraint(rows))
    else:
        raise MaskProofError("circuit was built without recording or hashing constraints")
    h.update(_digest_trailer(cs))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# proof backends

class CircuitHandle(Protocol):
    """What a backend needs from a circuit: its identity and a witness check"""

    name: str

    @property
    def digest(self) -> str: ...

    @property
    def num_public(self) -> int: ...

    def check(self, witness: Witness) -> Optional[int]: ...


class StoredCircuit:
    """CircuitHandle over a recorded, finalized ConstraintSystem"""

    def __init__(self, cs: ConstraintSystem, n_jobs: int = 1):
        if not cs.finalized:
            cs.finalize()
        self.cs = cs
        self.name = cs.name
        self.n_jobs = n_jobs
        self._digest = circuit_digest(cs)

    @property
    def digest(self) -> str:
        return self._digest

    @property
    def num_public(self) -> int:
        return self.cs.num_public

    def check(self, witness: Witness) -> Optional[int]:
        try:
            return first_unsatisfied(self.cs, witness, self.n_jobs)
        except LengthMismatch:
            return -1


def as_handle(circuit) -> CircuitHandle:
    return StoredCircuit(circuit) if isinstance(circuit, ConstraintSystem) else circuit


@dataclass(frozen=True)
class ProvingKey:
    circuit_digest: str
    num_public: int


@dataclass(frozen=True)
class VerifyingKey:
    circuit_digest: str
    num_public: int


@dataclass(frozen=True)
class Proof:
    scheme: str
    circuit_digest: str
    public_inputs: Tuple[int, ...]
    payload: bytes

    def to_bytes(self) -> bytes:
        scheme = self.scheme.encode()
        digest = bytes.fromhex(self.circuit_digest)
        parts = [struct.pack("<4sH", b"MPPF", 1), struct.pack("<H", len(scheme)), scheme, digest,
                 struct.pack("<I", len(self.public_inputs))]
        parts += [v.to_bytes(FIELD_BYTES, "little") for v in self.public_inputs]
        parts += [struct.pack("<I", len(self.payload)), self.payload]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Proof":
        try:
            magic, version = struct.unpack_from("<4sH", data, 0)
            if magic != b"MPPF" or version != 1:
                raise TranscriptFormatError("not a proof record")
            offset = 6
            (n,) = struct.unpack_from("<H", data, offset)
            offset += 2
            scheme = data[offset:offset + n].decode()
            offset += n
            digest = data[offset:offset + 32].hex()
            offset += 32
            (count,) = struct.unpack_from("<I", data, offset)
            offset += 4
            publics = []
            for _ in range(count):
                publics.append(int.from_bytes(data[offset:offset + FIELD_BYTES], "little"))
                offset += FIELD_BYTES
            (n,) = struct.unpack_from("<I", data, offset)
            offset += 4
            payload = data[offset:offset + n]
            if len(payload) != n or offset + n != len(data) or len(digest) != 64:
                raise TranscriptFormatError("proof length does not match header")
        except (struct.error, UnicodeDecodeError) as e:
            raise TranscriptFormatError(f"corrupt proof: {e}") from e
        return cls(scheme, digest, tuple(publics), payload)


class WitnessEscrow(Protocol):
    def put(self, key: bytes, blob: bytes) -> None: ...

    def get(self, key: bytes) -> Optional[bytes]: ...


class MemoryEscrow:
    def __init__(self):
        self._blobs: Dict[bytes, bytes] = {}

    def put(self, key: bytes, blob: bytes) -> None:
        self._blobs[key] = blob

    def get(self, key: bytes) -> Optional[bytes]:
        return self._blobs.get(key)


class ProofBackend(Protocol):
    scheme: str

    def setup(self, circuit) -> Tuple[ProvingKey, VerifyingKey]: ...

    def prove(self, circuit, witness: Witness) -> Proof: ...

    def verify(self, vk: VerifyingKey, public_inputs: Sequence[int], proof: Proof) -> bool: ...


@dataclass
class ReferenceBackend:
    """Satisfiability-checking backend (complete and sound, not zero-knowledge).

    The proof payload is the SHA-256 digest of the witness; the witness itself
    goes to an escrow that an auditor can read. Verification re-checks the
    digest, the public-input prefix and every constraint.
    """

    escrow: WitnessEscrow = field(default_factory=MemoryEscrow)
    resolver: Optional[Callable[[str], Optional[CircuitHandle]]] = None
    scheme: str = "reference-r1cs-v1"
    _circuits: Dict[str, CircuitHandle] = field(default_factory=dict)

    def setup(self, circuit) -> Tuple[ProvingKey, VerifyingKey]:
        handle = as_handle(circuit)
        self._circuits[handle.digest] = handle
        return ProvingKey(handle.digest, handle.num_public), VerifyingKey(handle.digest, handle.num_public)

    def _circuit(self, digest: str) -> Optional[CircuitHandle]:
        handle = self._circuits.get(digest)
        if handle is None and self.resolver is not None:
            handle = self.resolver(digest)
            if handle is not None:
                self._circuits[digest] = handle
        return handle

    def prove(self, circuit, witness: Witness) -> Proof:
        handle = as_handle(circuit)
        bad = handle.check(witness)
        if bad is not None:
            raise Unsatisfiable(f"witness violates constraint {bad} of {handle.name!r}")
        blob = witness.to_bytes()
        digest = hashlib.sha256(blob).digest()
        self.escrow.put(digest, blob)
        return Proof(self.scheme, handle.digest, witness.public_inputs(handle.num_public), digest)

    def verify(self, vk: VerifyingKey, public_inputs: Sequence[int], proof: Proof) -> bool:
        if proof.scheme != self.scheme or proof.circuit_digest != vk.circuit_digest:
            return False
        publics = tuple(int(v) for v in public_inputs)
        if len(publics) != vk.num_public or publics != proof.public_inputs:
            return False
        blob = self.escrow.get(proof.payload)
        if blob is None or hashlib.sha256(blob).digest() != proof.payload:
            return False
        handle = self._circuit(vk.circuit_digest)
        if handle is None:
            logger.warning(f"No circuit registered for digest {vk.circuit_digest[:12]}")
            return False
        try:
            witness = Witness.from_bytes(blob)
            if witness.public_inputs(handle.num_public) != publics:
                return False
            return handle.check(witness) is None
        except (MaskProofError, ValueError) as e:
            logger.warning(f"Proof verification error: {e}")
            return False
