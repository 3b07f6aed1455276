"""Unlearning bit matrices: construction, algebra and state evolution.

Three kinds of mask exist. Feature masks (N x J) zero individual entries,
sample masks (N x 1) drop whole rows and class masks (N x K) flip labels by XOR.
Feature and sample masks default to all ones, class masks to all zeros.
"""
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .commitments import Commitment, commit_packed
from .errors import (BadShape, DimMismatch, KindMismatch, NonBinaryLabel, OverlappingRows, RoundSkew,
                     TranscriptFormatError, UnknownOwner)
from .fixed_point import BN254_SCALAR_FIELD

logger = logging.getLogger(__name__)

WORD_BITS = 248
MAX_ROWS_PER_WORD = 8


class MaskKind(str, Enum):
    FEATURE = "feature"
    SAMPLE = "sample"
    CLASS = "class"


_KIND_CODES = {MaskKind.FEATURE: 1, MaskKind.SAMPLE: 2, MaskKind.CLASS: 3}


def _as_bits(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimMismatch(f"bit matrix must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("bit matrix entries must be 0 or 1")
    out = arr.astype(np.uint8)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BitMatrix:
    kind: MaskKind
    bits: np.ndarray
    round: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind(self.kind))
        object.__setattr__(self, "bits", _as_bits(self.bits))
        if self.kind is MaskKind.SAMPLE and self.bits.shape[1] != 1:
            raise DimMismatch(f"sample mask must be N x 1, got {self.bits.shape}")

    @property
    def n_rows(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, BitMatrix) and self.kind == other.kind and self.round == other.round
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.kind, self.round, self.bits.tobytes(), self.bits.shape))


def identity(kind: MaskKind, n_rows: int, width: int = 1, round: int = 1) -> BitMatrix:
    kind = MaskKind(kind)
    if kind is MaskKind.SAMPLE:
        width = 1
    fill = np.zeros if kind is MaskKind.CLASS else np.ones
    return BitMatrix(kind, fill((n_rows, width), dtype=np.uint8), round)


def apply_feature_mask(x: np.ndarray, b: BitMatrix) -> np.ndarray:
    if b.kind is not MaskKind.FEATURE:
        raise KindMismatch(f"expected a feature mask, got {b.kind.value}")
    x = np.asarray(x)
    if x.shape != b.bits.shape:
        raise DimMismatch(f"features {x.shape} vs mask {b.bits.shape}")
    return x * b.bits.astype(x.dtype) if x.dtype != object else x * b.bits.astype(object)


def flatten_sample_bits(b: BitMatrix) -> np.ndarray:
    """b_i = OR over row i; 0 iff the whole sample is unlearned"""
    if b.kind is not MaskKind.FEATURE:
        raise KindMismatch(f"expected a feature mask, got {b.kind.value}")
    return b.bits.any(axis=1).astype(np.uint8)


def sample_bits(b: BitMatrix) -> np.ndarray:
    """Per-row survival bits of a feature or sample mask"""
    if b.kind is MaskKind.SAMPLE:
        return b.bits[:, 0].copy()
    return flatten_sample_bits(b)


def effective_count(bits) -> int:
    arr = np.asarray(bits)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("effective_count expects a boolean vector")
    return int(arr.sum())


def update_state(b_prev: BitMatrix, b_cur: BitMatrix) -> BitMatrix:
    """Irrecoverable state rule: new = prev AND cur"""
    if b_prev.kind != b_cur.kind or b_cur.kind is MaskKind.CLASS:
        raise KindMismatch(f"cannot chain {b_prev.kind.value} into {b_cur.kind.value}")
    if b_prev.bits.shape != b_cur.bits.shape:
        raise DimMismatch(f"state {b_prev.bits.shape} vs request {b_cur.bits.shape}")
    if b_prev.round != b_cur.round - 1:
        raise RoundSkew(f"state round {b_prev.round} does not precede request round {b_cur.round}")
    return BitMatrix(b_cur.kind, b_prev.bits & b_cur.bits, b_cur.round)


def accumulate_class(c_prev: BitMatrix, c_cur: BitMatrix) -> BitMatrix:
    """Cumulative class correction c_t = c_{t-1} XOR b_t"""
    if c_prev.kind is not MaskKind.CLASS or c_cur.kind is not MaskKind.CLASS:
        raise KindMismatch("class correction needs class masks")
    if c_prev.bits.shape != c_cur.bits.shape:
        raise DimMismatch(f"state {c_prev.bits.shape} vs request {c_cur.bits.shape}")
    if c_prev.round != c_cur.round - 1:
        raise RoundSkew(f"state round {c_prev.round} does not precede request round {c_cur.round}")
    return BitMatrix(MaskKind.CLASS, c_prev.bits ^ c_cur.bits, c_cur.round)


def apply_class_mask(y: np.ndarray, b: BitMatrix) -> np.ndarray:
    if b.kind is not MaskKind.CLASS:
        raise KindMismatch(f"expected a class mask, got {b.kind.value}")
    y = np.asarray(y)
    if y.shape != b.bits.shape:
        raise DimMismatch(f"labels {y.shape} vs mask {b.bits.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise NonBinaryLabel("class correction needs 0/1 labels")
    return (y.astype(np.int64) ^ b.bits).astype(y.dtype if y.dtype != object else np.int64)


def broadcast_sample_bits(b: BitMatrix, width: int) -> BitMatrix:
    if b.kind is not MaskKind.SAMPLE:
        raise KindMismatch(f"expected a sample mask, got {b.kind.value}")
    return BitMatrix(MaskKind.FEATURE, np.repeat(b.bits, width, axis=1), b.round)


def removal_mask(feature: BitMatrix, sample: BitMatrix, granularity: str) -> BitMatrix:
    """Combine feature and sample requests in the fixed Feature -> Sample order.

    For 'feature' granularity the result is N x J; for 'sample' granularity it
    is N x 1 and the feature request must remove whole rows only.
    """
    if feature.kind is not MaskKind.FEATURE or sample.kind is not MaskKind.SAMPLE:
        raise KindMismatch("removal needs a feature mask and a sample mask")
    if feature.n_rows != sample.n_rows:
        raise DimMismatch(f"feature mask has {feature.n_rows} rows, sample mask {sample.n_rows}")
    if granularity == "feature":
        return BitMatrix(MaskKind.FEATURE, feature.bits & broadcast_sample_bits(sample, feature.width).bits,
                         feature.round)
    if granularity == "sample":
        rows = feature.bits.all(axis=1) | ~feature.bits.any(axis=1)
        if not rows.all():
            raise KindMismatch("sample granularity cannot express a partial feature removal")
        return BitMatrix(MaskKind.SAMPLE, sample.bits & flatten_sample_bits(feature).reshape(-1, 1), sample.round)
    raise BadShape(f"unknown granularity {granularity!r}")


# ---------------------------------------------------------------------------
# requests and layouts

@dataclass(frozen=True)
class OwnerRange:
    owner_id: str
    start: int
    stop: int

    @property
    def n_rows(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class DatasetLayout:
    n_rows: int
    features: int
    classes: int
    owners: Tuple[OwnerRange, ...]

    def __post_init__(self):
        check_owner_ranges(self.owners, self.n_rows)

    def owner(self, owner_id: str) -> OwnerRange:
        for entry in self.owners:
            if entry.owner_id == owner_id:
                return entry
        raise UnknownOwner(f"owner {owner_id!r} is not registered")


def check_owner_ranges(owners: Sequence[OwnerRange], n_rows: int) -> None:
    """Owner row ranges must be disjoint and cover [0, n_rows)"""
    cursor = 0
    for entry in sorted(owners, key=lambda o: o.start):
        if entry.start != cursor or entry.stop <= entry.start:
            raise OverlappingRows(f"owner {entry.owner_id!r} rows [{entry.start}, {entry.stop}) "
                                  f"do not continue at row {cursor}")
        cursor = entry.stop
    if cursor != n_rows:
        raise OverlappingRows(f"owner ranges cover {cursor} rows, dataset has {n_rows}")
    ids = [o.owner_id for o in owners]
    if len(set(ids)) != len(ids):
        raise OverlappingRows("owner ids must be unique")


@dataclass(frozen=True)
class UnlearningRequest:
    owner_id: str
    round: int
    masks: Mapping[MaskKind, BitMatrix] = field(default_factory=dict)
    randomness: int = 0
    commitment: Optional[Commitment] = None
    signature: bytes = b""

    def mask(self, kind: MaskKind, n_rows: int, width: int) -> BitMatrix:
        """The requested mask of one kind, or its identity default"""
        kind = MaskKind(kind)
        found = self.masks.get(kind)
        if found is None:
            return identity(kind, n_rows, width, self.round)
        expected = (n_rows, 1 if kind is MaskKind.SAMPLE else width)
        if found.bits.shape != expected:
            raise DimMismatch(f"{kind.value} mask of owner {self.owner_id!r} is {found.bits.shape}, "
                              f"expected {expected}")
        return found


def merge_requests(requests: Sequence[UnlearningRequest], layout: DatasetLayout,
                   round: int = 1) -> Dict[MaskKind, BitMatrix]:
    """Block-stack owner-local masks into dataset-wide masks, identity where nobody asked"""
    merged = {
        MaskKind.FEATURE: np.ones((layout.n_rows, layout.features), dtype=np.uint8),
        MaskKind.SAMPLE: np.ones((layout.n_rows, 1), dtype=np.uint8),
        MaskKind.CLASS: np.zeros((layout.n_rows, max(layout.classes, 1)), dtype=np.uint8),
    }
    widths = {MaskKind.FEATURE: layout.features, MaskKind.SAMPLE: 1, MaskKind.CLASS: max(layout.classes, 1)}
    if requests:
        round = requests[0].round
    seen = set()
    for request in requests:
        if request.round != round:
            raise RoundSkew(f"request of {request.owner_id!r} is for round {request.round}, not {round}")
        entry = layout.owner(request.owner_id)
        if request.owner_id in seen:
            raise OverlappingRows(f"owner {request.owner_id!r} submitted twice in round {round}")
        seen.add(request.owner_id)
        for kind, mask in request.masks.items():
            kind = MaskKind(kind)
            bits = request.mask(kind, entry.n_rows, widths[kind]).bits
            merged[kind][entry.start:entry.stop] = bits
    logger.debug(f"Merged {len(requests)} requests over {len(layout.owners)} owners for round {round}")
    return {kind: BitMatrix(kind, bits, round) for kind, bits in merged.items()}


# ---------------------------------------------------------------------------
# packing

def pack_bits(b: BitMatrix) -> bytes:
    header = struct.pack("<4sBIIII", b"MPBM", 1, _KIND_CODES[b.kind], b.n_rows, b.width, b.round)
    return header + np.packbits(b.bits.reshape(-1)).tobytes()


def unpack_bits(data: bytes) -> BitMatrix:
    size = struct.calcsize("<4sBIIII")
    try:
        magic, version, code, n_rows, width, round_ = struct.unpack_from("<4sBIIII", data, 0)
    except struct.error as e:
        raise TranscriptFormatError(f"corrupt bit matrix: {e}") from e
    if magic != b"MPBM" or version != 1:
        raise TranscriptFormatError("not a packed bit matrix")
    kind = {v: k for k, v in _KIND_CODES.items()}.get(code)
    if kind is None:
        raise TranscriptFormatError(f"unknown mask kind code {code}")
    flat = np.unpackbits(np.frombuffer(data[size:], dtype=np.uint8))[:n_rows * width]
    if flat.size != n_rows * width:
        raise TranscriptFormatError("bit matrix payload is truncated")
    return BitMatrix(kind, flat.reshape(n_rows, width), round_)


@dataclass(frozen=True)
class MaskLayout:
    """How per-row mask bits are packed into field words for commitments.

    Each row carries `removal_width` removal bits followed by `class_width`
    class bits; `rows_per_word` consecutive rows share one word.
    """

    n_rows: int
    removal_width: int
    class_width: int = 0

    def __post_init__(self):
        if self.n_rows < 1 or self.removal_width < 1 or self.class_width < 0:
            raise BadShape(f"invalid mask layout {self}")
        if self.row_width > WORD_BITS:
            raise BadShape(f"{self.row_width} mask bits per row exceed one field word")

    @property
    def row_width(self) -> int:
        return self.removal_width + self.class_width

    @property
    def rows_per_word(self) -> int:
        per_word = min(MAX_ROWS_PER_WORD, WORD_BITS // self.row_width)
        return 1 << (per_word.bit_length() - 1)

    @property
    def n_words(self) -> int:
        return -(-self.n_rows // self.rows_per_word)

    @property
    def index_bits(self) -> int:
        return (self.n_rows - 1).bit_length() if self.n_rows > 1 else 0

    @property
    def slot_bits(self) -> int:
        """Low index bits selecting a row inside its word"""
        return min(self.rows_per_word.bit_length() - 1, self.index_bits)


@dataclass(frozen=True)
class MaskState:
    """Cumulative removal and class-correction bits after a round"""

    removal: BitMatrix
    classes: Optional[BitMatrix] = None

    @property
    def round(self) -> int:
        return self.removal.round

    def layout(self) -> MaskLayout:
        return MaskLayout(self.removal.n_rows, self.removal.width, self.classes.width if self.classes else 0)

    def row_bits(self) -> np.ndarray:
        if self.classes is None:
            return np.asarray(self.removal.bits)
        return np.hstack([self.removal.bits, self.classes.bits])

    def words(self) -> List[int]:
        return pack_words(self.row_bits(), self.layout())

    def commit(self, randomness: int, modulus: int = BN254_SCALAR_FIELD) -> Commitment:
        return commit_packed(self.words(), randomness, modulus)

    def survivors(self) -> np.ndarray:
        return sample_bits(self.removal)

    @classmethod
    def initial(cls, n_rows: int, features: int, granularity: str, class_width: int = 0) -> "MaskState":
        if granularity == "feature":
            removal = identity(MaskKind.FEATURE, n_rows, features, round=0)
        else:
            removal = identity(MaskKind.SAMPLE, n_rows, 1, round=0)
        classes = identity(MaskKind.CLASS, n_rows, class_width, round=0) if class_width else None
        return cls(removal, classes)

    def advance(self, removal_request: BitMatrix, class_request: Optional[BitMatrix] = None) -> "MaskState":
        removal = update_state(self.removal, removal_request)
        classes = accumulate_class(self.classes, class_request) if self.classes is not None else None
        return MaskState(removal, classes)


def pack_words(row_bits: np.ndarray, layout: MaskLayout) -> List[int]:
    """Row-major packing: bit g of row r sits at position (r mod k) * W + g of word r // k"""
    row_bits = np.asarray(row_bits)
    if row_bits.shape != (layout.n_rows, layout.row_width):
        raise DimMismatch(f"mask bits {row_bits.shape} do not match layout "
                          f"({layout.n_rows}, {layout.row_width})")
    k, w = layout.rows_per_word, layout.row_width
    words = [0] * layout.n_words
    for r in range(layout.n_rows):
        base = (r % k) * w
        for g in range(w):
            if row_bits[r, g]:
                words[r // k] |= 1 << (base + g)
    return words


def unpack_words(words: Sequence[int], layout: MaskLayout) -> np.ndarray:
    k, w = layout.rows_per_word, layout.row_width
    out = np.zeros((layout.n_rows, w), dtype=np.uint8)
    for r in range(layout.n_rows):
        word = words[r // k] >> ((r % k) * w)
        for g in range(w):
            out[r, g] = (word >> g) & 1
    return out


def request_layout(n_rows: int, features: int, granularity: str, classes: int = 0) -> MaskLayout:
    return MaskLayout(n_rows, features if granularity == "feature" else 1, classes)


def request_row_bits(request: UnlearningRequest, n_rows: int, features: int, granularity: str,
                     classes: int = 0) -> np.ndarray:
    """Owner-local removal and class bits of a request, identity where absent"""
    feature = request.mask(MaskKind.FEATURE, n_rows, features)
    sample = request.mask(MaskKind.SAMPLE, n_rows, 1)
    removal = removal_mask(feature, sample, granularity)
    if not classes:
        if MaskKind.CLASS in request.masks and request.masks[MaskKind.CLASS].bits.any():
            raise KindMismatch("class correction requested on a model without class labels")
        return np.asarray(removal.bits)
    return np.hstack([removal.bits, request.mask(MaskKind.CLASS, n_rows, classes).bits])


def commit_request(request: UnlearningRequest, n_rows: int, features: int, granularity: str,
                   classes: int = 0, modulus: int = BN254_SCALAR_FIELD) -> Commitment:
    layout = request_layout(n_rows, features, granularity, classes)
    bits = request_row_bits(request, n_rows, features, granularity, classes)
    return commit_packed(pack_words(bits, layout), request.randomness, modulus)
