"""Fixed-point encoding of reals into a prime field.

A real x is represented by the signed integer round(x * 2^f); negative integers
live in the field as complements p - |v|. Products are truncated with floor
division on the signed interpretation so that the in-circuit bit decomposition
and the plain integer arithmetic in `training` agree exactly.
"""
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import RangeOverflow

# Scalar field of the BN254 pairing-friendly curve (254 bits).
BN254_SCALAR_FIELD = 21888242871839275222246405745257275088548364400416034343698204186575808495617

FIELD_BYTES = 32


class FixedConfig(BaseModel):
    """Fractional bits f, magnitude bits R and the field modulus p."""

    model_config = ConfigDict(frozen=True)

    scale_bits: int = 16
    range_bits: int = 64
    modulus: int = BN254_SCALAR_FIELD

    @model_validator(mode="after")
    def _check_bounds(self) -> "FixedConfig":
        if self.modulus.bit_length() < 250:
            raise ValueError("modulus must have at least 250 bits")
        if not 0 <= self.scale_bits < self.range_bits:
            raise ValueError("scale_bits must be smaller than range_bits")
        if 1 << (2 * self.range_bits) >= self.modulus:
            raise ValueError("2^(2R) must stay below the modulus")
        return self

    @property
    def one(self) -> int:
        return 1 << self.scale_bits

    @property
    def bound(self) -> int:
        """Exclusive bound on the magnitude of an encoded signed integer"""
        return 1 << (self.range_bits - 1)

    @property
    def real_bound(self) -> float:
        return float(1 << (self.range_bits - 1 - self.scale_bits))


DEFAULT_FIXED = FixedConfig()


@dataclass(frozen=True)
class FieldElem:
    value: int
    modulus: int = BN254_SCALAR_FIELD

    def __post_init__(self):
        if not 0 <= self.value < self.modulus:
            raise ValueError(f"field element {self.value} outside [0, p)")

    @classmethod
    def of(cls, value: int, modulus: int = BN254_SCALAR_FIELD) -> "FieldElem":
        return cls(value % modulus, modulus)

    def __add__(self, other: "FieldElem") -> "FieldElem":
        return FieldElem((self.value + _raw(other)) % self.modulus, self.modulus)

    def __sub__(self, other: "FieldElem") -> "FieldElem":
        return FieldElem((self.value - _raw(other)) % self.modulus, self.modulus)

    def __mul__(self, other: "FieldElem") -> "FieldElem":
        return FieldElem((self.value * _raw(other)) % self.modulus, self.modulus)

    def __neg__(self) -> "FieldElem":
        return FieldElem((-self.value) % self.modulus, self.modulus)

    def __int__(self) -> int:
        return self.value

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(FIELD_BYTES, "little")

    @classmethod
    def from_bytes(cls, data: bytes, modulus: int = BN254_SCALAR_FIELD) -> "FieldElem":
        if len(data) != FIELD_BYTES:
            raise ValueError(f"expected {FIELD_BYTES} bytes, got {len(data)}")
        return cls(int.from_bytes(data, "little"), modulus)


def _raw(other) -> int:
    return other.value if isinstance(other, FieldElem) else int(other)


def to_signed(value: int, modulus: int = BN254_SCALAR_FIELD) -> int:
    """Interpret a field value above p/2 as negative"""
    value %= modulus
    return value - modulus if value > modulus // 2 else value


def from_signed(value: int, modulus: int = BN254_SCALAR_FIELD) -> int:
    return value % modulus


def check_range(value: int, cfg: FixedConfig = DEFAULT_FIXED) -> int:
    """Raise RangeOverflow unless |value| < 2^(R-1); returns the value"""
    if not -cfg.bound < value < cfg.bound:
        raise RangeOverflow(f"signed value {value} exceeds {cfg.range_bits}-bit range")
    return value


def to_fixed(x: float, cfg: FixedConfig = DEFAULT_FIXED) -> int:
    """Signed integer encoding round(x * 2^f)"""
    if not abs(x) < cfg.real_bound:
        raise RangeOverflow(f"{x} outside the representable range ±{cfg.real_bound}")
    return int(round(x * cfg.one))


def from_fixed(value: int, cfg: FixedConfig = DEFAULT_FIXED) -> float:
    return check_range(value, cfg) / cfg.one


def fixed_mul(a: int, b: int, cfg: FixedConfig = DEFAULT_FIXED) -> int:
    """floor(a * b / 2^f) on signed integers, range checked"""
    return check_range((a * b) >> cfg.scale_bits, cfg)


def encode(x: float, cfg: FixedConfig = DEFAULT_FIXED) -> FieldElem:
    return FieldElem(from_signed(to_fixed(x, cfg), cfg.modulus), cfg.modulus)


def decode(v: FieldElem, cfg: FixedConfig = DEFAULT_FIXED) -> float:
    return from_fixed(to_signed(_raw(v), cfg.modulus), cfg)


def mul_rescale(a: FieldElem, b: FieldElem, cfg: FixedConfig = DEFAULT_FIXED) -> FieldElem:
    sa = check_range(to_signed(_raw(a), cfg.modulus), cfg)
    sb = check_range(to_signed(_raw(b), cfg.modulus), cfg)
    return FieldElem(from_signed(fixed_mul(sa, sb, cfg), cfg.modulus), cfg.modulus)


def to_fixed_array(values, cfg: FixedConfig = DEFAULT_FIXED) -> np.ndarray:
    """Encode a float array into an object array of signed Python ints"""
    arr = np.asarray(values, dtype=float)
    out = np.empty(arr.shape, dtype=object)
    for idx, x in np.ndenumerate(arr):
        out[idx] = to_fixed(float(x), cfg)
    return out


def from_fixed_array(values, cfg: FixedConfig = DEFAULT_FIXED) -> np.ndarray:
    arr = np.asarray(values, dtype=object)
    out = np.empty(arr.shape, dtype=float)
    for idx, v in np.ndenumerate(arr):
        out[idx] = from_fixed(int(v), cfg)
    return out
