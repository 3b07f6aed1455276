"""Field-native hashing and vector commitments, in and out of circuit.

hash_field is MiMC-7 (x -> x^7, 91 rounds) chained Miyaguchi-Preneel style:
h_0 = 0, h_i = E_{h_{i-1}}(x_i) + h_{i-1} + x_i. It costs four constraints per
round inside a circuit, which is what makes committing datasets and masks
inside every step proof affordable.
"""
import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

from .constraint_system import LC, ConstraintSystem, Operand, as_lc
from .errors import EmptyVector, IndexOutOfRange
from .fixed_point import BN254_SCALAR_FIELD, FIELD_BYTES


MIMC_ROUNDS = 91
MIMC_EXPONENT = 7
MIMC_SEED = b"maskproof.mimc7.round-constants"

MERKLE_SCHEME = "mimc7-merkle-2"
CHAIN_SCHEME = "mimc7-chain"


@lru_cache(maxsize=4)
def round_constants(modulus: int = BN254_SCALAR_FIELD) -> Tuple[int, ...]:
    consts = []
    for i in range(MIMC_ROUNDS):
        digest = hashlib.sha256(MIMC_SEED + i.to_bytes(4, "big")).digest()
        consts.append(int.from_bytes(digest, "big") % modulus)
    return tuple(consts)


def mimc_encrypt(key: int, x: int, modulus: int = BN254_SCALAR_FIELD) -> int:
    for c in round_constants(modulus):
        x = pow(x + key + c, MIMC_EXPONENT, modulus)
    return (x + key) % modulus


def hash_field(inputs: Sequence[int], modulus: int = BN254_SCALAR_FIELD) -> int:
    h = 0
    for x in inputs:
        x = int(x) % modulus
        h = (mimc_encrypt(h, x, modulus) + h + x) % modulus
    return h


@dataclass(frozen=True)
class Commitment:
    root: int
    scheme: str
    arity: int
    leaf_count: int

    def to_bytes(self) -> bytes:
        scheme = self.scheme.encode()
        return (self.root.to_bytes(FIELD_BYTES, "little") + len(scheme).to_bytes(1, "little")
                + scheme + self.leaf_count.to_bytes(4, "little"))

    def to_dict(self) -> dict:
        return {"root": hex(self.root), "scheme": self.scheme, "arity": self.arity, "leaf_count": self.leaf_count}

    @classmethod
    def from_dict(cls, data: dict) -> "Commitment":
        return cls(int(data["root"], 16), data["scheme"], int(data["arity"]), int(data["leaf_count"]))


@dataclass(frozen=True)
class OpeningPath:
    index: int
    siblings: Tuple[int, ...]


def tree_depth(leaf_count: int) -> int:
    return (leaf_count - 1).bit_length() if leaf_count > 1 else 0


def _leaves(values: Sequence[int], randomness: int, modulus: int) -> List[int]:
    return [hash_field([v, randomness, i], modulus) for i, v in enumerate(values)]


def _levels(leaves: List[int], modulus: int) -> List[List[int]]:
    depth = tree_depth(len(leaves))
    level = leaves + [0] * ((1 << depth) - len(leaves))
    levels = [level]
    for _ in range(depth):
        level = [hash_field([level[i], level[i + 1]], modulus) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def merkle_root(leaves: List[int], modulus: int = BN254_SCALAR_FIELD) -> int:
    return _levels(leaves, modulus)[-1][0]


def commit_vector(values: Sequence[int], randomness: int, modulus: int = BN254_SCALAR_FIELD) -> Commitment:
    if not len(values):
        raise EmptyVector("cannot commit to an empty vector")
    root = merkle_root(_leaves(values, randomness, modulus), modulus)
    return Commitment(root, MERKLE_SCHEME, 2, len(values))


def open_vector(values: Sequence[int], randomness: int, index: int,
                modulus: int = BN254_SCALAR_FIELD) -> OpeningPath:
    if not 0 <= index < len(values):
        raise IndexOutOfRange(f"index {index} outside [0, {len(values)})")
    return merkle_paths(_leaves(values, randomness, modulus), [index], modulus)[0]


def merkle_paths(leaves: List[int], indices: Sequence[int], modulus: int = BN254_SCALAR_FIELD) -> List[OpeningPath]:
    """Opening paths of several leaves of one tree"""
    levels = _levels(leaves, modulus)
    paths = []
    for index in indices:
        siblings, pos = [], index
        for level in levels[:-1]:
            siblings.append(level[pos ^ 1])
            pos >>= 1
        paths.append(OpeningPath(index, tuple(siblings)))
    return paths


def root_from_path(leaf: int, path: OpeningPath, modulus: int = BN254_SCALAR_FIELD) -> int:
    cur, pos = leaf, path.index
    for sibling in path.siblings:
        cur = hash_field([sibling, cur] if pos & 1 else [cur, sibling], modulus)
        pos >>= 1
    return cur


def verify_opening(com: Commitment, index: int, value: int, randomness: int, path: OpeningPath,
                   modulus: int = BN254_SCALAR_FIELD) -> bool:
    if not 0 <= index < com.leaf_count:
        raise IndexOutOfRange(f"index {index} outside [0, {com.leaf_count})")
    if com.scheme != MERKLE_SCHEME or path.index != index or len(path.siblings) != tree_depth(com.leaf_count):
        return False
    leaf = hash_field([value, randomness, index], modulus)
    return root_from_path(leaf, path, modulus) == com.root


def commit_packed(values: Sequence[int], randomness: int, modulus: int = BN254_SCALAR_FIELD) -> Commitment:
    """Chain commitment for vectors that are always opened whole"""
    if not len(values):
        raise EmptyVector("cannot commit to an empty vector")
    return Commitment(hash_field(list(values) + [randomness], modulus), CHAIN_SCHEME, 0, len(values))


# ---------------------------------------------------------------------------
# gadgets

def _mimc_mp_gadget(cs: ConstraintSystem, key: LC, x: LC) -> LC:
    """E_key(x) + key + x; the final round folds the chaining into its output"""
    consts = round_constants(cs.modulus)
    cur = x
    out = None
    for i, c in enumerate(consts):
        t = cur + key + c
        t2 = cs.mul(t, t, "mimc.sq")
        t4 = cs.mul(t2, t2, "mimc.sq2")
        t6 = cs.mul(t4, t2, "mimc.t6")
        if i == len(consts) - 1:
            out = cs.alloc(lambda t=t, t6=t6: cs.eval(t6) * cs.eval(t) + 2 * cs.eval(key) + cs.eval(x))
            cs.enforce(t6, t, out - key * 2 - x, "mimc.out")
        else:
            cur = cs.mul(t6, t, "mimc.t7")
    return out


def hash_gadget(cs: ConstraintSystem, inputs: Sequence[Operand]) -> LC:
    h = LC()
    for x in inputs:
        h = _mimc_mp_gadget(cs, h, as_lc(x))
    return h


def merkle_root_gadget(cs: ConstraintSystem, leaves: Sequence[LC]) -> LC:
    depth = tree_depth(len(leaves))
    level = list(leaves) + [LC()] * ((1 << depth) - len(leaves))
    for _ in range(depth):
        level = [hash_gadget(cs, [level[i], level[i + 1]]) for i in range(0, len(level), 2)]
    return level[0]


def commitment_gadget(cs: ConstraintSystem, root: Operand, values: Sequence[Operand], randomness: Operand) -> None:
    """Constrain that values hash to the public Merkle root under randomness"""
    leaves = [hash_gadget(cs, [v, randomness, i]) for i, v in enumerate(values)]
    cs.enforce_equal(merkle_root_gadget(cs, leaves), root, "commitment.root")


def opening_gadget(cs: ConstraintSystem, value: Operand, randomness: Operand, index_bits: Sequence[LC],
                   siblings: Sequence[LC]) -> LC:
    """Root reached from leaf (value, randomness, index) along a path chosen by index bits (LSB first)"""
    index = sum((bit * (1 << i) for i, bit in enumerate(index_bits)), LC())
    cur = hash_gadget(cs, [value, randomness, index])
    for bit, sibling in zip(index_bits, siblings):
        # left = cur + bit*(sibling - cur), right = sibling - bit*(sibling - cur)
        swap = cs.mul(bit, sibling - cur, "merkle.swap")
        cur = hash_gadget(cs, [cur + swap, sibling - swap])
    return cur


def chain_commitment_gadget(cs: ConstraintSystem, root: Operand, values: Sequence[Operand],
                            randomness: Operand) -> None:
    cs.enforce_equal(hash_gadget(cs, list(values) + [randomness]), root, "commitment.chain")
