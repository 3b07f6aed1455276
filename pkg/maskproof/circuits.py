"""Step, mask-update and forging-attack-detection (FAD) circuits.

Every circuit is a Python function over a ConstraintSystem that runs unchanged
in structure mode (digest, constraint count, verification) and witness mode
(synthesis). Nothing in the structure depends on data or mask values, so one
shape has one digest.

Step circuits prove one optimizer step w' = w - eta * avg(G) of a minibatch
whose rows are opened against the committed dataset and whose mask bits are
selected from the committed mask state. The mask-update circuit proves the
per-round state rule. The FAD circuit flags gradient replicas of every
unlearned sample inside a minibatch.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .commitments import (OpeningPath, chain_commitment_gadget, commit_packed, hash_field, hash_gadget, merkle_paths,
                          merkle_root, opening_gadget, tree_depth)
from .constraint_system import (LC, ConstraintSystem, Witness, as_lc, circuit_digest, gadget_bit_decompose,
                                gadget_bool, gadget_is_zero, gadget_leq, gadget_select, gadget_truncate,
                                gadget_unpack, gadget_xor, lc_sum)
from .errors import BadShape, EmptyEffectiveSet, NonBinaryLabel, SlotOverflow
from .fixed_point import DEFAULT_FIXED, FixedConfig
from .masking import MaskLayout, MaskState, pack_words
from .training import FixedDataset, ModelParams, ModelShape

logger = logging.getLogger(__name__)

GRANULARITIES = ("feature", "sample", "none")
DEFAULT_FAD_SLOTS = 4


def _cfg_dict(cfg: FixedConfig) -> dict:
    return {"scale_bits": cfg.scale_bits, "range_bits": cfg.range_bits, "modulus": hex(cfg.modulus)}


def _cfg_from(data: dict) -> FixedConfig:
    return FixedConfig(scale_bits=data["scale_bits"], range_bits=data["range_bits"], modulus=int(data["modulus"], 16))


def _model_dict(model: ModelShape) -> dict:
    return {"arch": model.arch, "features": model.features, "hidden": model.hidden, "classes": model.classes}


@dataclass(frozen=True)
class StepShape:
    model: ModelShape
    batch: int
    dataset_size: int
    granularity: str = "feature"
    class_masked: bool = False
    cfg: FixedConfig = DEFAULT_FIXED

    def __post_init__(self):
        if self.batch < 1 or self.dataset_size < self.batch:
            raise BadShape(f"batch {self.batch} must lie in [1, {self.dataset_size}]")
        if self.granularity not in GRANULARITIES:
            raise BadShape(f"unknown granularity {self.granularity!r}")
        if self.class_masked and (self.model.arch != "nn" or self.granularity == "none"):
            raise BadShape("class masks need a masked network circuit")

    @property
    def masked(self) -> bool:
        return self.granularity != "none"

    @property
    def index_bits(self) -> int:
        return tree_depth(self.dataset_size)

    def mask_layout(self) -> Optional[MaskLayout]:
        if not self.masked:
            return None
        removal = self.model.features if self.granularity == "feature" else 1
        return MaskLayout(self.dataset_size, removal, self.model.classes if self.class_masked else 0)

    def key(self) -> str:
        m = self.model
        return (f"step/{m.arch}-{m.features}-{m.hidden}-{m.classes}/b{self.batch}/n{self.dataset_size}/"
                f"{self.granularity}{'+class' if self.class_masked else ''}/f{self.cfg.scale_bits}r{self.cfg.range_bits}")

    def to_dict(self) -> dict:
        return {"kind": "step", "model": _model_dict(self.model), "batch": self.batch,
                "dataset_size": self.dataset_size, "granularity": self.granularity,
                "class_masked": self.class_masked, "fixed": _cfg_dict(self.cfg)}


@dataclass(frozen=True)
class FadShape:
    """Detection circuit shape.

    `slots` is a fixed capacity of unlearned rows; unused slots are switched
    off by a private bit, so the circuit never depends on how many rows were
    actually unlearned.
    """

    model: ModelShape
    batch: int
    dataset_size: int
    xi: int
    slots: int = DEFAULT_FAD_SLOTS
    granularity: str = "feature"
    class_masked: bool = False
    cfg: FixedConfig = DEFAULT_FIXED

    def __post_init__(self):
        if self.batch < 1 or self.dataset_size < self.batch:
            raise BadShape(f"batch {self.batch} must lie in [1, {self.dataset_size}]")
        if self.granularity not in ("feature", "sample"):
            raise BadShape("detection runs on masked datasets only")
        if self.xi < 0 or self.slots < 1:
            raise BadShape(f"invalid detection parameters xi={self.xi}, slots={self.slots}")
        if self.xi ** 2 >> self.distance_bits:
            raise BadShape("threshold exceeds the distance range")

    @property
    def index_bits(self) -> int:
        return tree_depth(self.dataset_size)

    @property
    def distance_bits(self) -> int:
        return 2 * (self.cfg.range_bits + 2) + self.model.num_params.bit_length()

    def mask_layout(self) -> MaskLayout:
        removal = self.model.features if self.granularity == "feature" else 1
        return MaskLayout(self.dataset_size, removal, self.model.classes if self.class_masked else 0)

    def key(self) -> str:
        m = self.model
        return (f"fad/{m.arch}-{m.features}-{m.hidden}-{m.classes}/b{self.batch}/n{self.dataset_size}/"
                f"s{self.slots}/xi{self.xi}/{self.granularity}{'+class' if self.class_masked else ''}/"
                f"f{self.cfg.scale_bits}r{self.cfg.range_bits}")

    def to_dict(self) -> dict:
        return {"kind": "fad", "model": _model_dict(self.model), "batch": self.batch,
                "dataset_size": self.dataset_size, "xi": self.xi, "slots": self.slots,
                "granularity": self.granularity, "class_masked": self.class_masked, "fixed": _cfg_dict(self.cfg)}


@dataclass(frozen=True)
class MaskUpdateShape:
    owner_rows: Tuple[int, ...]
    removal_width: int
    class_width: int = 0
    cfg: FixedConfig = DEFAULT_FIXED

    def __post_init__(self):
        if not self.owner_rows or min(self.owner_rows) < 1:
            raise BadShape("every owner needs at least one row")
        self.layout()

    @property
    def n_rows(self) -> int:
        return sum(self.owner_rows)

    def layout(self) -> MaskLayout:
        return MaskLayout(self.n_rows, self.removal_width, self.class_width)

    def key(self) -> str:
        rows = "-".join(map(str, self.owner_rows))
        return f"mask-update/{rows}/g{self.removal_width}/c{self.class_width}"

    def to_dict(self) -> dict:
        return {"kind": "mask-update", "owner_rows": list(self.owner_rows), "removal_width": self.removal_width,
                "class_width": self.class_width, "fixed": _cfg_dict(self.cfg)}


Shape = Union[StepShape, FadShape, MaskUpdateShape]


def shape_from_dict(data: dict) -> Shape:
    cfg = _cfg_from(data["fixed"])
    kind = data.get("kind")
    if kind == "mask-update":
        return MaskUpdateShape(tuple(data["owner_rows"]), data["removal_width"], data["class_width"], cfg)
    model = ModelShape(**data["model"])
    if kind == "step":
        return StepShape(model, data["batch"], data["dataset_size"], data["granularity"], data["class_masked"], cfg)
    if kind == "fad":
        return FadShape(model, data["batch"], data["dataset_size"], data["xi"], data["slots"],
                        data["granularity"], data["class_masked"], cfg)
    raise BadShape(f"unknown circuit kind {kind!r}")


# ---------------------------------------------------------------------------
# statements

@dataclass(frozen=True)
class StepStatement:
    dataset_root: int
    model_in: int
    model_out: int
    eta: int
    state: Optional[int]
    indices: Tuple[int, ...]
    round: int = 0
    circuit_digest: str = ""

    def public_inputs(self, modulus: int = DEFAULT_FIXED.modulus) -> Tuple[int, ...]:
        head = [self.dataset_root, self.model_in, self.model_out, self.eta % modulus]
        if self.state is not None:
            head.append(self.state)
        return tuple(head) + tuple(self.indices)


@dataclass(frozen=True)
class FadStatement:
    dataset_root: int
    model: int
    state: int
    indices: Tuple[int, ...]
    flags: Tuple[int, ...]
    round: int = 0
    circuit_digest: str = ""

    def public_inputs(self, modulus: int = DEFAULT_FIXED.modulus) -> Tuple[int, ...]:
        return (self.dataset_root, self.model, self.state) + tuple(self.indices) + tuple(self.flags)


@dataclass(frozen=True)
class MaskUpdateStatement:
    prev_state: int
    new_state: int
    requests: Tuple[int, ...]
    round: int = 0
    circuit_digest: str = ""

    def public_inputs(self, modulus: int = DEFAULT_FIXED.modulus) -> Tuple[int, ...]:
        return (self.prev_state, self.new_state) + tuple(self.requests)


# ---------------------------------------------------------------------------
# shared sub-circuits

def _input(cs: ConstraintSystem, value: Optional[int]) -> LC:
    return cs.alloc(None if value is None else (lambda: value))


def _inputs(cs: ConstraintSystem, values: Optional[Sequence[int]], count: int) -> List[LC]:
    return [_input(cs, None if values is None else int(values[i])) for i in range(count)]


def _param_view(model: ModelShape, flat: List[LC]) -> Dict[str, list]:
    view, offset = {}, 0
    for name, dims in model.param_shapes.items():
        size = int(np.prod(dims))
        chunk = flat[offset:offset + size]
        view[name] = [chunk[r * dims[1]:(r + 1) * dims[1]] for r in range(dims[0])] if len(dims) == 2 else chunk
        offset += size
    return view


def _any(cs: ConstraintSystem, bits: Sequence[LC]) -> LC:
    """OR of boolean variables as 1 - prod(1 - b)"""
    if len(bits) == 1:
        return as_lc(bits[0])
    none = 1 - as_lc(bits[0])
    for bit in bits[1:]:
        none = cs.mul(none, 1 - as_lc(bit), "or")
    return 1 - none


def _open_row(cs: ConstraintSystem, root: LC, randomness: LC, index_bits: List[LC], values: List[LC],
              siblings: List[LC]) -> None:
    digest = hash_gadget(cs, values)
    cs.enforce_equal(opening_gadget(cs, digest, randomness, index_bits, siblings), root, "dataset.opening")


def _row_mask_bits(cs: ConstraintSystem, layout: MaskLayout, words: List[LC], index_bits: List[LC]) -> List[LC]:
    """Mask bits of the row at the (bit-decomposed) index, selected from the packed state"""
    slot = layout.slot_bits
    word = gadget_select(cs, words, index_bits[slot:])
    k, w = layout.rows_per_word, layout.row_width
    word_bits = gadget_unpack(cs, word, k * w)
    return [gadget_select(cs, [word_bits[r * w + g] for r in range(1 << slot)], index_bits[:slot])
            for g in range(w)]


def _pack_lc(bits: Sequence[Sequence[LC]], layout: MaskLayout) -> List[LC]:
    k, w = layout.rows_per_word, layout.row_width
    words = [LC() for _ in range(layout.n_words)]
    for r, row in enumerate(bits):
        base = (r % k) * w
        words[r // k] = words[r // k] + lc_sum(bit * (1 << (base + g)) for g, bit in enumerate(row))
    return words


@dataclass
class _RowVars:
    xm: List[LC]
    s: LC
    err: List[LC]
    act: List[LC] = field(default_factory=list)
    dpre: List[LC] = field(default_factory=list)


def _row_circuit(cs: ConstraintSystem, model: ModelShape, cfg: FixedConfig, view: Dict[str, list],
                 x: List[LC], y: List[LC], removal: Optional[List[LC]], feature_masked: bool,
                 classes: Optional[List[LC]], gate: bool) -> _RowVars:
    f, R = cfg.scale_bits, cfg.range_bits
    if removal is None:
        s, xm = LC.const(1), x
    else:
        s = _any(cs, removal)
        xm = [cs.mul(xj, bj, "mask.feature") for xj, bj in zip(x, removal)] if feature_masked else x

    def gated(value: LC) -> LC:
        return cs.mul(s, value, "mask.gate") if gate and removal is not None else value

    if model.arch == "lr":
        acc = lc_sum(cs.mul(a, b, "lr.dot") for a, b in zip(xm, view["w"]))
        pred = gadget_truncate(cs, acc, f, R) + view["bias"][0]
        return _RowVars(xm, s, [gated(pred - y[0])])

    W1, b1, W2, b2 = view["W1"], view["b1"], view["W2"], view["b2"]
    H, K = model.hidden, model.classes
    for label in y:
        gadget_bool(cs, label)
    pre = [gadget_truncate(cs, lc_sum(cs.mul(xm[j], W1[j][h], "nn.l1") for j in range(len(xm))), f, R) + b1[h]
           for h in range(H)]
    pos = [1 - gadget_leq(cs, v + (1 << R), 1 << R, R + 1) for v in pre]
    act = [cs.mul(pos[h], pre[h], "relu") for h in range(H)]
    out = [gadget_truncate(cs, lc_sum(cs.mul(act[h], W2[h][k], "nn.l2") for h in range(H)), f, R) + b2[k]
           for k in range(K)]
    labels = [gadget_xor(cs, y[k], classes[k]) for k in range(K)] if classes else y
    err = [gated(out[k] - labels[k] * cfg.one) for k in range(K)]
    dh = [gadget_truncate(cs, lc_sum(cs.mul(err[k], W2[h][k], "nn.back") for k in range(K)), f, R)
          for h in range(H)]
    dpre = [cs.mul(pos[h], dh[h], "relu.back") for h in range(H)]
    return _RowVars(xm, s, err, act, dpre)


def _batch_sums(cs: ConstraintSystem, model: ModelShape, cfg: FixedConfig, rows: List[_RowVars]) -> List[LC]:
    f, R = cfg.scale_bits, cfg.range_bits

    def trunc_sum(terms):
        return gadget_truncate(cs, lc_sum(cs.mul(a, b, "grad") for a, b in terms), f, R)

    if model.arch == "lr":
        gw = [trunc_sum((r.xm[j], r.err[0]) for r in rows) for j in range(model.features)]
        return gw + [lc_sum(r.err[0] for r in rows)]
    J, H, K = model.features, model.hidden, model.classes
    gW1 = [trunc_sum((r.xm[j], r.dpre[h]) for r in rows) for j in range(J) for h in range(H)]
    gb1 = [lc_sum(r.dpre[h] for r in rows) for h in range(H)]
    gW2 = [trunc_sum((r.act[h], r.err[k]) for r in rows) for h in range(H) for k in range(K)]
    gb2 = [lc_sum(r.err[k] for r in rows) for k in range(K)]
    return gW1 + gb1 + gW2 + gb2


def _sample_gradient(cs: ConstraintSystem, model: ModelShape, cfg: FixedConfig, r: _RowVars) -> List[LC]:
    f, R = cfg.scale_bits, cfg.range_bits

    def trunc(a, b):
        return gadget_truncate(cs, cs.mul(a, b, "grad"), f, R)

    if model.arch == "lr":
        return [trunc(xj, r.err[0]) for xj in r.xm] + [r.err[0]]
    J, H, K = model.features, model.hidden, model.classes
    return ([trunc(r.xm[j], r.dpre[h]) for j in range(J) for h in range(H)] + list(r.dpre)
            + [trunc(r.act[h], r.err[k]) for h in range(H) for k in range(K)] + list(r.err))


def _apply_update(cs: ConstraintSystem, shape: StepShape, params: List[LC], sums: List[LC], eta: LC,
                  rows: List[_RowVars]) -> List[LC]:
    cfg = shape.cfg
    f, R, two_f = cfg.scale_bits, cfg.range_bits, 2 * cfg.scale_bits
    if shape.masked:
        n_hat = lc_sum(r.s for r in rows)
        # an all-unlearned minibatch divides by 1; its gated sums are 0 anyway
        divisor = n_hat + gadget_is_zero(cs, n_hat)
        inverse = cs.alloc(lambda: (1 << two_f) // cs.eval(divisor))
        gadget_bit_decompose(cs, inverse, two_f + 1)
        slack = (1 << two_f) - cs.mul(divisor, inverse, "inverse")
        nbits = shape.batch.bit_length() + 1
        gadget_bit_decompose(cs, slack, nbits)
        cs.enforce_equal(gadget_leq(cs, slack + 1, divisor, nbits), 1, "inverse.slack")
        scaled = [cs.mul(g, inverse, "average") for g in sums]
    else:
        inverse = (1 << two_f) // shape.batch
        scaled = [g * inverse for g in sums]
    new = []
    for w, g in zip(params, scaled):
        avg = gadget_truncate(cs, g, two_f, R)
        update = gadget_truncate(cs, cs.mul(eta, avg, "eta"), f, R)
        new.append(w - update)
    return new


# ---------------------------------------------------------------------------
# circuit bodies

@dataclass
class _RowValues:
    features: List[int]
    labels: List[int]
    siblings: List[int]


@dataclass
class StepValues:
    """Everything a step witness needs, prepared outside the circuit"""

    dataset_root: int
    model_in: int
    eta: int
    state: Optional[int]
    indices: List[int]
    dataset_randomness: int
    randomness_in: int
    randomness_out: int
    state_randomness: int
    params: List[int]
    words: List[int]
    rows: List[_RowValues]


def _step_circuit(cs: ConstraintSystem, shape: StepShape, v: Optional[StepValues]) -> None:
    model, cfg = shape.model, shape.cfg
    d = shape.index_bits
    root = cs.alloc_public(v and v.dataset_root)
    com_in = cs.alloc_public(v and v.model_in)
    com_out = cs.alloc_public()
    eta = cs.alloc_public(v and v.eta)
    com_state = cs.alloc_public(v and v.state) if shape.masked else None
    indices = [cs.alloc_public(v and v.indices[i]) for i in range(shape.batch)]

    r_data = _input(cs, v and v.dataset_randomness)
    r_in = _input(cs, v and v.randomness_in)
    r_out = _input(cs, v and v.randomness_out)
    params = _inputs(cs, v and v.params, model.num_params)
    chain_commitment_gadget(cs, com_in, params, r_in)
    view = _param_view(model, params)

    layout = shape.mask_layout()
    words = []
    if shape.masked:
        r_state = _input(cs, v and v.state_randomness)
        words = _inputs(cs, v and v.words, layout.n_words)
        chain_commitment_gadget(cs, com_state, words, r_state)

    rows = []
    for i in range(shape.batch):
        row = v.rows[i] if v else None
        x = _inputs(cs, row and row.features, model.features)
        y = _inputs(cs, row and row.labels, model.label_width)
        siblings = _inputs(cs, row and row.siblings, d)
        bits = gadget_bit_decompose(cs, indices[i], d)
        _open_row(cs, root, r_data, bits, x + y, siblings)
        removal = classes = None
        if shape.masked:
            mask_bits = _row_mask_bits(cs, layout, words, bits)
            removal = mask_bits[:layout.removal_width]
            classes = mask_bits[layout.removal_width:] or None
        rows.append(_row_circuit(cs, model, cfg, view, x, y, removal, shape.granularity == "feature",
                                 classes, gate=True))

    sums = _batch_sums(cs, model, cfg, rows)
    new = _apply_update(cs, shape, params, sums, eta, rows)
    cs.reveal(com_out, hash_gadget(cs, new + [r_out]), "model.out")


@dataclass
class FadValues:
    dataset_root: int
    model: int
    state: int
    indices: List[int]
    unlearned: List[int]
    active: List[int]
    dataset_randomness: int
    model_randomness: int
    state_randomness: int
    params: List[int]
    words: List[int]
    rows: List[_RowValues]
    unlearned_rows: List[_RowValues]


def _fad_circuit(cs: ConstraintSystem, shape: FadShape, v: Optional[FadValues]) -> None:
    model, cfg = shape.model, shape.cfg
    d, layout = shape.index_bits, shape.mask_layout()
    root = cs.alloc_public(v and v.dataset_root)
    com_model = cs.alloc_public(v and v.model)
    com_state = cs.alloc_public(v and v.state)
    indices = [cs.alloc_public(v and v.indices[i]) for i in range(shape.batch)]
    flags = [cs.alloc_public() for _ in range(shape.batch)]

    r_data = _input(cs, v and v.dataset_randomness)
    r_model = _input(cs, v and v.model_randomness)
    r_state = _input(cs, v and v.state_randomness)
    params = _inputs(cs, v and v.params, model.num_params)
    chain_commitment_gadget(cs, com_model, params, r_model)
    view = _param_view(model, params)
    words = _inputs(cs, v and v.words, layout.n_words)
    chain_commitment_gadget(cs, com_state, words, r_state)

    # survivors of the whole dataset: the unlearned set is exactly the rows with no bit left
    k, w, g_width = layout.rows_per_word, layout.row_width, layout.removal_width
    all_bits = []
    for word in words:
        all_bits += gadget_unpack(cs, word, k * w)
    survivors = [_any(cs, all_bits[r * w:r * w + g_width]) for r in range(shape.dataset_size)]
    # indices past the dataset select a survivor, so no slot can point there
    padded = survivors + [LC.const(1)] * ((1 << d) - shape.dataset_size)

    # active slots form a prefix of strictly increasing unlearned indices and
    # their number equals the (private) count of unlearned rows
    active = _inputs(cs, v and v.active, shape.slots)
    targets, previous = [], None
    for a in range(shape.slots):
        gadget_bool(cs, active[a])
        row = v.unlearned_rows[a] if v else None
        u = _input(cs, v and v.unlearned[a])
        bits = gadget_bit_decompose(cs, u, d)
        if previous is not None:
            cs.enforce(active[a], 1 - active[a - 1], 0, "fad.prefix")
            cs.enforce(active[a], 1 - gadget_leq(cs, previous + 1, u, d + 1), 0, "fad.order")
        previous = u
        cs.enforce(active[a], gadget_select(cs, padded, bits), 0, "fad.unlearned")
        x = _inputs(cs, row and row.features, model.features)
        y = _inputs(cs, row and row.labels, model.label_width)
        siblings = _inputs(cs, row and row.siblings, d)
        _open_row(cs, root, r_data, bits, x + y, siblings)
        r = _row_circuit(cs, model, cfg, view, x, y, None, False, None, gate=False)
        targets.append(_sample_gradient(cs, model, cfg, r))
    cs.enforce_equal(shape.dataset_size - lc_sum(survivors), lc_sum(active), "fad.unlearned_count")

    threshold = shape.xi ** 2
    for i in range(shape.batch):
        row = v.rows[i] if v else None
        x = _inputs(cs, row and row.features, model.features)
        y = _inputs(cs, row and row.labels, model.label_width)
        siblings = _inputs(cs, row and row.siblings, d)
        bits = gadget_bit_decompose(cs, indices[i], d)
        _open_row(cs, root, r_data, bits, x + y, siblings)
        mask_bits = _row_mask_bits(cs, layout, words, bits)
        removal, classes = mask_bits[:g_width], mask_bits[g_width:] or None
        r = _row_circuit(cs, model, cfg, view, x, y, removal, shape.granularity == "feature", classes, gate=False)
        grad = _sample_gradient(cs, model, cfg, r)
        hits = []
        for a, target in enumerate(targets):
            dist = lc_sum(cs.mul(gm - gu, gm - gu, "fad.sq") for gm, gu in zip(grad, target))
            close = gadget_leq(cs, dist, threshold, shape.distance_bits)
            hits.append(cs.mul(active[a], close, "fad.hit"))
        cs.reveal(flags[i], cs.mul(r.s, _any(cs, hits), "fad.flag"), "fad.flag")


@dataclass
class MaskUpdateValues:
    prev_state: int
    requests: List[int]
    prev_randomness: int
    new_randomness: int
    request_randomness: List[int]
    prev_bits: np.ndarray
    request_bits: np.ndarray


def _mask_update_circuit(cs: ConstraintSystem, shape: MaskUpdateShape, v: Optional[MaskUpdateValues]) -> None:
    layout = shape.layout()
    n, w, g_width = layout.n_rows, layout.row_width, layout.removal_width
    com_prev = cs.alloc_public(v and v.prev_state)
    com_new = cs.alloc_public()
    com_requests = [cs.alloc_public(v and v.requests[o]) for o in range(len(shape.owner_rows))]

    r_prev = _input(cs, v and v.prev_randomness)
    r_new = _input(cs, v and v.new_randomness)
    r_requests = _inputs(cs, v and v.request_randomness, len(shape.owner_rows))
    prev = [_inputs(cs, None if v is None else v.prev_bits[r], w) for r in range(n)]
    req = [_inputs(cs, None if v is None else v.request_bits[r], w) for r in range(n)]
    for row in prev + req:
        for bit in row:
            gadget_bool(cs, bit)

    chain_commitment_gadget(cs, com_prev, _pack_lc(prev, layout), r_prev)
    start = 0
    for o, n_rows in enumerate(shape.owner_rows):
        local = MaskLayout(n_rows, shape.removal_width, shape.class_width)
        chain_commitment_gadget(cs, com_requests[o], _pack_lc(req[start:start + n_rows], local), r_requests[o])
        start += n_rows

    new = [[cs.mul(prev[r][g], req[r][g], "state.and") if g < g_width else gadget_xor(cs, prev[r][g], req[r][g])
            for g in range(w)] for r in range(n)]
    cs.reveal(com_new, hash_gadget(cs, _pack_lc(new, layout) + [r_new]), "state.new")


_BODIES = {StepShape: _step_circuit, FadShape: _fad_circuit, MaskUpdateShape: _mask_update_circuit}


# ---------------------------------------------------------------------------
# circuit handles

class Circuit:
    """A circuit shape together with lazily computed digest and size"""

    def __init__(self, shape: Shape):
        self.shape = shape
        self.name = shape.key()
        self._digest: Optional[str] = None
        self._num_public: Optional[int] = None
        self._num_vars: Optional[int] = None
        self._count: Optional[int] = None

    def __repr__(self) -> str:
        return f"Circuit({self.name})"

    def run(self, cs: ConstraintSystem, values=None) -> ConstraintSystem:
        cs.name = self.name
        cs.shape = self.shape
        _BODIES[type(self.shape)](cs, self.shape, values)
        return cs.finalize()

    def _measure(self) -> None:
        cs = self.run(ConstraintSystem(self.shape.cfg.modulus, record=False, digest=True))
        self._digest = circuit_digest(cs)
        self._num_public, self._num_vars, self._count = cs.num_public, cs.num_vars, cs.count

    @property
    def digest(self) -> str:
        if self._digest is None:
            self._measure()
        return self._digest

    @property
    def num_public(self) -> int:
        if self._num_public is None:
            self._measure()
        return self._num_public

    @property
    def num_vars(self) -> int:
        if self._num_vars is None:
            self._measure()
        return self._num_vars

    def constraint_count(self) -> int:
        if self._count is None:
            cs = self.run(ConstraintSystem(self.shape.cfg.modulus, record=False))
            self._num_public, self._num_vars, self._count = cs.num_public, cs.num_vars, cs.count
        return self._count

    def structure(self) -> ConstraintSystem:
        """Fully recorded constraint system (memory heavy; meant for small shapes)"""
        return self.run(ConstraintSystem(self.shape.cfg.modulus, record=True))

    def check(self, witness: Witness) -> Optional[int]:
        if witness.assignments[0] != 1 or len(witness) != self.num_vars:
            return -1
        cs = self.run(ConstraintSystem(self.shape.cfg.modulus, record=False, against=witness.assignments))
        return cs.first_violation

    def synthesize(self, values) -> Witness:
        cs = self.run(ConstraintSystem(self.shape.cfg.modulus, values=True, record=False, check=True), values)
        return cs.witness()


@lru_cache(maxsize=64)
def get_circuit(shape: Shape) -> Circuit:
    return Circuit(shape)


def as_circuit(circuit) -> Circuit:
    if isinstance(circuit, Circuit):
        return circuit
    if isinstance(circuit, ConstraintSystem):
        if circuit.shape is None:
            raise BadShape("constraint system was not built by a circuit builder")
        return get_circuit(circuit.shape)
    return get_circuit(circuit)


class CircuitRegistry:
    """Pinned circuit digests of a session, keyed by shape"""

    def __init__(self):
        self._by_key: Dict[str, Circuit] = {}
        self._by_digest: Dict[str, Circuit] = {}

    def pin(self, shape: Shape) -> Circuit:
        circuit = self._by_key.get(shape.key())
        if circuit is None:
            circuit = get_circuit(shape)
            self._by_key[shape.key()] = circuit
            self._by_digest[circuit.digest] = circuit
            logger.info(f"Pinned circuit {circuit.name} ({circuit.digest[:12]})")
        return circuit

    def resolve(self, digest: str) -> Optional[Circuit]:
        return self._by_digest.get(digest)

    def entries(self) -> List[dict]:
        return [{"key": c.name, "digest": c.digest, "shape": c.shape.to_dict()} for c in self._by_key.values()]

    @classmethod
    def from_entries(cls, entries: Sequence[dict]) -> "CircuitRegistry":
        """Rebuild without trusting the recorded digests (compare them afterwards)"""
        registry = cls()
        for entry in entries:
            registry.pin(shape_from_dict(entry["shape"]))
        return registry


# ---------------------------------------------------------------------------
# builders

def _built(shape: Shape) -> ConstraintSystem:
    return get_circuit(shape).structure()


def build_lr_step_circuit(batch: int, features: int, granularity: str = "feature", dataset_size: Optional[int] = None,
                          cfg: FixedConfig = DEFAULT_FIXED) -> ConstraintSystem:
    return _built(StepShape(ModelShape("lr", features), batch, dataset_size or batch, granularity, False, cfg))


def build_nn_step_circuit(batch: int, features: int = 4, hidden: int = 4, classes: int = 4,
                          granularity: str = "feature", class_masked: bool = True,
                          dataset_size: Optional[int] = None, cfg: FixedConfig = DEFAULT_FIXED) -> ConstraintSystem:
    model = ModelShape("nn", features, hidden, classes)
    return _built(StepShape(model, batch, dataset_size or batch, granularity,
                            class_masked and granularity != "none", cfg))


def build_fad_circuit(batch: int, model: ModelShape, xi: int, dataset_size: Optional[int] = None,
                      slots: int = DEFAULT_FAD_SLOTS, granularity: str = "feature", class_masked: bool = False,
                      cfg: FixedConfig = DEFAULT_FIXED) -> ConstraintSystem:
    return _built(FadShape(model, batch, dataset_size or batch + 1, xi, slots, granularity, class_masked, cfg))


def build_mask_update_circuit(owner_rows: Sequence[int], removal_width: int, class_width: int = 0,
                              cfg: FixedConfig = DEFAULT_FIXED) -> ConstraintSystem:
    return _built(MaskUpdateShape(tuple(owner_rows), removal_width, class_width, cfg))


def count_constraints(shape: Shape) -> int:
    return get_circuit(shape).constraint_count()


@dataclass
class ScalingReport:
    """Constraint counts over batch sizes and their least-squares line"""

    batches: List[int]
    counts: List[int]
    slope: float
    intercept: float
    r2: float
    baseline: List[int] = field(default_factory=list)

    @property
    def overhead(self) -> List[float]:
        return [c / b for c, b in zip(self.counts, self.baseline)]

    def to_dict(self) -> dict:
        out = {"batches": self.batches, "constraints": self.counts, "slope": self.slope,
               "intercept": self.intercept, "r2": self.r2}
        if self.baseline:
            out.update(unmasked=self.baseline, overhead=self.overhead)
        return out


def _fit(batches: Sequence[int], counts: List[int], baseline: Optional[List[int]] = None) -> ScalingReport:
    if len(batches) < 3:
        raise BadShape("a scaling fit needs at least three batch sizes")
    fit = stats.linregress(np.asarray(batches, dtype=float), np.asarray(counts, dtype=float))
    logger.debug("scaling fit slope=%.2f r2=%.6f over %s", fit.slope, fit.rvalue ** 2, list(batches))
    return ScalingReport(list(batches), counts, float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2),
                         baseline or [])


def step_scaling(model: ModelShape, batches: Sequence[int], dataset_size: int, granularity: str = "feature",
                 class_masked: bool = False, cfg: FixedConfig = DEFAULT_FIXED) -> ScalingReport:
    """Masked step sizes, with the unmasked circuit of the same batch as baseline"""
    counts = [count_constraints(StepShape(model, b, dataset_size, granularity, class_masked, cfg)) for b in batches]
    plain = [count_constraints(StepShape(model, b, dataset_size, "none", False, cfg)) for b in batches]
    return _fit(batches, counts, plain)


def fad_scaling(model: ModelShape, batches: Sequence[int], dataset_size: int, xi: int = 0,
                slots: int = DEFAULT_FAD_SLOTS, granularity: str = "feature", class_masked: bool = False,
                cfg: FixedConfig = DEFAULT_FIXED) -> ScalingReport:
    counts = [count_constraints(FadShape(model, b, dataset_size, xi, slots, granularity, class_masked, cfg))
              for b in batches]
    return _fit(batches, counts)


# ---------------------------------------------------------------------------
# witness synthesis

def _row_values(dataset: FixedDataset, paths: Dict[int, OpeningPath], index: int) -> _RowValues:
    return _RowValues([int(v) for v in dataset.features[index]], [int(v) for v in dataset.labels[index]],
                      list(paths[index].siblings))


def _check_dataset(dataset: FixedDataset, model: ModelShape, dataset_size: int) -> None:
    if dataset.n_rows != dataset_size or dataset.n_features != model.features:
        raise BadShape(f"dataset {dataset.n_rows}x{dataset.n_features} does not fit circuit "
                       f"({dataset_size}x{model.features})")
    if dataset.n_labels != model.label_width:
        raise BadShape(f"dataset has {dataset.n_labels} label columns, model expects {model.label_width}")
    if model.arch == "nn" and dataset.task != "classification":
        raise NonBinaryLabel("the network circuit needs 0/1 class labels")


def _check_state(masks: Optional[MaskState], layout: Optional[MaskLayout]) -> None:
    if layout is None:
        if masks is not None:
            raise BadShape("unmasked circuit takes no mask state")
        return
    if masks is None or masks.layout() != layout:
        raise BadShape(f"mask state layout {masks and masks.layout()} does not match circuit layout {layout}")


@dataclass(frozen=True)
class StepRandomness:
    dataset: int = 0
    model_in: int = 0
    model_out: int = 0
    state: int = 0


def synthesize_witness(circuit, dataset: FixedDataset, masks: Optional[MaskState], params: ModelParams, eta: int,
                       *, indices: Sequence[int], randomness: StepRandomness = StepRandomness(),
                       allow_empty: bool = False) -> Witness:
    """Witness of one optimizer step; eta is the fixed-point learning rate"""
    circuit = as_circuit(circuit)
    shape = circuit.shape
    if not isinstance(shape, StepShape):
        raise BadShape(f"{circuit.name} is not a step circuit")
    _check_dataset(dataset, shape.model, shape.dataset_size)
    _check_state(masks, shape.mask_layout())
    indices = [int(i) for i in indices]
    if len(indices) != shape.batch or len(set(indices)) != len(indices):
        raise BadShape(f"expected {shape.batch} distinct indices, got {indices}")
    params = params.encode(shape.cfg)
    if masks is not None and not allow_empty and not masks.survivors()[indices].any():
        raise EmptyEffectiveSet("every sample of the minibatch is unlearned")
    p = shape.cfg.modulus
    leaves = [_leaf(dataset, randomness.dataset, i) for i in range(dataset.n_rows)]
    paths = {path.index: path for path in merkle_paths(leaves, indices, p)}
    words = masks.words() if masks is not None else []
    values = StepValues(
        dataset_root=_root(leaves, p),
        model_in=params.commit(randomness.model_in, shape.cfg).root,
        eta=eta,
        state=masks.commit(randomness.state, p).root if masks is not None else None,
        indices=indices,
        dataset_randomness=randomness.dataset,
        randomness_in=randomness.model_in,
        randomness_out=randomness.model_out,
        state_randomness=randomness.state,
        params=[int(v) for v in params.flatten()],
        words=words,
        rows=[_row_values(dataset, paths, i) for i in indices],
    )
    return circuit.synthesize(values)


def _leaf(dataset: FixedDataset, randomness: int, index: int) -> int:
    p = dataset.cfg.modulus
    return hash_field([hash_field(dataset.row_values(index), p), randomness, index], p)


def _root(leaves: List[int], modulus: int) -> int:
    return merkle_root(leaves, modulus)


@dataclass(frozen=True)
class FadRandomness:
    dataset: int = 0
    model: int = 0
    state: int = 0


def synthesize_fad_witness(circuit, dataset: FixedDataset, masks: MaskState, params: ModelParams,
                           *, indices: Sequence[int], unlearned: Sequence[int],
                           randomness: FadRandomness = FadRandomness()) -> Witness:
    circuit = as_circuit(circuit)
    shape = circuit.shape
    if not isinstance(shape, FadShape):
        raise BadShape(f"{circuit.name} is not a detection circuit")
    _check_dataset(dataset, shape.model, shape.dataset_size)
    _check_state(masks, shape.mask_layout())
    indices = [int(i) for i in indices]
    unlearned = sorted(int(u) for u in unlearned)
    if len(indices) != shape.batch:
        raise BadShape(f"expected {shape.batch} indices, got {len(indices)}")
    if len(unlearned) > shape.slots:
        raise SlotOverflow(f"{len(unlearned)} unlearned rows exceed the {shape.slots} detection slots")
    active = [1] * len(unlearned) + [0] * (shape.slots - len(unlearned))
    # idle slots open row 0; their bit keeps them out of every check
    unlearned += [0] * (shape.slots - len(unlearned))
    params = params.encode(shape.cfg)
    p = shape.cfg.modulus
    leaves = [_leaf(dataset, randomness.dataset, i) for i in range(dataset.n_rows)]
    paths = {path.index: path for path in merkle_paths(leaves, sorted(set(indices) | set(unlearned)), p)}
    values = FadValues(
        dataset_root=_root(leaves, p),
        model=params.commit(randomness.model, shape.cfg).root,
        state=masks.commit(randomness.state, p).root,
        indices=indices,
        unlearned=unlearned,
        active=active,
        dataset_randomness=randomness.dataset,
        model_randomness=randomness.model,
        state_randomness=randomness.state,
        params=[int(v) for v in params.flatten()],
        words=masks.words(),
        rows=[_row_values(dataset, paths, i) for i in indices],
        unlearned_rows=[_row_values(dataset, paths, u) for u in unlearned],
    )
    return circuit.synthesize(values)


def synthesize_mask_update_witness(circuit, prev: MaskState, request_bits: Sequence[np.ndarray],
                                   request_randomness: Sequence[int], prev_randomness: int,
                                   new_randomness: int) -> Witness:
    """request_bits holds each owner's local (removal | class) rows in registry order"""
    circuit = as_circuit(circuit)
    shape = circuit.shape
    if not isinstance(shape, MaskUpdateShape):
        raise BadShape(f"{circuit.name} is not a mask-update circuit")
    if prev.layout() != shape.layout():
        raise BadShape(f"mask state layout {prev.layout()} does not match {shape.layout()}")
    if len(request_bits) != len(shape.owner_rows) or len(request_randomness) != len(shape.owner_rows):
        raise BadShape("one request per registered owner is required")
    p = shape.cfg.modulus
    commitments = []
    for bits, r, n_rows in zip(request_bits, request_randomness, shape.owner_rows):
        local = MaskLayout(n_rows, shape.removal_width, shape.class_width)
        commitments.append(commit_packed(pack_words(np.asarray(bits), local), r, p).root)
    values = MaskUpdateValues(
        prev_state=prev.commit(prev_randomness, p).root,
        requests=commitments,
        prev_randomness=prev_randomness,
        new_randomness=new_randomness,
        request_randomness=[int(r) for r in request_randomness],
        prev_bits=prev.row_bits(),
        request_bits=np.vstack([np.asarray(b) for b in request_bits]),
    )
    return circuit.synthesize(values)
