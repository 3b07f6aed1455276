"""Masked gradients and optimizer steps.

Two implementations live side by side:

* a double-precision oracle (numpy) used to validate the math, and
* a fixed-point twin working on Python integers that performs exactly the
  integer operations of the step and FAD circuits, so circuit outputs can be
  compared to it bit for bit.

Conventions: residual = prediction - observation, loss = 1/2 MSE averaged over
the effective sample count, and masked rows are gated out of every term.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .commitments import Commitment, commit_packed, commit_vector, hash_field
from .errors import DimMismatch, EmptyEffectiveSet, NonBinaryLabel, RangeOverflow, TranscriptFormatError
from .fixed_point import DEFAULT_FIXED, FIELD_BYTES, FixedConfig, check_range, from_fixed_array, to_fixed, \
    to_fixed_array, to_signed
from .masking import BitMatrix, DatasetLayout, MaskKind, OwnerRange, apply_class_mask, apply_feature_mask, \
    sample_bits

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelShape:
    arch: str
    features: int
    hidden: int = 0
    classes: int = 1

    def __post_init__(self):
        if self.arch not in ("lr", "nn"):
            raise DimMismatch(f"unknown architecture {self.arch!r}")
        if self.features < 1 or (self.arch == "nn" and (self.hidden < 1 or self.classes < 1)):
            raise DimMismatch(f"invalid model shape {self}")

    @property
    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.arch == "lr":
            return {"w": (self.features,), "bias": (1,)}
        return {"W1": (self.features, self.hidden), "b1": (self.hidden,),
                "W2": (self.hidden, self.classes), "b2": (self.classes,)}

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes.values())

    @property
    def label_width(self) -> int:
        return 1 if self.arch == "lr" else self.classes


@dataclass(frozen=True)
class ModelParams:
    shape: ModelShape
    tensors: Dict[str, np.ndarray]
    fixed: bool = False

    def __post_init__(self):
        for name, dims in self.shape.param_shapes.items():
            if name not in self.tensors or np.shape(self.tensors[name]) != dims:
                raise DimMismatch(f"parameter {name} must have shape {dims}")
        if not self.fixed:
            flat = self.flatten()
            if not np.all(np.isfinite(flat)):
                raise RangeOverflow("model parameters must be finite")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def flatten(self) -> np.ndarray:
        parts = [np.asarray(self.tensors[name]).reshape(-1) for name in self.shape.param_shapes]
        return np.concatenate(parts) if not self.fixed else np.array(
            [int(v) for part in parts for v in part], dtype=object)

    @classmethod
    def from_flat(cls, shape: ModelShape, flat, fixed: bool = False) -> "ModelParams":
        flat = np.asarray(flat, dtype=object if fixed else float)
        if flat.shape != (shape.num_params,):
            raise DimMismatch(f"expected {shape.num_params} parameters, got {flat.shape}")
        tensors, offset = {}, 0
        for name, dims in shape.param_shapes.items():
            size = int(np.prod(dims))
            tensors[name] = flat[offset:offset + size].reshape(dims)
            offset += size
        return cls(shape, tensors, fixed)

    @classmethod
    def zeros(cls, shape: ModelShape) -> "ModelParams":
        return cls.from_flat(shape, np.zeros(shape.num_params))

    @classmethod
    def random(cls, shape: ModelShape, rng: np.random.Generator, scale: float = 0.5) -> "ModelParams":
        return cls.from_flat(shape, rng.uniform(-scale, scale, shape.num_params))

    def encode(self, cfg: FixedConfig = DEFAULT_FIXED) -> "ModelParams":
        if self.fixed:
            return self
        return ModelParams.from_flat(self.shape, to_fixed_array(self.flatten(), cfg), fixed=True)

    def decode(self, cfg: FixedConfig = DEFAULT_FIXED) -> "ModelParams":
        if not self.fixed:
            return self
        return ModelParams.from_flat(self.shape, from_fixed_array(self.flatten(), cfg))

    def field_values(self, modulus: int) -> List[int]:
        if not self.fixed:
            raise ValueError("encode the parameters before committing")
        return [int(v) % modulus for v in self.flatten()]

    def commit(self, randomness: int, cfg: FixedConfig = DEFAULT_FIXED) -> Commitment:
        return commit_packed(self.field_values(cfg.modulus), randomness, cfg.modulus)

    def to_checkpoint(self, cfg: FixedConfig = DEFAULT_FIXED) -> bytes:
        """Flat field-element array behind a shape header"""
        values = self.encode(cfg).field_values(cfg.modulus)
        arch = self.shape.arch.encode()
        header = struct.pack("<4sH2sIIII", b"MPCK", 1, arch, self.shape.features, self.shape.hidden,
                             self.shape.classes, len(values))
        return header + b"".join(v.to_bytes(FIELD_BYTES, "little") for v in values)

    @classmethod
    def from_checkpoint(cls, data: bytes, cfg: FixedConfig = DEFAULT_FIXED) -> "ModelParams":
        size = struct.calcsize("<4sH2sIIII")
        try:
            magic, version, arch, j, h, k, count = struct.unpack_from("<4sH2sIIII", data, 0)
        except struct.error as e:
            raise TranscriptFormatError(f"corrupt checkpoint: {e}") from e
        if magic != b"MPCK" or version != 1 or len(data) != size + count * FIELD_BYTES:
            raise TranscriptFormatError("not a model checkpoint")
        shape = ModelShape(arch.decode(), j, h, k)
        values = [to_signed(int.from_bytes(data[size + i * FIELD_BYTES:size + (i + 1) * FIELD_BYTES], "little"),
                            cfg.modulus) for i in range(count)]
        return cls.from_flat(shape, values, fixed=True)


@dataclass(frozen=True)
class FixedDataset:
    """Fixed-point training data.

    Regression labels are fixed-point reals (N x 1); classification labels are
    raw multi-hot bits (N x K).
    """

    features: np.ndarray
    labels: np.ndarray
    task: str = "regression"
    owners: Tuple[OwnerRange, ...] = ()
    cfg: FixedConfig = DEFAULT_FIXED

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 2 or len(self.features) != len(self.labels):
            raise DimMismatch(f"features {self.features.shape} and labels {self.labels.shape} do not align")
        if not len(self.features):
            raise DimMismatch("dataset has no rows")
        if self.task == "classification" and not all(int(v) in (0, 1) for v in self.labels.reshape(-1)):
            raise NonBinaryLabel("classification labels must be 0/1")
        for v in self.features.reshape(-1):
            check_range(int(v), self.cfg)
        if not self.owners:
            object.__setattr__(self, "owners", (OwnerRange("owner-0", 0, len(self.features)),))

    @classmethod
    def from_real(cls, x, y, task: str = "regression", owners: Sequence[OwnerRange] = (),
                  cfg: FixedConfig = DEFAULT_FIXED) -> "FixedDataset":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if task == "classification":
            if not np.isin(y, (0, 1)).all():
                raise NonBinaryLabel("classification labels must be 0/1")
            labels = y.astype(np.int64).astype(object)
        else:
            labels = to_fixed_array(y, cfg)
        return cls(to_fixed_array(x, cfg), labels, task, tuple(owners), cfg)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    def real_features(self) -> np.ndarray:
        return from_fixed_array(self.features, self.cfg)

    def real_labels(self) -> np.ndarray:
        if self.task == "classification":
            return self.labels.astype(float)
        return from_fixed_array(self.labels, self.cfg)

    def layout(self) -> DatasetLayout:
        classes = self.n_labels if self.task == "classification" else 0
        return DatasetLayout(self.n_rows, self.n_features, classes, tuple(self.owners))

    def row_values(self, i: int) -> List[int]:
        p = self.cfg.modulus
        return [int(v) % p for v in self.features[i]] + [int(v) % p for v in self.labels[i]]

    def row_digests(self) -> List[int]:
        return [hash_field(self.row_values(i), self.cfg.modulus) for i in range(self.n_rows)]

    def commit(self, randomness: int) -> Commitment:
        return commit_vector(self.row_digests(), randomness, self.cfg.modulus)

    def rows(self, start: int, stop: int) -> "FixedDataset":
        return FixedDataset(self.features[start:stop], self.labels[start:stop], self.task,
                            (OwnerRange("slice", 0, stop - start),), self.cfg)

    def take(self, indices: Sequence[int]) -> "FixedDataset":
        idx = list(indices)
        return FixedDataset(self.features[idx], self.labels[idx], self.task,
                            (OwnerRange("subset", 0, len(idx)),), self.cfg)


@dataclass(frozen=True)
class Minibatch:
    indices: Tuple[int, ...]

    @classmethod
    def of(cls, indices: Sequence[int], n_rows: int) -> "Minibatch":
        idx = tuple(int(i) for i in indices)
        if not idx or len(set(idx)) != len(idx) or not all(0 <= i < n_rows for i in idx):
            raise DimMismatch(f"minibatch indices must be distinct and inside [0, {n_rows})")
        return cls(idx)

    def __len__(self) -> int:
        return len(self.indices)


# ---------------------------------------------------------------------------
# double-precision oracle

def _masked_inputs(dataset: FixedDataset, removal: Optional[BitMatrix], classes: Optional[BitMatrix]):
    x = dataset.real_features()
    y = dataset.real_labels()
    s = np.ones(dataset.n_rows)
    if removal is not None:
        if removal.n_rows != dataset.n_rows:
            raise DimMismatch(f"mask has {removal.n_rows} rows, dataset {dataset.n_rows}")
        if removal.kind is MaskKind.FEATURE:
            x = apply_feature_mask(x, removal)
        s = sample_bits(removal).astype(float)
    if classes is not None:
        y = apply_class_mask(y.astype(np.int64), classes).astype(float)
    return x, y, s


def predict_lr(params: ModelParams, x_row) -> float:
    x_row = np.asarray(x_row, dtype=float)
    if x_row.shape != (params.shape.features,):
        raise DimMismatch(f"row has {x_row.shape} features, model expects {params.shape.features}")
    return float(x_row @ np.asarray(params["w"], dtype=float) + float(params["bias"][0]))


def _lr_summed(params: ModelParams, x, y, s) -> ModelParams:
    w = np.asarray(params["w"], dtype=float)
    res = s * (x @ w + float(params["bias"][0]) - y[:, 0])
    return ModelParams(params.shape, {"w": x.T @ res, "bias": np.array([res.sum()])})


def _nn_forward(params: ModelParams, x):
    pre = x @ np.asarray(params["W1"], dtype=float) + np.asarray(params["b1"], dtype=float)
    act = np.where(pre > 0, pre, 0.0)
    out = act @ np.asarray(params["W2"], dtype=float) + np.asarray(params["b2"], dtype=float)
    return pre, act, out


def _nn_summed(params: ModelParams, x, y, s) -> ModelParams:
    pre, act, out = _nn_forward(params, x)
    e = s[:, None] * (out - y)
    dpre = (e @ np.asarray(params["W2"], dtype=float).T) * (pre > 0)
    return ModelParams(params.shape, {"W1": x.T @ dpre, "b1": dpre.sum(axis=0),
                                      "W2": act.T @ e, "b2": e.sum(axis=0)})


def _reduce(summed: ModelParams, n_hat: int, reduction: str) -> ModelParams:
    if reduction == "sum":
        return summed
    if n_hat < 1:
        raise EmptyEffectiveSet("every sample is unlearned; the effective count is 0")
    return ModelParams.from_flat(summed.shape, summed.flatten() / n_hat)


def grad_lr(params: ModelParams, dataset: FixedDataset, reduction: str = "mean") -> ModelParams:
    x, y, s = _masked_inputs(dataset, None, None)
    return _reduce(_lr_summed(params, x, y, s), dataset.n_rows, reduction)


def grad_lr_feature_masked(params: ModelParams, dataset: FixedDataset, b: BitMatrix,
                           reduction: str = "mean") -> ModelParams:
    if b.kind is not MaskKind.FEATURE:
        raise DimMismatch(f"expected a feature mask, got {b.kind.value}")
    x, y, s = _masked_inputs(dataset, b, None)
    return _reduce(_lr_summed(params, x, y, s), int(s.sum()), reduction)


def grad_lr_sample_masked(params: ModelParams, dataset: FixedDataset, b: BitMatrix,
                          reduction: str = "mean") -> ModelParams:
    if b.kind is not MaskKind.SAMPLE:
        raise DimMismatch(f"expected a sample mask, got {b.kind.value}")
    x, y, s = _masked_inputs(dataset, b, None)
    return _reduce(_lr_summed(params, x, y, s), int(s.sum()), reduction)


def grad_nn(params: ModelParams, dataset: FixedDataset, reduction: str = "mean") -> ModelParams:
    return grad_nn_masked(params, dataset, None, None, reduction)


def grad_nn_masked(params: ModelParams, dataset: FixedDataset, feature_mask: Optional[BitMatrix] = None,
                   class_mask: Optional[BitMatrix] = None, reduction: str = "mean") -> ModelParams:
    if dataset.task != "classification":
        raise NonBinaryLabel("the network is trained on multi-hot class labels")
    x, y, s = _masked_inputs(dataset, feature_mask, class_mask)
    return _reduce(_nn_summed(params, x, y, s), int(s.sum()), reduction)


def masked_gradient(params: ModelParams, dataset: FixedDataset, removal: Optional[BitMatrix] = None,
                    classes: Optional[BitMatrix] = None, reduction: str = "mean") -> ModelParams:
    """Dispatch on architecture"""
    if params.shape.arch == "lr":
        x, y, s = _masked_inputs(dataset, removal, None)
        return _reduce(_lr_summed(params, x, y, s), int(s.sum()), reduction)
    return grad_nn_masked(params, dataset, removal, classes, reduction)


def per_sample_gradient(params: ModelParams, x_row, y_row) -> ModelParams:
    x = np.asarray(x_row, dtype=float).reshape(1, -1)
    y = np.asarray(y_row, dtype=float).reshape(1, -1)
    if params.shape.arch == "lr":
        return _lr_summed(params, x, y, np.ones(1))
    return _nn_summed(params, x, y, np.ones(1))


def mse_loss(params: ModelParams, dataset: FixedDataset, removal: Optional[BitMatrix] = None,
             classes: Optional[BitMatrix] = None) -> float:
    """1/2 mean squared error over the effective samples"""
    x, y, s = _masked_inputs(dataset, removal, classes if params.shape.arch == "nn" else None)
    if params.shape.arch == "lr":
        out = x @ np.asarray(params["w"], dtype=float) + float(params["bias"][0])
        sq = (out - y[:, 0]) ** 2
    else:
        sq = ((_nn_forward(params, x)[2] - y) ** 2).sum(axis=1)
    n_hat = int(s.sum())
    if n_hat < 1:
        raise EmptyEffectiveSet("every sample is unlearned; the effective count is 0")
    return float(0.5 * (s * sq).sum() / n_hat)


def cross_entropy(y, probs, eps: float = 1e-12) -> float:
    """Multi-label binary cross-entropy (reference math only, never in a circuit)"""
    y = np.asarray(y, dtype=float)
    probs = np.clip(np.asarray(probs, dtype=float), eps, 1 - eps)
    if y.shape != probs.shape:
        raise DimMismatch(f"labels {y.shape} vs probabilities {probs.shape}")
    return float(-(y * np.log(probs) + (1 - y) * np.log(1 - probs)).sum(axis=-1).mean())


def step(params: ModelParams, gradient: ModelParams, eta: float, divisor: int) -> ModelParams:
    """w - eta / divisor * summed gradient"""
    if divisor < 1:
        raise EmptyEffectiveSet("step divisor must be at least 1")
    if gradient.shape != params.shape:
        raise DimMismatch("gradient and parameters have different shapes")
    return ModelParams.from_flat(params.shape, params.flatten() - eta / divisor * gradient.flatten())


def grad_distance(g1, g2) -> float:
    a = g1.flatten() if isinstance(g1, ModelParams) else np.asarray(g1, dtype=float).reshape(-1)
    b = g2.flatten() if isinstance(g2, ModelParams) else np.asarray(g2, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise DimMismatch(f"gradient shapes {a.shape} and {b.shape} differ")
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


# ---------------------------------------------------------------------------
# fixed-point twin of the circuits

def _trunc(value: int, shift: int, cfg: FixedConfig) -> int:
    q = value >> shift
    if not -cfg.bound <= q < cfg.bound:
        raise RangeOverflow(f"truncated value {q} exceeds {cfg.range_bits}-bit range")
    return q


@dataclass
class RowTrace:
    """Intermediate values of one sample, shared by the step and FAD computations"""

    xm: List[int]
    s: int
    err: List[int]
    act: List[int] = field(default_factory=list)
    dpre: List[int] = field(default_factory=list)


def fixed_row(params: ModelParams, x_row: Sequence[int], y_row: Sequence[int], cfg: FixedConfig,
              removal_bits: Optional[Sequence[int]] = None, class_bits: Optional[Sequence[int]] = None,
              gate: bool = True, feature_masked: Optional[bool] = None) -> RowTrace:
    """Forward pass of one row.

    removal_bits is either one bit per feature or a single sample bit;
    feature_masked says which (inferred from the width when None).
    """
    f, one = cfg.scale_bits, cfg.one
    x = [int(v) for v in x_row]
    y = [int(v) for v in y_row]
    if removal_bits is None:
        xm, s = x, 1
    else:
        bits = [int(b) for b in removal_bits]
        if feature_masked is None:
            feature_masked = len(bits) == len(x)
        if len(bits) != (len(x) if feature_masked else 1):
            kind = "feature" if feature_masked else "sample"
            raise DimMismatch(f"{kind} mask row has {len(bits)} bits for a row of {len(x)} features")
        s = 1 if any(bits) else 0
        xm = [xj * bj for xj, bj in zip(x, bits)] if feature_masked else x
    g = s if gate else 1
    if params.shape.arch == "lr":
        w = [int(v) for v in params["w"]]
        pred = _trunc(sum(a * b for a, b in zip(xm, w)), f, cfg) + int(params["bias"][0])
        return RowTrace(xm, s, [g * (pred - y[0])])
    W1, b1, W2, b2 = (params[n] for n in ("W1", "b1", "W2", "b2"))
    H, K = params.shape.hidden, params.shape.classes
    pre = [_trunc(sum(xm[j] * int(W1[j, h]) for j in range(len(xm))), f, cfg) + int(b1[h]) for h in range(H)]
    pos = [1 if v > 0 else 0 for v in pre]
    act = [p * v for p, v in zip(pos, pre)]
    out = [_trunc(sum(act[h] * int(W2[h, k]) for h in range(H)), f, cfg) + int(b2[k]) for k in range(K)]
    if class_bits is not None:
        y = [yk ^ int(ck) for yk, ck in zip(y, class_bits)]
    err = [g * (out[k] - one * y[k]) for k in range(K)]
    dh = [_trunc(sum(err[k] * int(W2[h, k]) for k in range(K)), f, cfg) for h in range(H)]
    return RowTrace(xm, s, err, act, [pos[h] * dh[h] for h in range(H)])


@dataclass
class StepTrace:
    n_hat: int
    divisor: int
    inverse: int
    sums: List[int]
    params_out: ModelParams


def _batch_sums(shape: ModelShape, rows: Sequence[RowTrace], cfg: FixedConfig) -> List[int]:
    """Summed gradient in parameter order; products are truncated once per batch"""
    f = cfg.scale_bits
    if shape.arch == "lr":
        gw = [_trunc(sum(r.xm[j] * r.err[0] for r in rows), f, cfg) for j in range(shape.features)]
        return gw + [sum(r.err[0] for r in rows)]
    J, H, K = shape.features, shape.hidden, shape.classes
    gW1 = [_trunc(sum(r.xm[j] * r.dpre[h] for r in rows), f, cfg) for j in range(J) for h in range(H)]
    gb1 = [sum(r.dpre[h] for r in rows) for h in range(H)]
    gW2 = [_trunc(sum(r.act[h] * r.err[k] for r in rows), f, cfg) for h in range(H) for k in range(K)]
    gb2 = [sum(r.err[k] for r in rows) for k in range(K)]
    return gW1 + gb1 + gW2 + gb2


def fixed_step(params: ModelParams, x_rows, y_rows, eta: int, cfg: FixedConfig = DEFAULT_FIXED,
               removal_rows=None, class_rows=None, allow_empty: bool = False,
               feature_masked: Optional[bool] = None) -> StepTrace:
    """One masked optimizer step in exact fixed-point integer arithmetic.

    inv = floor(2^(2f) / N_hat), avg = floor(G * inv / 2^(2f)),
    update = floor(eta * avg / 2^f), w' = w - update.
    """
    if not params.fixed:
        raise ValueError("fixed_step needs encoded parameters")
    rows = [fixed_row(params, x_rows[i], y_rows[i], cfg,
                      None if removal_rows is None else removal_rows[i],
                      None if class_rows is None else class_rows[i], feature_masked=feature_masked)
            for i in range(len(x_rows))]
    n_hat = sum(r.s for r in rows)
    if n_hat == 0 and not allow_empty:
        raise EmptyEffectiveSet("every sample of the minibatch is unlearned")
    if n_hat == 0:
        logger.debug("Minibatch holds no surviving sample; the step leaves the model unchanged")
    divisor = n_hat or 1
    two_f = 2 * cfg.scale_bits
    inverse = (1 << two_f) // divisor
    sums = _batch_sums(params.shape, rows, cfg)
    new = []
    for w, g in zip(params.flatten(), sums):
        avg = _trunc(g * inverse, two_f, cfg)
        update = _trunc(eta * avg, cfg.scale_bits, cfg)
        new.append(check_range(int(w) - update, cfg))
    return StepTrace(n_hat, divisor, inverse, sums, ModelParams.from_flat(params.shape, new, fixed=True))


def fixed_sample_gradient(params: ModelParams, x_row, y_row, cfg: FixedConfig = DEFAULT_FIXED,
                          removal_bits=None, class_bits=None, feature_masked: Optional[bool] = None) -> List[int]:
    """Ungated per-sample gradient with one truncation per product"""
    f = cfg.scale_bits
    r = fixed_row(params, x_row, y_row, cfg, removal_bits, class_bits, gate=False, feature_masked=feature_masked)
    shape = params.shape
    if shape.arch == "lr":
        return [_trunc(xj * r.err[0], f, cfg) for xj in r.xm] + [r.err[0]]
    J, H, K = shape.features, shape.hidden, shape.classes
    return ([_trunc(r.xm[j] * r.dpre[h], f, cfg) for j in range(J) for h in range(H)] + list(r.dpre)
            + [_trunc(r.act[h] * r.err[k], f, cfg) for h in range(H) for k in range(K)] + list(r.err))


def squared_distance(g1: Sequence[int], g2: Sequence[int]) -> int:
    if len(g1) != len(g2):
        raise DimMismatch("gradients have different lengths")
    return sum((a - b) ** 2 for a, b in zip(g1, g2))


def encode_eta(eta: float, cfg: FixedConfig = DEFAULT_FIXED) -> int:
    value = to_fixed(eta, cfg)
    if value < 0:
        raise RangeOverflow("learning rate must be non-negative")
    return value
