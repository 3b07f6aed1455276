"""Dataset and mask loading: CSV files, synthetic benchmarks and owner splits."""
import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pandas as pd
from sklearn.datasets import make_multilabel_classification, make_regression
from sklearn.preprocessing import StandardScaler

from .errors import DimMismatch, NonBinaryLabel
from .fixed_point import DEFAULT_FIXED, FixedConfig
from .masking import BitMatrix, MaskKind, OwnerRange
from .training import FixedDataset

logger = logging.getLogger(__name__)

LABEL_PREFIX = "label"


def split_owners(n_rows: int, n_owners: int) -> Tuple[OwnerRange, ...]:
    """Contiguous, near-equal row ranges owner-0 .. owner-(n-1)"""
    if not 1 <= n_owners <= n_rows:
        raise DimMismatch(f"cannot split {n_rows} rows between {n_owners} owners")
    bounds = np.cumsum([0] + [len(part) for part in np.array_split(np.arange(n_rows), n_owners)])
    return tuple(OwnerRange(f"owner-{i}", int(bounds[i]), int(bounds[i + 1])) for i in range(n_owners))


def _label_columns(frame: pd.DataFrame, task: str) -> List[str]:
    labels = [c for c in frame.columns if str(c).startswith(LABEL_PREFIX)]
    if labels:
        return labels
    if task == "classification":
        raise DimMismatch(f"classification CSV needs '{LABEL_PREFIX}*' columns")
    return [frame.columns[-1]]


def load_csv(path: Path, task: str = "regression", n_owners: int = 1,
             cfg: FixedConfig = DEFAULT_FIXED) -> FixedDataset:
    """Features are every non-label column; labels are the `label*` columns (or the last column)"""
    frame = pd.read_csv(path)
    if frame.empty:
        raise DimMismatch(f"{path} has no rows")
    frame = frame.fillna(0)
    labels = _label_columns(frame, task)
    features = [c for c in frame.columns if c not in labels]
    if not features:
        raise DimMismatch(f"{path} has no feature columns")
    logger.info(f"Loaded {len(frame)} rows x {len(features)} features from {path}")
    return FixedDataset.from_real(frame[features].to_numpy(float), frame[labels].to_numpy(float), task,
                                  split_owners(len(frame), n_owners), cfg)


def save_csv(dataset: FixedDataset, path: Path) -> Path:
    x = dataset.real_features()
    y = dataset.real_labels()
    frame = pd.DataFrame(x, columns=[f"x{j}" for j in range(dataset.n_features)])
    names = [LABEL_PREFIX] if dataset.n_labels == 1 else [f"{LABEL_PREFIX}{k}" for k in range(dataset.n_labels)]
    for k, name in enumerate(names):
        frame[name] = y[:, k].astype(int) if dataset.task == "classification" else y[:, k]
    frame.to_csv(path, index=False)
    return path


def synthetic_regression(n_rows: int, features: int, seed: int = 0, noise: float = 0.1, n_owners: int = 1,
                         cfg: FixedConfig = DEFAULT_FIXED) -> FixedDataset:
    x, y = make_regression(n_samples=n_rows, n_features=features, noise=noise, random_state=seed)
    x = StandardScaler().fit_transform(x)
    y = (y - y.mean()) / (y.std() or 1.0)
    return FixedDataset.from_real(x, y, "regression", split_owners(n_rows, n_owners), cfg)


def synthetic_classification(n_rows: int, features: int, classes: int, seed: int = 0, n_owners: int = 1,
                             cfg: FixedConfig = DEFAULT_FIXED) -> FixedDataset:
    x, y = make_multilabel_classification(n_samples=n_rows, n_features=features, n_classes=classes,
                                          random_state=seed)
    x = StandardScaler().fit_transform(x)
    return FixedDataset.from_real(x, y, "classification", split_owners(n_rows, n_owners), cfg)


def plant_replica(dataset: FixedDataset, source: int, target: int) -> FixedDataset:
    """Copy row `source` over row `target` (an exact gradient replica)"""
    features = dataset.features.copy()
    labels = dataset.labels.copy()
    features[target] = features[source]
    labels[target] = labels[source]
    return FixedDataset(features, labels, dataset.task, dataset.owners, dataset.cfg)


def load_mask(path: Path, kind: MaskKind, round: int = 1) -> BitMatrix:
    """0/1 matrix from a header-less CSV or a .npy file"""
    path = Path(path)
    if path.suffix == ".npy":
        bits = np.load(path)
    else:
        bits = pd.read_csv(path, header=None).to_numpy()
    bits = np.asarray(bits)
    if bits.ndim == 1:
        bits = bits.reshape(-1, 1)
    if not np.isin(bits, (0, 1)).all():
        raise NonBinaryLabel(f"{path} holds values other than 0 and 1")
    return BitMatrix(MaskKind(kind), bits.astype(np.uint8), round)

