"""Forging attacks against unlearning proofs, the replica detector and search-space analytics.

An adversary wins the forgery game when a minibatch free of unlearned samples
reproduces the update of a minibatch that contains one. Two attacks
are implemented (random candidate sampling and nearest same-class neighbor
replacement) together with the plain detector that the FAD circuit proves.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel

from .errors import BadParams, NoCandidates, NoSameClassNeighbor
from .fixed_point import to_fixed
from .masking import MaskKind, MaskState
from .training import (FixedDataset, ModelParams, fixed_sample_gradient, grad_distance, masked_gradient,
                       per_sample_gradient, squared_distance)

logger = logging.getLogger(__name__)

ATTACK_CHUNK = 512


# ---------------------------------------------------------------------------
# search spaces

def _sci(value: int) -> str:
    """Base-10 scientific rendering to 2 significant figures, exact for big integers"""
    if value == 0:
        return "0.0E+00"
    exponent = len(str(value)) - 1
    if exponent == 0:
        mantissa = value * 10
    else:
        scale = 10 ** (exponent - 1)
        mantissa, rest = divmod(value, scale)
        if 2 * rest >= scale:
            mantissa += 1
    if mantissa >= 100:
        mantissa //= 10
        exponent += 1
    return f"{mantissa // 10}.{mantissa % 10}E+{exponent:02d}"


class SearchSpaceReport(BaseModel):
    dataset_size: int
    unlearned: int
    batch_size: int
    forging: int
    target: int
    reduced: int
    forging_sci: str
    target_sci: str
    reduced_sci: str

    @property
    def reduction_ratio(self) -> float:
        return self.forging / self.reduced


def search_space_sizes(dataset_size: int, unlearned: int, batch_size: int) -> SearchSpaceReport:
    """|S_f| = C(D-U, b), |S_t| = 2^(D-U), VRF-reduced |S_f| = ceil(D / b)"""
    if not 0 <= unlearned < dataset_size or not 1 <= batch_size <= dataset_size - unlearned:
        raise BadParams(f"invalid search-space parameters D={dataset_size}, U={unlearned}, batch={batch_size}")
    kept = dataset_size - unlearned
    forging = math.comb(kept, batch_size)
    target = 1 << kept
    reduced = -(-dataset_size // batch_size)
    return SearchSpaceReport(dataset_size=dataset_size, unlearned=unlearned, batch_size=batch_size,
                             forging=forging, target=target, reduced=reduced, forging_sci=_sci(forging),
                             target_sci=_sci(target), reduced_sci=_sci(reduced))


def collision_success_probability(p: float, trials: Union[int, float]) -> float:
    """1 - (1 - p)^trials, stable for tiny p and huge trial counts"""
    if not 0 < p < 1 or trials < 1:
        raise BadParams(f"need 0 < p < 1 and trials >= 1, got p={p}, trials={trials}")
    return -math.expm1(float(trials) * math.log1p(-p))


def forging_advantage(p: float, dataset_size: int, unlearned: int, batch_size: int) -> dict:
    """Success probability over the unrestricted search space versus the VRF-restricted one"""
    report = search_space_sizes(dataset_size, unlearned, batch_size)
    return {"unrestricted": collision_success_probability(p, report.forging),
            "restricted": collision_success_probability(p, report.reduced),
            "ratio": report.reduction_ratio}


# ---------------------------------------------------------------------------
# attacks

@dataclass
class ForgeryInstance:
    target: Tuple[int, ...]
    candidate: Tuple[int, ...]
    unlearned: Tuple[int, ...]
    epsilon: float
    draws: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.target or not self.candidate:
            raise BadParams("target and candidate minibatches must be nonempty")
        if set(self.candidate) & set(self.unlearned):
            raise BadParams("a forging minibatch cannot contain unlearned samples")

    def to_dict(self) -> dict:
        return {"target": list(self.target), "candidate": list(self.candidate),
                "unlearned": list(self.unlearned), "epsilon": self.epsilon, "draws": len(self.draws)}


def _batch_gradient(params: ModelParams, dataset: FixedDataset, indices: Sequence[int]) -> np.ndarray:
    return masked_gradient(params, dataset.take(indices)).flatten()


def _epsilons(params: ModelParams, dataset: FixedDataset, target: np.ndarray,
              candidates: Sequence[Sequence[int]]) -> List[float]:
    return [grad_distance(_batch_gradient(params, dataset, c), target) for c in candidates]


def _check_target(target: Sequence[int], unlearned: Sequence[int], n_rows: int) -> None:
    if not target or not set(target) & set(unlearned):
        raise BadParams("the target minibatch must contain an unlearned sample")
    if not all(0 <= i < n_rows for i in list(target) + list(unlearned)):
        raise BadParams("indices outside the dataset")


def attack_random_sampling(dataset: FixedDataset, unlearned: Sequence[int], target: Sequence[int], batch_size: int,
                           budget: int, rng: np.random.Generator, params: ModelParams,
                           n_jobs: int = 1) -> ForgeryInstance:
    """Best of `budget` random unlearned-free minibatches by gradient distance to the target"""
    if budget < 1:
        raise BadParams("attack budget must be at least 1")
    _check_target(target, unlearned, dataset.n_rows)
    pool = np.array(sorted(set(range(dataset.n_rows)) - set(unlearned)))
    if len(pool) < batch_size:
        raise NoCandidates(f"{len(pool)} surviving samples cannot fill a minibatch of {batch_size}")
    params = params.decode(dataset.cfg)
    # sequential draws: a larger budget extends the same search
    candidates = [tuple(int(i) for i in rng.choice(pool, size=batch_size, replace=False)) for _ in range(budget)]
    goal = _batch_gradient(params, dataset, target)
    chunks = [candidates[i:i + ATTACK_CHUNK] for i in range(0, budget, ATTACK_CHUNK)]
    results = Parallel(n_jobs=n_jobs)(delayed(_epsilons)(params, dataset, goal, chunk) for chunk in chunks)
    epsilons = [e for chunk in results for e in chunk]
    best = int(np.argmin(epsilons))
    logger.info(f"Random sampling attack: best epsilon {epsilons[best]:.6g} after {budget} draws")
    return ForgeryInstance(tuple(int(i) for i in target), candidates[best], tuple(unlearned), epsilons[best], epsilons)


def attack_neighbor_replacement(dataset: FixedDataset, unlearned: Sequence[int], minibatch: Sequence[int],
                                params: ModelParams) -> ForgeryInstance:
    """Swap each unlearned sample of the minibatch for its nearest same-label sample"""
    _check_target(minibatch, unlearned, dataset.n_rows)
    x = dataset.real_features()
    removed = set(unlearned)
    taken = set(minibatch)
    candidate = []
    for i in minibatch:
        if i not in removed:
            candidate.append(int(i))
            continue
        same = [j for j in range(dataset.n_rows)
                if j not in removed and j not in taken and list(dataset.labels[j]) == list(dataset.labels[i])]
        if not same:
            raise NoSameClassNeighbor(f"no surviving sample shares the label of row {i}")
        dist = np.linalg.norm(x[same] - x[i], axis=1)
        # argmin keeps the first (smallest) index among ties
        neighbor = same[int(np.argmin(dist))]
        taken.add(neighbor)
        candidate.append(neighbor)
    params = params.decode(dataset.cfg)
    epsilon = grad_distance(_batch_gradient(params, dataset, candidate), _batch_gradient(params, dataset, minibatch))
    return ForgeryInstance(tuple(int(i) for i in minibatch), tuple(candidate), tuple(unlearned), epsilon)


def write_draw_report(instance: ForgeryInstance, path: Path) -> Path:
    """CSV of (candidate_id, epsilon) per draw"""
    draws = instance.draws or [instance.epsilon]
    frame = pd.DataFrame({"candidate_id": range(len(draws)), "epsilon": draws})
    frame.to_csv(path, index=False)
    return path


# ---------------------------------------------------------------------------
# replica detection

def _row_masks(masks: Optional[MaskState], row: int):
    """(removal bits, class bits, per-feature removal) of one row"""
    if masks is None:
        return None, None, False
    removal = [int(b) for b in masks.removal.bits[row]]
    classes = [int(b) for b in masks.classes.bits[row]] if masks.classes is not None else None
    return removal, classes, masks.removal.kind is MaskKind.FEATURE


def encode_xi(xi: float, dataset: FixedDataset) -> int:
    value = to_fixed(xi, dataset.cfg)
    if value < 0:
        raise BadParams("detection threshold must be non-negative")
    return value


def replica_flags(dataset: FixedDataset, minibatch: Sequence[int], unlearned: Sequence[int], xi_enc: int,
                  params: ModelParams, masks: Optional[MaskState] = None) -> List[List[int]]:
    """Exact fixed-point flags [unlearned][position]; minibatch_flags folds them per position"""
    cfg = dataset.cfg
    params = params.encode(cfg)
    targets = [fixed_sample_gradient(params, dataset.features[u], dataset.labels[u], cfg) for u in unlearned]
    bound = xi_enc * xi_enc
    flags = [[0] * len(minibatch) for _ in unlearned]
    for i, m in enumerate(minibatch):
        removal, classes, per_feature = _row_masks(masks, m)
        alive = removal is None or any(removal)
        grad = fixed_sample_gradient(params, dataset.features[m], dataset.labels[m], cfg, removal, classes,
                                     feature_masked=per_feature)
        for a, target in enumerate(targets):
            flags[a][i] = int(alive and squared_distance(grad, target) <= bound)
    return flags


def minibatch_flags(dataset: FixedDataset, minibatch: Sequence[int], unlearned: Sequence[int], xi_enc: int,
                    params: ModelParams, masks: Optional[MaskState] = None) -> List[int]:
    """flag_m = 1 iff row m replicates any unlearned row, as the FAD circuit reveals it"""
    if not unlearned:
        return [0] * len(minibatch)
    per_row = replica_flags(dataset, minibatch, unlearned, xi_enc, params, masks)
    return [int(any(column)) for column in zip(*per_row)]


def detect_replicas(dataset: FixedDataset, minibatch: Sequence[int], unlearned: int, xi: float,
                    params: ModelParams, masks: Optional[MaskState] = None,
                    representation: str = "fixed") -> List[int]:
    """flag_m = [distance(grad(x_m, y_m), grad(x_u, y_u)) <= xi] for each minibatch row"""
    if xi < 0:
        raise BadParams("detection threshold must be non-negative")
    if representation == "fixed":
        return replica_flags(dataset, minibatch, [unlearned], encode_xi(xi, dataset), params, masks)[0]
    if representation != "float":
        raise BadParams(f"unknown representation {representation!r}")
    params = params.decode(dataset.cfg)
    x, y = dataset.real_features(), dataset.real_labels()
    goal = per_sample_gradient(params, x[unlearned], y[unlearned])
    flags = []
    for m in minibatch:
        removal, classes, per_feature = _row_masks(masks, m)
        xm, ym = x[m], y[m]
        if per_feature:
            xm = xm * np.asarray(removal)
        if classes is not None:
            ym = np.abs(ym - np.asarray(classes))
        alive = removal is None or any(removal)
        flags.append(int(alive and grad_distance(per_sample_gradient(params, xm, ym), goal) <= xi))
    return flags
