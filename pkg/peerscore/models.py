import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from attr import Attribute, attrib, attrs
from joblib import Parallel, delayed

from peerscore.features import Dataset, SchemaMismatchError
from peerscore.util import validator_nonnegative, validator_positive

logger = logging.getLogger(__name__)

MODEL_LINEAR = "linear"
MODEL_KNN = "knn"
MODEL_FOREST = "forest"
SUPPORTED_MODELS = (MODEL_LINEAR, MODEL_KNN, MODEL_FOREST)

DEFAULT_RIDGE_EPS = 1e-8
# Residual corrections applied after the initial least squares solve
_LINEAR_REFINEMENT_STEPS = 3
DEFAULT_K = 5
DEFAULT_TREES = 100
DEFAULT_MIN_LEAF = 2
DEFAULT_FEATURE_SUBSAMPLE = 1.0 / 3.0
DEFAULT_TRAIN_FRACTION = 0.8

CI95_Z = 1.96
# Bounds the memory used by one block of query-to-training distances in KNN prediction
_KNN_BLOCK_ELEMENTS = 8_000_000


class InsufficientDataError(ValueError):
    pass


def _validator_fraction_open(_inst: Any, attr: Attribute, value: float) -> None:
    if not 0.0 < value <= 1.0:
        raise ValueError(f"{attr.name} out of range (0, 1]: {value}")


def _validator_optional_positive(_inst: Any, attr: Attribute, value: Optional[int]) -> None:
    if value is not None and not value >= 1:
        raise ValueError(f"{attr.name} must be at least 1 or unlimited: {value}")


@attrs(frozen=True, slots=True)
class LinearParams:
    ridge_eps: float = attrib(
        default=DEFAULT_RIDGE_EPS, converter=float, validator=validator_nonnegative
    )


@attrs(frozen=True, slots=True)
class KnnParams:
    k: int = attrib(default=DEFAULT_K, validator=validator_positive)
    standardize: bool = attrib(default=False)


@attrs(frozen=True, slots=True)
class ForestParams:
    trees: int = attrib(default=DEFAULT_TREES, validator=validator_positive)
    # None means unlimited
    max_depth: Optional[int] = attrib(default=None, validator=_validator_optional_positive)
    min_leaf: int = attrib(default=DEFAULT_MIN_LEAF, validator=validator_positive)
    feature_subsample: float = attrib(
        default=DEFAULT_FEATURE_SUBSAMPLE, converter=float, validator=_validator_fraction_open
    )
    seed: int = attrib(default=0)
    n_jobs: int = attrib(default=1, validator=validator_positive)


Hyperparams = Union[LinearParams, KnnParams, ForestParams]

HYPERPARAM_TYPES = {
    MODEL_LINEAR: LinearParams,
    MODEL_KNN: KnnParams,
    MODEL_FOREST: ForestParams,
}


def _validator_hyperparams(inst: "ModelSpec", _attr: Attribute, value: Any) -> None:
    expected = HYPERPARAM_TYPES[inst.kind]
    if not isinstance(value, expected):
        raise TypeError(
            f"Model kind {inst.kind} requires {expected.__name__} hyperparameters, "
            f"got {type(value).__name__}"
        )


def _validator_model_kind(_inst: Any, _attr: Attribute, value: str) -> None:
    if value not in SUPPORTED_MODELS:
        raise ValueError(f"Unknown model kind {repr(value)}; expected one of {SUPPORTED_MODELS}")


@attrs(frozen=True, slots=True)
class ModelSpec:
    kind: str = attrib(validator=_validator_model_kind)
    hyperparams: Hyperparams = attrib(validator=_validator_hyperparams)

    @classmethod
    def default(cls, kind: str, *, seed: int = 0, n_jobs: int = 1) -> "ModelSpec":
        if kind == MODEL_FOREST:
            return cls(kind, ForestParams(seed=seed, n_jobs=n_jobs))
        if kind not in SUPPORTED_MODELS:
            raise ValueError(f"Unknown model kind {repr(kind)}; expected one of {SUPPORTED_MODELS}")
        return cls(kind, HYPERPARAM_TYPES[kind]())


class TrainedModel:
    """A fitted regressor bound to the schema fingerprint of its training data."""

    spec: ModelSpec
    fingerprint: str

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class LinearModel(TrainedModel):
    def __init__(
        self,
        spec: ModelSpec,
        fingerprint: str,
        coefficients: np.ndarray,
        intercept: float,
        rank_deficient: bool,
    ) -> None:
        self.spec = spec
        self.fingerprint = fingerprint
        self._coefficients = coefficients
        self._intercept = intercept
        self.rank_deficient = rank_deficient

    @property
    def coefficients(self) -> np.ndarray:
        """Coefficients on the original column scale; dropped constant columns get zero."""
        return self._coefficients.copy()

    @property
    def intercept(self) -> float:
        return self._intercept

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        return self._intercept + rows @ self._coefficients


class KnnModel(TrainedModel):
    def __init__(
        self,
        spec: ModelSpec,
        fingerprint: str,
        rows: np.ndarray,
        labels: np.ndarray,
        shift: np.ndarray,
        scale: np.ndarray,
    ) -> None:
        self.spec = spec
        self.fingerprint = fingerprint
        self._shift = shift
        self._scale = scale
        scaled = (rows - shift) / scale
        # Stored relative to the training mean to limit cancellation in the expansion
        self._center = scaled.mean(axis=0) if len(scaled) else np.zeros(scaled.shape[1])
        self._rows = scaled - self._center
        self._sq_norms = np.einsum("nd,nd->n", self._rows, self._rows)
        self._labels = labels

    @property
    def k(self) -> int:
        assert isinstance(self.spec.hyperparams, KnnParams)
        return self.spec.hyperparams.k

    def squared_distances(self, queries: np.ndarray) -> np.ndarray:
        centered = (queries - self._shift) / self._scale - self._center
        sq_norms = np.einsum("qd,qd->q", centered, centered)
        distances = sq_norms[:, np.newaxis] + self._sq_norms[np.newaxis, :]
        distances -= 2.0 * (centered @ self._rows.T)
        return np.maximum(distances, 0.0, out=distances)

    def neighbors(self, rows: np.ndarray) -> np.ndarray:
        """Return the indices of the k nearest training rows for each query row.

        Distances are Euclidean; among equal distances the earlier training row wins.
        """
        n_train = len(self._rows)
        k = self.k
        block = max(1, _KNN_BLOCK_ELEMENTS // max(1, n_train))
        result = np.empty((len(rows), k), dtype=int)
        for start in range(0, len(rows), block):
            distances = self.squared_distances(rows[start : start + block])
            if k < n_train:
                kth = np.partition(distances, k - 1, axis=1)[:, k - 1]
            else:
                kth = distances.max(axis=1)
            for offset, (row, bound) in enumerate(zip(distances, kth)):
                # Every row tied with the kth distance is a candidate; a stable sort over
                # ascending indices keeps the earliest ones
                candidates = np.flatnonzero(row <= bound)
                order = np.argsort(row[candidates], kind="stable")
                result[start + offset] = candidates[order[:k]]
        return result

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        if not len(rows):
            return np.zeros(0, dtype=float)
        return self._labels[self.neighbors(rows)].mean(axis=1)


class RegressionTree:
    """A binary regression tree stored as parallel node arrays."""

    def __init__(
        self,
        feature: Sequence[int],
        threshold: Sequence[float],
        left: Sequence[int],
        right: Sequence[int],
        value: Sequence[float],
    ) -> None:
        self.feature = np.asarray(feature, dtype=int)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=int)
        self.right = np.asarray(right, dtype=int)
        self.value = np.asarray(value, dtype=float)

    def __len__(self) -> int:
        return len(self.value)

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        node = np.zeros(len(rows), dtype=int)
        while True:
            features = self.feature[node]
            active = np.nonzero(features >= 0)[0]
            if not len(active):
                break
            current = node[active]
            go_left = rows[active, features[active]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
        return self.value[node]


def _best_split(
    rows: np.ndarray, labels: np.ndarray, features: np.ndarray, min_leaf: int
) -> Optional[Tuple[int, float]]:
    n = len(labels)
    # Centered so that the gain comparison doesn't lose precision on large labels
    centered = labels - labels.mean()
    total = float(centered.sum())
    best_gain = 0.0
    best: Optional[Tuple[int, float]] = None
    left_sizes = np.arange(1, n, dtype=float)
    right_sizes = n - left_sizes
    size_ok = (left_sizes >= min_leaf) & (right_sizes >= min_leaf)

    for feature in features:
        values = rows[:, feature]
        order = np.argsort(values, kind="stable")
        sorted_values = values[order]
        left_sums = np.cumsum(centered[order])[:-1]
        right_sums = total - left_sums
        valid = size_ok & (sorted_values[:-1] < sorted_values[1:])
        if not valid.any():
            continue
        # Maximizing this is equivalent to minimizing the summed squared error
        gains = np.where(
            valid, left_sums**2 / left_sizes + right_sums**2 / right_sizes, -np.inf
        )
        position = int(np.argmax(gains))
        if gains[position] > best_gain:
            best_gain = float(gains[position])
            best = (int(feature), float(sorted_values[position]))
    return best


def build_tree(
    rows: np.ndarray, labels: np.ndarray, params: ForestParams, rng: np.random.Generator
) -> RegressionTree:
    width = rows.shape[1]
    n_features = max(1, int(width * params.feature_subsample))
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []

    def new_node(indices: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(labels[indices].mean()))
        return len(value) - 1

    stack = [(new_node(np.arange(len(labels))), np.arange(len(labels)), 0)]
    while stack:
        node, indices, depth = stack.pop()
        node_labels = labels[indices]
        if (
            len(indices) < 2 * params.min_leaf
            or (params.max_depth is not None and depth >= params.max_depth)
            or np.ptp(node_labels) == 0.0
            or width == 0
        ):
            continue

        candidates = rng.choice(width, size=min(n_features, width), replace=False)
        split = _best_split(rows[indices], node_labels, candidates, params.min_leaf)
        if split is None:
            continue

        split_feature, split_threshold = split
        goes_left = rows[indices, split_feature] <= split_threshold
        left_indices = indices[goes_left]
        right_indices = indices[~goes_left]
        feature[node] = split_feature
        threshold[node] = split_threshold
        left[node] = new_node(left_indices)
        right[node] = new_node(right_indices)
        stack.append((right[node], right_indices, depth + 1))
        stack.append((left[node], left_indices, depth + 1))

    return RegressionTree(feature, threshold, left, right, value)


class ForestModel(TrainedModel):
    def __init__(self, spec: ModelSpec, fingerprint: str, trees: Sequence[RegressionTree]):
        self.spec = spec
        self.fingerprint = fingerprint
        self.trees: Tuple[RegressionTree, ...] = tuple(trees)

    def predict_rows(self, rows: np.ndarray) -> np.ndarray:
        total = np.zeros(len(rows), dtype=float)
        for tree in self.trees:
            total += tree.predict_rows(rows)
        return total / len(self.trees)


def _require_rows(train: Dataset, model: str) -> None:
    if not len(train):
        raise InsufficientDataError(f"Cannot fit a {model} model on zero training rows")


def fit_linear(train: Dataset, ridge_eps: float = DEFAULT_RIDGE_EPS) -> LinearModel:
    """Fit ordinary least squares with an intercept.

    Constant columns are dropped and the rest standardized before solving through a
    singular value decomposition. Directions whose singular values fall below the rank
    tolerance are damped by ridge_eps; well-determined directions are solved exactly.
    The solution is then refined against its own residual on the original column
    scale, within the well-determined directions only.
    """
    _require_rows(train, MODEL_LINEAR)
    spec = ModelSpec(MODEL_LINEAR, LinearParams(ridge_eps))
    rows = train.rows
    labels = train.labels

    column_mean = rows.mean(axis=0)
    column_scale = rows.std(axis=0)
    kept = column_scale > 0.0
    mean = column_mean[kept]
    scale = column_scale[kept]
    design = (rows[:, kept] - mean) / scale

    rank_deficient = False
    inverse = refine_inverse = np.zeros(0, dtype=float)
    u = vt = np.zeros((0, 0), dtype=float)
    if design.shape[1]:
        u, singular, vt = np.linalg.svd(design, full_matrices=False)
        tolerance = singular.max() * max(design.shape) * np.finfo(float).eps
        well_determined = singular > tolerance
        rank_deficient = not bool(well_determined.all())
        inverse = np.where(
            well_determined,
            1.0 / np.where(well_determined, singular, 1.0),
            singular / (singular**2 + ridge_eps) if ridge_eps > 0 else 0.0,
        )
        refine_inverse = np.where(well_determined, inverse, 0.0)
        if rank_deficient:
            logger.debug(
                "Design has rank %d of %d; damping the rest with ridge_eps=%g",
                int(well_determined.sum()),
                design.shape[1],
                ridge_eps,
            )

    coefficients = np.zeros(rows.shape[1], dtype=float)
    intercept = 0.0
    residual = labels
    for step_idx in range(1 + _LINEAR_REFINEMENT_STEPS):
        shift = float(residual.mean())
        if design.shape[1]:
            factors = inverse if step_idx == 0 else refine_inverse
            step = (vt.T @ (factors * (u.T @ (residual - shift)))) / scale
            coefficients[kept] += step
            intercept += shift - float(step @ mean)
        else:
            intercept += shift
        residual = labels - (intercept + rows @ coefficients)
        if not residual.any():
            break

    return LinearModel(spec, train.fingerprint, coefficients, intercept, rank_deficient)


def fit_knn(train: Dataset, k: int = DEFAULT_K, standardize: bool = False) -> KnnModel:
    spec = ModelSpec(MODEL_KNN, KnnParams(k, standardize))
    if k > len(train):
        raise InsufficientDataError(
            f"Cannot fit KNN with k={k} on {len(train)} training rows; k must not exceed "
            "the number of rows"
        )
    width = train.width
    if standardize:
        shift = train.rows.mean(axis=0)
        scale = train.rows.std(axis=0)
        scale = np.where(scale > 0.0, scale, 1.0)
    else:
        shift = np.zeros(width, dtype=float)
        scale = np.ones(width, dtype=float)
    return KnnModel(spec, train.fingerprint, train.rows, train.labels, shift, scale)


def fit_forest(train: Dataset, params: Optional[ForestParams] = None) -> ForestModel:
    """Fit bagged regression trees, deterministically for a given seed.

    Each tree draws its bootstrap sample and split features from a generator seeded by
    (seed, tree index), so results don't depend on n_jobs.
    """
    if params is None:
        params = ForestParams()
    _require_rows(train, MODEL_FOREST)
    spec = ModelSpec(MODEL_FOREST, params)
    rows = train.rows
    labels = train.labels
    n = len(labels)

    def grow(tree_idx: int) -> RegressionTree:
        rng = np.random.default_rng([params.seed, tree_idx])
        sample = rng.integers(0, n, size=n)
        return build_tree(rows[sample], labels[sample], params, rng)

    trees = Parallel(n_jobs=params.n_jobs, prefer="threads")(
        delayed(grow)(tree_idx) for tree_idx in range(params.trees)
    )
    return ForestModel(spec, train.fingerprint, trees)


def fit(spec: ModelSpec, train: Dataset) -> TrainedModel:
    params = spec.hyperparams
    if isinstance(params, LinearParams):
        return fit_linear(train, params.ridge_eps)
    elif isinstance(params, KnnParams):
        return fit_knn(train, params.k, params.standardize)
    else:
        return fit_forest(train, params)


def predict(model: TrainedModel, rows: Dataset) -> np.ndarray:
    if model.fingerprint != rows.fingerprint:
        raise SchemaMismatchError(
            f"Model was trained on schema {model.fingerprint} but rows use schema "
            f"{rows.fingerprint}. Encode the rows with the training schema and the same "
            "remembrance setting."
        )
    if not len(rows):
        return np.zeros(0, dtype=float)
    return model.predict_rows(rows.rows)


def split_point(n: int, train_fraction: float = DEFAULT_TRAIN_FRACTION) -> int:
    """Return the number of training rows, ceil(n * train_fraction)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction out of range (0, 1): {train_fraction}")
    # Rounding first keeps products like 10 * 0.7 from landing just above an integer
    cut = math.ceil(round(n * train_fraction, 9))
    if cut < 1 or cut >= n:
        raise InsufficientDataError(
            f"Cannot split {n} row(s) with train_fraction {train_fraction} into non-empty "
            "training and test sets"
        )
    return cut


def split_chronological(
    dataset: Dataset, train_fraction: float = DEFAULT_TRAIN_FRACTION
) -> Tuple[Dataset, Dataset]:
    """Split in window-end order without shuffling; see split_point."""
    ordered = dataset.take(np.argsort(dataset.window_ends, kind="stable"))
    cut = split_point(len(ordered), train_fraction)
    return ordered.slice(0, cut), ordered.slice(cut, len(ordered))


def truncate_training(train: Dataset, duration_s: float) -> Dataset:
    """Keep the rows whose window end is within duration_s of the first row's."""
    if not duration_s > 0:
        raise ValueError(f"duration_s must be positive: {duration_s}")
    if not len(train):
        logger.warning("Truncating an empty training set")
        return train
    first = float(train.window_ends.min())
    keep = np.nonzero(train.window_ends - first <= duration_s)[0]
    return train.take(keep)


@attrs(frozen=True, slots=True)
class EvalConfig:
    model: str = attrib()
    w_block: float = attrib()
    remembrance: bool = attrib()
    train_duration_s: Optional[float] = attrib(default=None)


@attrs(frozen=True, slots=True)
class EvalReport:
    mae: float = attrib()
    median_abs_err: float = attrib()
    q1: float = attrib()
    q3: float = attrib()
    ci95_lo: float = attrib()
    ci95_hi: float = attrib()
    n: int = attrib()
    config: Optional[EvalConfig] = attrib(default=None)
    peer_count: Optional[int] = attrib(default=None, kw_only=True)

    def __attrs_post_init__(self) -> None:
        if not self.q1 <= self.median_abs_err <= self.q3:
            raise ValueError(
                f"Quartiles out of order: q1={self.q1}, median={self.median_abs_err}, "
                f"q3={self.q3}"
            )
        if not self.ci95_lo <= self.mae <= self.ci95_hi:
            raise ValueError(
                f"Confidence interval [{self.ci95_lo}, {self.ci95_hi}] excludes MAE {self.mae}"
            )

    def with_config(self, config: EvalConfig) -> "EvalReport":
        return EvalReport(
            self.mae,
            self.median_abs_err,
            self.q1,
            self.q3,
            self.ci95_lo,
            self.ci95_hi,
            self.n,
            config,
            peer_count=self.peer_count,
        )


def _mean_with_ci(values: np.ndarray) -> Tuple[float, float, float]:
    mean = float(values.mean())
    spread = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    half_width = CI95_Z * spread / math.sqrt(len(values))
    return mean, mean - half_width, mean + half_width


def evaluate(
    predictions: Sequence[float],
    labels: Sequence[float],
    *,
    peers: Optional[Sequence[str]] = None,
    per_peer: bool = False,
    config: Optional[EvalConfig] = None,
) -> EvalReport:
    """Summarize absolute errors with MAE, quartiles and a normal-approximation 95% CI.

    With per_peer, MAE is first averaged within each peer and then across peers, and
    the interval is taken over the per-peer values. Quartiles always pool all errors.
    """
    predicted = np.asarray(predictions, dtype=float)
    actual = np.asarray(labels, dtype=float)
    if predicted.shape != actual.shape:
        raise ValueError(
            f"Got {len(predicted)} predictions for {len(actual)} labels; they must match"
        )
    if not len(actual):
        raise InsufficientDataError("Cannot evaluate zero predictions")

    errors = np.abs(actual - predicted)
    q1, median, q3 = (float(q) for q in np.quantile(errors, [0.25, 0.5, 0.75]))

    peer_count = None
    if per_peer:
        if peers is None or len(peers) != len(errors):
            raise ValueError("Per-peer evaluation needs one peer identity per prediction")
        by_peer: Dict[str, List[float]] = {}
        for peer, error in zip(peers, errors):
            by_peer.setdefault(peer, []).append(float(error))
        peer_maes = np.array([np.mean(by_peer[peer]) for peer in sorted(by_peer)])
        peer_count = len(peer_maes)
        mae, lo, hi = _mean_with_ci(peer_maes)
    else:
        mae, lo, hi = _mean_with_ci(errors)

    # Floating error can leave the bounds a hair inside the mean when the spread is zero
    lo = min(lo, mae)
    hi = max(hi, mae)
    return EvalReport(mae, median, q1, q3, lo, hi, len(errors), config, peer_count=peer_count)
