import csv
import logging
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import attr
import numpy as np
from attr import Attribute, attrib, attrs
from joblib import Parallel, delayed

from peerscore.features import (
    Dataset,
    MeasurementSample,
    encode,
    extract_windows,
    fit_encoder,
)
from peerscore.model import ObservationEvent
from peerscore.models import (
    DEFAULT_TRAIN_FRACTION,
    MODEL_FOREST,
    SUPPORTED_MODELS,
    EvalConfig,
    EvalReport,
    InsufficientDataError,
    ModelSpec,
    evaluate,
    fit,
    predict,
    split_chronological,
    split_point,
    truncate_training,
)
from peerscore.scoring import ScoreConfig
from peerscore.util import PathType, format_float, tuplify_floats, tuplify_strs

logger = logging.getLogger(__name__)

DEFAULT_W_BLOCK_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_TRAIN_DURATIONS = (40.0, 200.0, 1000.0, 5000.0, 25000.0, 125000.0)
DEFAULT_REMEMBRANCE = (False, True)

STATUS_OK = "ok"
STATUS_INSUFFICIENT_DATA = "insufficient_data"

REPORT_COLUMNS = (
    "model",
    "w_B",
    "remembrance",
    "train_duration_s",
    "mae",
    "median",
    "q1",
    "q3",
    "ci95_lo",
    "ci95_hi",
    "n",
    "status",
)
REMEMBRANCE_ON = "on"
REMEMBRANCE_OFF = "off"


def _tuplify_bools(values: Iterable[bool]) -> Tuple[bool, ...]:
    return tuple(bool(value) for value in values)


def _validator_nonempty(_inst: Any, attr: Attribute, value: Tuple) -> None:
    if not value:
        raise ValueError(f"Sweep axis {attr.name} must not be empty")


def _validator_w_blocks(inst: Any, attr: Attribute, value: Tuple[float, ...]) -> None:
    _validator_nonempty(inst, attr, value)
    for w_block in value:
        if not 0.0 <= w_block <= 1.0:
            raise ValueError(f"w_block out of range [0, 1]: {w_block}")


def _validator_models(inst: Any, attr: Attribute, value: Tuple[str, ...]) -> None:
    _validator_nonempty(inst, attr, value)
    for model in value:
        if model not in SUPPORTED_MODELS:
            raise ValueError(f"Unknown model kind {repr(model)}; expected one of {SUPPORTED_MODELS}")


def _validator_durations(inst: Any, attr: Attribute, value: Tuple[float, ...]) -> None:
    _validator_nonempty(inst, attr, value)
    for duration in value:
        if not duration > 0:
            raise ValueError(f"Training duration must be positive: {duration}")


@attrs(frozen=True, slots=True)
class SweepCell:
    index: int = attrib()
    model: str = attrib()
    w_block: float = attrib()
    remembrance: bool = attrib()
    train_duration_s: float = attrib()

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.model, self.w_block, self.remembrance, self.train_duration_s)


@attrs(frozen=True, slots=True)
class SweepGrid:
    w_blocks: Tuple[float, ...] = attrib(
        default=DEFAULT_W_BLOCK_GRID, converter=tuplify_floats, validator=_validator_w_blocks
    )
    remembrance: Tuple[bool, ...] = attrib(
        default=DEFAULT_REMEMBRANCE, converter=_tuplify_bools, validator=_validator_nonempty
    )
    models: Tuple[str, ...] = attrib(
        default=SUPPORTED_MODELS, converter=tuplify_strs, validator=_validator_models
    )
    train_durations: Tuple[float, ...] = attrib(
        default=DEFAULT_TRAIN_DURATIONS, converter=tuplify_floats, validator=_validator_durations
    )

    def __len__(self) -> int:
        return (
            len(set(self.w_blocks))
            * len(set(self.remembrance))
            * len(set(self.models))
            * len(set(self.train_durations))
        )

    def cells(self) -> List[SweepCell]:
        """Return the full cross product in report order, each cell numbered by position."""
        keys = sorted(
            (model, w_block, remembrance, duration)
            for model in set(self.models)
            for w_block in set(self.w_blocks)
            for remembrance in set(self.remembrance)
            for duration in set(self.train_durations)
        )
        return [SweepCell(idx, *key) for idx, key in enumerate(keys)]


@attrs(frozen=True, slots=True)
class SweepRow:
    config: EvalConfig = attrib()
    report: Optional[EvalReport] = attrib()
    status: str = attrib()

    def sort_key(self) -> Tuple:
        config = self.config
        duration = config.train_duration_s
        return (
            config.model,
            config.w_block,
            config.remembrance,
            duration is not None,
            duration if duration is not None else 0.0,
        )

    def to_csv_row(self) -> List[str]:
        config = self.config
        fields = [
            config.model,
            format_float(config.w_block),
            REMEMBRANCE_ON if config.remembrance else REMEMBRANCE_OFF,
            format_float(config.train_duration_s) if config.train_duration_s is not None else "",
        ]
        report = self.report
        if report is None:
            fields.extend([""] * 6 + ["0"])
        else:
            fields.extend(
                format_float(value)
                for value in (
                    report.mae,
                    report.median_abs_err,
                    report.q1,
                    report.q3,
                    report.ci95_lo,
                    report.ci95_hi,
                )
            )
            fields.append(str(report.n))
        fields.append(self.status)
        return fields


def cell_seed(seed: int, cell_index: int) -> int:
    """Derive a cell's seed from the master seed and its position in the grid."""
    return int(np.random.SeedSequence([seed, cell_index]).generate_state(1)[0])


def prepare_datasets(
    samples: Sequence[MeasurementSample],
    include_remembrance: bool,
    *,
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
    exclude: Iterable[str] = (),
) -> Tuple[Dataset, Dataset]:
    """Encode samples and split them chronologically into training and test sets.

    The encoder is fit on the training prefix only, so test-only categorical tokens
    encode as all zeros.
    """
    ordered = sorted(samples, key=lambda sample: sample.window_end)
    cut = split_point(len(ordered), train_fraction)
    schema = fit_encoder(ordered[:cut], exclude=exclude)
    return split_chronological(encode(schema, ordered, include_remembrance), train_fraction)


def run_configuration(
    train: Dataset,
    test: Dataset,
    spec: ModelSpec,
    config: EvalConfig,
    *,
    per_peer: bool = False,
) -> SweepRow:
    """Train one model on a (possibly truncated) training set and evaluate it on test."""
    if config.train_duration_s is not None:
        train = truncate_training(train, config.train_duration_s)
    try:
        model = fit(spec, train)
        predictions = predict(model, test)
        report = evaluate(
            predictions, test.labels, peers=test.peers, per_peer=per_peer, config=config
        )
    except InsufficientDataError as err:
        logger.info("No result for %s: %s", config, err)
        return SweepRow(config, None, STATUS_INSUFFICIENT_DATA)
    return SweepRow(config, report, STATUS_OK)


def _cell_spec(model: str, seed: int, specs: Optional[Dict[str, ModelSpec]]) -> ModelSpec:
    spec = specs.get(model) if specs else None
    if spec is None:
        return ModelSpec.default(model, seed=seed)
    if spec.kind == MODEL_FOREST:
        return ModelSpec(spec.kind, attr.evolve(spec.hyperparams, seed=seed))
    return spec


def _run_cell(
    cell: SweepCell,
    train: Dataset,
    test: Dataset,
    spec: ModelSpec,
    per_peer: bool,
) -> SweepRow:
    row = run_configuration(train, test, spec, cell.eval_config(), per_peer=per_peer)
    logger.debug("Finished sweep cell %d: %s", cell.index, row.status)
    return row


def run_sweep(
    events: Sequence[ObservationEvent],
    grid: SweepGrid,
    base_config: ScoreConfig,
    *,
    seed: int = 0,
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
    exclude: Iterable[str] = (),
    per_peer: bool = False,
    specs: Optional[Dict[str, ModelSpec]] = None,
    jobs: int = 1,
) -> List[SweepRow]:
    """Run every grid cell and return one row per cell in report order.

    Scoring and encoding happen once per (w_B, remembrance) pair. Cells then train and
    evaluate independently, in worker processes when jobs > 1. Each cell's seed comes
    from (seed, cell index), so results don't depend on jobs.
    """
    exclude = tuple(exclude)
    cells = grid.cells()
    prepared: Dict[Tuple[float, bool], Optional[Tuple[Dataset, Dataset]]] = {}
    for w_block in sorted(set(grid.w_blocks)):
        config = attr.evolve(base_config, w_block=w_block)
        samples = extract_windows(events, config)
        logger.info("Extracted %d samples with w_B=%s", len(samples), w_block)
        for remembrance in sorted(set(grid.remembrance)):
            try:
                prepared[(w_block, remembrance)] = prepare_datasets(
                    samples, remembrance, train_fraction=train_fraction, exclude=exclude
                )
            except ValueError as err:
                logger.warning(
                    "Cannot build datasets for w_B=%s, remembrance=%s: %s",
                    w_block,
                    remembrance,
                    err,
                )
                prepared[(w_block, remembrance)] = None

    rows: List[Optional[SweepRow]] = [None] * len(cells)
    runnable = []
    for cell in cells:
        data = prepared[(cell.w_block, cell.remembrance)]
        if data is None:
            rows[cell.index] = SweepRow(cell.eval_config(), None, STATUS_INSUFFICIENT_DATA)
        else:
            spec = _cell_spec(cell.model, cell_seed(seed, cell.index), specs)
            runnable.append((cell, data[0], data[1], spec, per_peer))

    logger.info("Running %d of %d sweep cells with %d job(s)", len(runnable), len(cells), jobs)
    if jobs > 1 and len(runnable) > 1:
        results = Parallel(n_jobs=jobs)(delayed(_run_cell)(*args) for args in runnable)
    else:
        results = [_run_cell(*args) for args in runnable]
    for (cell, *_), row in zip(runnable, results):
        rows[cell.index] = row

    finished = [row for row in rows if row is not None]
    return sorted(finished, key=SweepRow.sort_key)


def write_report(rows: Sequence[SweepRow], path: PathType) -> None:
    ordered = sorted(rows, key=SweepRow.sort_key)
    with open(path, "w", encoding="utf8", newline="") as output_file:
        writer = csv.writer(output_file, lineterminator="\r\n")
        writer.writerow(REPORT_COLUMNS)
        for row in ordered:
            writer.writerow(row.to_csv_row())


def report_table(rows: Sequence[SweepRow]) -> Tuple[List[str], List[List[Any]]]:
    header = [
        "Model",
        "w_B",
        "Remembrance",
        "Duration (s)",
        "MAE",
        "Median",
        "CI95 low",
        "CI95 high",
        "n",
        "Status",
    ]
    table = []
    for row in sorted(rows, key=SweepRow.sort_key):
        config = row.config
        report = row.report
        table.append(
            [
                config.model,
                config.w_block,
                REMEMBRANCE_ON if config.remembrance else REMEMBRANCE_OFF,
                config.train_duration_s if config.train_duration_s is not None else "all",
                report.mae if report else "",
                report.median_abs_err if report else "",
                report.ci95_lo if report else "",
                report.ci95_hi if report else "",
                report.n if report else 0,
                row.status,
            ]
        )
    return header, table


def remembrance_summary(rows: Sequence[SweepRow]) -> Tuple[List[str], List[List[Any]]]:
    """Compare MAE with and without remembrance for each model and w_B.

    Each comparison uses the longest training duration with a result for both settings.
    The ratio is MAE without remembrance over MAE with it.
    """
    results: Dict[Tuple[str, float, Optional[float]], Dict[bool, float]] = {}
    for row in rows:
        if row.report is None:
            continue
        config = row.config
        key = (config.model, config.w_block, config.train_duration_s)
        results.setdefault(key, {})[config.remembrance] = row.report.mae

    best: Dict[Tuple[str, float], Tuple[Optional[float], Dict[bool, float]]] = {}
    for (model, w_block, duration), maes in results.items():
        if len(maes) < 2:
            continue
        current = best.get((model, w_block))
        if current is None or _duration_key(duration) > _duration_key(current[0]):
            best[(model, w_block)] = (duration, maes)

    header = ["Model", "w_B", "Duration (s)", "MAE with", "MAE without", "Ratio"]
    table = []
    for (model, w_block), (duration, maes) in sorted(best.items()):
        with_mae = maes[True]
        without_mae = maes[False]
        if with_mae > 0:
            ratio = without_mae / with_mae
        else:
            ratio = 1.0 if without_mae == 0 else float("inf")
        table.append(
            [
                model,
                w_block,
                duration if duration is not None else "all",
                with_mae,
                without_mae,
                ratio,
            ]
        )
    return header, table


def _duration_key(duration: Optional[float]) -> float:
    return duration if duration is not None else float("inf")
