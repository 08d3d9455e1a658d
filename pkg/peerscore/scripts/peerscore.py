import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
from attr import attrib, attrs
from tabulate import tabulate

import peerscore
from peerscore.experiments import (
    REMEMBRANCE_OFF,
    REMEMBRANCE_ON,
    SweepGrid,
    prepare_datasets,
    remembrance_summary,
    report_table,
    run_configuration,
    run_sweep,
    write_report,
)
from peerscore.features import (
    FEATURE_TIMESTAMP,
    encode,
    extract_windows,
    fit_encoder,
    mutual_information,
    select_top_k,
)
from peerscore.model import ObservationEvent
from peerscore.models import (
    DEFAULT_K,
    DEFAULT_MIN_LEAF,
    DEFAULT_RIDGE_EPS,
    DEFAULT_TRAIN_FRACTION,
    DEFAULT_TREES,
    MODEL_FOREST,
    MODEL_KNN,
    MODEL_LINEAR,
    SUPPORTED_MODELS,
    EvalConfig,
    ForestParams,
    KnnParams,
    LinearModel,
    LinearParams,
    ModelSpec,
    evaluate,
    fit,
    predict,
)
from peerscore.scoring import (
    DEFAULT_GAMMA,
    DEFAULT_W_BLOCK,
    DEFAULT_WINDOW_SECONDS,
    DECAY_INCREMENT,
    FEE_SCALE_SATOSHI,
    IDENTITY_ADDRESS_ONLY,
    SUPPORTED_DECAY_MODES,
    SUPPORTED_IDENTITY_MODES,
    ScoreConfig,
)
from peerscore.sensor import (
    DEFAULT_USER_AGENT,
    MAX_OUTBOUND_LIMIT,
    SensorConfig,
    run_sensor,
)
from peerscore.simulator import DEFAULT_SCENARIO, Scenario, load_scenario, simulate
from peerscore.trace import export_peer_csv, read_events, read_trace, write_dataset_csv, write_events
from peerscore.validation import validate_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA_ERROR = 2
EXIT_INTERNAL = 3
ENV_PREFIX = "PEERSCORE"
LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class _ExitCodeGroup(click.Group):
    """Group that maps failures onto the documented exit codes."""

    def make_context(self, *args: Any, **kwargs: Any) -> click.Context:
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as err:
            err.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as err:
            err.exit_code = EXIT_USAGE
            raise
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except (ValueError, OSError) as err:
            # All of the package's data exceptions are ValueErrors
            logger.debug("Data error", exc_info=True)
            click.echo(f"Error: {err}", err=True)
            ctx.exit(EXIT_DATA_ERROR)
        except Exception as err:
            logger.debug("Internal error", exc_info=True)
            click.echo(f"Internal error: {type(err).__name__}: {err}", err=True)
            ctx.exit(EXIT_INTERNAL)


@attrs(frozen=True)
class _Settings:
    score_config: ScoreConfig = attrib()
    remembrance: bool = attrib()
    seed: Optional[int] = attrib()
    out: Optional[str] = attrib()
    strict: bool = attrib()
    quiet: bool = attrib()

    def model_seed(self) -> int:
        return self.seed if self.seed is not None else 0

    def require_out(self, what: str) -> str:
        if not self.out:
            raise click.UsageError(f"--out is required to write {what}")
        return self.out


# Set up a click command group
@click.group(
    cls=_ExitCodeGroup,
    help=f"Scores Bitcoin peers from networking traces and evaluates score predictors (version {peerscore.__version__})",
    context_settings={"auto_envvar_prefix": ENV_PREFIX},
)
@click.version_option(peerscore.__version__)
@click.option("--seed", type=int, help="master random seed [default: 0, or the scenario seed]")
@click.option("--w-block", type=float, default=DEFAULT_W_BLOCK, show_default=True)
@click.option("--gamma", type=float, default=DEFAULT_GAMMA, show_default=True)
@click.option(
    "--window-seconds", type=float, default=DEFAULT_WINDOW_SECONDS, show_default=True
)
@click.option(
    "--remembrance",
    type=click.Choice((REMEMBRANCE_ON, REMEMBRANCE_OFF)),
    default=REMEMBRANCE_ON,
    show_default=True,
    help="whether the remembered previous score is a model input",
)
@click.option(
    "--decay-mode",
    type=click.Choice(SUPPORTED_DECAY_MODES),
    default=DECAY_INCREMENT,
    show_default=True,
)
@click.option(
    "--fee-scale",
    type=float,
    default=FEE_SCALE_SATOSHI,
    show_default=True,
    help="divisor applied to satoshi fees before weighting [example: 10000]",
)
@click.option(
    "--remembrance-identity",
    type=click.Choice(SUPPORTED_IDENTITY_MODES),
    default=IDENTITY_ADDRESS_ONLY,
    show_default=True,
)
@click.option("--out", help="output file or directory, depending on the command")
@click.option("--strict", is_flag=True, help="fail on malformed trace lines instead of skipping them")
@click.option("--verbose", "-v", is_flag=True, help="log debugging messages")
@click.option(
    "--quiet", "-q", is_flag=True, help="suppress warnings and other non-critical messages"
)
@click.pass_context
def cli(
    ctx: click.Context,
    seed: Optional[int],
    w_block: float,
    gamma: float,
    window_seconds: float,
    remembrance: str,
    decay_mode: str,
    fee_scale: float,
    remembrance_identity: str,
    out: Optional[str],
    *,
    strict: bool,
    verbose: bool,
    quiet: bool,
) -> None:
    if verbose and quiet:
        raise click.UsageError("Cannot use both --verbose and --quiet")
    level = logging.DEBUG if verbose else logging.ERROR if quiet else logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger("peerscore").setLevel(level)

    try:
        score_config = ScoreConfig(
            gamma, w_block, fee_scale, window_seconds, decay_mode, remembrance_identity
        )
    except ValueError as err:
        raise click.UsageError(str(err)) from err

    ctx.obj = _Settings(
        score_config, remembrance == REMEMBRANCE_ON, seed, out, strict, quiet
    )


# Argument helpers for commands
def _trace_argument(func: Callable) -> Callable:
    return click.argument("trace", type=click.Path(dir_okay=False))(func)


def _dataset_options() -> List[Callable]:
    return [
        click.option(
            "--train-fraction",
            type=float,
            default=DEFAULT_TRAIN_FRACTION,
            show_default=True,
        ),
        click.option(
            "--exclude-timestamp",
            is_flag=True,
            help="leave the window timestamp out of the feature columns",
        ),
    ]


def _model_options() -> List[Callable]:
    return [
        click.option("--k", type=click.IntRange(min=1), default=DEFAULT_K, show_default=True),
        click.option("--standardize", is_flag=True, help="standardize columns for KNN"),
        click.option(
            "--trees", type=click.IntRange(min=1), default=DEFAULT_TREES, show_default=True
        ),
        click.option("--max-depth", type=click.IntRange(min=1), help="[default: unlimited]"),
        click.option(
            "--min-leaf", type=click.IntRange(min=1), default=DEFAULT_MIN_LEAF, show_default=True
        ),
        click.option("--ridge-eps", type=float, default=DEFAULT_RIDGE_EPS, show_default=True),
        click.option(
            "--forest-jobs",
            type=click.IntRange(min=1),
            default=1,
            show_default=True,
            help="threads used to build forest trees",
        ),
    ]


def _apply(func: Callable, decorators: Sequence[Callable]) -> Callable:
    # Need to apply these backwards to match decorator application order
    for decorator in decorators[::-1]:
        func = decorator(func)
    return func


def _training_arguments(func: Callable) -> Callable:
    return _apply(func, [_trace_argument] + _dataset_options() + _model_options())


def _model_option() -> Callable:
    return click.option(
        "--model",
        type=click.Choice(SUPPORTED_MODELS),
        default=MODEL_LINEAR,
        show_default=True,
    )


def _model_specs(
    seed: int,
    k: int,
    standardize: bool,
    trees: int,
    max_depth: Optional[int],
    min_leaf: int,
    ridge_eps: float,
    forest_jobs: int,
) -> Dict[str, ModelSpec]:
    return {
        MODEL_LINEAR: ModelSpec(MODEL_LINEAR, LinearParams(ridge_eps)),
        MODEL_KNN: ModelSpec(MODEL_KNN, KnnParams(k, standardize)),
        MODEL_FOREST: ModelSpec(
            MODEL_FOREST,
            ForestParams(
                trees, max_depth, min_leaf, seed=seed, n_jobs=forest_jobs
            ),
        ),
    }


def _parse_list(values: str, parse: Callable[[str], Any], name: str) -> List[Any]:
    # Remove any whitespace around the items
    items = [item.strip() for item in values.split(",") if item.strip()]
    if not items:
        raise click.BadParameter("must list at least one value, comma-separated", param_hint=name)
    try:
        return [parse(item) for item in items]
    except ValueError as err:
        raise click.BadParameter(str(err), param_hint=name) from err


def _parse_remembrance(value: str) -> bool:
    if value not in (REMEMBRANCE_ON, REMEMBRANCE_OFF):
        raise ValueError(f"remembrance values must be {REMEMBRANCE_ON} or {REMEMBRANCE_OFF}: {value}")
    return value == REMEMBRANCE_ON


def _parse_model(value: str) -> str:
    if value not in SUPPORTED_MODELS:
        raise ValueError(f"unknown model {repr(value)}; expected one of {SUPPORTED_MODELS}")
    return value


def _load_events(settings: _Settings, trace: str) -> List[ObservationEvent]:
    return read_events(trace, strict=settings.strict)


def _load_valid_events(settings: _Settings, trace: str) -> List[ObservationEvent]:
    events = _load_events(settings, trace)
    report = validate_trace(events, source_name=trace)
    if not report.is_valid():
        raise ValueError(
            f"Trace {trace} has {len(report)} violation(s), first: {report.violations[0].msg}. "
            "Run the validate command for the full list."
        )
    return events


def _excluded(exclude_timestamp: bool) -> Tuple[str, ...]:
    return (FEATURE_TIMESTAMP,) if exclude_timestamp else ()


@cli.command(name="simulate", help="generate a synthetic trace from a scenario")
@click.option(
    "--scenario",
    type=click.Path(dir_okay=False),
    help="a JSON file whose keys are scenario fields [example: {'duration_s': 3600}]",
)
@click.option("--duration-s", type=float, help="override the scenario duration")
@click.pass_obj
def simulate_trace(settings: _Settings, scenario: Optional[str], duration_s: Optional[float]) -> None:
    out = settings.require_out("the trace")
    loaded: Scenario = load_scenario(scenario) if scenario else DEFAULT_SCENARIO
    overrides: Dict[str, Any] = {}
    if settings.seed is not None:
        overrides["seed"] = settings.seed
    if duration_s is not None:
        overrides["duration_s"] = duration_s
    if overrides:
        loaded = loaded.with_overrides(**overrides)

    events, truth = simulate(loaded)
    write_events(out, events)
    if not settings.quiet:
        print(
            f"Wrote {len(events)} events for {len(truth.sessions)} sessions, "
            f"{len(truth.block_times)} blocks, and {truth.tx_count} transactions to {out}"
        )


@cli.command(help="score a trace and write one feature and score CSV per peer")
@_trace_argument
@click.pass_obj
def score(settings: _Settings, trace: str) -> None:
    out = settings.require_out("the per-peer CSVs")
    events = _load_events(settings, trace)
    samples = extract_windows(events, settings.score_config)
    paths = export_peer_csv(samples, out)
    if not settings.quiet:
        print(f"Wrote {len(samples)} windows for {len(paths)} peer(s) to {out}")


@cli.command(help="encode a trace's windows as one numeric dataset CSV")
@_trace_argument
@click.option(
    "--exclude-timestamp",
    is_flag=True,
    help="leave the window timestamp out of the feature columns",
)
@click.pass_obj
def featurize(settings: _Settings, trace: str, exclude_timestamp: bool) -> None:
    out = settings.require_out("the dataset")
    samples = extract_windows(_load_events(settings, trace), settings.score_config)
    schema = fit_encoder(samples, exclude=_excluded(exclude_timestamp))
    dataset = encode(schema, samples, settings.remembrance)
    write_dataset_csv(dataset, out)
    if not settings.quiet:
        print(f"Wrote {len(dataset)} rows with {dataset.width} columns to {out}")


@cli.command(name="mi-rank", help="rank encoded feature columns by mutual information with the score")
@_trace_argument
@click.option("--top-k", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--bins", type=click.IntRange(min=2), default=16, show_default=True)
@click.option(
    "--exclude-timestamp",
    is_flag=True,
    help="leave the window timestamp out of the feature columns",
)
@click.pass_obj
def mi_rank(
    settings: _Settings, trace: str, top_k: int, bins: int, exclude_timestamp: bool
) -> None:
    samples = extract_windows(_load_events(settings, trace), settings.score_config)
    schema = fit_encoder(samples, exclude=_excluded(exclude_timestamp))
    dataset = encode(schema, samples, settings.remembrance)
    ranking = mutual_information(dataset, bins)
    top = select_top_k(ranking, min(top_k, len(ranking)))
    rows = [(rank, name, ranking.score_of(name)) for rank, name in enumerate(top, 1)]
    print(tabulate(rows, ["Rank", "Feature", "MI (bits)"], tablefmt="github", floatfmt=".4f"))


@cli.command(help="fit one model on the chronological training split")
@_training_arguments
@_model_option()
@click.pass_obj
def train(
    settings: _Settings,
    trace: str,
    model: str,
    train_fraction: float,
    exclude_timestamp: bool,
    **model_args: Any,
) -> None:
    samples = extract_windows(_load_events(settings, trace), settings.score_config)
    train_set, _ = prepare_datasets(
        samples,
        settings.remembrance,
        train_fraction=train_fraction,
        exclude=_excluded(exclude_timestamp),
    )
    spec = _model_specs(settings.model_seed(), **model_args)[model]
    fitted = fit(spec, train_set)
    training_report = evaluate(predict(fitted, train_set), train_set.labels)

    rows: List[Tuple[str, Any]] = [
        ("Model", model),
        ("Training rows", len(train_set)),
        ("Columns", train_set.width),
        ("Training MAE", training_report.mae),
    ]
    if isinstance(fitted, LinearModel):
        rows.append(("Intercept", fitted.intercept))
        rows.append(("Rank deficient", fitted.rank_deficient))
    print(tabulate(rows, ["Property", "Value"], tablefmt="github"))

    if isinstance(fitted, LinearModel) and not settings.quiet:
        coefficients = fitted.coefficients
        order = np.argsort(-np.abs(coefficients), kind="stable")
        names = train_set.column_names()
        coefficient_rows = [(names[idx], coefficients[idx]) for idx in order if coefficients[idx]]
        print()
        print(tabulate(coefficient_rows, ["Column", "Coefficient"], tablefmt="github"))


@cli.command(name="eval", help="train and evaluate one configuration on the held-out split")
@_training_arguments
@_model_option()
@click.option("--train-duration", type=float, help="seconds of training data [default: all]")
@click.option("--per-peer", is_flag=True, help="average MAE within each peer first")
@click.pass_obj
def eval_(
    settings: _Settings,
    trace: str,
    model: str,
    train_fraction: float,
    exclude_timestamp: bool,
    train_duration: Optional[float],
    per_peer: bool,
    **model_args: Any,
) -> None:
    samples = extract_windows(_load_events(settings, trace), settings.score_config)
    train_set, test_set = prepare_datasets(
        samples,
        settings.remembrance,
        train_fraction=train_fraction,
        exclude=_excluded(exclude_timestamp),
    )
    spec = _model_specs(settings.model_seed(), **model_args)[model]
    config = EvalConfig(
        model, settings.score_config.w_block, settings.remembrance, train_duration
    )
    row = run_configuration(train_set, test_set, spec, config, per_peer=per_peer)
    header, table = report_table([row])
    print(tabulate(table, header, tablefmt="github"))
    if settings.out:
        write_report([row], settings.out)


@cli.command(help="run a grid of experiments and write a report CSV")
@_training_arguments
@click.option(
    "--w-blocks",
    default="0,0.25,0.5,0.75,1",
    show_default=True,
    help="block weights, comma-separated",
)
@click.option(
    "--remembrance-values",
    default=f"{REMEMBRANCE_ON},{REMEMBRANCE_OFF}",
    show_default=True,
    help="remembrance settings, comma-separated",
)
@click.option(
    "--models", default=",".join(SUPPORTED_MODELS), show_default=True, help="comma-separated"
)
@click.option(
    "--durations",
    default="40,200,1000,5000,25000,125000",
    show_default=True,
    help="training durations in seconds, comma-separated",
)
@click.option("--per-peer", is_flag=True, help="average MAE within each peer first")
@click.option(
    "--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="worker processes"
)
@click.pass_obj
def sweep(
    settings: _Settings,
    trace: str,
    train_fraction: float,
    exclude_timestamp: bool,
    w_blocks: str,
    remembrance_values: str,
    models: str,
    durations: str,
    per_peer: bool,
    jobs: int,
    **model_args: Any,
) -> None:
    out = settings.require_out("the report")
    try:
        grid = SweepGrid(
            _parse_list(w_blocks, float, "--w-blocks"),
            _parse_list(remembrance_values, _parse_remembrance, "--remembrance-values"),
            _parse_list(models, _parse_model, "--models"),
            _parse_list(durations, float, "--durations"),
        )
    except ValueError as err:
        raise click.UsageError(str(err)) from err

    events = _load_valid_events(settings, trace)
    seed = settings.model_seed()
    rows = run_sweep(
        events,
        grid,
        settings.score_config,
        seed=seed,
        train_fraction=train_fraction,
        exclude=_excluded(exclude_timestamp),
        per_peer=per_peer,
        specs=_model_specs(seed, **model_args),
        jobs=jobs,
    )
    write_report(rows, out)

    if not settings.quiet:
        print(f"Wrote {len(rows)} report rows to {out}")
        header, table = remembrance_summary(rows)
        if table:
            print(tabulate(table, header, tablefmt="github"))


@cli.command(help="collect a live trace from Bitcoin peers")
@click.option(
    "--peer",
    "peers",
    multiple=True,
    required=True,
    help="peer to dial as host or host:port; repeat for more peers",
)
@click.option(
    "--max-outbound",
    type=click.IntRange(1, MAX_OUTBOUND_LIMIT),
    default=MAX_OUTBOUND_LIMIT,
    show_default=True,
)
@click.option("--user-agent", default=DEFAULT_USER_AGENT, show_default=True)
@click.option("--handshake-timeout", type=float, default=10.0, show_default=True)
@click.option("--ping-interval", type=float, default=120.0, show_default=True)
@click.option("--run-seconds", type=float, help="stop after this many seconds [default: run until interrupted]")
@click.option("--append", is_flag=True, help="append to an existing trace")
@click.pass_obj
def sense(
    settings: _Settings,
    peers: Tuple[str, ...],
    max_outbound: int,
    user_agent: str,
    handshake_timeout: float,
    ping_interval: float,
    run_seconds: Optional[float],
    append: bool,
) -> None:
    out = settings.require_out("the trace")
    config = SensorConfig(
        peers,
        out,
        max_outbound=max_outbound,
        user_agent=user_agent,
        handshake_timeout_s=handshake_timeout,
        ping_interval_s=ping_interval,
        run_seconds=run_seconds,
        append=append,
    )
    try:
        stats = run_sensor(config)
    except KeyboardInterrupt:  # pragma: no cover
        return
    if not settings.quiet:
        print(
            f"Wrote {stats.events_written} events from {stats.sessions} session(s) to {out}; "
            f"{stats.dial_failures} of {stats.dials} dial(s) failed"
        )


@cli.command(help="check traces for ordering and session violations")
@click.argument("trace", type=click.Path(dir_okay=False), nargs=-1, required=True)
@click.pass_obj
def validate(
    settings: _Settings,
    trace: List[str],  # Name is "trace" to make sense on the command line, but it's a list
) -> None:
    error = False
    for each_trace in trace:
        result = read_trace(each_trace, strict=settings.strict)
        report = validate_trace(result.events, line_nums=result.line_nums, source_name=each_trace)
        for skipped in result.skipped:
            print(f"Skipped line {skipped.line_num}: {skipped.reason}")
        if report.violations:
            print(
                f"Encountered {len(report)} violations in {report.event_count} events, "
                f"{report.session_count} sessions, and {report.peer_count} peer(s) in {each_trace}"
            )
            print("\n".join(violation.msg for violation in report.violations))
            error = True
        elif not settings.quiet:
            print(
                f"No violations found in {report.event_count} events, {report.session_count} "
                f"sessions, and {report.peer_count} peer(s) in {each_trace}"
            )

    if error:
        click.get_current_context().exit(EXIT_DATA_ERROR)


if __name__ == "__main__":  # pragma: no cover
    cli()
