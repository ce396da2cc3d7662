"""
Seeded hyperparameter search over the discrete family spaces
"""
import dataclasses
import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from intertwined import config as settings
from intertwined.utils.architectures import DEFAULT_INPUT_SHAPE, HyperConfig, build_model, plan_shapes
from intertwined.utils.data import Dataset, split
from intertwined.utils.errors import ConfigurationError, DataError, InfeasibleConfigError, SpaceDegenerateError
from intertwined.utils.space import SearchSpace
from intertwined.utils.training import DEFAULT_BATCH_SIZE, fit

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 1000


def _pick(rng: np.random.Generator, choices: Sequence):
    return choices[int(rng.integers(len(choices)))]


def _draw_stack(rng, units: Sequence[int], depths: Sequence[int]) -> List[int]:
    first = _pick(rng, units)
    if first == 0:
        return [0]
    nonzero = [u for u in units if u != 0]
    return [first] + [_pick(rng, nonzero) for _ in range(_pick(rng, depths) - 1)]


def _draw(values: Dict[str, Tuple], family: str, rng: np.random.Generator) -> HyperConfig:
    if family == "intertwined":
        modules = _pick(rng, values["module_count"])
        return HyperConfig(
            family=family,
            module_count=modules,
            tdfc_units=[_pick(rng, values["tdfc_units"]) for _ in range(modules)],
            tdfc_activation=_pick(rng, values["tdfc_activation"]),
            sdc_kernels=[_pick(rng, values["sdc_kernels"]) for _ in range(modules)],
            sdc_kernel_sizes=[_pick(rng, values["sdc_kernel_sizes"]) for _ in range(modules)],
            sdc_activation=_pick(rng, values["sdc_activation"]),
            pool_size=_pick(rng, values["pool_size"]),
            pool_type=_pick(rng, values["pool_type"]),
            lstm_units=_draw_stack(rng, values["lstm_units"], values["lstm_depth"]),
            lstm_dropout=_pick(rng, values["lstm_dropout"]),
            fc_units=_draw_stack(rng, values["fc_units"], values["fc_depth"]),
            fc_activation=_pick(rng, values["fc_activation"]),
            fc_dropout=_pick(rng, values["fc_dropout"]),
            minimizer=_pick(rng, values["minimizer"]),
        )

    lstm_layers = _pick(rng, values["lstm_layers"])
    lstm_units = _pick(rng, values["lstm_units"])
    fc_layers = _pick(rng, values["fc_layers"])
    fc_units = _pick(rng, values["fc_units"])
    return HyperConfig(
        family=family,
        conv_kernels=_pick(rng, values["conv_kernels"]),
        conv_size=_pick(rng, values["conv_size"]),
        conv_stride=_pick(rng, values["conv_stride"]),
        conv_layers=_pick(rng, values["conv_layers"]),
        sdc_activation=_pick(rng, values["sdc_activation"]),
        lstm_units=[lstm_units] * lstm_layers if lstm_layers else [0],
        lstm_dropout=_pick(rng, values["lstm_dropout"]),
        fc_units=[fc_units] * fc_layers if fc_layers else [0],
        fc_activation=_pick(rng, values["fc_activation"]),
        fc_dropout=_pick(rng, values["fc_dropout"]),
        minimizer=_pick(rng, values["minimizer"]),
    )


def sample_config(space: SearchSpace, family: str, rng: np.random.Generator,
                  input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE) -> HyperConfig:
    """
    Draw one feasible config, each hyperparameter uniformly from its set.

    Per-module fields are drawn independently per module. Draws whose
    shape plan collapses are rejected and redrawn.

    Raises:
        SpaceDegenerateError: After more than 1000 consecutive infeasible draws
    """
    values = space.for_family(family)
    rejected = 0
    while True:
        config = _draw(values, family, rng)
        try:
            plan_shapes(config, input_shape)
        except InfeasibleConfigError:
            rejected += 1
            if rejected > MAX_REJECTIONS:
                raise SpaceDegenerateError(
                    f"No feasible {family} config in {MAX_REJECTIONS} consecutive draws for input {tuple(input_shape)}")
            continue
        if rejected:
            logger.debug(f"Rejected {rejected} infeasible {family} draws")
        return config


def grid_configs(space: SearchSpace, family: str,
                 input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE) -> Iterator[HyperConfig]:
    """Enumerate every feasible config of a baseline family in a fixed order."""
    if family == "intertwined":
        raise ConfigurationError("Grid enumeration is only offered for the cascade and parallel spaces")
    values = space.for_family(family)
    names = ("conv_kernels", "conv_size", "conv_stride", "conv_layers", "sdc_activation", "lstm_layers",
             "lstm_units", "lstm_dropout", "fc_layers", "fc_units", "fc_activation", "fc_dropout", "minimizer")
    seen = set()
    for combo in itertools.product(*(values[name] for name in names)):
        choice = dict(zip(names, combo))
        lstm_layers, fc_layers = choice.pop("lstm_layers"), choice.pop("fc_layers")
        choice["lstm_units"] = [choice["lstm_units"]] * lstm_layers if lstm_layers else [0]
        choice["fc_units"] = [choice["fc_units"]] * fc_layers if fc_layers else [0]
        config = HyperConfig(family=family, **choice)
        key = config.config_hash()
        if key in seen:
            continue
        seen.add(key)
        try:
            plan_shapes(config, input_shape)
        except InfeasibleConfigError:
            continue
        yield config


def trial_seed(seed: int, index: int) -> int:
    """Independent stream per (sweep seed, trial index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class TrialResult:
    index: int
    config_hash: str
    config: Dict
    seed: int
    status: str
    best_val_loss: Optional[float] = None
    best_val_accuracy: Optional[float] = None
    best_epoch: Optional[int] = None
    epochs: int = 0
    wall_time: float = 0.0
    error: Optional[str] = None
    val_losses: List[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_line(self) -> str:
        return json.dumps({"type": "trial", **dataclasses.asdict(self)}, sort_keys=True)


@dataclass
class SweepResult:
    family: str
    seed: int
    budget: int
    trials: List[TrialResult] = field(default_factory=list)

    @property
    def best(self) -> Optional[TrialResult]:
        """Lowest best-validation-loss trial; earliest index on ties."""
        completed = [t for t in self.trials if t.ok]
        if not completed:
            return None
        return min(completed, key=lambda t: (t.best_val_loss, t.index))

    def summary(self) -> Dict:
        best = self.best
        return {
            "family": self.family,
            "seed": self.seed,
            "budget": self.budget,
            "completed": sum(t.ok for t in self.trials),
            "failed": sum(not t.ok for t in self.trials),
            "best_index": best.index if best else None,
            "best_config_hash": best.config_hash if best else None,
            "best_val_loss": best.best_val_loss if best else None,
            "best_val_accuracy": best.best_val_accuracy if best else None,
        }

    def summary_line(self) -> str:
        return json.dumps({"type": "summary", **self.summary()}, sort_keys=True)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for trial in sorted(self.trials, key=lambda t: t.index):
                f.write(trial.to_line() + "\n")
            f.write(self.summary_line() + "\n")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "SweepResult":
        trials, summary = [], None
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                entry = json.loads(line)
                kind = entry.pop("type")
                if kind == "trial":
                    trials.append(TrialResult(**entry))
                else:
                    summary = entry
        if summary is None:
            raise DataError(f"Sweep results {path} have no summary line (interrupted run?)")
        return cls(summary["family"], summary["seed"], summary["budget"], sorted(trials, key=lambda t: t.index))


@dataclass
class SweepSpec:
    """Sweep options as stored in a JSON sweep config file."""
    family: str
    budget: int
    manifest: Optional[str] = None
    seed: int = 0
    jobs: Optional[int] = None
    epochs: int = 30
    batch_size: int = DEFAULT_BATCH_SIZE
    val_fraction: float = 0.2
    lr: Optional[float] = None
    grid: bool = False
    space: Dict[str, List] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SweepSpec":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read sweep config {path}: {e}") from e
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigurationError(f"Unknown sweep config fields: {sorted(unknown)}")
        try:
            spec = cls(**payload)
        except TypeError as e:
            raise ConfigurationError(f"Incomplete sweep config {path}: {e}") from e
        if spec.manifest and not Path(spec.manifest).is_absolute():
            spec.manifest = str(Path(path).parent / spec.manifest)
        return spec

    def search_space(self) -> SearchSpace:
        space = SearchSpace()
        return space.restrict(self.family, **self.space) if self.space else space


def run_trial(index: int, config: HyperConfig, train: Dataset, val: Dataset, seed: int, epochs: int,
              batch_size: int = DEFAULT_BATCH_SIZE, lr: Optional[float] = None) -> TrialResult:
    """Build, train and score one sampled config on its own rng stream."""
    start_time = time.time()
    stream = trial_seed(seed, index)
    model = build_model(config, stream, train.shape)
    record = fit(model, train, val, epochs=epochs, batch_size=batch_size, seed=stream, lr=lr, progress=False)
    return TrialResult(index, config.config_hash(), config.to_dict(), stream, "ok", record.best_val_loss,
                       record.best_val_accuracy, record.best_epoch, len(record.epochs), time.time() - start_time,
                       val_losses=[e.val_loss for e in record.epochs])


def run_sweep(space: SearchSpace, family: str, budget: int, dataset: Union[Dataset, Tuple[Dataset, Dataset]],
              seed: int, epochs: int = 30, batch_size: int = DEFAULT_BATCH_SIZE, val_fraction: float = 0.2,
              jobs: Optional[int] = None, results_path: Optional[Union[str, Path]] = None,
              lr: Optional[float] = None, grid: bool = False, progress: Optional[bool] = None) -> SweepResult:
    """
    Random (or grid) search: sample, build, fit and score `budget` configs.

    Configs are drawn up front from `seed`, so results do not depend on
    `jobs`. Each finished trial is appended to `results_path` by this
    thread only; a failing trial is recorded and the sweep goes on.

    Args:
        space: Value sets per family
        family: intertwined, cascade or parallel
        budget: Number of trials
        dataset: Dataset to split, or an explicit (train, val) pair
        seed: Sweep seed
        epochs: Epochs per trial
        batch_size: Mini-batch size
        val_fraction: Validation share when `dataset` is split here
        jobs: Concurrent trials, defaults to INTERTWINED_JOBS
        results_path: Line-oriented results log
        lr: Learning rate override
        grid: Enumerate the baseline grid instead of sampling (first `budget` configs)
        progress: Show a progress bar

    Returns:
        SweepResult
    """
    if budget < 1:
        raise ConfigurationError(f"budget must be >= 1, got {budget}")
    train, val = dataset if isinstance(dataset, tuple) else split(dataset, val_fraction, seed)
    jobs = jobs or settings["JOBS"]
    progress = settings["PROGRESS"] if progress is None else progress

    if grid:
        configs = list(itertools.islice(grid_configs(space, family, train.shape), budget))
    else:
        rng = np.random.default_rng(seed)
        configs = [sample_config(space, family, rng, train.shape) for _ in range(budget)]

    logger.info(f"Starting {family} sweep: {len(configs)} trials with {jobs} workers")
    start_time = time.time()
    result = SweepResult(family, seed, budget)
    log = open(results_path, "w", encoding="utf-8") if results_path else None
    try:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            future_to_index = {
                executor.submit(run_trial, index, config, train, val, seed, epochs, batch_size, lr): index
                for index, config in enumerate(configs)
            }
            for future in tqdm(as_completed(future_to_index), total=len(configs), desc=f"sweep {family}",
                               disable=not progress):
                index = future_to_index[future]
                try:
                    trial = future.result()
                except Exception as e:
                    logger.error(f"Error in trial {index}: {e}", exc_info=True)
                    config = configs[index]
                    trial = TrialResult(index, config.config_hash(), config.to_dict(), trial_seed(seed, index),
                                        "failed", error=f"{type(e).__name__}: {e}")
                result.trials.append(trial)
                if log:
                    log.write(trial.to_line() + "\n")
                    log.flush()
        result.trials.sort(key=lambda t: t.index)
        if log:
            log.write(result.summary_line() + "\n")
    finally:
        if log:
            log.close()

    end_time = time.time() - start_time
    best = result.best
    if best:
        logger.info(f"Sweep complete in {end_time:.2f} seconds. Best trial {best.index} "
                    f"({best.config_hash}): val loss {best.best_val_loss:.4f}, accuracy {best.best_val_accuracy:.3f}")
    else:
        logger.warning(f"Sweep complete in {end_time:.2f} seconds with no successful trials")
    return result


def best_runs(result: SweepResult, n: int) -> List[TrialResult]:
    """The `n` successful trials with the lowest best validation loss."""
    completed = sorted((t for t in result.trials if t.ok), key=lambda t: (t.best_val_loss, t.index))
    return completed[:n]


def _runs_for(result: SweepResult, parameter: str, top: Optional[int]) -> List[TrialResult]:
    runs = best_runs(result, top) if top else [t for t in result.trials if t.ok]
    if not runs:
        raise DataError("Sweep has no successful trials to summarize")
    if parameter not in runs[0].config:
        raise ConfigurationError(f"Unknown hyperparameter {parameter!r}")
    return runs


def sensitivity_summary(result: SweepResult, parameter: str, top: Optional[int] = None) -> pd.DataFrame:
    """
    Median and std of best validation loss grouped by one hyperparameter.

    Args:
        result: Sweep to summarize
        parameter: HyperConfig field, e.g. "fc_activation" or "minimizer"
        top: Restrict to the best `top` runs

    Returns:
        DataFrame indexed by parameter value with columns runs, median, std
    """
    runs = _runs_for(result, parameter, top)
    frame = pd.DataFrame({
        parameter: [str(t.config[parameter]) for t in runs],
        "best_val_loss": [t.best_val_loss for t in runs],
    })
    grouped = frame.groupby(parameter)["best_val_loss"]
    return pd.DataFrame({"runs": grouped.size(), "median": grouped.median(), "std": grouped.std(ddof=0)})


def sensitivity_curves(result: SweepResult, parameter: str, top: Optional[int] = 50) -> pd.DataFrame:
    """
    Per-epoch median and std of validation loss grouped by one hyperparameter.

    Only the best `top` runs of the sweep contribute, ranked by best
    validation loss as in `best_runs`.

    Returns:
        DataFrame indexed by (parameter value, epoch) with columns runs, median, std
    """
    runs = _runs_for(result, parameter, top)
    rows = [(str(t.config[parameter]), epoch, loss)
            for t in runs for epoch, loss in enumerate(t.val_losses, start=1)]
    if not rows:
        raise DataError("Sweep trials carry no per-epoch validation losses")
    frame = pd.DataFrame(rows, columns=[parameter, "epoch", "val_loss"])
    grouped = frame.groupby([parameter, "epoch"])["val_loss"]
    return pd.DataFrame({"runs": grouped.size(), "median": grouped.median(), "std": grouped.std(ddof=0)})
