"""
Trial ingestion, minimal preprocessing and the synthetic EEG generator
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import butter, sosfiltfilt

from intertwined.utils.architectures import CHANNELS_10_20, default_dtype
from intertwined.utils.errors import (
    ConfigurationError,
    DataError,
    FilterParameterError,
    IngestionError,
    StratificationError,
)

logger = logging.getLogger(__name__)

CLASS_NAMES = ("left hand", "right hand", "left leg", "right leg", "tongue", "passive")
CHANNEL_NAMES = CHANNELS_10_20
CLASS_FREQUENCIES = (9.0, 12.0, 16.0, 20.0, 24.0, 28.0)
DEFAULT_SAMPLE_RATE = 200.0
DEFAULT_BAND = (8.0, 30.0)
FILTER_ORDER = 4
MANIFEST_VERSION = 1
PAYLOAD_NAME = "trials.f32"
PROVENANCES = ("raw", "bandpassed", "synthetic")


@dataclass(frozen=True)
class TrialTensor:
    """One cue-aligned trial: L electrodes × K samples."""
    data: np.ndarray
    label: int
    subject: str = "S1"
    session: str = "1"
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if np.ndim(self.data) != 2:
            raise DataError(f"Trial data must be electrodes × samples, got shape {np.shape(self.data)}")
        if not 0 <= int(self.label) < len(CLASS_NAMES):
            raise DataError(f"Label {self.label} outside 0..{len(CLASS_NAMES) - 1}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "TrialTensor":
        return dataclasses.replace(self, data=data)


@dataclass
class Dataset:
    """Trials sharing one shape and sample rate, with fixed class order."""
    trials: List[TrialTensor]
    provenance: str = "raw"
    class_names: Tuple[str, ...] = CLASS_NAMES
    channels: Tuple[str, ...] = CHANNEL_NAMES
    standardized: bool = False
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.class_names) != CLASS_NAMES:
            raise DataError(f"Class names must be {CLASS_NAMES}")
        shapes = {t.shape for t in self.trials}
        rates = {float(t.sample_rate) for t in self.trials}
        if len(shapes) > 1 or len(rates) > 1:
            raise DataError(f"Trials disagree on shape or sample rate: {sorted(shapes)}, {sorted(rates)}")
        if shapes and len(self.channels) != next(iter(shapes))[0]:
            raise DataError(f"{len(self.channels)} channel names for {next(iter(shapes))[0]} electrodes")

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self) -> Iterator[TrialTensor]:
        return iter(self.trials)

    def __getitem__(self, index: int) -> TrialTensor:
        return self.trials[index]

    @property
    def shape(self) -> Optional[Tuple[int, int]]:
        return self.trials[0].shape if self.trials else None

    @property
    def sample_rate(self) -> float:
        return float(self.trials[0].sample_rate) if self.trials else DEFAULT_SAMPLE_RATE

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def to_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.trials:
            raise DataError("Dataset is empty")
        return np.stack([t.data for t in self.trials]), self.labels()

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return self.with_trials([self.trials[i] for i in indices])

    def with_trials(self, trials: List[TrialTensor], **changes) -> "Dataset":
        return dataclasses.replace(self, trials=trials, **changes)


# Manifest I/O

def save_dataset(dataset: Dataset, directory: Union[str, Path], manifest_name: str = "manifest.json") -> Path:
    """
    Write every trial as little-endian float32 into one payload file plus a JSON manifest.

    Returns:
        Path of the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not dataset.trials:
        raise DataError("Refusing to save an empty dataset")
    n_channels, n_samples = dataset.shape
    trial_bytes = n_channels * n_samples * 4

    entries = []
    with open(directory / PAYLOAD_NAME, "wb") as f:
        for i, trial in enumerate(dataset.trials):
            f.write(np.ascontiguousarray(trial.data, dtype="<f4").tobytes())
            entries.append({"file": PAYLOAD_NAME, "offset": i * trial_bytes, "label": int(trial.label),
                            "subject": trial.subject, "session": trial.session})

    manifest = {
        "version": MANIFEST_VERSION,
        "sample_rate": dataset.sample_rate,
        "channels": list(dataset.channels),
        "samples": n_samples,
        "class_names": list(dataset.class_names),
        "provenance": dataset.provenance,
        "standardized": dataset.standardized,
        "metadata": dataset.metadata,
        "trials": entries,
    }
    manifest_path = directory / manifest_name
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved {len(entries)} trials to {manifest_path}")
    return manifest_path


def load_dataset(manifest_path: Union[str, Path], dtype=None) -> Dataset:
    """
    Load trials named by a manifest.

    Args:
        manifest_path: JSON manifest written by `save_dataset` (or by hand)
        dtype: Working precision, defaults to the INTERTWINED_PRECISION setting

    Returns:
        Dataset

    Raises:
        IngestionError: If the manifest is unreadable or a payload is short or mislabeled
    """
    manifest_path = Path(manifest_path)
    dtype = dtype or default_dtype()
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"Cannot read manifest {manifest_path}: {e}", path=str(manifest_path)) from e

    version = manifest.get("version")
    if version != MANIFEST_VERSION:
        raise IngestionError(f"Unsupported manifest version {version!r}", path=str(manifest_path))
    try:
        channels = tuple(manifest["channels"])
        n_samples = int(manifest["samples"])
        sample_rate = float(manifest["sample_rate"])
        entries = manifest["trials"]
    except (KeyError, TypeError, ValueError) as e:
        raise IngestionError(f"Manifest {manifest_path} is missing a field: {e}", path=str(manifest_path)) from e
    if tuple(manifest.get("class_names", CLASS_NAMES)) != CLASS_NAMES:
        raise IngestionError(f"Manifest class names differ from {CLASS_NAMES}", path=str(manifest_path))

    count = len(channels) * n_samples
    trials = []
    for index, entry in enumerate(entries):
        payload = manifest_path.parent / entry["file"]
        offset = int(entry.get("offset", 0))
        try:
            values = np.fromfile(payload, dtype="<f4", count=count, offset=offset)
        except (OSError, ValueError) as e:
            raise IngestionError(f"Cannot read {payload} for trial {index}: {e}",
                                 path=str(payload), trial_index=index) from e
        if values.size != count:
            raise IngestionError(
                f"{payload} holds {values.size} values at offset {offset} for trial {index}, expected {count}",
                path=str(payload), trial_index=index)
        label = entry.get("label")
        if not isinstance(label, int) or not 0 <= label < len(CLASS_NAMES):
            raise IngestionError(f"Trial {index} in {payload} has invalid label {label!r}",
                                 path=str(payload), trial_index=index)
        trials.append(TrialTensor(values.reshape(len(channels), n_samples).astype(dtype), label,
                                  str(entry.get("subject", "S1")), str(entry.get("session", "1")), sample_rate))

    logger.info(f"Loaded {len(trials)} trials from {manifest_path}")
    return Dataset(trials, manifest.get("provenance", "raw"), CLASS_NAMES, channels,
                   bool(manifest.get("standardized", False)), manifest.get("metadata", {}))


def read_delimited_trial(path: Union[str, Path], delimiter: Optional[str] = None) -> np.ndarray:
    """Read one trial stored as delimited text, one channel per row."""
    try:
        frame = pd.read_csv(path, header=None, sep=delimiter if delimiter else r"[,;\s]+", engine="python")
        values = frame.to_numpy(dtype=np.float64)
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise IngestionError(f"Cannot parse {path}: {e}", path=str(path)) from e
    if values.ndim != 2 or not np.all(np.isfinite(values)):
        raise IngestionError(f"{path} does not hold a finite channel × sample table", path=str(path))
    return values


def import_delimited(index_path: Union[str, Path], output_dir: Union[str, Path],
                     sample_rate: float = DEFAULT_SAMPLE_RATE, delimiter: Optional[str] = None) -> Path:
    """
    Convert delimited-text trials into a float32 payload and manifest.

    Args:
        index_path: Table with columns file, label and optionally subject, session
        output_dir: Destination of the manifest and payload
        sample_rate: Sampling rate of every trial
        delimiter: Field separator of the trial files (auto-detected if None)

    Returns:
        Path of the written manifest
    """
    index_path = Path(index_path)
    try:
        index = pd.read_csv(index_path, sep=None, engine="python", dtype={"subject": str, "session": str})
    except (OSError, ValueError) as e:
        raise IngestionError(f"Cannot read index {index_path}: {e}", path=str(index_path)) from e
    if not {"file", "label"} <= set(index.columns):
        raise IngestionError(f"Index {index_path} needs 'file' and 'label' columns", path=str(index_path))

    trials = []
    for row_number, row in enumerate(index.itertuples(index=False)):
        path = Path(row.file)
        if not path.is_absolute():
            path = index_path.parent / path
        try:
            trial = TrialTensor(read_delimited_trial(path, delimiter), int(row.label),
                                str(getattr(row, "subject", "S1")), str(getattr(row, "session", "1")), sample_rate)
        except DataError as e:
            raise IngestionError(str(e), path=str(path), trial_index=row_number) from e
        trials.append(trial)

    n_channels = trials[0].shape[0] if trials else 0
    channels = CHANNEL_NAMES if n_channels == len(CHANNEL_NAMES) else tuple(f"ch{i}" for i in range(n_channels))
    return save_dataset(Dataset(trials, "raw", CLASS_NAMES, channels), output_dir)


# Preprocessing

def design_bandpass(low: float, high: float, sample_rate: float, order: int = FILTER_ORDER) -> np.ndarray:
    """
    Butterworth bandpass in second-order sections.

    Raises:
        FilterParameterError: Unless 0 < low < high < sample_rate / 2
    """
    nyquist = sample_rate / 2.0
    if not 0.0 < low < high < nyquist:
        raise FilterParameterError(f"Bandpass needs 0 < low < high < {nyquist:g} Hz, got {low:g}-{high:g} Hz")
    return butter(order, [low, high], btype="bandpass", fs=sample_rate, output="sos")


def bandpass(trial: TrialTensor, low: float = DEFAULT_BAND[0], high: float = DEFAULT_BAND[1],
             order: int = FILTER_ORDER) -> TrialTensor:
    """Zero-phase (forward-backward) Butterworth bandpass of every channel."""
    sos = design_bandpass(low, high, trial.sample_rate, order)
    n_samples = trial.shape[1]
    padlen = min(3 * (2 * len(sos) + 1), n_samples - 1)
    filtered = sosfiltfilt(sos, trial.data, axis=-1, padtype="even", padlen=padlen)
    return trial.with_data(filtered.astype(trial.data.dtype, copy=False))


def bandpass_dataset(dataset: Dataset, low: float = DEFAULT_BAND[0], high: float = DEFAULT_BAND[1],
                     order: int = FILTER_ORDER) -> Dataset:
    design_bandpass(low, high, dataset.sample_rate, order)
    trials = [bandpass(t, low, high, order) for t in dataset.trials]
    logger.info(f"Bandpassed {len(trials)} trials at {low:g}-{high:g} Hz")
    metadata = dict(dataset.metadata, band=[low, high], filter_order=order)
    return dataset.with_trials(trials, provenance="bandpassed", metadata=metadata)


@dataclass
class ChannelStatistics:
    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "flagged": self.flagged.tolist()}

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ChannelStatistics":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
            return cls(np.asarray(payload["mean"], dtype=np.float64), np.asarray(payload["std"], dtype=np.float64),
                       np.asarray(payload["flagged"], dtype=bool))
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise DataError(f"Cannot read channel statistics {path}: {e}") from e


def channel_statistics(dataset: Dataset, tolerance: float = 1e-12) -> ChannelStatistics:
    """Per-channel mean and population std over all trials and samples."""
    inputs, _ = dataset.to_arrays()
    values = inputs.astype(np.float64, copy=False)
    mean = values.mean(axis=(0, 2))
    std = values.std(axis=(0, 2))
    flagged = std <= tolerance
    for channel in np.flatnonzero(flagged):
        logger.warning(f"Channel {dataset.channels[channel]} has zero variance; centering without scaling")
    return ChannelStatistics(mean, std, flagged)


def apply_standardization(dataset: Dataset, stats: ChannelStatistics) -> Dataset:
    scale = np.where(stats.flagged, 1.0, stats.std)
    trials = []
    for trial in dataset.trials:
        values = (trial.data - stats.mean[:, None]) / scale[:, None]
        trials.append(trial.with_data(values.astype(trial.data.dtype, copy=False)))
    return dataset.with_trials(trials, standardized=True)


def standardize(dataset: Dataset, stats: Optional[ChannelStatistics] = None) -> Dataset:
    """
    Per-channel zero mean, unit variance.

    Pass the training split's `stats` when standardizing validation data.
    """
    return apply_standardization(dataset, stats if stats is not None else channel_statistics(dataset))


def split(dataset: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Stratified split by class within subject.

    Raises:
        StratificationError: If a class is absent or either side would be empty
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    labels = dataset.labels()
    missing = [CLASS_NAMES[c] for c in range(len(CLASS_NAMES)) if not np.any(labels == c)]
    if missing:
        raise StratificationError(f"Cannot stratify: no trials for {', '.join(missing)}")

    rng = np.random.default_rng(seed)
    subjects = np.array([t.subject for t in dataset.trials])
    val_index = []
    for subject in sorted(set(subjects.tolist())):
        for label in range(len(CLASS_NAMES)):
            members = np.flatnonzero((subjects == subject) & (labels == label))
            if members.size == 0:
                continue
            n_val = int(np.floor(members.size * val_fraction + 0.5))
            val_index.extend(rng.permutation(members)[:n_val].tolist())

    val_set = set(val_index)
    train_index = [i for i in range(len(dataset)) if i not in val_set]
    if not train_index or not val_index:
        raise StratificationError(f"val_fraction {val_fraction} leaves an empty split of {len(dataset)} trials")
    return dataset.subset(train_index), dataset.subset(sorted(val_index))


def synth_generate(n_per_class: int, seed: int, noise_std: float, n_channels: int = len(CHANNEL_NAMES),
                   n_samples: int = 200, sample_rate: float = DEFAULT_SAMPLE_RATE, amplitude: float = 1.0,
                   n_subjects: int = 1) -> Dataset:
    """
    Six-class EEG-like trials.

    Each class has its own spatial weighting (max |w| = 1) and oscillation
    frequency in 8-30 Hz; trials differ by a uniform random phase plus
    white noise of std `noise_std`.
    """
    if n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise_std < 0:
        raise ConfigurationError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(len(CLASS_NAMES), n_channels))
    weights /= np.abs(weights).max(axis=1, keepdims=True)
    time = np.arange(n_samples) / sample_rate
    channels = CHANNEL_NAMES if n_channels == len(CHANNEL_NAMES) else tuple(f"ch{i}" for i in range(n_channels))

    trials = []
    for label, frequency in enumerate(CLASS_FREQUENCIES):
        for i in range(n_per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = amplitude * np.sin(2.0 * np.pi * frequency * time + phase)
            values = weights[label][:, None] * wave[None, :]
            if noise_std > 0:
                values = values + rng.normal(0.0, noise_std, size=(n_channels, n_samples))
            trials.append(TrialTensor(values, label, f"S{i % n_subjects + 1}", "1", sample_rate))

    metadata = {"seed": seed, "noise_std": noise_std, "amplitude": amplitude,
                "frequencies": list(CLASS_FREQUENCIES)}
    return Dataset(trials, "synthetic", CLASS_NAMES, channels, metadata=metadata)
