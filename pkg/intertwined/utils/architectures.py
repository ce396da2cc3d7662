"""
Classifier assembly: hyperparameter configs, symbolic shape plans and the
intertwined, cascade and parallel model families.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from intertwined import config as settings
from intertwined.utils.errors import ConfigurationError, DataError, InfeasibleConfigError, ShapeError
from intertwined.utils.layers import (
    Conv2DLayer,
    FCLayer,
    IntertwinedModule,
    LSTMLayer,
    SdCLayer,
    TdFCLayer,
    Trace,
    lstm_forward,
    record_shape,
)
from intertwined.utils.params import ParamStore
from intertwined.utils.space import ACTIVATION_CHOICES, FAMILIES, MINIMIZERS, SearchSpace
from intertwined.utils.tensor import (
    Tensor,
    concatenate,
    format_shape,
    global_average_pool,
    matmul,
    no_grad,
    reshape,
    tensor_mean,
    transpose,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NUM_CLASSES = 6
DEFAULT_INPUT_SHAPE = (19, 200)

# Channel order of the 19-electrode 10/20 recordings
CHANNELS_10_20 = ("Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2",
                  "F7", "F8", "T3", "T4", "T5", "T6", "Fz", "Cz", "Pz")

_GRID_5X5 = {
    "Fp1": (0, 1), "Fp2": (0, 3),
    "F7": (1, 0), "F3": (1, 1), "Fz": (1, 2), "F4": (1, 3), "F8": (1, 4),
    "T3": (2, 0), "C3": (2, 1), "Cz": (2, 2), "C4": (2, 3), "T4": (2, 4),
    "T5": (3, 0), "P3": (3, 1), "Pz": (3, 2), "P4": (3, 3), "T6": (3, 4),
    "O1": (4, 1), "O2": (4, 3),
}


@dataclass(frozen=True)
class ElectrodeMesh:
    """Placement of each channel index on a rows × cols grid; vacant cells stay zero."""
    name: str
    rows: int
    cols: int
    positions: Tuple[Tuple[int, int], ...]

    def selection_matrix(self) -> np.ndarray:
        matrix = np.zeros((self.rows * self.cols, len(self.positions)))
        for channel, (row, col) in enumerate(self.positions):
            matrix[row * self.cols + col, channel] = 1.0
        return matrix


BUILTIN_MESHES = {
    "10-20-5x5": ElectrodeMesh("10-20-5x5", 5, 5, tuple(_GRID_5X5[name] for name in CHANNELS_10_20)),
}


def get_mesh(name: str, n_channels: int) -> ElectrodeMesh:
    """
    Resolve a mesh by built-in name or from a JSON mapping table
    ``{"rows": R, "cols": C, "positions": [[row, col], ...]}`` (one pair per channel).

    Raises:
        ConfigurationError: If the mesh is unknown, malformed, or does not cover `n_channels`
    """
    if name in BUILTIN_MESHES:
        mesh = BUILTIN_MESHES[name]
    elif name.endswith(".json") and Path(name).exists():
        with open(name, "r") as f:
            table = json.load(f)
        mesh = ElectrodeMesh(name, int(table["rows"]), int(table["cols"]),
                             tuple((int(r), int(c)) for r, c in table["positions"]))
    else:
        raise ConfigurationError(f"Unknown electrode mesh {name!r}")

    if len(mesh.positions) != n_channels:
        raise ConfigurationError(
            f"{n_channels} electrodes cannot be mapped onto mesh {mesh.name} ({len(mesh.positions)} positions)")
    if len(set(mesh.positions)) != len(mesh.positions) or any(
            not (0 <= r < mesh.rows and 0 <= c < mesh.cols) for r, c in mesh.positions):
        raise ConfigurationError(f"Mesh {mesh.name} has overlapping or out-of-grid positions")
    return mesh


@dataclass
class HyperConfig:
    """A complete architecture and training hyperparameter assignment."""
    family: str = "intertwined"
    module_count: int = 2
    tdfc_units: List[int] = field(default_factory=lambda: [16, 16])
    tdfc_activation: str = "selu"
    sdc_kernels: List[int] = field(default_factory=lambda: [16, 16])
    sdc_kernel_sizes: List[int] = field(default_factory=lambda: [3, 3])
    sdc_activation: str = "selu"
    pool_size: int = 2
    pool_type: str = "average"
    lstm_units: List[int] = field(default_factory=lambda: [50])
    lstm_dropout: float = 0.1
    fc_units: List[int] = field(default_factory=lambda: [30])
    fc_activation: str = "selu"
    fc_dropout: float = 0.1
    minimizer: str = "rmsprop"
    # cascade / parallel only
    conv_kernels: int = 16
    conv_size: int = 2
    conv_stride: int = 1
    conv_layers: int = 1
    mesh: str = "10-20-5x5"
    custom: bool = False

    def validate(self, space: Optional[SearchSpace] = None) -> "HyperConfig":
        """
        Check structural consistency and, unless flagged custom, membership in `space`.

        Raises:
            ConfigurationError: Describing every problem found
        """
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "intertwined":
            if self.module_count < 1:
                problems.append("module_count must be >= 1")
            for name in ("tdfc_units", "sdc_kernels", "sdc_kernel_sizes"):
                values = getattr(self, name)
                if len(values) < self.module_count:
                    problems.append(f"{name} needs {self.module_count} entries, got {len(values)}")
                if any(v < 1 for v in values):
                    problems.append(f"{name} entries must be positive")
            if self.pool_size < 1:
                problems.append("pool_size must be >= 1")
            if self.pool_type not in ("max", "average"):
                problems.append(f"pool_type must be max or average, got {self.pool_type!r}")
        else:
            for name in ("conv_kernels", "conv_size", "conv_stride", "conv_layers"):
                if getattr(self, name) < 1:
                    problems.append(f"{name} must be >= 1")
        for name in ("lstm_units", "fc_units"):
            values = getattr(self, name)
            if not values:
                problems.append(f"{name} must have at least one entry (use [0] to disable)")
            elif values[0] != 0 and any(v < 1 for v in values):
                problems.append(f"{name} entries must be positive when the stack is enabled")
        for name in ("tdfc_activation", "sdc_activation", "fc_activation"):
            if getattr(self, name) not in ACTIVATION_CHOICES:
                problems.append(f"{name} must be one of {ACTIVATION_CHOICES}")
        for name in ("lstm_dropout", "fc_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if self.minimizer not in MINIMIZERS:
            problems.append(f"minimizer must be one of {MINIMIZERS}")
        if not problems and space is not None and not self.custom:
            problems.extend(space.violations(self))
        if problems:
            raise ConfigurationError("Invalid hyperparameter config: " + "; ".join(problems))
        return self

    @property
    def uses_lstm(self) -> bool:
        return self.lstm_units[0] != 0

    @property
    def uses_fc(self) -> bool:
        return self.fc_units[0] != 0

    def to_dict(self) -> Dict:
        payload = {"schema_version": SCHEMA_VERSION}
        payload.update(dataclasses.asdict(self))
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: Dict) -> "HyperConfig":
        payload = dict(payload)
        version = payload.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"Unsupported config schema version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigurationError(f"Unknown config fields: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, text: str) -> "HyperConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HyperConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
            return cls.from_json(text)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config {path}: {e}") from e

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
        return path

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# Shape planning

@dataclass(frozen=True)
class PlanEntry:
    name: str
    input_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    branch: str = "main"


@dataclass
class ShapePlan:
    """Ordered per-stage shapes; entries chain within each branch."""
    entries: List[PlanEntry]

    @property
    def final_shape(self) -> Tuple[int, ...]:
        return self.entries[-1].output_shape

    def stage(self, name: str) -> PlanEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def as_trace(self) -> List[Tuple[str, Tuple[int, ...], Tuple[int, ...]]]:
        return [(e.name, e.input_shape, e.output_shape) for e in self.entries]

    def chains(self) -> bool:
        last: Dict[str, Tuple[int, ...]] = {}
        for entry in self.entries:
            if entry.name == "concat":
                merged = sum(shape[0] for branch, shape in last.items() if branch != "main")
                if entry.input_shape != (merged,):
                    return False
            elif entry.branch in last and last[entry.branch] != entry.input_shape:
                return False
            last[entry.branch] = entry.output_shape
        return self.final_shape == (NUM_CLASSES,)

    def render(self) -> str:
        """Human-readable chain, e.g. ``19×200 → 16×200 → … → 256×48 → LSTM → FC → 6``."""
        lines = []
        branches = list(dict.fromkeys(e.branch for e in self.entries))
        for branch in branches:
            entries = [e for e in self.entries if e.branch == branch]
            tokens = [] if entries[0].name == "concat" else [format_shape(entries[0].input_shape)]
            for entry in entries:
                if entry.name.startswith("lstm"):
                    token = "LSTM"
                elif entry.name.startswith("fc"):
                    token = "FC"
                elif entry.name == "head":
                    token = str(entry.output_shape[0])
                else:
                    token = format_shape(entry.output_shape)
                if not tokens or tokens[-1] != token:
                    tokens.append(token)
            prefix = "" if branch == "main" else f"[{branch}] "
            lines.append(prefix + " → ".join(tokens))
        return "\n".join(lines)

    def to_dict(self) -> Dict:
        return {"entries": [dataclasses.asdict(e) for e in self.entries]}


def _plan_sequence_head(config: HyperConfig, features: int, length: int, branch: str) -> Tuple[List[PlanEntry], int]:
    entries = []
    if not config.uses_lstm:
        entries.append(PlanEntry("global_average_pool", (features, length), (features,), branch))
        return entries, features
    for j, units in enumerate(config.lstm_units):
        last = j == len(config.lstm_units) - 1
        out = (units,) if last else (units, length)
        entries.append(PlanEntry(f"lstm_{j}", (features, length), out, branch))
        features = units
    return entries, features


def _plan_classifier(config: HyperConfig, width: int) -> List[PlanEntry]:
    entries = []
    if config.uses_fc:
        for j, units in enumerate(config.fc_units):
            entries.append(PlanEntry(f"fc_{j}", (width,), (units,)))
            width = units
    entries.append(PlanEntry("head", (width,), (NUM_CLASSES,)))
    return entries


def _plan_mesh(config: HyperConfig, n_channels: int, length: int, branch: str) -> Tuple[List[PlanEntry], int]:
    mesh = get_mesh(config.mesh, n_channels)
    entries = [PlanEntry("mesh", (n_channels, length), (length, 1, mesh.rows, mesh.cols), branch)]
    channels, height, width = 1, mesh.rows, mesh.cols
    size, stride = config.conv_size, config.conv_stride
    for j in range(config.conv_layers):
        if size > height or size > width:
            raise InfeasibleConfigError(
                f"conv layer {j}: kernel {size}×{size} does not fit the {height}×{width} mesh", module_index=j)
        out_h = (height - size) // stride + 1
        out_w = (width - size) // stride + 1
        entries.append(PlanEntry(f"conv2d_{j}", (length, channels, height, width),
                                 (length, config.conv_kernels, out_h, out_w), branch))
        channels, height, width = config.conv_kernels, out_h, out_w
    latent = channels * height * width
    entries.append(PlanEntry("latent", (length, channels, height, width), (latent, length), branch))
    return entries, latent


def plan_shapes(config: HyperConfig, input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE) -> ShapePlan:
    """
    Propagate shapes through every stage without allocating parameters.

    Args:
        config: Hyperparameter assignment
        input_shape: L electrodes × K samples

    Returns:
        ShapePlan ending in the 6-class vector

    Raises:
        InfeasibleConfigError: If a time or mesh extent collapses, naming the module
    """
    config.validate()
    n_channels, length = (int(s) for s in input_shape)

    if config.family == "intertwined":
        entries = [PlanEntry("flatten", (n_channels, length), (n_channels, length))]
        features = n_channels
        for i in range(config.module_count):
            units, kernels, size = config.tdfc_units[i], config.sdc_kernels[i], config.sdc_kernel_sizes[i]
            entries.append(PlanEntry(f"tdfc_{i}", (features, length), (units, length)))
            if size > length:
                raise InfeasibleConfigError(
                    f"module {i}: kernel size {size} exceeds the time extent {length}", module_index=i)
            conv_length = length - size + 1
            entries.append(PlanEntry(f"sdc_{i}", (units, length), (units, kernels, conv_length)))
            pooled = conv_length // config.pool_size
            if pooled == 0:
                raise InfeasibleConfigError(
                    f"module {i}: time extent {conv_length} is shorter than pool size {config.pool_size}",
                    module_index=i)
            entries.append(PlanEntry(f"pool_{i}", (units, kernels, conv_length), (units, kernels, pooled)))
            entries.append(PlanEntry(f"flatten_{i}", (units, kernels, pooled), (units * kernels, pooled)))
            features, length = units * kernels, pooled
        head, width = _plan_sequence_head(config, features, length, "main")
        entries.extend(head)
        entries.extend(_plan_classifier(config, width))
        return ShapePlan(entries)

    if config.family == "cascade":
        entries, features = _plan_mesh(config, n_channels, length, "main")
        if config.uses_fc:
            for j, units in enumerate(config.fc_units):
                entries.append(PlanEntry(f"td_fc_{j}", (features, length), (units, length)))
                features = units
        head, width = _plan_sequence_head(config, features, length, "main")
        entries.extend(head)
        entries.extend(_plan_classifier(config, width))
        return ShapePlan(entries)

    cnn, cnn_width = _plan_mesh(config, n_channels, length, "cnn")
    cnn.append(PlanEntry("time_average", (cnn_width, length), (cnn_width,), "cnn"))
    rnn, rnn_width = _plan_sequence_head(config, n_channels, length, "lstm")
    merged = cnn_width + rnn_width
    entries = cnn + rnn + [PlanEntry("concat", (merged,), (merged,))]
    entries.extend(_plan_classifier(config, merged))
    return ShapePlan(entries)


def render_plan(config: HyperConfig, input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE) -> str:
    return plan_shapes(config, input_shape).render()


# Models

def default_dtype():
    return np.float32 if settings["PRECISION"] == "float32" else np.float64


def _build_lstm_stack(params, in_features, config, rng, dtype) -> List[LSTMLayer]:
    layers = []
    if config.uses_lstm:
        for j, units in enumerate(config.lstm_units):
            layers.append(LSTMLayer(params, f"lstm_{j}", in_features, units, config.lstm_dropout, rng, dtype))
            in_features = units
    return layers


def _build_fc_stack(params, in_features, config, rng, dtype) -> Tuple[List[FCLayer], FCLayer]:
    layers = []
    if config.uses_fc:
        for j, units in enumerate(config.fc_units):
            layers.append(FCLayer(params, f"fc_{j}", in_features, units, config.fc_activation,
                                  config.fc_dropout, rng, dtype))
            in_features = units
    head = FCLayer(params, "head", in_features, NUM_CLASSES, "linear", 0.0, rng, dtype)
    return layers, head


def _note(trace: Trace, name: str, input_shape, output_shape) -> None:
    if trace is not None:
        trace.append((name, tuple(input_shape), tuple(output_shape)))


class Model:
    """
    A classifier built from a HyperConfig.

    ``forward`` returns logits; ``predict_proba`` returns the 6-class
    softmax distribution.
    """
    family = "base"

    def __init__(self, config: HyperConfig, seed: int, input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE,
                 dtype=None):
        self.config = config
        self.seed = int(seed)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype or default_dtype())
        self.plan = plan_shapes(config, self.input_shape)
        self.params = ParamStore()
        self._build(np.random.default_rng(self.seed))
        logger.debug(f"Built {self.family} model with {self.num_parameters()} parameters (seed {self.seed})")

    def _build(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _forward(self, x: Tensor, training: bool, rng, trace: Trace) -> Tensor:
        raise NotImplementedError

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def _sequence_head(self, h: Tensor, lstm: List[LSTMLayer], training, rng, trace) -> Tensor:
        if lstm:
            return lstm_forward(h, lstm, return_last=True, training=training, rng=rng, trace=trace)
        out = global_average_pool(h)
        record_shape(trace, "global_average_pool", h, out)
        return out

    def _classify(self, h: Tensor, training, rng, trace) -> Tensor:
        for layer in self.fc:
            out = layer.forward(h, training, rng)
            record_shape(trace, layer.name, h, out)
            h = out
        logits = self.head.forward(h)
        record_shape(trace, "head", h, logits)
        return logits

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None,
                trace: Trace = None) -> Tensor:
        """
        Args:
            x: One trial (L × K) or a batch (B × L × K)
            training: Enable dropout
            rng: Generator for dropout masks
            trace: If given, receives (stage, input shape, output shape) per stage

        Returns:
            Logits, 6 or B × 6
        """
        if not isinstance(x, Tensor) or x.dtype != self.dtype:
            x = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype))
        single = x.ndim == 2
        if single:
            x = reshape(x, (1,) + tuple(x.shape))
        if x.ndim != 3 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected trials of shape {format_shape(self.input_shape)}, got {format_shape(x.shape)}")
        logits = self._forward(x, training, rng, trace)
        return reshape(logits, (NUM_CLASSES,)) if single else logits

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        data = np.asarray(x.data if isinstance(x, Tensor) else x)
        single = data.ndim == 2
        if single:
            data = data[None]
        chunks = []
        with no_grad():
            for start in range(0, len(data), batch_size):
                chunks.append(softmax(self.forward(data[start:start + batch_size]).data, axis=-1))
        probs = np.concatenate(chunks, axis=0)
        return probs[0] if single else probs

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.params.save(directory / "model.npz")
        meta = {
            "family": self.family,
            "seed": self.seed,
            "input_shape": list(self.input_shape),
            "dtype": self.dtype.name,
            "config": self.config.to_dict(),
        }
        with open(directory / "model.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        return directory

    @staticmethod
    def load(directory: Union[str, Path]) -> "Model":
        directory = Path(directory)
        try:
            with open(directory / "model.json", "r") as f:
                meta = json.load(f)
        except FileNotFoundError as exc:
            raise DataError(f"No model snapshot in {directory}") from exc
        model = build_model(HyperConfig.from_dict(meta["config"]), meta["seed"], meta["input_shape"], meta["dtype"])
        try:
            snapshot = ParamStore.read_snapshot(directory / "model.npz")
        except (OSError, ValueError) as exc:
            raise DataError(f"Cannot read model weights in {directory}: {exc}") from exc
        model.params.load(snapshot)
        return model


class IntertwinedNet(Model):
    family = "intertwined"

    def _build(self, rng):
        cfg = self.config
        features = self.input_shape[0]
        self.modules: List[IntertwinedModule] = []
        for i in range(cfg.module_count):
            tdfc = TdFCLayer(self.params, f"module{i}.tdfc", features, cfg.tdfc_units[i], cfg.tdfc_activation,
                             rng, self.dtype)
            sdc = SdCLayer(self.params, f"module{i}.sdc", cfg.sdc_kernels[i], cfg.sdc_kernel_sizes[i],
                           cfg.sdc_activation, rng, self.dtype)
            module = IntertwinedModule(i, tdfc, sdc, cfg.pool_size, cfg.pool_type)
            self.modules.append(module)
            features = module.out_features
        self.lstm = _build_lstm_stack(self.params, features, cfg, rng, self.dtype)
        width = cfg.lstm_units[-1] if self.lstm else features
        self.fc, self.head = _build_fc_stack(self.params, width, cfg, rng, self.dtype)

    def _forward(self, x, training, rng, trace):
        record_shape(trace, "flatten", x, x)
        h = x
        for module in self.modules:
            h = module.forward(h, trace)
        h = self._sequence_head(h, self.lstm, training, rng, trace)
        return self._classify(h, training, rng, trace)


class MeshEncoder:
    """Per-time-step 2D convolutions over the electrode mesh: B × L × K -> B × F × K."""

    def __init__(self, params: ParamStore, config: HyperConfig, n_channels: int, rng, dtype):
        self.mesh = get_mesh(config.mesh, n_channels)
        self.selection = Tensor(self.mesh.selection_matrix(), dtype=dtype)
        self.convs = []
        channels = 1
        for j in range(config.conv_layers):
            self.convs.append(Conv2DLayer(params, f"conv2d_{j}", channels, config.conv_kernels, config.conv_size,
                                          config.conv_stride, config.sdc_activation, rng, dtype))
            channels = config.conv_kernels

    def forward(self, x: Tensor, trace: Trace = None) -> Tensor:
        batch, n_channels, length = x.shape
        rows, cols = self.mesh.rows, self.mesh.cols
        grid = matmul(self.selection, x)
        frames = reshape(transpose(grid, (0, 2, 1)), (batch * length, 1, rows, cols))
        _note(trace, "mesh", (n_channels, length), (length, 1, rows, cols))
        for conv in self.convs:
            out = conv.forward(frames)
            _note(trace, conv.name, (length,) + tuple(frames.shape[1:]), (length,) + tuple(out.shape[1:]))
            frames = out
        features = int(np.prod(frames.shape[1:]))
        latent = transpose(reshape(frames, (batch, length, features)), (0, 2, 1))
        _note(trace, "latent", (length,) + tuple(frames.shape[1:]), (features, length))
        return latent


class CascadeNet(Model):
    family = "cascade"

    def _build(self, rng):
        cfg = self.config
        self.encoder = MeshEncoder(self.params, cfg, self.input_shape[0], rng, self.dtype)
        features = self.plan.stage("latent").output_shape[0]
        self.td_fc: List[TdFCLayer] = []
        if cfg.uses_fc:
            for j, units in enumerate(cfg.fc_units):
                self.td_fc.append(TdFCLayer(self.params, f"td_fc_{j}", features, units, cfg.fc_activation,
                                            rng, self.dtype))
                features = units
        self.lstm = _build_lstm_stack(self.params, features, cfg, rng, self.dtype)
        width = cfg.lstm_units[-1] if self.lstm else features
        self.fc, self.head = _build_fc_stack(self.params, width, cfg, rng, self.dtype)

    def _forward(self, x, training, rng, trace):
        h = self.encoder.forward(x, trace)
        for layer in self.td_fc:
            out = layer.forward(h)
            record_shape(trace, layer.name, h, out)
            h = out
        h = self._sequence_head(h, self.lstm, training, rng, trace)
        return self._classify(h, training, rng, trace)


class ParallelNet(Model):
    family = "parallel"

    def _build(self, rng):
        cfg = self.config
        n_channels = self.input_shape[0]
        self.encoder = MeshEncoder(self.params, cfg, n_channels, rng, self.dtype)
        self.lstm = _build_lstm_stack(self.params, n_channels, cfg, rng, self.dtype)
        cnn_width = self.plan.stage("latent").output_shape[0]
        rnn_width = cfg.lstm_units[-1] if self.lstm else n_channels
        self.fc, self.head = _build_fc_stack(self.params, cnn_width + rnn_width, cfg, rng, self.dtype)

    def branch_latents(self, x: Tensor, training: bool = False, rng=None, trace: Trace = None):
        """Return the (CNN, LSTM) branch latents before they are merged."""
        latent = self.encoder.forward(x, trace)
        cnn = tensor_mean(latent, axis=-1)
        record_shape(trace, "time_average", latent, cnn)
        rnn = self._sequence_head(x, self.lstm, training, rng, trace)
        return cnn, rnn

    def _forward(self, x, training, rng, trace):
        cnn, rnn = self.branch_latents(x, training, rng, trace)
        merged = concatenate([cnn, rnn], axis=-1)
        record_shape(trace, "concat", merged, merged)
        return self._classify(merged, training, rng, trace)


_FAMILY_CLASSES = {"intertwined": IntertwinedNet, "cascade": CascadeNet, "parallel": ParallelNet}


def build_model(config: HyperConfig, seed: int, input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE,
                dtype=None) -> Model:
    """
    Build a model of ``config.family`` with parameters drawn deterministically from `seed`.

    Raises:
        InfeasibleConfigError: If the shape plan fails
    """
    config.validate()
    return _FAMILY_CLASSES[config.family](config, seed, input_shape, dtype)


def build_cascade(config: HyperConfig, seed: int, input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE,
                  dtype=None) -> Model:
    if config.family != "cascade":
        config = dataclasses.replace(config, family="cascade")
    return build_model(config, seed, input_shape, dtype)


def build_parallel(config: HyperConfig, seed: int, input_shape: Sequence[int] = DEFAULT_INPUT_SHAPE,
                   dtype=None) -> Model:
    if config.family != "parallel":
        config = dataclasses.replace(config, family="parallel")
    return build_model(config, seed, input_shape, dtype)
