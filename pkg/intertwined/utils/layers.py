"""
Layers of the intertwined, cascade and parallel classifiers.

All layers accept an optional leading batch axis. Shapes in the
docstrings are per trial.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from intertwined.utils.errors import ShapeError
from intertwined.utils.params import ParamStore
from intertwined.utils.tensor import (
    Tensor,
    activation,
    conv1d_valid,
    conv2d_valid,
    dropout_apply,
    flatten_space,
    format_shape,
    global_average_pool,
    matmul,
    reshape,
    stack,
    time_pool,
    transpose,
)

logger = logging.getLogger(__name__)

# Shape trace entries: (stage name, input shape, output shape), batch axis stripped
Trace = Optional[List[Tuple[str, Tuple[int, ...], Tuple[int, ...]]]]


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def record_shape(trace: Trace, name: str, x: Tensor, y: Tensor) -> None:
    if trace is not None:
        trace.append((name, tuple(x.shape[1:]), tuple(y.shape[1:])))


class TdFCLayer:
    """
    Time-distributed dense layer: the same affine map at every time step.

    S × T -> S' × T, weight S' × S, bias S'.
    """

    def __init__(self, params: ParamStore, name: str, in_features: int, out_features: int,
                 activation_kind: str, rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation_kind
        self.weight = params.add(f"{name}.weight",
                                 glorot_uniform(rng, (out_features, in_features), in_features, out_features), dtype)
        self.bias = params.add(f"{name}.bias", np.zeros(out_features), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[-2] != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} input features, got {format_shape(x.shape)}")
        z = matmul(self.weight, x) + reshape(self.bias, (self.out_features, 1))
        return activation(z, self.activation, axis=-2)


class SdCLayer:
    """
    Space-distributed temporal convolution: the same kernel bank for every feature row.

    S × T -> S × C × (T - k + 1), kernels C × k, bias C, stride 1.
    """

    def __init__(self, params: ParamStore, name: str, num_kernels: int, kernel_size: int,
                 activation_kind: str, rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.num_kernels = num_kernels
        self.kernel_size = kernel_size
        self.activation = activation_kind
        self.kernels = params.add(f"{name}.kernels",
                                  glorot_uniform(rng, (num_kernels, kernel_size), kernel_size,
                                                 kernel_size * num_kernels), dtype)
        self.bias = params.add(f"{name}.bias", np.zeros(num_kernels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        z = conv1d_valid(x, self.kernels, stride=1) + reshape(self.bias, (self.num_kernels, 1))
        return activation(z, self.activation, axis=-2)


class IntertwinedModule:
    """tdFC -> sdC -> time pooling -> flatten of the (feature, kernel) axes."""

    def __init__(self, index: int, tdfc: TdFCLayer, sdc: SdCLayer, pool_size: int, pool_type: str):
        self.index = index
        self.tdfc = tdfc
        self.sdc = sdc
        self.pool_size = pool_size
        self.pool_type = pool_type

    @property
    def out_features(self) -> int:
        return self.tdfc.out_features * self.sdc.num_kernels

    def forward(self, x: Tensor, trace: Trace = None) -> Tensor:
        try:
            a = self.tdfc.forward(x)
            record_shape(trace, f"tdfc_{self.index}", x, a)
            b = self.sdc.forward(a)
            record_shape(trace, f"sdc_{self.index}", a, b)
            c = time_pool(b, self.pool_size, self.pool_type)
            record_shape(trace, f"pool_{self.index}", b, c)
            d = flatten_space(c)
            record_shape(trace, f"flatten_{self.index}", c, d)
        except ShapeError as exc:
            raise type(exc)(f"intertwined module {self.index}: {exc}") from exc
        return d


class LSTMLayer:
    """
    LSTM over the time axis, zero initial state.

    Gate blocks of the fused weights are ordered input, forget, cell, output.
    """

    def __init__(self, params: ParamStore, name: str, input_size: int, hidden_size: int, dropout: float,
                 rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.dropout = dropout
        width = 4 * hidden_size
        self.weight = params.add(f"{name}.weight", glorot_uniform(rng, (input_size, width), input_size, width), dtype)
        self.recurrent = params.add(f"{name}.recurrent",
                                    glorot_uniform(rng, (hidden_size, width), hidden_size, width), dtype)
        bias = np.zeros(width)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.bias = params.add(f"{name}.bias", bias, dtype)

    def forward(self, x: Tensor, return_sequences: bool, gate_log: Optional[list] = None) -> Tensor:
        """
        Args:
            x: Batched input, B × F × T
            return_sequences: Emit every hidden state (B × H × T) instead of the last (B × H)
            gate_log: If given, receives (input, forget, cell, output) gate arrays per step

        Returns:
            Hidden states
        """
        if x.ndim != 3 or x.shape[1] != self.input_size:
            raise ShapeError(f"{self.name}: expected {self.input_size} input features, got {format_shape(x.shape)}")
        size = self.hidden_size
        projected = matmul(transpose(x, (0, 2, 1)), self.weight) + self.bias

        hidden, cell = None, None
        outputs = []
        for t in range(x.shape[2]):
            z = projected[:, t, :]
            if hidden is not None:
                z = z + matmul(hidden, self.recurrent)
            in_gate = activation(z[:, :size], "sigmoid")
            forget_gate = activation(z[:, size:2 * size], "sigmoid")
            candidate = activation(z[:, 2 * size:3 * size], "tanh")
            out_gate = activation(z[:, 3 * size:], "sigmoid")
            cell = in_gate * candidate if cell is None else forget_gate * cell + in_gate * candidate
            hidden = out_gate * activation(cell, "tanh")
            outputs.append(hidden)
            if gate_log is not None:
                gate_log.append((in_gate.data, forget_gate.data, candidate.data, out_gate.data))

        if return_sequences:
            return stack(outputs, axis=-1)
        return hidden


class FCLayer:
    """Dense layer F -> F' with activation and inverted dropout on its output."""

    def __init__(self, params: ParamStore, name: str, in_features: int, out_features: int,
                 activation_kind: str, dropout: float, rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation_kind
        self.dropout = dropout
        self.weight = params.add(f"{name}.weight",
                                 glorot_uniform(rng, (in_features, out_features), in_features, out_features), dtype)
        self.bias = params.add(f"{name}.bias", np.zeros(out_features), dtype)

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} input features, got {format_shape(x.shape)}")
        single = x.ndim == 1
        if single:
            x = reshape(x, (1, self.in_features))
        y = activation(matmul(x, self.weight) + self.bias, self.activation, axis=-1)
        y = dropout_apply(y, self.dropout, training, rng)
        return reshape(y, (self.out_features,)) if single else y


class Conv2DLayer:
    """Valid 2D convolution over the electrode mesh, N × Cin × H × W -> N × Cout × H' × W'."""

    def __init__(self, params: ParamStore, name: str, in_channels: int, out_channels: int, size: int, stride: int,
                 activation_kind: str, rng: np.random.Generator, dtype=np.float64):
        self.name = name
        self.out_channels = out_channels
        self.stride = stride
        self.activation = activation_kind
        shape = (out_channels, in_channels, size, size)
        self.weight = params.add(f"{name}.weight",
                                 glorot_uniform(rng, shape, in_channels * size * size, out_channels * size * size),
                                 dtype)
        self.bias = params.add(f"{name}.bias", np.zeros(out_channels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        z = conv2d_valid(x, self.weight, self.stride) + reshape(self.bias, (self.out_channels, 1, 1))
        return activation(z, self.activation, axis=1)


# Functional entry points

def tdfc_forward(x: Tensor, layer: TdFCLayer) -> Tensor:
    return layer.forward(x)


def sdc_forward(x: Tensor, layer: SdCLayer) -> Tensor:
    return layer.forward(x)


def intertwined_forward(x: Tensor, module: IntertwinedModule) -> Tensor:
    return module.forward(x)


def lstm_forward(x: Tensor, layers: Sequence[LSTMLayer], return_last: bool = True, training: bool = False,
                 rng: Optional[np.random.Generator] = None, trace: Trace = None) -> Tensor:
    """
    Run a stack of LSTM layers.

    Every layer but the last emits its full sequence; the last emits only
    its final hidden state when `return_last` is set. Inter-layer dropout
    at each layer's rate is applied during training only.

    Args:
        x: F × T input, or B × F × T
        layers: The stack, first layer input width must equal F
        return_last: Return H instead of H × T from the last layer
        training: Enable dropout
        rng: Generator for dropout masks
        trace: Optional shape trace (batched input only)

    Returns:
        H, H × T, or the batched equivalents
    """
    batched = x.ndim == 3
    if not batched:
        x = reshape(x, (1,) + tuple(x.shape))
    out = x
    for j, layer in enumerate(layers):
        last = j == len(layers) - 1
        y = layer.forward(out, return_sequences=not (last and return_last))
        y = dropout_apply(y, layer.dropout, training, rng)
        record_shape(trace, layer.name, out, y)
        out = y
    if not batched:
        out = reshape(out, tuple(out.shape[1:]))
    return out


__all__ = [
    "TdFCLayer",
    "SdCLayer",
    "IntertwinedModule",
    "LSTMLayer",
    "FCLayer",
    "Conv2DLayer",
    "tdfc_forward",
    "sdc_forward",
    "intertwined_forward",
    "lstm_forward",
    "global_average_pool",
    "dropout_apply",
    "glorot_uniform",
]
