"""
Named trainable parameters with gradient slots and per-parameter optimizer state
"""
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Dict, Iterator, Union

import numpy as np

from intertwined.utils.errors import ConfigurationError, DataError
from intertwined.utils.tensor import Tensor

logger = logging.getLogger(__name__)


class ParamStore(Mapping):
    """
    Ordered mapping from unique parameter names to leaf tensors.

    Optimizer state (e.g. the squared-gradient running average) lives in
    ``state[name]`` and always mirrors the parameter's shape.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.state: Dict[str, Dict[str, np.ndarray]] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def add(self, name: str, data: np.ndarray, dtype=np.float64) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"Duplicate parameter name: {name}")
        tensor = Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load(self, snapshot: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(snapshot)
        if missing:
            raise DataError(f"Parameter snapshot does not match the model: {sorted(missing)}")
        for name, param in self._params.items():
            values = np.asarray(snapshot[name])
            if values.shape != param.shape:
                raise DataError(f"Parameter {name} has shape {values.shape} in the snapshot, expected {param.shape}")
            param.data = values.astype(param.dtype, copy=True)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        np.savez(path, **self.snapshot())
        logger.info(f"Saved {len(self)} parameter tensors to {path}")
        return path

    @staticmethod
    def read_snapshot(path: Union[str, Path]) -> Dict[str, np.ndarray]:
        with np.load(Path(path)) as payload:
            return {name: payload[name] for name in payload.files}
