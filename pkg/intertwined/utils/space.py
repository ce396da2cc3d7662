"""
Discrete hyperparameter spaces searched for each model family
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from intertwined.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

FAMILIES = ("intertwined", "cascade", "parallel")
ACTIVATION_CHOICES = ("relu", "softmax", "elu", "selu")
MINIMIZERS = ("sgd", "rmsprop")

_BASELINE_COMMON = {
    "conv_kernels": (16, 24, 48, 92),
    "conv_size": (2, 3),
    "conv_stride": (1, 2),
    "conv_layers": (1, 2, 3),
    "sdc_activation": ("elu",),
    "lstm_units": (10, 50, 100),
    "lstm_layers": (0, 1, 2, 3),
    "lstm_dropout": (0.1,),
    "fc_units": (10, 50, 100),
    "fc_activation": ("elu",),
    "fc_dropout": (0.1,),
    "minimizer": MINIMIZERS,
}

DEFAULT_VALUES: Dict[str, Dict[str, Tuple]] = {
    "intertwined": {
        "module_count": (2, 3, 4),
        "tdfc_units": (16, 24, 50, 80),
        "tdfc_activation": ACTIVATION_CHOICES,
        "sdc_kernels": (16, 24, 50, 80),
        "sdc_kernel_sizes": (2, 3, 4, 5),
        "sdc_activation": ACTIVATION_CHOICES,
        "pool_size": (2, 3, 4),
        "pool_type": ("max", "average"),
        "lstm_units": (0, 30, 50, 100, 200),
        "lstm_depth": (1, 2),
        "lstm_dropout": (0.1,),
        "fc_units": (0, 30, 50, 100),
        "fc_depth": (1, 2),
        "fc_activation": ACTIVATION_CHOICES,
        "fc_dropout": (0.1,),
        "minimizer": MINIMIZERS,
    },
    "cascade": dict(_BASELINE_COMMON, fc_layers=(0, 1, 2)),
    "parallel": dict(_BASELINE_COMMON, fc_layers=(0, 1, 2, 3)),
}


@dataclass
class SearchSpace:
    """
    Per-family map from hyperparameter name to its discrete value set.

    Defaults to the full search grids; `restrict` derives smaller spaces.
    """
    values: Dict[str, Dict[str, Tuple]] = field(default_factory=lambda: copy.deepcopy(DEFAULT_VALUES))

    def __post_init__(self):
        for family, names in self.values.items():
            for name, choices in names.items():
                if len(choices) == 0:
                    raise ConfigurationError(f"Empty value set for {family}.{name}")

    def for_family(self, family: str) -> Dict[str, Tuple]:
        if family not in self.values:
            raise ConfigurationError(f"Family {family!r} is not part of this search space")
        return self.values[family]

    def choices(self, family: str, name: str) -> Tuple:
        return self.for_family(family)[name]

    def restrict(self, family: str, **overrides) -> "SearchSpace":
        values = copy.deepcopy(self.values)
        for name, choices in overrides.items():
            if name not in values[family]:
                raise ConfigurationError(f"Unknown hyperparameter {family}.{name}")
            values[family][name] = tuple(choices)
        return SearchSpace(values)

    def violations(self, config) -> List[str]:
        """List the fields of `config` whose values fall outside this space."""
        space = self.for_family(config.family)
        problems = []

        def check(name, value, allowed=None):
            allowed = space[name] if allowed is None else allowed
            if value not in allowed:
                problems.append(f"{name}={value!r} not in {allowed}")

        def check_stack(name, units, depth_name):
            if units[0] == 0:
                check(name, 0)
                return
            check(depth_name, len(units))
            for value in units:
                check(name, value, tuple(v for v in space[name] if v != 0))

        if config.family == "intertwined":
            check("module_count", config.module_count)
            m = config.module_count
            for value in config.tdfc_units[:m]:
                check("tdfc_units", value)
            for value in config.sdc_kernels[:m]:
                check("sdc_kernels", value)
            for value in config.sdc_kernel_sizes[:m]:
                check("sdc_kernel_sizes", value)
            for name in ("tdfc_activation", "sdc_activation", "pool_size", "pool_type"):
                check(name, getattr(config, name))
            check_stack("lstm_units", config.lstm_units, "lstm_depth")
            check_stack("fc_units", config.fc_units, "fc_depth")
        else:
            for name in ("conv_kernels", "conv_size", "conv_stride", "conv_layers", "sdc_activation"):
                check(name, getattr(config, name))
            for name, layers_name in (("lstm_units", "lstm_layers"), ("fc_units", "fc_layers")):
                units = getattr(config, name)
                if units[0] == 0:
                    check(layers_name, 0)
                else:
                    check(layers_name, len(units))
                    if len(set(units)) != 1:
                        problems.append(f"{name} must repeat one width per layer, got {units}")
                    check(name, units[0])
        for name in ("lstm_dropout", "fc_activation", "fc_dropout", "minimizer"):
            check(name, getattr(config, name))
        return problems
