# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Base classes shared by the decoder blocks."""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from kinedecode.tensor import Tensor

REGRESSION_DIM = 6
CLASSIFICATION_DIM = 5


class ConfigError(Exception):
    """Raised when a configuration value is out of range or inconsistent.

    Args:
        message: What is wrong.
        key: Dotted name of the offending option, when there is one.
    """

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message if key is None else "%s: %s" % (key, message))
        self.key = key


@dataclass(frozen=True)
class ModelConfig:
    """Shape and ablation settings of the hybrid decoder.

    ``in_channels_emg = 0`` selects the EEG-only model; 5 selects EEG-EMG
    fusion. ``out_dim`` is 6 for the coordinate regressor and 5 for the
    motion-state classifier; both share everything else.

    The EMG stream gets its own SE gate only with ``emg_se``; its bottleneck
    is ``in_channels_emg / emg_se_reduction``, so the default 5 muscles give
    a single hidden unit.
    """

    in_channels_eeg: int = 32
    in_channels_emg: int = 0
    window_samples: int = 250
    large_kernel: int = 65
    large_features: int = 8
    branch_kernels: Tuple[int, ...] = (7, 15, 31)
    branch_features: int = 8
    pool_k: int = 4
    pool_s: int = 4
    se_reduction: int = 8
    embed_dim: int = 128
    heads: int = 4
    head_dim: int = 32
    out_dim: int = REGRESSION_DIM
    dropout: float = 0.25
    use_se: bool = True
    use_attention: bool = True
    use_branches: bool = True
    emg_se: bool = False
    emg_se_reduction: int = 5

    def __post_init__(self):
        object.__setattr__(self, "branch_kernels", tuple(int(k) for k in self.branch_kernels))

    @property
    def is_fusion(self) -> bool:
        return self.in_channels_emg > 0

    @property
    def is_classifier(self) -> bool:
        return self.out_dim == CLASSIFICATION_DIM

    @property
    def n_features(self) -> int:
        """Feature maps per electrode leaving the multi-convolution block."""
        if self.use_branches:
            return len(self.branch_kernels) * self.branch_features
        return self.large_features

    @property
    def pooled_length(self) -> int:
        return (self.window_samples - self.pool_k) // self.pool_s + 1

    @property
    def embed_input_width(self) -> int:
        return (self.in_channels_eeg + self.in_channels_emg) * self.n_features

    @property
    def hidden_width(self) -> int:
        return max(1, self.embed_dim // 2)

    def validate(self) -> "ModelConfig":
        """Raise :class:`ConfigError` on the first inconsistent option."""
        def positive(name):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be >= 1, got %r" % getattr(self, name), "model." + name)

        for name in ("in_channels_eeg", "window_samples", "large_kernel", "large_features",
                     "branch_features", "pool_k", "pool_s", "se_reduction", "embed_dim",
                     "heads", "head_dim"):
            positive(name)
        if self.in_channels_emg < 0:
            raise ConfigError("must be >= 0, got %d" % self.in_channels_emg,
                              "model.in_channels_emg")
        if self.embed_dim != self.heads * self.head_dim:
            raise ConfigError("embed_dim %d != heads %d x head_dim %d"
                              % (self.embed_dim, self.heads, self.head_dim), "model.embed_dim")
        if self.out_dim not in (REGRESSION_DIM, CLASSIFICATION_DIM):
            raise ConfigError("must be %d (regression) or %d (classification), got %d"
                              % (REGRESSION_DIM, CLASSIFICATION_DIM, self.out_dim),
                              "model.out_dim")
        if not self.branch_kernels:
            raise ConfigError("at least one branch kernel is required", "model.branch_kernels")
        for k in self.branch_kernels + (self.large_kernel,):
            if k < 1 or k % 2 == 0:
                raise ConfigError("kernel sizes must be odd and positive, got %d" % k,
                                  "model.branch_kernels")
        if self.window_samples < self.large_kernel:
            raise ConfigError("window of %d samples is shorter than the large kernel (%d)"
                              % (self.window_samples, self.large_kernel),
                              "model.window_samples")
        if self.window_samples < self.pool_k:
            raise ConfigError("window of %d samples is shorter than the pooling window (%d)"
                              % (self.window_samples, self.pool_k), "model.pool_k")
        if self.use_se and self.in_channels_eeg % self.se_reduction:
            raise ConfigError("%d EEG channels are not divisible by reduction %d"
                              % (self.in_channels_eeg, self.se_reduction), "model.se_reduction")
        if self.is_fusion and self.use_se and self.emg_se:
            if self.emg_se_reduction < 1 or self.in_channels_emg % self.emg_se_reduction:
                raise ConfigError("%d EMG channels are not divisible by reduction %d"
                                  % (self.in_channels_emg, self.emg_se_reduction),
                                  "model.emg_se_reduction")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must be in [0, 1), got %r" % self.dropout, "model.dropout")
        return self

    def classifier(self) -> "ModelConfig":
        """The label-prediction twin of this config."""
        return replace(self, out_dim=CLASSIFICATION_DIM)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["branch_kernels"] = list(self.branch_kernels)
        return d

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError("unknown option", "model.%s" % key)
        return cls(**values)


class ModelParams:
    """Ordered store of named parameter tensors.

    Names are dotted, ``<block>.<layer>``; the insertion order is the order
    in which blocks create their parameters and is also the serialization
    order, so two stores built from the same config and seed are identical.
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError("Parameter %s already exists" % name)
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True, name=name)
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def count(self, prefix: str = "") -> int:
        """Number of scalar weights, optionally only those under *prefix*."""
        return int(sum(t.size for n, t in self._tensors.items() if n.startswith(prefix)))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def detached(self) -> "ModelParams":
        """A view with gradient tracking off; the arrays are shared."""
        out = ModelParams()
        for name, t in self._tensors.items():
            view = Tensor((), name=name)
            view.values = t.values
            out._tensors[name] = view
        return out

    def as_arrays(self, prefix: str = "param") -> Dict[str, np.ndarray]:
        return OrderedDict(("%s.%s" % (prefix, n), t.values.copy())
                           for n, t in self._tensors.items())

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = "param") -> "ModelParams":
        lead = prefix + "."
        return cls(OrderedDict((k[len(lead):], Tensor(v, requires_grad=True))
                               for k, v in arrays.items() if k.startswith(lead)))

    def check_shapes(self, expected: Mapping[str, Tuple[int, ...]]) -> None:
        missing = [n for n in expected if n not in self._tensors]
        if missing:
            raise ConfigError("checkpoint lacks parameters %s" % ", ".join(missing))
        for name, shape in expected.items():
            if self._tensors[name].shape != tuple(shape):
                raise ConfigError("parameter %s has shape %s, config expects %s"
                                  % (name, self._tensors[name].shape, tuple(shape)))
            if not np.all(np.isfinite(self._tensors[name].values)):
                raise ConfigError("parameter %s holds non-finite values" % name)


def _fans(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 3:
        # conv kernel [out, in, taps]
        return shape[1] * shape[2], shape[0] * shape[2]
    if len(shape) == 2:
        return shape[0], shape[1]
    return shape[0], shape[0]


@dataclass(frozen=True)
class ParamSpec:
    shape: Tuple[int, ...]
    init: str = "glorot"
    extra: Dict[str, float] = field(default_factory=dict)


class Block:
    """Base class for one stage of the decoder.

    A block owns no arrays. It declares the parameters it needs through
    :meth:`param_specs` and reads them from a :class:`ModelParams` on every
    call, so one block instance serves any number of parameter sets.
    """

    def __init__(self, config: ModelConfig, prefix: str):
        # Sub-classes may already set up logging
        if not hasattr(self, "log"):
            self.log = logging.getLogger("kinedecode.model.%s" % type(self).__qualname__)
        self.config = config
        self.prefix = prefix

    def param_specs(self) -> Dict[str, ParamSpec]:
        return {}

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {"%s.%s" % (self.prefix, n): s.shape for n, s in self.param_specs().items()}

    def init_params(self, params: ModelParams, rng: np.random.Generator) -> None:
        for name, spec in self.param_specs().items():
            if spec.init == "zeros":
                value = np.zeros(spec.shape)
            elif spec.init == "ones":
                value = np.ones(spec.shape)
            elif spec.init == "normal":
                value = rng.normal(0.0, spec.extra.get("std", 0.02), size=spec.shape)
            elif spec.init == "glorot":
                fan_in, fan_out = _fans(spec.shape)
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                value = rng.uniform(-limit, limit, size=spec.shape)
            else:
                raise ValueError("Unknown initializer %s for %s" % (spec.init, name))
            params.add("%s.%s" % (self.prefix, name), value)
        self.log.debug("Initialized %d parameter tensors under %s",
                       len(self.param_specs()), self.prefix)

    def p(self, params: ModelParams, name: str) -> Tensor:
        return params["%s.%s" % (self.prefix, name)]

    def __call__(self, params: ModelParams, *args, **kwargs):
        return self.forward(params, *args, **kwargs)

    def forward(self, params: ModelParams, *args, **kwargs):
        raise NotImplementedError("Sub-classes of Block should define a forward method")
