# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""The run configuration: one JSON document, validated in full before any stage runs."""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from kinedecode.copilot import ThresholdTable
from kinedecode.copilot.critic import CriticConfig
from kinedecode.kinematics.metrics import WorkspaceBox
from kinedecode.model import ConfigError, ModelConfig
from kinedecode.signals import Preprocessor, WindowSpec
from kinedecode.train import FULL_HOLDOUT, TrainConfig

log = logging.getLogger("kinedecode.config")

CONFIG_VERSION = 1

#: Window and delay grids swept by the ``sweep`` command.
WINDOW_GRID = (50, 100, 200, 250, 500, 750, 1000)
DELAY_GRID_MS = (100, 200, 300, 400, 500, 600, 700)

DEFAULT_CONFIG: Dict[str, Any] = {
    "version": CONFIG_VERSION,
    "paths": {"data_dir": "data", "output_dir": "out", "rules": None, "arm": None},
    "preprocess": dict(Preprocessor._default_config),
    "window": {"window_samples": 250, "step_samples": None, "delay_ms": 100, "rate_hz": 500.0},
    "model": {k: v for k, v in ModelConfig().to_dict().items() if k != "window_samples"},
    "train": dict(TrainConfig().to_dict(), n_val=FULL_HOLDOUT, n_test=FULL_HOLDOUT,
                  test_subjects=[]),
    "copilot": {
        "thresholds": {"SEARCHING": 0.5, "LIFTING": 0.5, "HOLDING": 0.5, "PUTTING": 0.5,
                       "RETURNING": 0.5},
        "unrely": 0.8,
        "sweep_scales": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
        "critic": CriticConfig().to_dict(),
    },
    "kinematics": {
        "workspace_lower": [0.2, -0.25, 0.2],
        "workspace_upper": [0.7, 0.25, 0.7],
        "out_rate_hz": 50.0,
        "ik_tol": 1e-3,
        "ik_max_iters": 200,
        "damping": 0.05,
        "trial": None,
    },
    "seed": 0,
    "workers": 1,
}
del DEFAULT_CONFIG["train"]["seed"]
del DEFAULT_CONFIG["copilot"]["critic"]["seed"]


def _check_keys(values: Mapping, allowed: Iterable[str], where: str) -> None:
    if not isinstance(values, Mapping):
        raise ConfigError("must be an object", where or None)
    allowed = set(allowed)
    for key in values:
        if key not in allowed:
            raise ConfigError("unknown option", "%s.%s" % (where, key) if where else key)


def _merge(base: Dict[str, Any], update: Mapping[str, Any], where: str = "") -> Dict[str, Any]:
    """Recursively overlay *update* on *base*, rejecting keys *base* lacks."""
    _check_keys(update, base, where)
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = "%s.%s" % (where, key) if where else key
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str) -> Any:
    """JSON if it parses, otherwise the string itself."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(values: Dict[str, Any], overrides: Iterable[Tuple[str, Any]]) -> Dict[str, Any]:
    """Set dotted keys, e.g. ``("train.epochs", 5)``; unknown keys are rejected."""
    out = copy.deepcopy(values)
    for dotted, value in overrides:
        parts = dotted.split(".")
        node = out
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node.get(part), dict):
                raise ConfigError("unknown option", ".".join(parts[:i + 1]))
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError("unknown option", dotted)
        node[parts[-1]] = value
        log.debug("Setting config option %s to %r", dotted, value)
    return out


class RunConfig:
    """Typed view of a validated run configuration.

    Raises:
        ConfigError: On an unknown key, a wrong version or any invalid value.
    """

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        values = dict(values or {})
        version = values.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError("unsupported version %r (expected %d)" % (version, CONFIG_VERSION),
                              "version")
        self.values = _merge(DEFAULT_CONFIG, values)
        self._build()

    def _build(self) -> None:
        v = self.values
        self.data_dir = Path(v["paths"]["data_dir"])
        self.output_dir = Path(v["paths"]["output_dir"])
        self.rules_path = v["paths"]["rules"]
        self.arm_path = v["paths"]["arm"]

        try:
            Preprocessor(v["preprocess"])
        except KeyError as e:
            raise ConfigError(str(e), "preprocess") from None
        self.preprocess = dict(v["preprocess"])

        self.window = self.window_spec(v["window"]["window_samples"], v["window"]["delay_ms"],
                                       v["window"]["step_samples"])

        model = dict(v["model"], window_samples=self.window.window_samples)
        self.model = ModelConfig.from_dict(model).validate()

        train = dict(v["train"])
        self.n_val = int(train.pop("n_val"))
        self.n_test = int(train.pop("n_test"))
        self.test_subjects = [str(s) for s in train.pop("test_subjects")]
        if self.n_val < 1 or self.n_test < 1:
            raise ConfigError("validation and test sets need at least one trial", "train")
        self.seed = v["seed"]
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("must be a non-negative integer", "seed")
        self.train = TrainConfig.from_dict(dict(train, seed=self.seed)).validate()

        cop = v["copilot"]
        self.thresholds = ThresholdTable(cop["thresholds"], cop["unrely"])
        self.sweep_scales = [float(s) for s in cop["sweep_scales"]]
        if any(s < 0 for s in self.sweep_scales):
            raise ConfigError("scales must be non-negative", "copilot.sweep_scales")
        self.critic = CriticConfig.from_dict(dict(cop["critic"], seed=self.seed)).validate()

        kin = v["kinematics"]
        try:
            self.workspace = WorkspaceBox(tuple(kin["workspace_lower"]),
                                          tuple(kin["workspace_upper"]))
        except ValueError as e:
            raise ConfigError(str(e), "kinematics.workspace") from None
        for key in ("out_rate_hz", "ik_tol", "damping"):
            if not float(kin[key]) > 0:
                raise ConfigError("must be positive", "kinematics.%s" % key)
        if int(kin["ik_max_iters"]) < 1:
            raise ConfigError("must be >= 1", "kinematics.ik_max_iters")
        self.kinematics = dict(kin)

        self.workers = v["workers"]
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("must be a positive integer", "workers")

    def window_spec(self, window_samples: int, delay_ms: int,
                    step_samples: Optional[int] = None) -> WindowSpec:
        if not WindowSpec.MIN_WINDOW <= window_samples <= WindowSpec.MAX_WINDOW:
            raise ConfigError("must be in [%d, %d], got %r"
                              % (WindowSpec.MIN_WINDOW, WindowSpec.MAX_WINDOW, window_samples),
                              "window.window_samples")
        if step_samples is None:
            step_samples = max(1, window_samples // 5)
        try:
            return WindowSpec(int(window_samples), int(step_samples), int(delay_ms),
                              float(self.values["window"]["rate_hz"]))
        except ValueError as e:
            raise ConfigError(str(e), "window") from None

    def replace(self, overrides: Iterable[Tuple[str, Any]]) -> "RunConfig":
        return RunConfig(apply_overrides(self.values, overrides))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            values = json.loads(path.read_text())
        except ValueError as e:
            raise ConfigError("%s is not valid JSON (%s)" % (path, e)) from None
        return cls(values)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.values)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.values, indent=2, sort_keys=True) + "\n")

    def output(self, name: str) -> Path:
        return self.output_dir / name


def parse_overrides(args: List[str]) -> List[Tuple[str, Any]]:
    """``["--train.epochs", "5", ...]`` into ``[("train.epochs", 5), ...]``."""
    pairs = []
    it = iter(args)
    for flag in it:
        if not flag.startswith("--") or "." not in flag:
            raise ConfigError("unrecognized argument %s" % flag)
        try:
            value = next(it)
        except StopIteration:
            raise ConfigError("missing value", flag[2:]) from None
        pairs.append((flag[2:], parse_value(value)))
    return pairs
