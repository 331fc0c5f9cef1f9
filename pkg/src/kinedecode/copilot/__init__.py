# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Motion states and confidence thresholds of the copilot filter."""

import enum
from typing import Dict, Mapping, Union

from kinedecode.model import ConfigError


class MotionState(enum.IntEnum):
    """Phases of a grasp-and-lift trial.

    The value of the five real states is their class index in the state
    classifier. ``UNRELY`` is never a machine state; it is only attributed
    to a point whose classified state disagrees with the machine.
    """
    SEARCHING = 0
    LIFTING = 1
    HOLDING = 2
    PUTTING = 3
    RETURNING = 4
    UNRELY = 5

    @classmethod
    def parse(cls, value: Union[str, int, "MotionState"]) -> "MotionState":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            text = value.strip()
            if text.isdigit():
                return cls(int(text))
            try:
                return cls[text.upper()]
            except KeyError:
                raise ValueError("Unknown motion state %r" % value) from None
        return cls(int(value))


#: The machine states, in task order.
REAL_STATES = tuple(s for s in MotionState if s is not MotionState.UNRELY)


class ThresholdTable:
    """Minimum critic confidence a point needs to be kept, per effective state.

    Args:
        thresholds: ``theta`` for each of the five real states, keyed by
            :class:`MotionState` or its name.
        unrely: Threshold for points attributed to ``UNRELY``.
        validate: Check every ``theta`` is in [0, 1] and ``unrely`` is above
            all of them. Scaled copies made for a sweep skip the check.

    Raises:
        ConfigError: If *validate* is set and the table is inconsistent.
    """

    def __init__(self, thresholds: Mapping, unrely: float, validate: bool = True):
        self._theta: Dict[MotionState, float] = {}
        for key, value in thresholds.items():
            state = MotionState.parse(key)
            if state is MotionState.UNRELY:
                raise ConfigError("set the UNRELY threshold through 'unrely'",
                                  "copilot.thresholds")
            self._theta[state] = float(value)
        missing = [s.name for s in REAL_STATES if s not in self._theta]
        if missing:
            raise ConfigError("no threshold for %s" % ", ".join(missing), "copilot.thresholds")
        self.unrely = float(unrely)
        if validate:
            self._validate()

    def _validate(self) -> None:
        for state, theta in self._theta.items():
            if not 0.0 <= theta <= 1.0:
                raise ConfigError("threshold for %s must be in [0, 1], got %r"
                                  % (state.name, theta), "copilot.thresholds")
        highest = max(self._theta.values())
        if not self.unrely > highest:
            raise ConfigError("UNRELY threshold %r must exceed every state threshold (max %r)"
                              % (self.unrely, highest), "copilot.unrely")

    @classmethod
    def uniform(cls, base: float = 0.5, unrely: float = 0.8) -> "ThresholdTable":
        return cls({s: base for s in REAL_STATES}, unrely)

    def __getitem__(self, state: MotionState) -> float:
        state = MotionState.parse(state)
        if state is MotionState.UNRELY:
            return self.unrely
        return self._theta[state]

    def scaled(self, factor: float) -> "ThresholdTable":
        """Every threshold multiplied by *factor*; not validated."""
        if factor < 0:
            raise ValueError("Threshold scale must be non-negative, got %r" % factor)
        return ThresholdTable({s: t * factor for s, t in self._theta.items()},
                              self.unrely * factor, validate=False)

    def as_dict(self) -> Dict[str, float]:
        d = {s.name: self._theta[s] for s in REAL_STATES}
        d[MotionState.UNRELY.name] = self.unrely
        return d

    def __repr__(self):
        return "ThresholdTable(%s)" % ", ".join("%s=%g" % kv for kv in self.as_dict().items())
