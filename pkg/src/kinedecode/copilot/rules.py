# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Transition rules of the motion-state machine and the machine step.

A rule table is plain text, one rule per line::

    # state      feature         op   threshold  next
    SEARCHING    contact         >=   0.5        LIFTING

``feature`` names a sensor channel, or ``p_<STATE>`` for a classifier
posterior. From any state at most one rule can fire for a given input;
when none fires the machine stays where it is.
"""

import logging
import math
import operator
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from kinedecode.copilot import REAL_STATES, MotionState

log = logging.getLogger("kinedecode.copilot.rules")

_COMPARATORS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}

POSTERIOR_PREFIX = "p_"


class RuleTableError(Exception):
    """Raised when a rule table is malformed, ambiguous or incomplete."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else "line %d: %s" % (line, message))
        self.line = line


@dataclass(frozen=True)
class TransitionRule:
    state: MotionState
    feature: str
    comparator: str
    threshold: float
    next_state: MotionState

    def matches(self, value: float) -> bool:
        return _COMPARATORS[self.comparator](value, self.threshold)

    def interval(self) -> Tuple[float, bool, float, bool]:
        """``(low, low_closed, high, high_closed)`` of the values that fire the rule."""
        if self.comparator in (">", ">="):
            return self.threshold, self.comparator == ">=", math.inf, False
        return -math.inf, False, self.threshold, self.comparator == "<="

    def __str__(self):
        return "%s %s %s %g %s" % (self.state.name, self.feature, self.comparator,
                                   self.threshold, self.next_state.name)


def _overlap(a: TransitionRule, b: TransitionRule) -> bool:
    lo_a, lc_a, hi_a, hc_a = a.interval()
    lo_b, lc_b, hi_b, hc_b = b.interval()
    lo, lo_closed = (lo_a, lc_a) if lo_a > lo_b else (lo_b, lc_b) if lo_b > lo_a \
        else (lo_a, lc_a and lc_b)
    hi, hi_closed = (hi_a, hc_a) if hi_a < hi_b else (hi_b, hc_b) if hi_b < hi_a \
        else (hi_a, hc_a and hc_b)
    return lo < hi or (lo == hi and lo_closed and hi_closed)


class TransitionRules:
    """A validated table of :class:`TransitionRule` (the task knowledge graph).

    Args:
        rules: The rules, in priority order.
        features: When given, every non-posterior feature must be one of these.

    Raises:
        RuleTableError: If two rules leaving one state can fire together,
            a rule leaves or enters ``UNRELY``, or some state cannot be
            reached from ``SEARCHING``.
    """

    def __init__(self, rules: Iterable[TransitionRule], features: Optional[Sequence[str]] = None):
        self.log = logging.getLogger("kinedecode.copilot.%s" % type(self).__qualname__)
        self.rules: List[TransitionRule] = list(rules)
        self._by_state: Dict[MotionState, List[TransitionRule]] = {s: [] for s in REAL_STATES}
        for rule in self.rules:
            if rule.state is MotionState.UNRELY or rule.next_state is MotionState.UNRELY:
                raise RuleTableError("UNRELY cannot appear in a transition: %s" % rule)
            if features is not None and not rule.feature.startswith(POSTERIOR_PREFIX) \
                    and rule.feature not in features:
                raise RuleTableError("unknown feature %s in %s" % (rule.feature, rule))
            self._by_state[rule.state].append(rule)
        self._check_exclusive()
        self._check_reachable()

    def _check_exclusive(self) -> None:
        for state, rules in self._by_state.items():
            names = sorted({r.feature for r in rules})
            if len(names) > 1:
                raise RuleTableError("rules leaving %s test different features (%s) and could "
                                     "fire together" % (state.name, ", ".join(names)))
            for i, a in enumerate(rules):
                for b in rules[i + 1:]:
                    if _overlap(a, b):
                        raise RuleTableError("overlapping predicates leaving %s: '%s' and '%s'"
                                             % (state.name, a, b))

    def _check_reachable(self) -> None:
        seen = {MotionState.SEARCHING}
        queue = deque([MotionState.SEARCHING])
        while queue:
            for rule in self._by_state[queue.popleft()]:
                if rule.next_state not in seen:
                    seen.add(rule.next_state)
                    queue.append(rule.next_state)
        missing = [s.name for s in REAL_STATES if s not in seen]
        if missing:
            raise RuleTableError("states not reachable from SEARCHING: %s" % ", ".join(missing))

    def leaving(self, state: MotionState) -> List[TransitionRule]:
        return list(self._by_state[MotionState.parse(state)])

    @classmethod
    def from_text(cls, text: str, features: Optional[Sequence[str]] = None) -> "TransitionRules":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise RuleTableError("expected 'state feature op threshold next', got %r"
                                     % line, lineno)
            state, feature, comparator, threshold, next_state = parts
            if comparator not in _COMPARATORS:
                raise RuleTableError("unknown comparator %s" % comparator, lineno)
            try:
                value = float(threshold)
                rule = TransitionRule(MotionState.parse(state), feature, comparator, value,
                                      MotionState.parse(next_state))
            except ValueError as e:
                raise RuleTableError(str(e), lineno) from None
            if not math.isfinite(value):
                raise RuleTableError("threshold must be finite", lineno)
            rules.append(rule)
        return cls(rules, features)

    @classmethod
    def load(cls, path, features: Optional[Sequence[str]] = None) -> "TransitionRules":
        path = Path(path)
        try:
            return cls.from_text(path.read_text(), features)
        except RuleTableError as e:
            raise RuleTableError("%s: %s" % (path, e)) from None

    def dump(self) -> str:
        return "".join("%s\n" % r for r in self.rules)

    @classmethod
    def default(cls) -> "TransitionRules":
        """The grasp-and-lift cycle driven by contact, object height and trial end."""
        return cls.from_text(DEFAULT_RULES)


DEFAULT_RULES = """\
# state      feature         op   threshold  next
SEARCHING    contact         >=   0.5        LIFTING
LIFTING      object_height   >=   0.95       HOLDING
HOLDING      object_vz       <    -0.05      PUTTING
PUTTING      contact         <    0.5        RETURNING
RETURNING    trial_end       >=   0.5        SEARCHING
"""


def _feature_value(feature: str, posterior: Optional[np.ndarray],
                   sensors: Mapping[str, float]) -> Optional[float]:
    if feature.startswith(POSTERIOR_PREFIX):
        if posterior is None:
            return None
        return float(posterior[int(MotionState.parse(feature[len(POSTERIOR_PREFIX):]))])
    value = sensors.get(feature)
    return None if value is None else float(value)


def fsm_step(state: MotionState, posterior, sensors: Mapping[str, float],
             rules: TransitionRules) -> MotionState:
    """Next machine state: the first rule leaving *state* that fires, else *state*.

    A rule whose feature is absent from *sensors* does not fire.
    """
    state = MotionState.parse(state)
    if state is MotionState.UNRELY:
        raise ValueError("UNRELY is not a machine state")
    posterior = None if posterior is None else np.asarray(posterior, dtype=np.float64)
    for rule in rules.leaving(state):
        value = _feature_value(rule.feature, posterior, sensors)
        if value is not None and rule.matches(value):
            return rule.next_state
    return state
