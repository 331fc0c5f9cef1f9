# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Confidence-gated filtering of decoded trajectories."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from kinedecode.copilot import REAL_STATES, MotionState, ThresholdTable
from kinedecode.copilot.rules import TransitionRules, fsm_step
from kinedecode.kinematics.metrics import DegenerateCorrelationError, overall_pcc
from kinedecode.tables import write_table

log = logging.getLogger("kinedecode.copilot.filter")


@dataclass
class PointInput:
    """Everything the filter needs to know about one decoded point."""
    index: int
    decoded: np.ndarray
    posterior: np.ndarray
    confidence: float
    sensors: Mapping[str, float] = field(default_factory=dict)
    truth: Optional[np.ndarray] = None


@dataclass
class ScoredPoint:
    index: int
    decoded: np.ndarray
    posterior: np.ndarray
    confidence: float
    machine_state: MotionState
    effective_state: MotionState
    retained: bool
    truth: Optional[np.ndarray] = None


@dataclass
class FilterReport:
    """Retention counts, overall and per effective state."""
    total: int = 0
    retained: int = 0
    per_state: Dict[MotionState, List[int]] = field(
        default_factory=lambda: {s: [0, 0] for s in MotionState})

    @property
    def ratio(self) -> Optional[float]:
        """``retained / total``, or ``None`` for an empty input."""
        return self.retained / self.total if self.total else None

    def add(self, point: ScoredPoint) -> None:
        self.total += 1
        self.per_state[point.effective_state][0] += 1
        if point.retained:
            self.retained += 1
            self.per_state[point.effective_state][1] += 1

    def merge(self, other: "FilterReport") -> "FilterReport":
        out = FilterReport(self.total + other.total, self.retained + other.retained)
        for s in MotionState:
            out.per_state[s] = [a + b for a, b in zip(self.per_state[s], other.per_state[s])]
        return out

    def rows(self):
        rows = []
        for s in MotionState:
            total, kept = self.per_state[s]
            rows.append([s.name, total, kept, kept / total if total else float("nan")])
        rows.append(["ALL", self.total, self.retained,
                     self.ratio if self.ratio is not None else float("nan")])
        return rows

    def write(self, path) -> None:
        write_table(path, ["state", "points", "retained", "ratio"], self.rows())


def attribute_point(machine_state: MotionState, posterior) -> MotionState:
    """The machine state if the classifier agrees with it, otherwise ``UNRELY``.

    An exact tie between the machine state and another state counts as
    agreement.
    """
    posterior = np.asarray(posterior, dtype=np.float64)
    if posterior.shape != (len(REAL_STATES),):
        raise ValueError("Posterior must have %d entries, got shape %s"
                         % (len(REAL_STATES), posterior.shape))
    if posterior[int(machine_state)] >= posterior.max():
        return MotionState(machine_state)
    return MotionState.UNRELY


def filter_trajectory(points: Sequence[PointInput], thresholds: ThresholdTable,
                      rules: TransitionRules,
                      initial_state: MotionState = MotionState.SEARCHING
                      ) -> Tuple[List[ScoredPoint], Optional[float], FilterReport]:
    """Run the state machine along *points* and keep the confident ones.

    For each point the machine first steps on the point's sensors, then the
    point is attributed and kept iff its confidence reaches the threshold of
    its effective state.

    Returns:
        ``(retained points, retention ratio, report)``; the ratio is ``None``
        when *points* is empty.
    """
    report = FilterReport()
    retained = []
    state = MotionState(initial_state)
    for p in points:
        state = fsm_step(state, p.posterior, p.sensors, rules)
        effective = attribute_point(state, p.posterior)
        keep = bool(p.confidence >= thresholds[effective])
        scored = ScoredPoint(p.index, p.decoded, p.posterior, p.confidence, state, effective,
                             keep, p.truth)
        report.add(scored)
        if keep:
            retained.append(scored)
    if report.total == 0:
        log.warning("Empty trajectory; retention ratio is undefined")
    return retained, report.ratio, report


def filter_trajectories(trajectories: Sequence[Sequence[PointInput]], thresholds: ThresholdTable,
                        rules: TransitionRules) -> Tuple[List[ScoredPoint], FilterReport]:
    """Filter several trials; the machine restarts from ``SEARCHING`` for each."""
    kept, report = [], FilterReport()
    for points in trajectories:
        retained, _, r = filter_trajectory(points, thresholds, rules)
        kept.extend(retained)
        report = report.merge(r)
    return kept, report


@dataclass
class SweepPoint:
    scale: float
    retention: Optional[float]
    pcc: float
    retained: int
    total: int


def _retained_pcc(points: Sequence[ScoredPoint]) -> float:
    if len(points) < 2 or any(p.truth is None for p in points):
        return float("nan")
    pred = np.stack([p.decoded for p in points])
    truth = np.stack([p.truth for p in points])
    try:
        return overall_pcc(pred, truth)
    except DegenerateCorrelationError:
        return float("nan")


def threshold_sweep(trajectories: Sequence[Sequence[PointInput]], rules: TransitionRules,
                    thresholds: ThresholdTable, scales: Sequence[float]) -> List[SweepPoint]:
    """Retention ratio and retained-point PCC for every scaled threshold table.

    Points need ``truth`` set for the PCC column.
    """
    curve = []
    for scale in scales:
        kept, report = filter_trajectories(trajectories, thresholds.scaled(scale), rules)
        curve.append(SweepPoint(float(scale), report.ratio, _retained_pcc(kept),
                                report.retained, report.total))
        log.debug("scale %.3g: retention %s", scale, report.ratio)
    return curve


def write_sweep(path, curve: Sequence[SweepPoint]) -> None:
    write_table(path, ["scale", "retention", "pcc", "retained", "points"],
                ([c.scale, float("nan") if c.retention is None else c.retention, c.pcc,
                  c.retained, c.total] for c in curve))
