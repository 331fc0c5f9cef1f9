# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Correlation and error metrics, midpoints and workspace mapping."""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

#: Column names of a ``[N, 6]`` prediction: index xyz, thumb xyz.
AXES = ("index_x", "index_y", "index_z", "thumb_x", "thumb_y", "thumb_z")


class DegenerateCorrelationError(ValueError):
    """Raised when a sequence is constant and PCC is undefined."""


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError("Sequences differ in length: %d vs %d" % (a.size, b.size))
    return a, b


def pcc(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation coefficient.

    Raises:
        ValueError: On a length mismatch or fewer than two samples.
        DegenerateCorrelationError: If either sequence is constant.
    """
    a, b = _pair(a, b)
    if a.size < 2:
        raise ValueError("PCC needs at least two samples, got %d" % a.size)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise DegenerateCorrelationError("PCC is undefined for a constant sequence")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def _columns(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError("Need two [N, D] arrays of equal shape, got %s and %s"
                         % (pred.shape, truth.shape))
    return pred, truth


def overall_pcc(pred, truth) -> float:
    """PCC of all output dimensions concatenated into one vector each."""
    pred, truth = _columns(pred, truth)
    return pcc(pred.T.ravel(), truth.T.ravel())


def per_axis_pcc(pred, truth) -> np.ndarray:
    pred, truth = _columns(pred, truth)
    return np.array([pcc(pred[:, i], truth[:, i]) for i in range(pred.shape[1])])


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    if a.size == 0:
        raise ValueError("RMSE of empty sequences")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def per_axis_rmse(pred, truth) -> np.ndarray:
    pred, truth = _columns(pred, truth)
    return np.sqrt(np.mean((pred - truth) ** 2, axis=0))


@dataclass
class Trajectory3D:
    """A timed sequence of 3-D points; ``metric`` says whether units are metres."""
    timestamps: np.ndarray
    points: np.ndarray
    metric: bool = False

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).ravel()
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("Points must be [N, 3], got %s" % (self.points.shape,))
        if self.points.shape[0] != self.timestamps.size:
            raise ValueError("%d timestamps for %d points"
                             % (self.timestamps.size, self.points.shape[0]))
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("Timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("Trajectory holds non-finite coordinates")

    def __len__(self):
        return self.timestamps.size

    @classmethod
    def fingertips(cls, timestamps, six, metric: bool = False) -> Tuple["Trajectory3D", "Trajectory3D"]:
        """Split ``[N, 6]`` outputs into index and thumb trajectories."""
        six = np.asarray(six, dtype=np.float64)
        if six.ndim != 2 or six.shape[1] != 6:
            raise ValueError("Need [N, 6] fingertip coordinates, got %s" % (six.shape,))
        return cls(timestamps, six[:, :3], metric), cls(timestamps, six[:, 3:], metric)


def midpoint(index: Trajectory3D, thumb: Trajectory3D) -> Trajectory3D:
    if index.timestamps.shape != thumb.timestamps.shape or \
            not np.array_equal(index.timestamps, thumb.timestamps):
        raise ValueError("Index and thumb trajectories must share timestamps")
    if index.metric != thumb.metric:
        raise ValueError("Cannot average metric and normalized trajectories")
    return Trajectory3D(index.timestamps, (index.points + thumb.points) / 2.0, index.metric)


@dataclass(frozen=True)
class WorkspaceBox:
    """Axis-aligned box, in metres, that normalized coordinates map onto."""
    lower: Tuple[float, float, float] = (0.2, -0.25, 0.2)
    upper: Tuple[float, float, float] = (0.7, 0.25, 0.7)

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, dtype=float), np.asarray(self.upper, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("Workspace bounds need three coordinates each")
        if np.any(hi <= lo):
            raise ValueError("Workspace upper bound must exceed lower bound on every axis")

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lower) + np.asarray(self.upper)) / 2.0

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float) - np.asarray(self.lower, dtype=float)


def map_to_workspace(t: Trajectory3D, box: WorkspaceBox) -> Trajectory3D:
    """``[0, 1]`` on each axis onto ``[lower, upper]`` of *box*."""
    if t.metric:
        raise ValueError("Trajectory is already in workspace units")
    return Trajectory3D(t.timestamps, np.asarray(box.lower) + t.points * box.span, metric=True)


def unmap_from_workspace(t: Trajectory3D, box: WorkspaceBox) -> Trajectory3D:
    if not t.metric:
        raise ValueError("Trajectory is not in workspace units")
    return Trajectory3D(t.timestamps, (t.points - np.asarray(box.lower)) / box.span, metric=False)


def metrics_table(pred, truth) -> List[Tuple[str, float, float]]:
    """``(quantity, pcc, rmse)`` rows: each axis, the overall vector, and the midpoint."""
    pred, truth = _columns(pred, truth)
    rows = [(name, p, r) for name, p, r in zip(AXES, per_axis_pcc(pred, truth),
                                                per_axis_rmse(pred, truth))]
    rows.append(("overall", overall_pcc(pred, truth), rmse(pred, truth)))
    mid_pred = (pred[:, :3] + pred[:, 3:]) / 2.0
    mid_truth = (truth[:, :3] + truth[:, 3:]) / 2.0
    for i, axis in enumerate("xyz"):
        rows.append(("midpoint_%s" % axis, pcc(mid_pred[:, i], mid_truth[:, i]),
                     rmse(mid_pred[:, i], mid_truth[:, i])))
    rows.append(("midpoint", overall_pcc(mid_pred, mid_truth), rmse(mid_pred, mid_truth)))
    return rows
