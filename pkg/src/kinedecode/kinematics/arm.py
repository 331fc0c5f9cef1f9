# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Forward and inverse kinematics of a 7-revolute serial arm, and joint trajectories."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from kinedecode.kinematics.metrics import Trajectory3D
from kinedecode.tables import write_table

log = logging.getLogger("kinedecode.kinematics.arm")

N_JOINTS = 7

DEFAULT_ARM_FILE = Path(__file__).with_name("panda.arm")


class IKConvergenceError(Exception):
    """Raised when inverse kinematics does not reach the tolerance.

    Attributes:
        best_residual: Smallest position error reached, in metres.
        residual_trace: Accepted residuals in iteration order; non-increasing.
        q_best: Configuration that reached :attr:`best_residual`.
    """

    def __init__(self, message: str, best_residual: float, residual_trace: List[float],
                 q_best: np.ndarray):
        super().__init__("%s (best residual %.3g m)" % (message, best_residual))
        self.best_residual = best_residual
        self.residual_trace = residual_trace
        self.q_best = q_best


@dataclass(frozen=True)
class Link:
    """Modified DH parameters of one revolute joint."""
    a: float
    d: float
    alpha: float
    lower: float
    upper: float

    def transform(self, q: float) -> np.ndarray:
        ca, sa = np.cos(self.alpha), np.sin(self.alpha)
        cq, sq = np.cos(q), np.sin(q)
        return np.array([
            [cq, -sq, 0.0, self.a],
            [sq * ca, cq * ca, -sa, -sa * self.d],
            [sq * sa, cq * sa, ca, ca * self.d],
            [0.0, 0.0, 0.0, 1.0],
        ])


def _parse_arm_file(text: str, source: str) -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError("%s:%d: expected 'key = value'" % (source, lineno))
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ValueError("%s:%d: duplicate key %s" % (source, lineno, key))
        values[key] = value
    return values


@dataclass(eq=False)
class ArmModel:
    """A chain of revolute joints described by modified DH parameters.

    Args:
        links: One :class:`Link` per joint, base first.
        flange_d: Offset of the end effector along the last joint axis.
        ready: Default starting configuration.
    """
    links: Tuple[Link, ...]
    flange_d: float = 0.0
    ready: Optional[np.ndarray] = None
    name: str = "arm"
    _lower: np.ndarray = field(init=False, repr=False)
    _upper: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.links = tuple(self.links)
        if len(self.links) != N_JOINTS:
            raise ValueError("Arm must have %d joints, got %d" % (N_JOINTS, len(self.links)))
        for i, link in enumerate(self.links, 1):
            if not link.lower < link.upper:
                raise ValueError("Joint %d lower limit %g is not below upper limit %g"
                                 % (i, link.lower, link.upper))
        self._lower = np.array([link.lower for link in self.links])
        self._upper = np.array([link.upper for link in self.links])
        if self.ready is None:
            self.ready = (self._lower + self._upper) / 2.0
        self.ready = np.asarray(self.ready, dtype=np.float64)
        if self.ready.shape != (N_JOINTS,) or not self.within_limits(self.ready):
            raise ValueError("Ready configuration must be %d angles within limits" % N_JOINTS)

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ArmModel":
        values = _parse_arm_file(text, source)
        try:
            n = int(values.get("joints", N_JOINTS))
            links = [Link(*(float(values["joint%d.%s" % (i, k)])
                            for k in ("a", "d", "alpha", "lower", "upper")))
                     for i in range(1, n + 1)]
            flange = float(values.get("flange.d", 0.0)) + float(values.get("tool.d", 0.0))
            ready = ([float(v) for v in values["ready"].split()] if "ready" in values else None)
        except KeyError as e:
            raise ValueError("%s: missing key %s" % (source, e)) from None
        return cls(tuple(links), flange, ready, values.get("name", "arm"))

    @classmethod
    def load(cls, path=DEFAULT_ARM_FILE) -> "ArmModel":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    @property
    def lower(self) -> np.ndarray:
        return self._lower

    @property
    def upper(self) -> np.ndarray:
        return self._upper

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=np.float64), self._lower, self._upper)

    def within_limits(self, q, atol: float = 0.0) -> bool:
        q = np.asarray(q, dtype=np.float64)
        return bool(np.all(q >= self._lower - atol) and np.all(q <= self._upper + atol))

    def frames(self, q) -> List[np.ndarray]:
        """Homogeneous transform of every joint frame, then the end effector."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (N_JOINTS,):
            raise ValueError("Need %d joint angles, got shape %s" % (N_JOINTS, q.shape))
        frames = []
        current = np.eye(4)
        for link, angle in zip(self.links, q):
            current = current @ link.transform(angle)
            frames.append(current)
        tip = np.eye(4)
        tip[2, 3] = self.flange_d
        frames.append(current @ tip)
        return frames

    def position_jacobian(self, q) -> np.ndarray:
        """``3 x 7`` derivative of the end-effector position."""
        frames = self.frames(q)
        p_end = frames[-1][:3, 3]
        return np.column_stack([np.cross(f[:3, 2], p_end - f[:3, 3]) for f in frames[:-1]])


def forward_kinematics(arm: ArmModel, q) -> Tuple[np.ndarray, np.ndarray]:
    """End-effector position and rotation matrix."""
    tip = arm.frames(q)[-1]
    return tip[:3, 3].copy(), tip[:3, :3].copy()


@dataclass
class IKResult:
    q: np.ndarray
    residual: float
    iterations: int
    residual_trace: List[float]


def _solve_from(arm: ArmModel, target: np.ndarray, q0: np.ndarray, tol: float,
                max_iters: int, damping: float) -> IKResult:
    q = arm.clamp(q0)
    residual = np.linalg.norm(target - forward_kinematics(arm, q)[0])
    trace = [float(residual)]
    lam = damping
    it = 0
    while residual > tol and it < max_iters:
        it += 1
        error = target - forward_kinematics(arm, q)[0]
        jac = arm.position_jacobian(q)
        step = jac.T @ np.linalg.solve(jac @ jac.T + lam ** 2 * np.eye(3), error)
        q_new = arm.clamp(q + step)
        new_residual = np.linalg.norm(target - forward_kinematics(arm, q_new)[0])
        if new_residual < residual:
            q, residual = q_new, new_residual
            trace.append(float(residual))
            lam = max(lam / 2.0, 1e-6)
        else:
            lam *= 4.0
            if lam > 1e6:
                break
    return IKResult(q, float(residual), it, trace)


def inverse_kinematics(arm: ArmModel, target, q_init=None, tol: float = 1e-3,
                       max_iters: int = 200, damping: float = 0.05,
                       restarts: int = 3, seed: int = 0) -> IKResult:
    """Position-only damped least squares, clamped to the joint limits.

    A step is kept only if it lowers the residual; otherwise the damping
    grows and the step is retried, so each attempt's residual trace never
    increases. When an attempt stalls, up to *restarts* further attempts
    start from configurations drawn from *seed*.

    Raises:
        IKConvergenceError: If no attempt gets within *tol* of *target*.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (3,) or not np.all(np.isfinite(target)):
        raise ValueError("Target must be a finite 3-vector, got %r" % (target,))
    q_init = arm.ready if q_init is None else np.asarray(q_init, dtype=np.float64)
    if not arm.within_limits(q_init, atol=1e-9):
        raise ValueError("Initial configuration is outside the joint limits")

    best = _solve_from(arm, target, q_init, tol, max_iters, damping)
    rng = np.random.default_rng(seed)
    attempt = 0
    while best.residual > tol and attempt < restarts:
        attempt += 1
        start = rng.uniform(arm.lower, arm.upper)
        result = _solve_from(arm, target, start, tol, max_iters, damping)
        log.debug("IK restart %d: residual %.3g", attempt, result.residual)
        if result.residual < best.residual:
            best = result
    if best.residual > tol:
        raise IKConvergenceError("IK did not converge to %.3g m" % tol, best.residual,
                                 best.residual_trace, best.q)
    return best


@dataclass
class JointTrajectory:
    """Timestamped joint configurations, ``q`` of shape ``[N, 7]``."""
    timestamps: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).ravel()
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, N_JOINTS)
        if self.q.shape[0] != self.timestamps.size:
            raise ValueError("%d timestamps for %d configurations"
                             % (self.timestamps.size, self.q.shape[0]))
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("Timestamps must be strictly increasing")

    def __len__(self):
        return self.timestamps.size

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0]) if len(self) else 0.0

    def max_step(self) -> float:
        """Largest joint-space distance between consecutive samples."""
        if len(self) < 2:
            return 0.0
        return float(np.max(np.linalg.norm(np.diff(self.q, axis=0), axis=1)))


def interpolate_joints(jt: JointTrajectory, out_rate_hz: float) -> JointTrajectory:
    """Linear interpolation onto ``round(duration * rate) + 1`` evenly spaced samples.

    Both end points are kept exactly.
    """
    if not out_rate_hz > 0:
        raise ValueError("Output rate must be positive, got %r" % out_rate_hz)
    if len(jt) < 2:
        return JointTrajectory(jt.timestamps.copy(), jt.q.copy())
    n = int(round(jt.duration * out_rate_hz)) + 1
    times = np.linspace(jt.timestamps[0], jt.timestamps[-1], max(n, 2))
    q = np.column_stack([np.interp(times, jt.timestamps, jt.q[:, j]) for j in range(N_JOINTS)])
    return JointTrajectory(times, q)


def solve_trajectory(arm: ArmModel, traj: Trajectory3D, q_start=None,
                     out_rate_hz: Optional[float] = None, tol: float = 1e-3,
                     max_iters: int = 200, damping: float = 0.05) -> JointTrajectory:
    """IK for every point, warm-started from the previous solution.

    Points where IK fails are skipped with a warning and interpolated over.
    The output is resampled at *out_rate_hz* (default: the mean input rate).

    Raises:
        IKConvergenceError: If no point at all can be solved.
    """
    if not traj.metric:
        raise ValueError("Map the trajectory into the workspace before solving IK")
    q = arm.ready if q_start is None else arm.clamp(q_start)
    times, solved, last_error = [], [], None
    for t, point in zip(traj.timestamps, traj.points):
        try:
            result = inverse_kinematics(arm, point, q, tol, max_iters, damping)
        except IKConvergenceError as e:
            log.warning("IK gap at t=%.3f s: %s", t, e)
            last_error = e
            continue
        q = result.q
        times.append(t)
        solved.append(q)
    if not solved:
        raise IKConvergenceError("no trajectory point could be solved",
                                 last_error.best_residual, last_error.residual_trace,
                                 last_error.q_best)
    knots = JointTrajectory(np.array(times), np.array(solved))
    if out_rate_hz is None:
        out_rate_hz = ((len(traj) - 1) / (traj.timestamps[-1] - traj.timestamps[0])
                       if len(traj) > 1 else 1.0)
    log.info("Solved %d of %d trajectory points", len(knots), len(traj))
    return interpolate_joints(knots, out_rate_hz)


def write_joint_csv(path, jt: JointTrajectory) -> int:
    """Write ``t,q1..q7`` rows in seconds and radians."""
    header = ["t"] + ["q%d" % i for i in range(1, N_JOINTS + 1)]
    return write_table(path, header, np.column_stack([jt.timestamps, jt.q]).tolist())
