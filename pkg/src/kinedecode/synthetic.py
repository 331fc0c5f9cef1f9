# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Synthetic grasp-and-lift trials with known EEG and EMG coupling.

The hand reaches for an object, lifts it, holds it, puts it back and
returns home; each movement follows a minimum-jerk profile. A fixed subset
of EEG electrodes carries a linear mixture of the fingertip positions and
velocities ``lead_ms`` ahead of time, so a decoder has something to find;
EMG carries a wideband carrier whose envelope follows speed, aperture and
height, at a higher signal-to-noise ratio than the EEG.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from kinedecode.copilot import REAL_STATES
from kinedecode.dataset import TrialBundle, write_trial
from kinedecode.signals import EXPECTED_CHANNELS, KIN_CHANNELS, SignalKind, TimeSeriesBlock

log = logging.getLogger("kinedecode.synthetic")

_N_SOURCES = 12
_POS_SCALE = 0.1  # m
_VEL_SCALE = 0.3  # m/s
_EEG_UV = 10.0
_ALPHA_HZ = 10.0

# Grip apertures (m)
_CLOSED, _OPEN, _GRIP = 0.02, 0.08, 0.05


@dataclass(frozen=True)
class SyntheticTrialSpec:
    """Timing, noise and coupling of one synthetic trial.

    ``phase_starts`` are the onsets of SEARCHING, LIFTING, HOLDING, PUTTING
    and RETURNING in seconds; the last phase runs to ``duration_s``.
    """
    duration_s: float = 8.0
    rate_eeg: float = 500.0
    rate_emg: float = 4000.0
    phase_starts: Tuple[float, ...] = (0.0, 2.0, 3.5, 5.0, 6.5)
    eeg_noise: float = 1.0
    emg_noise: float = 0.2
    eeg_coupling: float = 1.0
    emg_coupling: float = 1.0
    informative_channels: int = 12
    lead_ms: float = 100.0
    mixing_seed: int = 1234

    def validate(self) -> "SyntheticTrialSpec":
        if not self.duration_s > 0:
            raise ValueError("Duration must be positive, got %r" % self.duration_s)
        if len(self.phase_starts) != len(REAL_STATES):
            raise ValueError("Need %d phase onsets, got %d"
                             % (len(REAL_STATES), len(self.phase_starts)))
        starts = np.asarray(self.phase_starts, dtype=np.float64)
        if np.any(np.diff(starts) <= 0):
            raise ValueError("Phase onsets must be strictly increasing: %s" % (self.phase_starts,))
        if starts[0] < 0 or starts[-1] >= self.duration_s:
            raise ValueError("Phase onsets must lie in [0, %g)" % self.duration_s)
        if not (self.rate_eeg > 0 and self.rate_emg > 0):
            raise ValueError("Sampling rates must be positive")
        ratio = self.rate_emg / self.rate_eeg
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("EMG rate must be an integer multiple of the EEG rate")
        for name in ("eeg_noise", "emg_noise", "eeg_coupling", "emg_coupling", "lead_ms"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be non-negative, got %r" % (name, getattr(self, name)))
        if not 1 <= self.informative_channels <= EXPECTED_CHANNELS[SignalKind.EEG]:
            raise ValueError("informative_channels must be in [1, %d], got %d"
                             % (EXPECTED_CHANNELS[SignalKind.EEG], self.informative_channels))
        return self


def _min_jerk(tau: np.ndarray) -> np.ndarray:
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau ** 2)


def _segments(t: np.ndarray, knots: List[Tuple[float, float, np.ndarray, np.ndarray]]) -> np.ndarray:
    """Piecewise minimum-jerk moves; *knots* are ``(start, end, from, to)``."""
    first = np.asarray(knots[0][2], dtype=np.float64)
    out = np.broadcast_to(first[..., None], first.shape + t.shape).copy()
    for start, end, a, b in knots:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        s = _min_jerk((t - start) / (end - start))
        mask = t >= start
        out[..., mask] = a[..., None] + (b - a)[..., None] * s[mask]
    return out


class _Scene:
    """Per-trial object placement and the resulting hand motion."""

    def __init__(self, spec: SyntheticTrialSpec, rng: np.random.Generator):
        self.spec = spec
        self.home = np.array([0.0, 0.0, 0.10])
        self.obj = np.array([0.30, 0.0, 0.05]) + rng.uniform(-0.03, 0.03, 3) * [1, 1, 0.3]
        self.lift = rng.uniform(0.08, 0.12)
        b = list(spec.phase_starts) + [spec.duration_s]
        self.bounds = b

    def midpoint(self, t: np.ndarray) -> np.ndarray:
        b, top = self.bounds, self.obj + [0.0, 0.0, self.lift]
        return _segments(t, [(b[0], b[1], self.home, self.obj),
                             (b[1], b[2], self.obj, top),
                             (b[2], b[3], top, top),
                             (b[3], b[4], top, self.obj),
                             (b[4], b[5], self.obj, self.home)])

    def aperture(self, t: np.ndarray) -> np.ndarray:
        b = self.bounds
        open_at = b[0] + 0.6 * (b[1] - b[0])
        reopen = b[4] + 0.4 * (b[5] - b[4])
        return _segments(t, [(b[0], open_at, _CLOSED, _OPEN),
                             (open_at, b[1], _OPEN, _GRIP),
                             (b[4], reopen, _GRIP, _OPEN),
                             (reopen, b[5], _OPEN, _CLOSED)])

    def fingertips(self, t: np.ndarray) -> np.ndarray:
        """``[6, n]``: index xyz then thumb xyz."""
        mid, ap = self.midpoint(t), self.aperture(t)
        offset = np.stack([np.zeros_like(ap), ap / 2.0, np.full_like(ap, 0.01)])
        return np.concatenate([mid + offset, mid - offset])

    def phase(self, t: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.spec.phase_starts, t, side="right") - 1, 0,
                       len(REAL_STATES) - 1).astype(np.int64)

    def events(self, t: np.ndarray) -> Dict[str, np.ndarray]:
        b = self.bounds
        phase = self.phase(t)
        contact = ((phase >= 1) & (phase <= 3)).astype(np.float64)
        height = np.where(contact > 0, (self.midpoint(t)[2] - self.obj[2]) / self.lift, 0.0)
        height = np.clip(height, 0.0, 1.0)
        vz = np.gradient(height * self.lift, t) if t.size > 1 else np.zeros_like(t)
        trial_end = (t >= b[5] - 0.05).astype(np.float64)
        return {"contact": contact, "object_height": height, "object_vz": vz,
                "trial_end": trial_end}


def informative_channels(spec: SyntheticTrialSpec) -> np.ndarray:
    """Indices of the EEG electrodes that carry kinematic information."""
    rng = np.random.default_rng(spec.mixing_seed)
    n_eeg = EXPECTED_CHANNELS[SignalKind.EEG]
    return np.sort(rng.permutation(n_eeg)[:spec.informative_channels])


def _mixing(spec: SyntheticTrialSpec) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.mixing_seed, 1])
    size = max(spec.informative_channels, _N_SOURCES)
    q, _ = np.linalg.qr(rng.normal(size=(size, size)))
    eeg_mix = q[:spec.informative_channels, :_N_SOURCES]
    emg_mix = rng.uniform(0.2, 1.0, size=(EXPECTED_CHANNELS[SignalKind.EMG], 4))
    return eeg_mix, emg_mix


def generate_synthetic_trial(spec: SyntheticTrialSpec, seed: int, trial_id: int = 0,
                             subject: Optional[str] = None) -> TrialBundle:
    """Draw one trial; equal ``(spec, seed)`` give identical arrays."""
    spec.validate()
    rng = np.random.default_rng(seed)
    scene = _Scene(spec, rng)
    eeg_mix, emg_mix = _mixing(spec)

    n = int(round(spec.duration_s * spec.rate_eeg))
    t = np.arange(n) / spec.rate_eeg
    kin = scene.fingertips(t)

    # EEG leads the movement
    t_lead = np.minimum(t + spec.lead_ms / 1000.0, t[-1])
    ahead = scene.fingertips(t_lead)
    velocity = np.gradient(ahead, t, axis=1)
    sources = np.concatenate([ahead / _POS_SCALE, velocity / _VEL_SCALE])
    n_eeg = EXPECTED_CHANNELS[SignalKind.EEG]
    eeg = spec.eeg_noise * rng.normal(size=(n_eeg, n))
    phases = rng.uniform(0, 2 * np.pi, size=(n_eeg, 1))
    eeg += 0.5 * spec.eeg_noise * np.sin(2 * np.pi * _ALPHA_HZ * t + phases)
    eeg[informative_channels(spec)] += spec.eeg_coupling * (eeg_mix @ sources)
    eeg *= _EEG_UV

    factor = int(round(spec.rate_emg / spec.rate_eeg))
    te = np.arange(n * factor) / spec.rate_emg
    mid = scene.midpoint(te)
    speed = np.linalg.norm(np.gradient(mid, te, axis=1), axis=0)
    features = np.stack([speed / _VEL_SCALE, scene.aperture(te) / _OPEN,
                         (mid[2] - scene.obj[2]) / scene.lift,
                         scene.events(te)["contact"]])
    envelope = 0.05 + spec.emg_coupling * np.abs(emg_mix @ features)
    n_emg = EXPECTED_CHANNELS[SignalKind.EMG]
    carrier = rng.normal(size=(n_emg, te.size))
    emg = envelope * carrier + spec.emg_noise * rng.normal(size=(n_emg, te.size))

    bundle = TrialBundle(
        trial_id,
        TimeSeriesBlock(eeg, spec.rate_eeg, SignalKind.EEG,
                        ["eeg%02d" % i for i in range(n_eeg)]),
        TimeSeriesBlock(emg, spec.rate_emg, SignalKind.EMG,
                        ["emg%d" % i for i in range(n_emg)]),
        TimeSeriesBlock(kin, spec.rate_eeg, SignalKind.KIN, KIN_CHANNELS),
        labels=scene.phase(t),
        events=scene.events(t),
        subject=subject,
    )
    return bundle.validate()


def generate_dataset(root, n_trials: int, seed: int,
                     spec: SyntheticTrialSpec = SyntheticTrialSpec(),
                     n_subjects: int = 1) -> List[Path]:
    """Write *n_trials* trials ``trial_0 .. trial_<n-1>`` under *root*."""
    if n_trials < 1:
        raise ValueError("Need at least one trial, got %d" % n_trials)
    if n_subjects < 1:
        raise ValueError("Need at least one subject, got %d" % n_subjects)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(n_trials)
    paths = []
    for i, ss in enumerate(seeds):
        bundle = generate_synthetic_trial(spec, int(ss.generate_state(1)[0]), trial_id=i,
                                          subject="S%d" % (i % n_subjects + 1))
        paths.append(write_trial(root, bundle))
        log.debug("Wrote synthetic trial %d", i)
    log.info("Generated %d synthetic trials in %s", n_trials, root)
    return paths
