# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Trial directories on disk and their preprocessed form.

A dataset directory holds one sub-directory per trial::

    trial_<id>/eeg.csv      32 columns, one row per 500 Hz sample
    trial_<id>/emg.csv      5 columns, one row per 4000 Hz sample
    trial_<id>/kin.csv      6 columns (index xyz, thumb xyz), EEG rate
    trial_<id>/labels.csv   optional, column "state"
    trial_<id>/events.csv   optional, sensor event channels at the EEG rate
    trial_<id>/meta.json    optional, {"subject": ..., "eeg_rate_hz": ..., ...}

Every CSV starts with a header row. A leading ``t`` column is accepted and
must be strictly increasing; otherwise time is implicit from the rate.
"""

import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from kinedecode.copilot import REAL_STATES, MotionState
from kinedecode.signals import (EXPECTED_CHANNELS, KIN_CHANNELS, Preprocessor, SignalKind,
                                TimeSeriesBlock)
from kinedecode.store import array_text, load_arrays, save_arrays, text_array
from kinedecode.tables import EXACT_FORMAT, read_matrix, read_table, write_matrix, write_table

log = logging.getLogger("kinedecode.dataset")

DEFAULT_RATES = {"eeg_rate_hz": 500.0, "emg_rate_hz": 4000.0, "kin_rate_hz": 500.0}

#: Sensor channels the transition rules can test.
EVENT_CHANNELS = ("contact", "object_height", "object_vz", "trial_end")

_TRIAL_DIR = re.compile(r"^trial_(\d+)$")


class IngestError(Exception):
    """Raised when a trial directory cannot be turned into a valid bundle."""

    def __init__(self, message: str, trial_id: Optional[int] = None):
        super().__init__(message if trial_id is None else "trial %d: %s" % (trial_id, message))
        self.trial_id = trial_id


@dataclass
class TrialBundle:
    """One raw grasp-and-lift trial.

    ``labels`` and every ``events`` channel have one entry per kinematic
    sample.
    """
    trial_id: int
    eeg: TimeSeriesBlock
    emg: TimeSeriesBlock
    kin: TimeSeriesBlock
    labels: Optional[np.ndarray] = None
    events: Dict[str, np.ndarray] = field(default_factory=dict)
    subject: Optional[str] = None

    def validate(self) -> "TrialBundle":
        for block, kind in ((self.eeg, SignalKind.EEG), (self.emg, SignalKind.EMG),
                            (self.kin, SignalKind.KIN)):
            if block.kind is not kind:
                raise IngestError("%s slot holds a %s block" % (kind.name, block.kind.name),
                                  self.trial_id)
            if block.n_channels != EXPECTED_CHANNELS[kind]:
                raise IngestError("%s has %d channels, expected %d"
                                  % (kind.name, block.n_channels, EXPECTED_CHANNELS[kind]),
                                  self.trial_id)
        if not np.isclose(self.kin.rate_hz, self.eeg.rate_hz):
            raise IngestError("kinematics at %g Hz but EEG at %g Hz"
                              % (self.kin.rate_hz, self.eeg.rate_hz), self.trial_id)
        if self.kin.n_samples != self.eeg.n_samples:
            raise IngestError("EEG has %d samples but kinematics %d"
                              % (self.eeg.n_samples, self.kin.n_samples), self.trial_id)
        quantum = 1.0 / self.eeg.rate_hz
        if abs(self.eeg.duration_s - self.emg.duration_s) > quantum + 1e-12:
            raise IngestError("EEG lasts %.4f s but EMG %.4f s"
                              % (self.eeg.duration_s, self.emg.duration_s), self.trial_id)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.kin.n_samples,):
                raise IngestError("%d labels for %d samples"
                                  % (self.labels.size, self.kin.n_samples), self.trial_id)
            if self.labels.size and not (0 <= self.labels.min() and
                                         self.labels.max() < len(REAL_STATES)):
                raise IngestError("labels outside the five motion states", self.trial_id)
        for name, values in self.events.items():
            if np.shape(values) != (self.kin.n_samples,):
                raise IngestError("event channel %s has %d entries for %d samples"
                                  % (name, np.size(values), self.kin.n_samples), self.trial_id)
        return self


def _read_block(path: Path, rate_hz: float, kind: SignalKind, trial_id: int) -> TimeSeriesBlock:
    if not path.exists():
        raise IngestError("missing %s" % path.name, trial_id)
    try:
        header, data = read_matrix(path)
    except ValueError as e:
        raise IngestError(str(e), trial_id) from None
    if header and header[0].lower() == "t":
        t = data[:, 0]
        if np.any(np.diff(t) <= 0):
            raise IngestError("time column of %s is not strictly increasing" % path.name,
                              trial_id)
        header, data = header[1:], data[:, 1:]
    if len(header) != EXPECTED_CHANNELS[kind]:
        raise IngestError("%s has %d channels, expected %d"
                          % (path.name, len(header), EXPECTED_CHANNELS[kind]), trial_id)
    try:
        return TimeSeriesBlock(data.T, rate_hz, kind, header)
    except ValueError as e:
        raise IngestError("%s: %s" % (path.name, e), trial_id) from None


def read_trial(directory) -> TrialBundle:
    """Parse and validate one ``trial_<id>`` directory."""
    directory = Path(directory)
    match = _TRIAL_DIR.match(directory.name)
    if match is None:
        raise IngestError("%s is not a trial_<id> directory" % directory.name)
    trial_id = int(match.group(1))

    meta: Dict[str, Any] = dict(DEFAULT_RATES)
    meta_path = directory / "meta.json"
    if meta_path.exists():
        try:
            meta.update(json.loads(meta_path.read_text()))
        except ValueError as e:
            raise IngestError("meta.json: %s" % e, trial_id) from None

    eeg = _read_block(directory / "eeg.csv", meta["eeg_rate_hz"], SignalKind.EEG, trial_id)
    emg = _read_block(directory / "emg.csv", meta["emg_rate_hz"], SignalKind.EMG, trial_id)
    kin = _read_block(directory / "kin.csv", meta["kin_rate_hz"], SignalKind.KIN, trial_id)

    labels = None
    labels_path = directory / "labels.csv"
    if labels_path.exists():
        header, rows = read_table(labels_path)
        if header != ["state"]:
            raise IngestError("labels.csv must have the single column 'state'", trial_id)
        try:
            labels = np.array([int(MotionState.parse(r[0])) for r in rows], dtype=np.int64)
        except ValueError as e:
            raise IngestError("labels.csv: %s" % e, trial_id) from None

    events = {}
    events_path = directory / "events.csv"
    if events_path.exists():
        try:
            header, data = read_matrix(events_path)
        except ValueError as e:
            raise IngestError(str(e), trial_id) from None
        events = {name: data[:, i].copy() for i, name in enumerate(header)}

    bundle = TrialBundle(trial_id, eeg, emg, kin, labels, events, meta.get("subject"))
    return bundle.validate()


def write_trial(root, bundle: TrialBundle) -> Path:
    """Write *bundle* in the layout :func:`read_trial` reads; floats round-trip exactly."""
    directory = Path(root) / ("trial_%d" % bundle.trial_id)
    directory.mkdir(parents=True, exist_ok=True)
    for name, block in (("eeg", bundle.eeg), ("emg", bundle.emg), ("kin", bundle.kin)):
        write_matrix(directory / ("%s.csv" % name), block.channel_names, block.data.T,
                     EXACT_FORMAT)
    if bundle.labels is not None:
        write_table(directory / "labels.csv", ["state"],
                    ([MotionState(int(v)).name] for v in bundle.labels))
    if bundle.events:
        names = list(bundle.events)
        write_matrix(directory / "events.csv", names,
                     np.column_stack([bundle.events[n] for n in names]), EXACT_FORMAT)
    meta = {"eeg_rate_hz": bundle.eeg.rate_hz, "emg_rate_hz": bundle.emg.rate_hz,
            "kin_rate_hz": bundle.kin.rate_hz}
    if bundle.subject is not None:
        meta["subject"] = bundle.subject
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return directory


def ingest(root) -> List[TrialBundle]:
    """Read every trial under *root*, skipping malformed ones with a warning.

    Raises:
        IngestError: If *root* holds no trial directories, two directories
            share an id, or every trial fails.
    """
    root = Path(root)
    dirs = sorted((d for d in root.iterdir() if d.is_dir() and _TRIAL_DIR.match(d.name)),
                  key=lambda d: int(_TRIAL_DIR.match(d.name).group(1))) if root.is_dir() else []
    if not dirs:
        raise IngestError("no trials found in %s" % root)
    ids = [int(_TRIAL_DIR.match(d.name).group(1)) for d in dirs]
    if len(set(ids)) != len(ids):
        raise IngestError("duplicate trial ids in %s" % root)

    bundles = []
    for d in dirs:
        try:
            bundles.append(read_trial(d))
        except IngestError as e:
            log.warning("Skipping %s: %s", d.name, e)
    if not bundles:
        raise IngestError("all %d trials in %s failed to load" % (len(dirs), root))
    log.info("Ingested %d of %d trials from %s", len(bundles), len(dirs), root)
    return bundles


@dataclass
class PreparedTrial:
    """A trial after preprocessing, every modality at the EEG rate.

    ``kin`` stays in metric units; normalization is fitted later on the
    training split only.
    """
    trial_id: int
    eeg: np.ndarray
    emg: np.ndarray
    kin: np.ndarray
    rate_hz: float
    labels: Optional[np.ndarray] = None
    events: Dict[str, np.ndarray] = field(default_factory=dict)
    subject: Optional[str] = None

    @property
    def n_samples(self) -> int:
        return self.kin.shape[1]

    def block(self, kind: SignalKind) -> TimeSeriesBlock:
        data = {SignalKind.EEG: self.eeg, SignalKind.EMG: self.emg, SignalKind.KIN: self.kin}[kind]
        names = KIN_CHANNELS if kind is SignalKind.KIN else None
        return TimeSeriesBlock(data, self.rate_hz, kind, names)


def prepare_trial(bundle: TrialBundle, preprocessor: Preprocessor) -> PreparedTrial:
    """Filter and reference EEG, filter and decimate EMG, align lengths."""
    eeg = preprocessor.eeg(bundle.eeg)
    emg = preprocessor.emg(bundle.emg)
    if not np.isclose(emg.rate_hz, eeg.rate_hz):
        raise IngestError("EMG decimated to %g Hz does not match EEG at %g Hz"
                          % (emg.rate_hz, eeg.rate_hz), bundle.trial_id)
    n = min(eeg.n_samples, emg.n_samples, bundle.kin.n_samples)
    events = {k: np.asarray(v)[:n] for k, v in bundle.events.items()}
    labels = None if bundle.labels is None else bundle.labels[:n]
    return PreparedTrial(bundle.trial_id, eeg.data[:, :n], emg.data[:, :n],
                         bundle.kin.data[:, :n], eeg.rate_hz, labels, events, bundle.subject)


def _prepare_one(args) -> PreparedTrial:
    bundle, config = args
    return prepare_trial(bundle, Preprocessor(config))


def prepare_trials(bundles: Sequence[TrialBundle], config: Optional[Mapping] = None,
                   workers: int = 1) -> List[PreparedTrial]:
    """Preprocess *bundles*, in parallel when ``workers > 1``; output order follows input."""
    if workers > 1 and len(bundles) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_prepare_one, [(b, dict(config or {})) for b in bundles]))
    preprocessor = Preprocessor(config)
    return [prepare_trial(b, preprocessor) for b in bundles]


def save_prepared(path, trials: Sequence[PreparedTrial]) -> None:
    arrays = {"meta.trial_ids": np.array([t.trial_id for t in trials], dtype=np.int64)}
    for t in trials:
        key = "trial.%d." % t.trial_id
        arrays[key + "eeg"] = t.eeg
        arrays[key + "emg"] = t.emg
        arrays[key + "kin"] = t.kin
        arrays[key + "rate"] = np.array([t.rate_hz])
        if t.labels is not None:
            arrays[key + "labels"] = t.labels
        for name in sorted(t.events):
            arrays[key + "event." + name] = np.asarray(t.events[name], dtype=np.float64)
        if t.subject is not None:
            arrays[key + "subject"] = text_array(str(t.subject))
    save_arrays(path, arrays)


def load_prepared(path) -> List[PreparedTrial]:
    arrays = load_arrays(path)
    trials = []
    for trial_id in arrays["meta.trial_ids"].tolist():
        key = "trial.%d." % trial_id
        events = {k[len(key + "event."):]: v for k, v in arrays.items()
                  if k.startswith(key + "event.")}
        subject = array_text(arrays[key + "subject"]) if key + "subject" in arrays else None
        trials.append(PreparedTrial(trial_id, arrays[key + "eeg"], arrays[key + "emg"],
                                    arrays[key + "kin"], float(arrays[key + "rate"][0]),
                                    arrays.get(key + "labels"), events, subject))
    return trials
