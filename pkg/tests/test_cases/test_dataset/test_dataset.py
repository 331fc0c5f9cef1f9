# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

import json

import numpy as np
import pytest

from kinedecode.copilot import MotionState
from kinedecode.dataset import (IngestError, ingest, load_prepared, prepare_trials, read_trial,
                                save_prepared, write_trial)
from kinedecode.kinematics.metrics import pcc
from kinedecode.synthetic import (SyntheticTrialSpec, generate_dataset, generate_synthetic_trial,
                                  informative_channels)
from kinedecode.tables import read_matrix, write_matrix

SHORT = SyntheticTrialSpec(duration_s=2.0, phase_starts=(0.0, 0.5, 0.9, 1.3, 1.6))


@pytest.fixture
def bundle():
    return generate_synthetic_trial(SHORT, seed=3, trial_id=4, subject="S2")


def test_trial_round_trip(tmp_path, bundle):
    directory = write_trial(tmp_path, bundle)
    assert directory.name == "trial_4"
    back = read_trial(directory)
    assert back.trial_id == 4
    assert back.subject == "S2"
    for name in ("eeg", "emg", "kin"):
        np.testing.assert_array_equal(getattr(back, name).data, getattr(bundle, name).data)
        assert getattr(back, name).rate_hz == getattr(bundle, name).rate_hz
    np.testing.assert_array_equal(back.labels, bundle.labels)
    assert set(back.events) == set(bundle.events)


def test_wrong_channel_count(tmp_path, bundle):
    directory = write_trial(tmp_path, bundle)
    header, data = read_matrix(directory / "eeg.csv")
    write_matrix(directory / "eeg.csv", header[:31], data[:, :31])
    with pytest.raises(IngestError, match="31 channels, expected 32") as e:
        read_trial(directory)
    assert e.value.trial_id == 4


def test_time_column_must_increase(tmp_path, bundle):
    directory = write_trial(tmp_path, bundle)
    header, data = read_matrix(directory / "kin.csv")
    t = np.arange(data.shape[0]) / 500.0
    t[10] = t[9]
    write_matrix(directory / "kin.csv", ["t"] + header, np.column_stack([t, data]))
    with pytest.raises(IngestError, match="strictly increasing"):
        read_trial(directory)


def test_rate_mismatch_is_rejected(tmp_path, bundle):
    directory = write_trial(tmp_path, bundle)
    meta = json.loads((directory / "meta.json").read_text())
    meta["kin_rate_hz"] = 250.0
    (directory / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(IngestError):
        read_trial(directory)


def test_ingest_skips_bad_trials(tmp_path, bundle):
    write_trial(tmp_path, bundle)
    good = generate_synthetic_trial(SHORT, seed=4, trial_id=7)
    write_trial(tmp_path, good)
    (tmp_path / "trial_4" / "emg.csv").unlink()
    (tmp_path / "notes").mkdir()
    bundles = ingest(tmp_path)
    assert [b.trial_id for b in bundles] == [7]


def test_ingest_empty_directory(tmp_path):
    with pytest.raises(IngestError, match="no trials found"):
        ingest(tmp_path)
    with pytest.raises(IngestError, match="no trials found"):
        ingest(tmp_path / "missing")


def test_prepared_round_trip(tmp_path):
    bundles = [generate_synthetic_trial(SHORT, seed=s, trial_id=s, subject="S1")
               for s in range(2)]
    prepared = prepare_trials(bundles)
    assert prepared[0].eeg.shape == (32, 1000)
    assert prepared[0].emg.shape == (5, 1000)
    assert prepared[0].rate_hz == 500.0
    save_prepared(tmp_path / "prep.kda", prepared)
    back = load_prepared(tmp_path / "prep.kda")
    assert [t.trial_id for t in back] == [0, 1]
    for a, b in zip(prepared, back):
        np.testing.assert_array_equal(a.eeg, b.eeg)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.subject == b.subject
        assert a.events.keys() == b.events.keys()


def test_labels_follow_phase_order(bundle):
    changes = np.flatnonzero(np.diff(bundle.labels)) + 1
    order = [MotionState(int(bundle.labels[0]))] + [MotionState(int(bundle.labels[i]))
                                                    for i in changes]
    assert order == [MotionState.SEARCHING, MotionState.LIFTING, MotionState.HOLDING,
                     MotionState.PUTTING, MotionState.RETURNING]
    np.testing.assert_array_equal(changes, [250, 450, 650, 800])


def test_generator_is_deterministic():
    a = generate_synthetic_trial(SHORT, seed=9)
    b = generate_synthetic_trial(SHORT, seed=9)
    np.testing.assert_array_equal(a.eeg.data, b.eeg.data)
    np.testing.assert_array_equal(a.emg.data, b.emg.data)
    assert not np.array_equal(a.kin.data, generate_synthetic_trial(SHORT, seed=10).kin.data)


@pytest.mark.parametrize("kwargs", [dict(phase_starts=(0.0, 0.5, 0.5, 1.0, 1.5)),
                                    dict(phase_starts=(0.0, 0.5, 1.0, 1.5)),
                                    dict(phase_starts=(0.0, 0.5, 1.0, 1.5, 2.0)),
                                    dict(rate_emg=1100.0),
                                    dict(eeg_noise=-1.0),
                                    dict(informative_channels=0)])
def test_invalid_spec(kwargs):
    values = dict(duration_s=2.0, phase_starts=SHORT.phase_starts)
    values.update(kwargs)
    spec = SyntheticTrialSpec(**values)
    with pytest.raises(ValueError):
        generate_synthetic_trial(spec, seed=0)


def _linear_decoder_pcc(spec, seed):
    """Least-squares decoder from informative EEG to kinematics ``lead_ms`` later."""
    trial = generate_synthetic_trial(spec, seed)
    lead = int(round(spec.lead_ms / 1000.0 * spec.rate_eeg))
    x = trial.eeg.data[informative_channels(spec)].T
    y = trial.kin.data.T
    x, y = np.column_stack([x[:-lead], np.ones(len(x) - lead)]), y[lead:]
    half = len(x) // 2
    w, *_ = np.linalg.lstsq(x[:half], y[:half], rcond=None)
    pred = x[half:] @ w
    return [pcc(pred[:, i], y[half:, i]) for i in range(6)]


def test_noise_free_coupling_is_linearly_decodable():
    spec = SyntheticTrialSpec(eeg_noise=0.0, eeg_coupling=1.0)
    assert min(_linear_decoder_pcc(spec, seed=1)) > 0.99


def test_zero_coupling_is_not_decodable():
    spec = SyntheticTrialSpec(duration_s=8.0, eeg_coupling=0.0)
    assert max(abs(r) for r in _linear_decoder_pcc(spec, seed=2)) < 0.2


def test_generate_dataset_layout(tmp_path):
    paths = generate_dataset(tmp_path, 3, seed=0, spec=SHORT, n_subjects=2)
    assert [p.name for p in paths] == ["trial_0", "trial_1", "trial_2"]
    subjects = [b.subject for b in ingest(tmp_path)]
    assert subjects == ["S1", "S2", "S1"]
    with pytest.raises(ValueError):
        generate_dataset(tmp_path, 0, seed=0)
