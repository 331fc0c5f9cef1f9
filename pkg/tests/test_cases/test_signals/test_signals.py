# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

import numpy as np
import pytest
import scipy.signal as sps

from kinedecode.signals import (KIN_CHANNELS, NormalizationParams, Preprocessor, SignalError,
                                SignalKind, TimeSeriesBlock, WindowSpec, apply_minmax,
                                common_average_reference, decimate, design_bandpass,
                                design_lowpass, filter_forward_backward, fit_minmax,
                                inverse_minmax, slice_windows, window_end_indices)


def eeg_block(data, rate=500.0):
    return TimeSeriesBlock(data, rate, SignalKind.EEG)


def kin_block(data, rate=500.0):
    data = np.asarray(data, dtype=float)
    if data.shape[0] != 6:
        data = np.repeat(np.atleast_2d(data), 6, axis=0)
    return TimeSeriesBlock(data, rate, SignalKind.KIN, KIN_CHANNELS)


def tone(freq, rate=500.0, n=5000, channels=1):
    t = np.arange(n) / rate
    return np.tile(np.sin(2 * np.pi * freq * t), (channels, 1))


def test_channel_lookup_is_case_insensitive():
    block = TimeSeriesBlock(np.arange(6.0).reshape(2, 3), 500.0, SignalKind.EEG, ["Cz", "Pz"])
    np.testing.assert_array_equal(block["CZ"], block["cz"])
    assert "pZ" in block
    assert "Oz" not in block
    with pytest.raises(KeyError):
        block["Oz"]


def test_block_rejects_non_finite():
    with pytest.raises(SignalError):
        TimeSeriesBlock([[0.0, np.nan]], 500.0, SignalKind.EEG)
    with pytest.raises(ValueError):
        TimeSeriesBlock([[0.0, 1.0]], 0.0, SignalKind.EEG)


def test_emg_bandpass_has_four_stable_sections():
    f = design_bandpass(20, 450, 4, 4000)
    assert f.n_sections == 4
    assert f.is_stable()
    np.testing.assert_allclose(f.sections[:, 3], 1.0)


def test_eeg_bandpass_passband_gain():
    f = design_bandpass(0.1, 40, 4, 500)
    assert f.is_stable()
    gain = f.gain_db(20.0)[0]
    assert -1.0 <= gain <= 1e-9


@pytest.mark.parametrize("low,high,rate", [(0.1, 40, 500), (20, 450, 4000), (8, 30, 250)])
def test_band_edges_at_minus_3_db(low, high, rate):
    f = design_bandpass(low, high, 4, rate)
    half_power = -10 * np.log10(2.0)
    # the half-power crossing lies within 5% of each edge
    assert f.gain_db(0.95 * low)[0] < half_power < f.gain_db(1.05 * low)[0]
    assert f.gain_db(1.05 * high)[0] < half_power < f.gain_db(0.95 * high)[0]


def test_stopband_is_monotone():
    f = design_bandpass(0.1, 40, 4, 500)
    upper = f.gain_db(np.linspace(45, 249, 500))
    assert np.all(np.diff(upper) <= 1e-9)


@pytest.mark.parametrize("low,high,rate", [(40, 0.1, 500), (10, 250, 500), (0, 40, 500),
                                           (10, 10, 500)])
def test_invalid_band_edges(low, high, rate):
    with pytest.raises(ValueError):
        design_bandpass(low, high, 4, rate)


def test_impulse_response_decays():
    f = design_bandpass(20, 450, 4, 4000)
    tau = -1.0 / np.log(np.max(np.abs(f.poles())))
    n = int(np.ceil(45 * tau))
    impulse = np.zeros(n)
    impulse[0] = 1.0
    h = sps.sosfilt(f.sections, impulse)
    tail = h[int(np.ceil(40 * tau)):]
    assert np.max(np.abs(tail)) < 1e-8 * np.max(np.abs(h))


def test_in_band_tone_passes_without_phase_lag():
    f = design_bandpass(0.1, 40, 4, 500)
    x = eeg_block(tone(5.0))
    y = filter_forward_backward(x, f)
    core = slice(1000, 4000)
    ratio = np.std(y.data[0, core]) / np.std(x.data[0, core])
    assert abs(ratio - 1.0) < 0.05
    peaks_in = np.flatnonzero(np.diff(np.sign(np.diff(x.data[0, core]))) < 0)
    peaks_out = np.flatnonzero(np.diff(np.sign(np.diff(y.data[0, core]))) < 0)
    assert np.max(np.abs(peaks_in[:10] - peaks_out[:10])) <= 1


def test_out_of_band_tone_is_attenuated_20_db():
    f = design_bandpass(0.1, 40, 4, 500)
    x = eeg_block(tone(100.0))
    y = filter_forward_backward(x, f)
    core = slice(500, 4500)
    rms_ratio = np.sqrt(np.mean(y.data[0, core] ** 2) / np.mean(x.data[0, core] ** 2))
    assert 20 * np.log10(rms_ratio) <= -20.0


def test_zero_input_stays_zero():
    f = design_bandpass(0.1, 40, 4, 500)
    y = filter_forward_backward(eeg_block(np.zeros((3, 1000))), f)
    assert np.all(y.data == 0.0)


def test_filter_rejects_short_input():
    f = design_bandpass(0.1, 40, 4, 500)
    with pytest.raises(SignalError, match="%d samples" % f.min_samples):
        filter_forward_backward(eeg_block(np.zeros((2, f.min_samples - 1))), f)


def test_filter_rejects_rate_mismatch():
    f = design_bandpass(0.1, 40, 4, 500)
    with pytest.raises(ValueError):
        filter_forward_backward(eeg_block(np.zeros((2, 1000)), rate=1000.0), f)


def test_car_examples():
    out = common_average_reference(eeg_block([[1.0, 1.0], [3.0, 3.0]]))
    np.testing.assert_array_equal(out.data, [[-1.0, -1.0], [1.0, 1.0]])
    same = common_average_reference(eeg_block(np.ones((4, 5)) * 7.0))
    assert np.all(same.data == 0.0)


def test_car_zero_mean_and_idempotent():
    rng = np.random.default_rng(3)
    x = eeg_block(rng.normal(size=(32, 500)) * 50.0)
    once = common_average_reference(x)
    assert np.max(np.abs(once.data.mean(axis=0))) <= 1e-10 * np.max(np.abs(x.data))
    twice = common_average_reference(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-12)


def test_car_needs_two_eeg_channels():
    with pytest.raises(SignalError):
        common_average_reference(eeg_block(np.ones((1, 10))))
    with pytest.raises(ValueError):
        common_average_reference(TimeSeriesBlock(np.ones((5, 10)), 500.0, SignalKind.EMG))


def test_decimate_bookkeeping():
    x = TimeSeriesBlock(np.arange(8000.0)[None, :], 4000.0, SignalKind.EMG)
    y = decimate(x, 8)
    assert y.n_samples == 1000
    assert y.rate_hz == 500.0
    np.testing.assert_array_equal(y.data[0, :4], [0.0, 8.0, 16.0, 24.0])
    same = decimate(x, 1)
    np.testing.assert_array_equal(same.data, x.data)
    assert same.rate_hz == x.rate_hz


def test_decimate_errors():
    short = TimeSeriesBlock(np.zeros((1, 7)), 4000.0, SignalKind.EMG)
    with pytest.raises(SignalError):
        decimate(short, 8)
    with pytest.raises(ValueError):
        decimate(short, 0)


def test_fit_minmax_extrema():
    p = fit_minmax(kin_block([2.0, 4.0, 6.0]))
    np.testing.assert_array_equal(p.k_min, [2.0] * 6)
    np.testing.assert_array_equal(p.k_max, [6.0] * 6)
    with pytest.raises(SignalError):
        fit_minmax(kin_block(np.zeros((6, 0))))
    with pytest.raises(SignalError):
        fit_minmax([])


def test_apply_minmax_examples():
    p = NormalizationParams([2.0] * 6, [6.0] * 6)
    out = apply_minmax(kin_block([2.0, 4.0, 6.0, 8.0]), p)
    np.testing.assert_array_equal(out.data[0], [0.0, 0.5, 1.0, 1.5])
    constant = fit_minmax(kin_block([5.0, 5.0, 5.0]))
    np.testing.assert_array_equal(apply_minmax(kin_block([5.0, 5.0, 5.0]), constant).data, 0.5)


def test_minmax_round_trip():
    rng = np.random.default_rng(0)
    kin = kin_block(rng.normal(size=(6, 200)))
    p = fit_minmax(kin)
    back = inverse_minmax(apply_minmax(kin, p), p)
    np.testing.assert_allclose(back.data, kin.data, atol=1e-9)


def test_minmax_dimension_mismatch():
    p = NormalizationParams([0.0] * 3, [1.0] * 3)
    with pytest.raises(ValueError):
        p.normalize(np.zeros((6, 10)), axis=0)


def test_slice_windows_closed_form_count():
    x = eeg_block(np.arange(2000.0).reshape(2, 1000))
    y = kin_block(np.tile(np.arange(1000.0), (6, 1)))
    spec = WindowSpec(250, 50, 200, 500.0)
    assert spec.delay_samples == 100
    pairs = slice_windows(x, y, spec)
    assert len(pairs) == 14
    ends = window_end_indices(1000, 1000, spec)
    np.testing.assert_array_equal(ends + 100, np.arange(349, 1000, 50))
    window, target = pairs[0]
    np.testing.assert_array_equal(window[0], np.arange(250.0))
    assert target[0] == 349.0
    assert all(t[0] <= 999 for _, t in pairs)


def test_slice_windows_degenerate_specs():
    x = eeg_block(np.zeros((2, 1000)))
    y = kin_block(np.zeros((6, 1000)))
    assert len(slice_windows(x, y, WindowSpec(1, 1, 0, 500.0))) == 1000
    assert slice_windows(x, y, WindowSpec(1001, 200, 0, 500.0)) == []


def test_slice_windows_rate_and_dim_checks():
    x = eeg_block(np.zeros((2, 100)))
    with pytest.raises(ValueError):
        slice_windows(x, kin_block(np.zeros((6, 100)), rate=250.0), WindowSpec(10, 1, 0, 500.0))
    bad = TimeSeriesBlock(np.zeros((3, 100)), 500.0, SignalKind.KIN)
    with pytest.raises(ValueError):
        slice_windows(x, bad, WindowSpec(10, 1, 0, 500.0))


def test_window_spec_invariants():
    assert WindowSpec.sweep_default(250, 100, 500.0).step_samples == 50
    assert WindowSpec.sweep_default(52, 100, 500.0).step_samples == 10
    with pytest.raises(ValueError):
        WindowSpec(50, 60, 0, 500.0)
    with pytest.raises(ValueError):
        WindowSpec(50, 10, -1, 500.0)


def test_preprocessor_chains():
    rng = np.random.default_rng(1)
    pre = Preprocessor()
    eeg = pre.eeg(eeg_block(rng.normal(size=(32, 2000))))
    assert eeg.n_samples == 2000
    assert np.max(np.abs(eeg.data.mean(axis=0))) < 1e-10
    emg = pre.emg(TimeSeriesBlock(rng.normal(size=(5, 8000)), 4000.0, SignalKind.EMG))
    assert emg.rate_hz == 500.0
    assert emg.n_samples == 1000


def test_preprocessor_antialias_guard():
    rng = np.random.default_rng(2)
    raw = TimeSeriesBlock(rng.normal(size=(5, 8000)), 4000.0, SignalKind.EMG)
    plain = Preprocessor().emg(raw)
    guarded = Preprocessor({"antialias": True}).emg(raw)
    assert guarded.n_samples == plain.n_samples
    assert np.std(guarded.data) < np.std(plain.data)
    guard = design_lowpass(200.0, 4, 4000.0)
    assert guard.gain_db(400.0)[0] < -20.0


def test_preprocessor_rejects_unknown_option():
    with pytest.raises(KeyError):
        Preprocessor({"notch_hz": 50})
