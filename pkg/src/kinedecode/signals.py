# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Signal preprocessing for EEG, EMG and kinematic recordings.

A :class:`TimeSeriesBlock` is simply a named collection of equally long channels
sampled at one rate. Everything in this module is a pure function of its
inputs; nothing here reads or writes files.
"""

import enum
import logging
from dataclasses import dataclass
from typing import Any, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal as sps

log = logging.getLogger("kinedecode.signals")


class SignalKind(enum.Enum):
    EEG = "eeg"
    EMG = "emg"
    KIN = "kin"


#: Channel counts of the grasp-and-lift recordings; ingestion enforces these.
EXPECTED_CHANNELS = {SignalKind.EEG: 32, SignalKind.EMG: 5, SignalKind.KIN: 6}

#: Kinematic dimension order: index fingertip xyz, then thumb tip xyz.
KIN_CHANNELS = ["index_x", "index_y", "index_z", "thumb_x", "thumb_y", "thumb_z"]


class SignalError(Exception):
    """Raised when a signal operation cannot produce a valid block."""


class TimeSeriesBlock:
    """Wraps up a ``channels x samples`` recording segment.

    Channels can be looked up by name; the match is case-insensitive, so
    ``block["Cz"]`` and ``block["CZ"]`` return the same row.

    Args:
        data: Real matrix of shape ``(channels, samples)``.
        rate_hz: Sampling rate, must be positive.
        kind: What the channels hold.
        channel_names: One name per row. Defaults to ``ch0, ch1, ...``.
    """

    def __init__(self, data, rate_hz: float, kind: SignalKind,
                 channel_names: Optional[Sequence[str]] = None):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ValueError("Block data must be 2-D (channels x samples), got shape %s"
                             % (data.shape,))
        if not rate_hz > 0:
            raise ValueError("Sampling rate must be positive, got %r" % rate_hz)
        if not np.all(np.isfinite(data)):
            raise SignalError("Block data contains NaN or Inf")
        if channel_names is None:
            channel_names = ["ch%d" % i for i in range(data.shape[0])]
        channel_names = list(channel_names)
        if len(channel_names) != data.shape[0]:
            raise ValueError("Got %d channel names for %d channels"
                             % (len(channel_names), data.shape[0]))
        self.data = data
        self.rate_hz = float(rate_hz)
        self.kind = SignalKind(kind)
        self.channel_names = channel_names

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.rate_hz

    def _channel_index(self, name: str) -> int:
        for candidates in (name, name.upper(), name.lower()):
            if candidates in self.channel_names:
                return self.channel_names.index(candidates)
        for i, existing in enumerate(self.channel_names):
            if existing.casefold() == name.casefold():
                return i
        raise KeyError("Channel %s not present in %s block" % (name, self.kind.name))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[self._channel_index(name)]

    def __contains__(self, name: str) -> bool:
        try:
            self._channel_index(name)
        except KeyError:
            return False
        return True

    def replace(self, data=None, rate_hz=None) -> "TimeSeriesBlock":
        """Return a new block of the same kind and channels with new data or rate."""
        return TimeSeriesBlock(self.data if data is None else data,
                               self.rate_hz if rate_hz is None else rate_hz,
                               self.kind, self.channel_names)

    def __repr__(self):
        return "TimeSeriesBlock(%s, %d ch x %d @ %g Hz)" % (
            self.kind.name, self.n_channels, self.n_samples, self.rate_hz)


@dataclass(frozen=True, eq=False)
class SosFilter:
    """A Butterworth filter in second-order sections.

    ``sections`` has one row ``(b0, b1, b2, a0, a1, a2)`` per biquad.
    """
    sections: np.ndarray
    order: int
    low_hz: float
    high_hz: float
    rate_hz: float
    family: str = "butter"

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    @property
    def padlen(self) -> int:
        """Edge extension used by :func:`filter_forward_backward`."""
        return 3 * (2 * self.n_sections + 1)

    @property
    def min_samples(self) -> int:
        return self.padlen + 1

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(section[3:]) for section in self.sections])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response at *freqs_hz*."""
        _, h = sps.sosfreqz(self.sections, worN=np.atleast_1d(freqs_hz), fs=self.rate_hz)
        return h

    def gain_db(self, freqs_hz) -> np.ndarray:
        return 20.0 * np.log10(np.maximum(np.abs(self.response(freqs_hz)), 1e-300))


def _check_band(low_hz: float, high_hz: float, rate_hz: float) -> None:
    nyquist = rate_hz / 2.0
    if not rate_hz > 0:
        raise ValueError("Sampling rate must be positive, got %r" % rate_hz)
    if not low_hz > 0:
        raise ValueError("Low band edge must be > 0 Hz, got %g" % low_hz)
    if low_hz >= high_hz:
        raise ValueError("Low band edge (%g Hz) must be below high band edge (%g Hz)"
                         % (low_hz, high_hz))
    if high_hz >= nyquist:
        raise ValueError("High band edge (%g Hz) must be below Nyquist (%g Hz)"
                         % (high_hz, nyquist))


def _normalized(sections: np.ndarray) -> np.ndarray:
    sections = np.array(sections, dtype=np.float64)
    a0 = sections[:, 3:4]
    return sections / a0


def design_bandpass(low_hz: float, high_hz: float, order: int, rate_hz: float) -> SosFilter:
    """Design a Butterworth band-pass; *order* biquads, -3 dB at the band edges."""
    if order < 1:
        raise ValueError("Filter order must be a positive integer, got %r" % order)
    _check_band(low_hz, high_hz, rate_hz)
    sections = sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=rate_hz, output="sos")
    f = SosFilter(_normalized(sections), order, float(low_hz), float(high_hz), float(rate_hz))
    if not f.is_stable():
        raise SignalError("Band-pass %g-%g Hz (order %d at %g Hz) is numerically unstable"
                          % (low_hz, high_hz, order, rate_hz))
    log.debug("Designed band-pass %g-%g Hz, order %d, %d sections",
              low_hz, high_hz, order, f.n_sections)
    return f


def design_lowpass(high_hz: float, order: int, rate_hz: float) -> SosFilter:
    """Butterworth low-pass, used as the optional guard before decimation."""
    if order < 1:
        raise ValueError("Filter order must be a positive integer, got %r" % order)
    if not 0 < high_hz < rate_hz / 2.0:
        raise ValueError("Cutoff (%g Hz) must lie in (0, %g) Hz" % (high_hz, rate_hz / 2.0))
    sections = sps.butter(order, high_hz, btype="lowpass", fs=rate_hz, output="sos")
    return SosFilter(_normalized(sections), order, 0.0, float(high_hz), float(rate_hz))


def filter_forward_backward(block: TimeSeriesBlock, f: SosFilter) -> TimeSeriesBlock:
    """Zero-phase filtering: each channel runs forward, then time-reversed."""
    if not np.isclose(block.rate_hz, f.rate_hz):
        raise ValueError("Filter designed for %g Hz applied to a %g Hz block"
                         % (f.rate_hz, block.rate_hz))
    if block.n_samples < f.min_samples:
        raise SignalError("Forward-backward filtering needs at least %d samples per channel, "
                          "got %d" % (f.min_samples, block.n_samples))
    out = sps.sosfiltfilt(f.sections, block.data, axis=-1, padtype="odd", padlen=f.padlen)
    if not np.all(np.isfinite(out)):
        raise SignalError("Filtering produced non-finite values")
    return block.replace(data=out)


def common_average_reference(block: TimeSeriesBlock) -> TimeSeriesBlock:
    """Subtract the cross-channel mean at every sample."""
    if block.kind is not SignalKind.EEG:
        raise ValueError("Common average reference applies to EEG, got %s" % block.kind.name)
    if block.n_channels < 2:
        raise SignalError("Common average reference is undefined for %d channel(s)"
                          % block.n_channels)
    return block.replace(data=block.data - block.data.mean(axis=0, keepdims=True))


def decimate(block: TimeSeriesBlock, factor: int) -> TimeSeriesBlock:
    """Keep every *factor*-th sample.

    No filtering happens here; the caller band-limits first.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError("Decimation factor must be a positive integer, got %r" % factor)
    factor = int(factor)
    n_out = block.n_samples // factor
    if n_out == 0:
        raise SignalError("Decimating %d samples by %d leaves an empty block"
                          % (block.n_samples, factor))
    return block.replace(data=block.data[:, :n_out * factor:factor],
                         rate_hz=block.rate_hz / factor)


@dataclass
class NormalizationParams:
    """Per-dimension min-max statistics of the training kinematics.

    ``K[t] = (k[t] - k_min) / (k_max - k_min)``; dimensions where
    ``k_max == k_min`` map to 0.5. Values outside the training range are not
    clipped.
    """
    k_min: np.ndarray
    k_max: np.ndarray

    def __post_init__(self):
        self.k_min = np.asarray(self.k_min, dtype=np.float64).ravel()
        self.k_max = np.asarray(self.k_max, dtype=np.float64).ravel()
        if self.k_min.shape != self.k_max.shape:
            raise ValueError("k_min and k_max must have the same length")
        if np.any(self.k_max < self.k_min):
            raise ValueError("k_max must be >= k_min in every dimension")

    @property
    def n_dims(self) -> int:
        return self.k_min.size

    def _shaped(self, values, axis):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[axis] != self.n_dims:
            raise ValueError("Expected %d dimensions on axis %d, got %d"
                             % (self.n_dims, axis, values.shape[axis]))
        shape = [1] * values.ndim
        shape[axis] = self.n_dims
        return values, self.k_min.reshape(shape), self.k_max.reshape(shape)

    def normalize(self, values, axis: int = -1) -> np.ndarray:
        values, lo, hi = self._shaped(values, axis)
        span = hi - lo
        degenerate = span == 0
        scaled = (values - lo) / np.where(degenerate, 1.0, span)
        return np.where(degenerate, 0.5, scaled)

    def denormalize(self, values, axis: int = -1) -> np.ndarray:
        values, lo, hi = self._shaped(values, axis)
        span = hi - lo
        return np.where(span == 0, lo, values * span + lo)

    def as_arrays(self, prefix: str = "norm") -> dict:
        return {prefix + ".k_min": self.k_min, prefix + ".k_max": self.k_max}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = "norm"):
        return cls(arrays[prefix + ".k_min"], arrays[prefix + ".k_max"])


def fit_minmax(kin: Union[TimeSeriesBlock, Sequence[TimeSeriesBlock]]) -> NormalizationParams:
    """Per-dimension extrema over all provided training samples."""
    blocks = [kin] if isinstance(kin, TimeSeriesBlock) else list(kin)
    if not blocks:
        raise SignalError("Cannot fit min-max normalization on no data")
    for block in blocks:
        if block.kind is not SignalKind.KIN:
            raise ValueError("Min-max normalization is fitted on kinematics, got %s"
                             % block.kind.name)
    data = np.concatenate([block.data for block in blocks], axis=1)
    if data.shape[1] == 0:
        raise SignalError("Cannot fit min-max normalization on an empty block")
    return NormalizationParams(data.min(axis=1), data.max(axis=1))


def apply_minmax(kin: TimeSeriesBlock, p: NormalizationParams) -> TimeSeriesBlock:
    return kin.replace(data=p.normalize(kin.data, axis=0))


def inverse_minmax(kin: TimeSeriesBlock, p: NormalizationParams) -> TimeSeriesBlock:
    return kin.replace(data=p.denormalize(kin.data, axis=0))


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window and kinematic-delay parameters.

    The 50-1000 sample range used for experiments is enforced by the run
    configuration; a spec itself only needs a positive window.
    """
    window_samples: int
    step_samples: int
    delay_ms: int
    rate_hz: float

    MIN_WINDOW = 50
    MAX_WINDOW = 1000

    def __post_init__(self):
        if self.window_samples < 1:
            raise ValueError("Window must hold at least one sample, got %d" % self.window_samples)
        if not 1 <= self.step_samples <= self.window_samples:
            raise ValueError("Step (%d) must be in [1, window=%d]"
                             % (self.step_samples, self.window_samples))
        if self.delay_ms < 0:
            raise ValueError("Delay must be non-negative, got %d ms" % self.delay_ms)
        if not self.rate_hz > 0:
            raise ValueError("Sampling rate must be positive, got %r" % self.rate_hz)

    @property
    def delay_samples(self) -> int:
        return int(round(self.delay_ms * self.rate_hz / 1000.0))

    @classmethod
    def sweep_default(cls, window_samples: int, delay_ms: int, rate_hz: float) -> "WindowSpec":
        """Step of one fifth of the window, rounded down."""
        return cls(window_samples, max(1, window_samples // 5), delay_ms, rate_hz)


def window_end_indices(n_input: int, n_target: int, spec: WindowSpec) -> np.ndarray:
    """Sample index ``t`` of the last input sample of every valid window."""
    first = spec.window_samples - 1
    last = min(n_input - 1, n_target - 1 - spec.delay_samples)
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, spec.step_samples, dtype=np.int64)


def slice_windows(x: TimeSeriesBlock, y: TimeSeriesBlock,
                  spec: WindowSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Pair each input window ``x[t-W+1 .. t]`` with the target ``y[t + delay]``.

    Windows whose delayed target falls past the end of the trial are dropped.
    """
    if not np.isclose(x.rate_hz, y.rate_hz) or not np.isclose(x.rate_hz, spec.rate_hz):
        raise ValueError("Input (%g Hz), target (%g Hz) and window spec (%g Hz) rates differ"
                         % (x.rate_hz, y.rate_hz, spec.rate_hz))
    if y.n_channels != EXPECTED_CHANNELS[SignalKind.KIN]:
        raise ValueError("Targets must have 6 dimensions, got %d" % y.n_channels)
    if spec.window_samples > x.n_samples:
        log.warning("Window of %d samples is longer than the %d-sample trial; no windows",
                    spec.window_samples, x.n_samples)
        return []
    ends = window_end_indices(x.n_samples, y.n_samples, spec)
    w, d = spec.window_samples, spec.delay_samples
    return [(x.data[:, t - w + 1:t + 1], y.data[:, t + d]) for t in ends]


class Preprocessor:
    """Applies the EEG and EMG preprocessing chains of one run configuration.

    Args:
        config (dict, optional): Overrides for :attr:`_default_config`.
    """

    _default_config = {
        "eeg_low_hz": 0.1,
        "eeg_high_hz": 40.0,
        "eeg_order": 4,
        "emg_low_hz": 20.0,
        "emg_high_hz": 450.0,
        "emg_order": 4,
        "emg_target_rate_hz": 500.0,
        "antialias": False,
        "antialias_hz": 200.0,
    }

    def __init__(self, config: Optional[Mapping[str, Any]] = None):
        self.log = logging.getLogger("kinedecode.signals.%s" % type(self).__qualname__)
        self.config = self._default_config.copy()
        for option, value in (config or {}).items():
            if option not in self.config:
                raise KeyError("Unknown preprocessing option %s" % option)
            self.config[option] = value
            self.log.debug("Setting preprocessing option %s to %s", option, value)
        self._filters = {}

    def _filter(self, key, design, *args) -> SosFilter:
        if key not in self._filters:
            self._filters[key] = design(*args)
        return self._filters[key]

    def eeg(self, block: TimeSeriesBlock) -> TimeSeriesBlock:
        """Band-pass then common average reference."""
        cfg = self.config
        f = self._filter(("eeg", block.rate_hz), design_bandpass, cfg["eeg_low_hz"],
                         cfg["eeg_high_hz"], cfg["eeg_order"], block.rate_hz)
        return common_average_reference(filter_forward_backward(block, f))

    def emg(self, block: TimeSeriesBlock) -> TimeSeriesBlock:
        """Band-pass, optional guard low-pass, then decimation to the EEG rate.

        The band-pass upper edge sits above the post-decimation Nyquist; the
        guard filter (``antialias``) removes that band before decimating.
        """
        cfg = self.config
        factor = block.rate_hz / cfg["emg_target_rate_hz"]
        if abs(factor - round(factor)) > 1e-9:
            raise ValueError("EMG rate %g Hz is not an integer multiple of %g Hz"
                             % (block.rate_hz, cfg["emg_target_rate_hz"]))
        f = self._filter(("emg", block.rate_hz), design_bandpass, cfg["emg_low_hz"],
                         cfg["emg_high_hz"], cfg["emg_order"], block.rate_hz)
        out = filter_forward_backward(block, f)
        if cfg["antialias"]:
            guard = self._filter(("guard", block.rate_hz), design_lowpass,
                                 cfg["antialias_hz"], cfg["emg_order"], block.rate_hz)
            out = filter_forward_backward(out, guard)
        return decimate(out, int(round(factor)))
