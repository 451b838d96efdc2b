"""EMG and marker post-processing into time-aligned network inputs and targets.

Arrays are time-major throughout: EMG is ``(samples, channels)``, angle
trajectories are ``(samples, 24)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ContractError, DataQualityWarning, InputError, InputTooShortError
from .kinematics import N_DOF, N_MARKERS, KinematicModel, inverse_kinematics_batch

FS_EMG = 2048.0
FS_MARKERS = 100.0
N_CHANNELS = 96
GRID_ROWS = 6
GRID_COLUMNS = 16
ADC_BITS = 16
GAIN = 192.0
DYNAMIC_RANGE_V = 2.4


@dataclass(frozen=True)
class PipelineConfig:
    window_length: int = 200  # samples, 97.7 ms at 2048 Hz
    window_step: int = 25
    emg_norm_volts: float = 5e-3
    moving_average_order: int = 20
    angle_offset_deg: float = 150.0
    angle_span_deg: float = 240.0
    history: int = 64  # samples at the processed rate; 0.78 s
    emg_stride: int = 4
    angle_stride: int = 8

    def processed_rate(self, fs: float = FS_EMG) -> float:
        return fs / self.window_step


DEFAULT_PIPELINE = PipelineConfig()


@dataclass
class RawEmgRecording:
    samples: np.ndarray  # (n, 96) int16 ADC codes
    fs: float = FS_EMG
    gain: float = GAIN
    dynamic_range: float = DYNAMIC_RANGE_V

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise ContractError("EMG samples must be (samples, channels)")
        if s.dtype.kind not in "iu":
            raise InputError("EMG samples must be integer ADC codes")
        if s.size and (s.min() < -(2 ** (ADC_BITS - 1)) or s.max() >= 2 ** (ADC_BITS - 1)):
            raise InputError("EMG codes exceed the 16-bit range")
        self.samples = s

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.fs

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]


@dataclass
class ProcessedEmg:
    envelope: np.ndarray  # (l, channels)
    rate: float
    n_above_one: int = 0

    def __len__(self):
        return len(self.envelope)


@dataclass
class ProcessedAngles:
    trajectories: np.ndarray  # (l, 24) normalised
    rate: float
    flagged_frames: int = 0
    ik_error_mm: float = float("nan")
    markers: np.ndarray | None = field(default=None, repr=False)  # (l, 23, 3) resampled raw markers

    def __len__(self):
        return len(self.trajectories)


def processed_length(n_samples: int, cfg: PipelineConfig = DEFAULT_PIPELINE) -> int:
    """Number of RMS windows for ``n_samples`` raw samples."""
    if n_samples < cfg.window_length:
        raise InputTooShortError(
            f"recording has {n_samples} samples, shorter than one {cfg.window_length}-sample window"
        )
    return (n_samples - cfg.window_length) // cfg.window_step + 1


def envelope_timestamps(length: int, fs: float = FS_EMG, cfg: PipelineConfig = DEFAULT_PIPELINE) -> np.ndarray:
    """Seconds from recording start; each RMS sample is stamped at the causal end of its window."""
    return (np.arange(length) * cfg.window_step + cfg.window_length) / fs


def codes_to_volts(codes: np.ndarray, gain: float = GAIN, dynamic_range: float = DYNAMIC_RANGE_V) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * (dynamic_range / 2 ** ADC_BITS / gain)


def sliding_rms(x: np.ndarray, window: int, step: int) -> np.ndarray:
    """RMS of ``x[i*step : i*step + window]`` along axis 0 for every full window."""
    n = x.shape[0]
    count = (n - window) // step + 1
    cs = np.zeros((n + 1,) + x.shape[1:])
    np.cumsum(x * x, axis=0, out=cs[1:])
    starts = np.arange(count) * step
    ms = (cs[starts + window] - cs[starts]) / window
    return np.sqrt(np.maximum(ms, 0.0))


def emg_postprocess(raw: RawEmgRecording, cfg: PipelineConfig = DEFAULT_PIPELINE,
                    chunk_channels: int = 16) -> ProcessedEmg:
    """Bits to volts, offset removal, rectification, /5 mV, sliding RMS."""
    n, C = raw.samples.shape
    length = processed_length(n, cfg)
    env = np.empty((length, C))
    for c0 in range(0, C, chunk_channels):
        v = codes_to_volts(raw.samples[:, c0:c0 + chunk_channels], raw.gain, raw.dynamic_range)
        v -= v.mean(axis=0)
        np.abs(v, out=v)
        v /= cfg.emg_norm_volts
        env[:, c0:c0 + chunk_channels] = sliding_rms(v, cfg.window_length, cfg.window_step)
    above = int((env > 1.0).sum())
    if above:
        warnings.warn(f"{above} envelope values exceed 1 (EMG above {cfg.emg_norm_volts * 1e3:g} mV); "
                      "kept unclamped", DataQualityWarning, stacklevel=2)
    return ProcessedEmg(envelope=env, rate=raw.fs / cfg.window_step, n_above_one=above)


def moving_average(x: np.ndarray, order: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Causal moving average along axis 0; the window shrinks at the start.

    Samples marked invalid (or NaN) are left out of each window.  Outputs whose
    whole window is invalid are NaN.
    """
    x = np.asarray(x, dtype=float)
    if valid is None:
        valid = np.isfinite(x)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool).reshape(valid.shape + (1,) * (x.ndim - valid.ndim)), x.shape)
        valid = valid & np.isfinite(x)
    xv = np.where(valid, x, 0.0)
    cs = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(xv, axis=0)])
    cn = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(valid, axis=0)])
    idx = np.arange(x.shape[0])
    lo = np.maximum(idx + 1 - order, 0)
    s = cs[idx + 1] - cs[lo]
    c = cn[idx + 1] - cn[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(c > 0, s / np.maximum(c, 1), np.nan)


def normalize_angles(angles_deg: np.ndarray, rest_deg: np.ndarray, cfg: PipelineConfig = DEFAULT_PIPELINE) -> np.ndarray:
    return (np.asarray(angles_deg) - rest_deg + cfg.angle_offset_deg) / cfg.angle_span_deg


def denormalize_angles(norm: np.ndarray, rest_deg: np.ndarray, cfg: PipelineConfig = DEFAULT_PIPELINE) -> np.ndarray:
    return np.asarray(norm) * cfg.angle_span_deg - cfg.angle_offset_deg + rest_deg


def resample_markers(markers: np.ndarray, times: np.ndarray, fs: float = FS_MARKERS) -> np.ndarray:
    """Linear interpolation of a (F, 23, 3) marker stream onto ``times`` (s)."""
    F = markers.shape[0]
    src = np.arange(F) / fs
    flat = markers.reshape(F, -1)
    out = np.empty((len(times), flat.shape[1]))
    for k in range(flat.shape[1]):
        ok = np.isfinite(flat[:, k])
        out[:, k] = np.interp(times, src[ok], flat[ok, k]) if ok.any() else np.nan
    return out.reshape((len(times),) + markers.shape[1:])


def position_postprocess(markers: np.ndarray, model: KinematicModel, target_length: int,
                         validity: np.ndarray | None = None,
                         emg_duration_s: float | None = None,
                         fs_markers: float = FS_MARKERS, fs_emg: float = FS_EMG,
                         cfg: PipelineConfig = DEFAULT_PIPELINE,
                         keep_markers: bool = False) -> ProcessedAngles:
    """Moving average, IK, rest subtraction, normalisation and resampling.

    ``markers`` is a (F, 23, 3) stream at ``fs_markers``; the result has
    ``target_length`` samples stamped like the EMG envelope.
    """
    markers = np.asarray(markers, dtype=float)
    if markers.ndim != 3 or markers.shape[1:] != (N_MARKERS, 3):
        raise ContractError(f"expected (F, {N_MARKERS}, 3) markers, got {markers.shape}")
    F = markers.shape[0]
    if validity is None:
        validity = np.isfinite(markers).all(axis=2)
    period = 1.0 / fs_markers
    if emg_duration_s is not None and abs(F / fs_markers - emg_duration_s) > period:
        raise AlignmentError(
            f"marker stream lasts {F / fs_markers:.3f} s but EMG lasts {emg_duration_s:.3f} s"
        )
    times = envelope_timestamps(target_length, fs_emg, cfg)
    if len(times) and times[-1] > (F - 1) / fs_markers + period:
        raise AlignmentError(
            f"EMG envelope reaches {times[-1]:.3f} s but markers end at {(F - 1) / fs_markers:.3f} s"
        )

    smoothed = moving_average(markers, cfg.moving_average_order, validity)
    smooth_valid = np.isfinite(smoothed).all(axis=2)
    ik = inverse_kinematics_batch(model, smoothed, smooth_valid)
    bad = ik.flagged | ~ik.converged
    good = np.flatnonzero(~bad)
    if len(good) == 0:
        raise InputError("inverse kinematics failed on every frame")
    norm = normalize_angles(ik.angles, model.rest_angles, cfg)
    src = np.arange(F) / fs_markers
    out = np.empty((target_length, N_DOF))
    for j in range(N_DOF):
        out[:, j] = np.interp(times, src[good], norm[good, j])
    res = ProcessedAngles(
        trajectories=out,
        rate=fs_emg / cfg.window_step,
        flagged_frames=int(bad.sum()),
        ik_error_mm=float(ik.approximation_error_mm[good].mean()),
    )
    if keep_markers:
        res.markers = resample_markers(np.where(validity[..., None], markers, np.nan), times, fs_markers)
    return res


@dataclass(frozen=True)
class WindowLayout:
    """Which history samples feed each branch, relative to the target index."""

    emg_samples: int = 16
    angle_samples: int = 8
    emg_stride: int = 4
    angle_stride: int = 8
    start: int = 64  # first usable target index

    def __post_init__(self):
        if self.emg_samples * self.emg_stride > self.start or self.angle_samples * self.angle_stride > self.start:
            raise ContractError("window spans more history than the first usable index provides")

    @property
    def emg_offsets(self) -> np.ndarray:
        return self.emg_stride * (np.arange(self.emg_samples) - self.emg_samples)

    @property
    def angle_offsets(self) -> np.ndarray:
        return self.angle_stride * (np.arange(self.angle_samples) - self.angle_samples)


DEFAULT_LAYOUT = WindowLayout()


class TrainingWindows:
    """Lazy view of all (emg_input, angle_input, target) triples of one trial.

    Window ``k`` targets sample ``t = layout.start + k``.  EMG inputs are the
    samples ``t + layout.emg_offsets`` flattened sample-major
    (``index = sample * channels + channel``); angle inputs likewise.
    """

    def __init__(self, emg: np.ndarray, angles: np.ndarray, layout: WindowLayout = DEFAULT_LAYOUT,
                 channels: np.ndarray | None = None):
        emg = np.asarray(emg)
        angles = np.asarray(angles)
        if len(emg) != len(angles):
            raise AlignmentError(f"EMG has {len(emg)} samples but angles have {len(angles)}")
        if len(emg) <= layout.start:
            raise InputTooShortError(f"need more than {layout.start} samples, got {len(emg)}")
        self.emg = emg if channels is None else emg[:, channels]
        self.angles = angles
        self.layout = layout
        self.targets_index = np.arange(layout.start, len(emg))

    def __len__(self):
        return len(self.targets_index)

    @property
    def emg_input_size(self) -> int:
        return self.layout.emg_samples * self.emg.shape[1]

    @property
    def angle_input_size(self) -> int:
        return self.layout.angle_samples * self.angles.shape[1]

    def batch(self, k: np.ndarray, dtype=np.float64):
        t = self.targets_index[np.asarray(k)]
        e = self.emg[t[:, None] + self.layout.emg_offsets].reshape(len(t), -1)
        a = self.angles[t[:, None] + self.layout.angle_offsets].reshape(len(t), -1)
        return e.astype(dtype, copy=False), a.astype(dtype, copy=False), self.angles[t].astype(dtype, copy=False)

    def __getitem__(self, k: int):
        e, a, y = self.batch(np.array([k]))
        return (e[0].reshape(self.layout.emg_samples, -1),
                a[0].reshape(self.layout.angle_samples, -1), y[0])


def make_training_windows(emg: ProcessedEmg | np.ndarray, angles: ProcessedAngles | np.ndarray,
                          layout: WindowLayout = DEFAULT_LAYOUT,
                          channels: np.ndarray | None = None) -> TrainingWindows:
    e = emg.envelope if isinstance(emg, ProcessedEmg) else emg
    a = angles.trajectories if isinstance(angles, ProcessedAngles) else angles
    return TrainingWindows(e, a, layout, channels)
