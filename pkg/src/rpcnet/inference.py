"""Closed-loop inference and output smoothing."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .errors import ContractError, InputTooShortError
from .kinematics import N_DOF, TIP_MARKERS, KinematicModel, forward_kinematics_array
from .network import RpcNet
from .signals import DEFAULT_PIPELINE, FS_EMG, PipelineConfig, ProcessedEmg, denormalize_angles

REST_NORMALISED = DEFAULT_PIPELINE.angle_offset_deg / DEFAULT_PIPELINE.angle_span_deg  # 0.625


@lru_cache(maxsize=16)
def butterworth_lowpass(order: int = 4, cutoff_hz: float = 1.0, fs: float = FS_EMG / 25) -> tuple[np.ndarray, np.ndarray]:
    """Transfer function ``(b, a)`` of a digital Butterworth low-pass.

    The analog prototype is discretised by impulse invariance and rescaled
    to unit DC gain, which keeps the stop-band close to the analog response
    ``1 / sqrt(1 + (f / fc) ** (2 * order))`` at this low sampling rate.
    The leading numerator coefficient is zero (a one-sample delay), which a
    second-order-section form cannot express, so the filter stays in
    transfer-function form.
    """
    b, a = signal.butter(order, 2 * np.pi * cutoff_hz, analog=True)
    bd, ad, _ = signal.cont2discrete((b, a), 1.0 / fs, method="impulse")
    bd = np.ravel(bd)
    bd = bd * (ad.sum() / bd.sum())
    return bd, np.asarray(ad)


def lowpass(x: np.ndarray, fs: float, order: int = 4, cutoff_hz: float = 1.0) -> np.ndarray:
    """Causal filtering along axis 0, started in steady state at the first sample."""
    x = np.asarray(x, dtype=float)
    b, a = butterworth_lowpass(order, float(cutoff_hz), float(fs))
    zi = signal.lfilter_zi(b, a)
    zi = zi.reshape(zi.shape + (1,) * (x.ndim - 1)) * x[0]
    y, _ = signal.lfilter(b, a, x, axis=0, zi=zi)
    return y


def infer_recursive(net: RpcNet, emg: ProcessedEmg | np.ndarray, seed_history: np.ndarray | None = None,
                    chunk: int = 1024) -> np.ndarray:
    """Closed-loop estimates (l - start, 24), normalised and unfiltered.

    The angle history starts as ``seed_history`` (``start`` x 24; defaults to
    the normalised rest pose) and each new estimate is pushed into it
    unclamped.  Variants without an angle branch never read the history.
    """
    env = emg.envelope if isinstance(emg, ProcessedEmg) else np.asarray(emg)
    if net.channels is not None:
        env = env[:, net.channels]
    lay = net.layout
    start = lay.start
    if len(env) <= start:
        raise InputTooShortError(f"need more than {start} EMG samples, got {len(env)}")
    n_total = len(env)
    buf = np.empty((n_total, N_DOF), dtype=net.dtype)
    if seed_history is None:
        buf[:start] = REST_NORMALISED
    else:
        seed_history = np.asarray(seed_history)
        if seed_history.shape != (start, N_DOF):
            raise ContractError(f"seed history must be ({start}, {N_DOF}), got {seed_history.shape}")
        buf[:start] = seed_history
    env = env.astype(net.dtype, copy=False)
    p = net.params
    we = net.config.emg_hidden_width
    recursive = net.config.has_angle_branch
    if recursive:
        w_ra = p["root.0.W"][:, we:, :]
        w_re = p["root.0.W"][:, :we, :]
    for t0 in range(start, n_total, chunk):
        idx = np.arange(t0, min(t0 + chunk, n_total))
        e = env[idx[:, None] + lay.emg_offsets].reshape(len(idx), -1)
        h = net.emg_features(e)
        if not recursive:
            r = np.maximum(np.matmul(h, p["root.0.W"]) + p["root.0.b"][:, None, :], 0)
            out = np.matmul(r, p["root.1.W"]) + p["root.1.b"][:, None, :]
            buf[idx] = np.transpose(out, (1, 0, 2)).reshape(len(idx), N_DOF)
            continue
        # EMG contribution to the root is independent of the recursion
        pre = np.matmul(h, w_re) + p["root.0.b"][:, None, :]
        wa0, ba0 = p["angle.0.W"], p["angle.0.b"][:, None, :]
        wa1, ba1 = p["angle.1.W"], p["angle.1.b"][:, None, :]
        wr1, br1 = p["root.1.W"], p["root.1.b"][:, None, :]
        offs = lay.angle_offsets
        for i, t in enumerate(idx):
            a = buf[t + offs].reshape(1, -1)
            g = np.maximum(np.matmul(a, wa0) + ba0, 0)
            g = np.maximum(np.matmul(g, wa1) + ba1, 0)
            r = np.maximum(pre[:, i:i + 1] + np.matmul(g, w_ra), 0)
            buf[t] = (np.matmul(r, wr1) + br1).reshape(N_DOF)
    return buf[start:].astype(np.float64)


@dataclass
class SmoothedEstimate:
    normalised: np.ndarray  # (T, 24) filtered
    angles_deg: np.ndarray  # (T, 24)
    markers: np.ndarray  # (T, 23, 3)

    @property
    def fingertips(self) -> dict[str, np.ndarray]:
        return {d: self.markers[:, i] for d, i in TIP_MARKERS.items()}


def smooth_and_project(raw: np.ndarray, model: KinematicModel, fs: float | None = None,
                       cfg: PipelineConfig = DEFAULT_PIPELINE, cutoff_hz: float = 1.0,
                       order: int = 4) -> SmoothedEstimate:
    """4th-order 1 Hz causal low-pass, denormalisation, then forward kinematics."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != N_DOF:
        raise ContractError(f"expected (T, {N_DOF}) estimates, got {raw.shape}")
    fs = cfg.processed_rate(FS_EMG) if fs is None else fs
    filt = lowpass(raw, fs, order, cutoff_hz)
    deg = denormalize_angles(filt, model.rest_angles, cfg)
    return SmoothedEstimate(filt, deg, forward_kinematics_array(model, deg))
