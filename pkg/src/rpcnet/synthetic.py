"""Synthetic trials: smooth prompted hand motion, marker streams and activation-modulated EMG.

Motion follows a prompt schedule: every ``prompt_period_s`` the hand moves
to a pose drawn from a fixed template set, holds it for half the period and
relaxes back to rest.  The step targets are low-passed, a slow drift is
added to every joint, and the result is clipped to the joint limits.

Each joint drives two muscle pools (one per movement direction).  A pool's
activation mixes how far the joint is from rest and the rectified, low-passed
joint velocity in that direction.  Wrist pools are mostly tonic (holding the
wrist with the forearm upright takes sustained drive), while finger and
thumb pools are mostly phasic (a held finger posture needs little force), so
finger positions are only recoverable from EMG with movement history.  Pools reach the electrodes through a
sparse nonnegative mixing matrix built from Gaussian territories on the
grid, with flexor pools on columns 1-8 and extensor pools on columns 9-16.
Each channel is a 20-450 Hz Gaussian carrier scaled by its activation, plus
a noise floor, quantised to 16-bit codes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .dataio import GRID_METADATA, TrialRecord
from .errors import ConfigError
from .kinematics import N_DOF, DOF_NAMES, WRIST_DOFS, KinematicModel, forward_kinematics_array
from .signals import ADC_BITS, DYNAMIC_RANGE_V, FS_EMG, FS_MARKERS, GAIN, GRID_COLUMNS, GRID_ROWS, N_CHANNELS, RawEmgRecording

N_POOLS = 2 * N_DOF  # rows 0-23 move a joint below rest, rows 24-47 above


def _dof(name):
    return DOF_NAMES.index(name)


def _synergies() -> dict[str, np.ndarray]:
    """Coordinated joint patterns, degrees relative to rest."""
    s = {}

    def vec(**kw):
        v = np.zeros(N_DOF)
        for k, val in kw.items():
            v[_dof(k)] = val
        return v

    fingers = ("IN", "MI", "RI", "LI")
    s["grasp"] = vec(**{f"{f}MP_FE": -45 for f in fingers}, **{f"{f}IP_FE": -60 for f in fingers},
                     **{f"{f}ID_FE": -40 for f in fingers}, THMP_FE=-20, THIP_FE=-30, THID_FE=-30)
    s["open"] = vec(**{f"{f}MP_FE": 25 for f in fingers}, **{f"{f}IP_FE": 5 for f in fingers},
                    **{f"{f}MP_AA": a for f, a in zip(fingers, (-12, 0, 8, 15))}, THMP_AA=25)
    s["pinch"] = vec(INMP_FE=-35, INIP_FE=-45, INID_FE=-20, THMP_FE=-25, THMP_AA=20, THIP_FE=-25, THID_FE=-20)
    s["point"] = vec(MIMP_FE=-60, MIIP_FE=-70, RIMP_FE=-60, RIIP_FE=-70, LIMP_FE=-55, LIIP_FE=-65,
                     THIP_FE=-30, INMP_FE=15)
    s["wrist_flex"] = vec(WRIS_FE=-45)
    s["wrist_ext"] = vec(WRIS_FE=40)
    s["pronate"] = vec(WRIS_PS=45)
    s["supinate"] = vec(WRIS_PS=-45)
    s["radial"] = vec(WRIS_AA=15)
    s["ulnar"] = vec(WRIS_AA=-20)
    s["thumb_oppose"] = vec(THMP_FE=-35, THMP_AA=35, THIP_FE=-25, THIP_AA=10, THID_FE=-30)
    s["ring_little"] = vec(RIMP_FE=-50, RIIP_FE=-60, LIMP_FE=-50, LIIP_FE=-60, LIID_FE=-30)
    return s


_TEMPLATE_RECIPES = (
    {"grasp": 1.0}, {"open": 1.0}, {"pinch": 1.0}, {"point": 1.0},
    {"wrist_flex": 1.0}, {"wrist_ext": 1.0}, {"pronate": 1.0}, {"supinate": 1.0},
    {"radial": 1.0}, {"ulnar": 1.0}, {"thumb_oppose": 1.0}, {"ring_little": 1.0},
    {"grasp": 0.7, "wrist_ext": 0.6}, {"open": 0.8, "wrist_flex": 0.6}, {"pinch": 0.8, "pronate": 0.6},
    {"point": 0.8, "supinate": 0.5}, {"grasp": 0.5, "thumb_oppose": 0.7}, {"open": 0.6, "ulnar": 0.8},
)


def pose_templates() -> np.ndarray:
    """(18, 24) prompt poses in degrees relative to rest."""
    syn = _synergies()
    return np.array([sum(w * syn[k] for k, w in r.items()) for r in _TEMPLATE_RECIPES])


def make_mixing(seed: int, width: float = 1.6, threshold: float = 0.05) -> np.ndarray:
    """Sparse nonnegative (48, 96) pool-to-channel weights for one subject.

    Pools moving a joint below rest (flexion, ulnar deviation, supination)
    sit on columns 1-8, the opposite pools on columns 9-16.
    """
    rng = np.random.default_rng(seed)
    rows, cols = np.meshgrid(np.arange(GRID_ROWS), np.arange(GRID_COLUMNS), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()  # channel = row * 16 + column
    half = GRID_COLUMNS // 2
    m = np.zeros((N_POOLS, N_CHANNELS))
    for k in range(N_POOLS):
        c0 = (0 if k < N_DOF else half) + rng.uniform(0, half - 1)
        r0 = rng.uniform(0, GRID_ROWS - 1)
        w = np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * width ** 2))
        w[w < threshold] = 0.0
        m[k] = w * rng.uniform(0.6, 1.0)
    return m


@dataclass(frozen=True)
class SyntheticSpec:
    duration_s: float = 450.0
    seed: int = 0
    smoothness_hz: float = 0.6  # low-pass cutoff of the prompted trajectory
    mixing: np.ndarray | None = field(default=None, compare=False, repr=False)  # (48, 96), >= 0
    noise_level: float = 0.05  # noise floor as a fraction of the full-activation amplitude
    motion_scale: float = 1.0  # 0 gives a motionless hand
    prompt_period_s: float = 8.0
    drift_deg: float = 4.0
    amplitude_v: float = 0.5e-3  # carrier RMS at unit activation
    delay_s: float = 0.05  # EMG leads the movement it causes
    velocity_scale_dps: float = 120.0
    # share of pool drive from movement rather than held position, for finger/thumb and wrist joints
    velocity_weight: float = 0.85
    wrist_velocity_weight: float = 0.3
    # excursion (deg) giving unit position activation; None scales by the distance to each joint limit
    position_scale_deg: float | None = 45.0
    mixing_seed: int = 0  # used when ``mixing`` is None

    def __post_init__(self):
        if self.duration_s < 2.0:
            raise ConfigError("synthetic trials must last at least 2 s")
        if self.mixing is not None:
            m = np.asarray(self.mixing)
            if m.shape != (N_POOLS, N_CHANNELS):
                raise ConfigError(f"mixing matrix must be ({N_POOLS}, {N_CHANNELS}), got {m.shape}")
            if (m < 0).any() or not np.isfinite(m).all():
                raise ConfigError("mixing weights must be finite and nonnegative")
        if not (0 <= self.velocity_weight <= 1 and 0 <= self.wrist_velocity_weight <= 1):
            raise ConfigError("velocity weights must lie in [0, 1]")
        if self.position_scale_deg is not None and self.position_scale_deg <= 0:
            raise ConfigError("position_scale_deg must be positive")
        if self.noise_level < 0 or self.motion_scale < 0 or self.smoothness_hz <= 0:
            raise ConfigError("noise_level and motion_scale must be >= 0 and smoothness_hz > 0")

    def mixing_matrix(self) -> np.ndarray:
        return make_mixing(self.mixing_seed) if self.mixing is None else np.asarray(self.mixing, dtype=float)


def _rngs(seed: int):
    motion, emg = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(motion), np.random.default_rng(emg)


def synthetic_angles(spec: SyntheticSpec, model: KinematicModel) -> np.ndarray:
    """Joint angles (F, 24) in degrees at the marker rate."""
    rng, _ = _rngs(spec.seed)
    n = int(round(spec.duration_s * FS_MARKERS))
    t = np.arange(n) / FS_MARKERS
    templates = pose_templates()
    n_prompts = int(np.ceil(spec.duration_s / spec.prompt_period_s))
    which = rng.integers(0, len(templates), n_prompts)
    gains = rng.uniform(0.5, 1.0, n_prompts)
    jitter = rng.normal(0.0, 5.0, (n_prompts, N_DOF))
    prompt = np.minimum((t // spec.prompt_period_s).astype(int), n_prompts - 1)
    holding = (t % spec.prompt_period_s) < spec.prompt_period_s / 2
    target = np.where(holding[:, None], templates[which[prompt]] * gains[prompt, None] + jitter[prompt], 0.0)

    b, a = signal.butter(2, spec.smoothness_hz, fs=FS_MARKERS)
    smooth = signal.filtfilt(b, a, target, axis=0)
    bd, ad = signal.butter(2, 0.3, fs=FS_MARKERS)
    drift = signal.filtfilt(bd, ad, rng.normal(size=(n, N_DOF)), axis=0)
    drift *= spec.drift_deg / max(drift.std(), 1e-12)
    angles = model.rest_angles + spec.motion_scale * (smooth + drift)
    return np.clip(angles, model.lower, model.upper)


def pool_activations(angles: np.ndarray, model: KinematicModel, spec: SyntheticSpec) -> np.ndarray:
    """(F, 48) activations in [0, ~1.3] from joint angles at the marker rate."""
    dev = angles - model.rest_angles
    if spec.position_scale_deg is None:
        below = np.maximum(model.rest_angles - model.lower, 1e-6)
        above = np.maximum(model.upper - model.rest_angles, 1e-6)
    else:
        below = above = spec.position_scale_deg
    pos = np.concatenate([np.maximum(-dev, 0) / below, np.maximum(dev, 0) / above], axis=1)
    vel = np.gradient(angles, 1.0 / FS_MARKERS, axis=0)
    b, a = signal.butter(2, 3.0, fs=FS_MARKERS)
    vel = signal.filtfilt(b, a, vel, axis=0) / spec.velocity_scale_dps
    speed = np.concatenate([np.maximum(-vel, 0), np.maximum(vel, 0)], axis=1)
    w = np.full(angles.shape[1], spec.velocity_weight)
    w[WRIST_DOFS] = spec.wrist_velocity_weight
    w = np.tile(w, 2)
    return (1 - w) * pos + w * np.minimum(speed, 1.0)


def synthetic_emg(angles: np.ndarray, model: KinematicModel, spec: SyntheticSpec,
                  chunk_channels: int = 16) -> np.ndarray:
    """(n, 96) int16 ADC codes at 2048 Hz covering the same span as ``angles``."""
    _, rng = _rngs(spec.seed)
    n = int(round(angles.shape[0] / FS_MARKERS * FS_EMG))
    act = pool_activations(angles, model, spec)
    # channel amplitude at the marker rate, then to the EMG clock (leading by the delay)
    amp = act @ spec.mixing_matrix() * spec.amplitude_v
    t_emg = np.arange(n) / FS_EMG + spec.delay_s
    t_mk = np.arange(angles.shape[0]) / FS_MARKERS
    sos = signal.butter(4, [20.0, 450.0], btype="bandpass", fs=FS_EMG, output="sos")
    noise_v = spec.noise_level * spec.amplitude_v
    to_codes = GAIN * 2 ** ADC_BITS / DYNAMIC_RANGE_V
    lo, hi = -(2 ** (ADC_BITS - 1)), 2 ** (ADC_BITS - 1) - 1
    out = np.empty((n, N_CHANNELS), dtype=np.int16)
    for c0 in range(0, N_CHANNELS, chunk_channels):
        c1 = min(c0 + chunk_channels, N_CHANNELS)
        carrier = signal.sosfilt(sos, rng.standard_normal((n, c1 - c0)), axis=0)
        carrier /= carrier.std(axis=0)
        env = np.empty((n, c1 - c0))
        for j, c in enumerate(range(c0, c1)):
            env[:, j] = np.interp(t_emg, t_mk, amp[:, c])
        # an independent Gaussian noise floor adds in quadrature on a Gaussian carrier
        np.hypot(env, noise_v, out=env)
        carrier *= env
        carrier *= to_codes
        out[:, c0:c1] = np.clip(np.rint(carrier), lo, hi)
    return out


def generate_synthetic_trial(spec: SyntheticSpec, model: KinematicModel, subject_id: str = "synthetic",
                             trial_id: str | None = None, role: str = "train",
                             return_angles: bool = False):
    """A validated TrialRecord (and optionally its generating angles in degrees)."""
    angles = synthetic_angles(spec, model)
    markers = forward_kinematics_array(model, angles)
    emg = RawEmgRecording(synthetic_emg(angles, model, spec))
    meta = {"grid": GRID_METADATA, "prompt_period_s": spec.prompt_period_s, "synthetic": {
        "seed": spec.seed, "mixing_seed": spec.mixing_seed if spec.mixing is None else None,
        "duration_s": spec.duration_s, "noise_level": spec.noise_level, "motion_scale": spec.motion_scale,
        "smoothness_hz": spec.smoothness_hz}}
    rec = TrialRecord(subject_id, trial_id or f"{subject_id}-seed{spec.seed}", role, emg, markers, metadata=meta)
    return (rec, angles) if return_angles else rec


def subject_specs(subject: int, n_trials: int = 6, duration_s: float = 450.0, **kw) -> list[SyntheticSpec]:
    """Trial specs of one synthetic subject: a shared mixing matrix, one motion seed per trial."""
    return [SyntheticSpec(duration_s=duration_s, seed=1000 * (subject + 1) + i, mixing_seed=subject, **kw)
            for i in range(n_trials)]
