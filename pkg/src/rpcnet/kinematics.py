"""24-DoF hand model: forward kinematics and the three-phase inverse kinematics.

Conventions
-----------
Palm frame: x points distally, y radially (towards the thumb), z dorsally,
origin at the wrist centre.  The forearm frame coincides with the palm frame
when the wrist angles are zero; poses are expressed in the forearm frame, so
the wrist never translates.

Wrist angles are intrinsic rotations about x (pronation-supination),
y (flexion-extension) and z (adduction-abduction), composed in x-y-z order:
``R = Rx(ps) @ Ry(-fe) @ Rz(aa)``.  The y rotation is negated so that, as for
every other flexion-extension DoF, positive angles are extensions.  Each
finger chain applies ``Ry(-fe) @ Rz(aa)`` at its MP joint and ``Ry(-fe)`` at
IP and ID; the thumb additionally abducts at IP.  With every angle at zero the
finger markers lie on the palm plane (K) on lines along x, perpendicular to
the knuckle line (Q, the palm y axis); the thumb markers lie on the thumb
plane (T) along the thumb x axis, perpendicular to line H (thumb y axis).

Markers (23 slots): 6 palm, 3 per finger for index/middle/ring/little, 3 for
the thumb, then 2 fixed forearm markers.  The third marker of each digit is
its tip.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DegeneratePoseError, InputError
from .solver import SolverSettings, solve_box_least_squares

FINGERS = ("index", "middle", "ring", "little")
DIGITS = FINGERS + ("thumb",)
_DIGIT_CODE = {"index": "IN", "middle": "MI", "ring": "RI", "little": "LI", "thumb": "TH"}


@dataclass(frozen=True)
class DofSpec:
    name: str
    joint: str
    kind: str  # "flexion-extension" | "adduction-abduction" | "pronation-supination"
    axis: str  # rotation axis in the parent frame


def _build_dof_table() -> tuple[DofSpec, ...]:
    table = [
        DofSpec("WRIS_PS", "WRIS", "pronation-supination", "+x"),
        DofSpec("WRIS_FE", "WRIS", "flexion-extension", "-y"),
        DofSpec("WRIS_AA", "WRIS", "adduction-abduction", "+z"),
    ]
    for digit in FINGERS:
        c = _DIGIT_CODE[digit]
        table += [
            DofSpec(f"{c}MP_FE", f"{c}MP", "flexion-extension", "-y"),
            DofSpec(f"{c}MP_AA", f"{c}MP", "adduction-abduction", "+z"),
            DofSpec(f"{c}IP_FE", f"{c}IP", "flexion-extension", "-y"),
            DofSpec(f"{c}ID_FE", f"{c}ID", "flexion-extension", "-y"),
        ]
    table += [
        DofSpec("THMP_FE", "THMP", "flexion-extension", "-y"),
        DofSpec("THMP_AA", "THMP", "adduction-abduction", "+z"),
        DofSpec("THIP_FE", "THIP", "flexion-extension", "-y"),
        DofSpec("THIP_AA", "THIP", "adduction-abduction", "+z"),
        DofSpec("THID_FE", "THID", "flexion-extension", "-y"),
    ]
    return tuple(table)


DOF_TABLE = _build_dof_table()
DOF_NAMES = tuple(d.name for d in DOF_TABLE)
N_DOF = 24
WRIST_DOFS = slice(0, 3)
DIGIT_DOFS = {
    "index": slice(3, 7),
    "middle": slice(7, 11),
    "ring": slice(11, 15),
    "little": slice(15, 19),
    "thumb": slice(19, 24),
}

MARKER_NAMES = (
    tuple(f"PALM{i + 1}" for i in range(6))
    + tuple(f"{_DIGIT_CODE[d]}{i + 1}" for d in DIGITS for i in range(3))
    + ("FORE1", "FORE2")
)
N_MARKERS = 23
N_HAND_MARKERS = 21
PALM_MARKERS = slice(0, 6)
DIGIT_MARKERS = {d: slice(6 + 3 * i, 9 + 3 * i) for i, d in enumerate(DIGITS)}
FOREARM_MARKERS = slice(21, 23)
TIP_MARKERS = {d: DIGIT_MARKERS[d].stop - 1 for d in DIGITS}

IK_SETTINGS = SolverSettings()


@dataclass(frozen=True)
class KinematicModel:
    segment_lengths: dict  # digit -> (3,) mm
    finger_bases: dict  # digit -> (3,) mm, palm frame
    thumb_frame_deg: tuple  # (yaw, roll)
    palm_marker_layout: np.ndarray  # (6, 3)
    forearm_markers: np.ndarray  # (2, 3)
    joint_limits: np.ndarray  # (24, 2) degrees
    rest_angles: np.ndarray  # (24,) degrees
    dof_table: tuple = DOF_TABLE

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.dof_table) != N_DOF:
            raise ConfigError(f"expected {N_DOF} DoFs, got {len(self.dof_table)}")
        lim = np.asarray(self.joint_limits, dtype=float)
        if lim.shape != (N_DOF, 2) or not np.all(lim[:, 0] < lim[:, 1]):
            raise ConfigError("joint limits must be (24, 2) with min < max")
        rest = np.asarray(self.rest_angles, dtype=float)
        if rest.shape != (N_DOF,):
            raise ConfigError("rest_angles must have 24 entries")
        if np.any(rest < lim[:, 0]) or np.any(rest > lim[:, 1]):
            bad = [DOF_NAMES[i] for i in np.flatnonzero((rest < lim[:, 0]) | (rest > lim[:, 1]))]
            raise ConfigError(f"rest angles outside joint limits: {bad}")
        for d in DIGITS:
            seg = np.asarray(self.segment_lengths[d], dtype=float)
            if seg.shape != (3,) or np.any(seg <= 0):
                raise ConfigError(f"segment lengths for {d} must be 3 positive values")
        if np.asarray(self.palm_marker_layout).shape != (6, 3):
            raise ConfigError("palm marker layout must be (6, 3)")

    @property
    def thumb_rotation(self) -> np.ndarray:
        yaw, roll = np.radians(self.thumb_frame_deg)
        return _rz(np.array([yaw]))[0] @ _rx(np.array([roll]))[0]

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.joint_limits)[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.joint_limits)[:, 1]

    @classmethod
    def from_dict(cls, cfg: dict) -> "KinematicModel":
        try:
            joints = cfg["joints"]
            limits = np.array([joints[n]["limits"] for n in DOF_NAMES], dtype=float)
            rest = np.array([joints[n]["rest"] for n in DOF_NAMES], dtype=float)
            return cls(
                segment_lengths={d: np.array(cfg["segment_lengths_mm"][d], dtype=float) for d in DIGITS},
                finger_bases={d: np.array(cfg["finger_bases_mm"][d], dtype=float) for d in DIGITS},
                thumb_frame_deg=(float(cfg["thumb_frame_deg"]["yaw"]), float(cfg["thumb_frame_deg"]["roll"])),
                palm_marker_layout=np.array(cfg["palm_markers_mm"], dtype=float),
                forearm_markers=np.array(cfg["forearm_markers_mm"], dtype=float),
                joint_limits=limits,
                rest_angles=rest,
            )
        except KeyError as exc:
            raise ConfigError(f"hand model config is missing {exc}") from None

    def to_dict(self) -> dict:
        return {
            "segment_lengths_mm": {d: [float(v) for v in self.segment_lengths[d]] for d in DIGITS},
            "finger_bases_mm": {d: [float(v) for v in self.finger_bases[d]] for d in DIGITS},
            "thumb_frame_deg": {"yaw": self.thumb_frame_deg[0], "roll": self.thumb_frame_deg[1]},
            "palm_markers_mm": np.asarray(self.palm_marker_layout).tolist(),
            "forearm_markers_mm": np.asarray(self.forearm_markers).tolist(),
            "joints": {
                n: {"limits": [float(lo), float(hi)], "rest": float(r)}
                for n, (lo, hi), r in zip(DOF_NAMES, self.joint_limits, self.rest_angles)
            },
        }


def load_model(path: str | Path | None = None) -> KinematicModel:
    """Read a hand model config; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("rpcnet").joinpath("hand_model.json").read_text()
    else:
        text = Path(path).read_text()
    return KinematicModel.from_dict(json.loads(text))


def save_model(model: KinematicModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2))


def default_model() -> KinematicModel:
    return load_model(None)


@dataclass
class JointAngles:
    values: np.ndarray  # (24,) degrees, dof_table order
    timestamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (N_DOF,):
            raise ContractError(f"JointAngles needs {N_DOF} values, got shape {self.values.shape}")


@dataclass
class HandPose3D:
    markers: np.ndarray  # (23, 3) mm
    timestamp: float = 0.0
    validity: np.ndarray | None = None  # (23,) bool

    def __post_init__(self):
        self.markers = np.asarray(self.markers, dtype=float)
        if self.markers.shape != (N_MARKERS, 3):
            raise ContractError(f"HandPose3D needs ({N_MARKERS}, 3) markers, got {self.markers.shape}")
        if self.validity is None:
            self.validity = np.isfinite(self.markers).all(axis=1)
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
        if not np.isfinite(self.markers[self.validity]).all():
            raise InputError("valid markers must have finite coordinates")


@dataclass
class IkResult:
    angles: JointAngles
    approximation_error_mm: float
    per_phase_iterations: tuple
    converged: bool = True
    flagged: bool = False


@dataclass
class IkBatchResult:
    angles: np.ndarray  # (F, 24) degrees
    approximation_error_mm: np.ndarray  # (F,)
    iterations: np.ndarray  # (F, 3) phase 1, 2 (sum over fingers), 3
    converged: np.ndarray  # (F,)
    flagged: np.ndarray  # (F,) a digit or the wrist was held from the previous frame

    def __len__(self):
        return len(self.angles)


# -- rotations -------------------------------------------------------------

def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([o, z, z, z, c, -s, z, s, c], axis=-1).reshape(a.shape + (3, 3))


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([c, z, s, z, o, z, -s, z, c], axis=-1).reshape(a.shape + (3, 3))


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([c, -s, z, s, c, z, z, z, o], axis=-1).reshape(a.shape + (3, 3))


def wrist_rotation(angles_rad: np.ndarray) -> np.ndarray:
    """Rotation matrices for (F, 3) wrist angles (ps, fe, aa) in radians."""
    return _rx(angles_rad[:, 0]) @ _ry(-angles_rad[:, 1]) @ _rz(angles_rad[:, 2])


def _digit_chain(model: KinematicModel, digit: str, a: np.ndarray) -> np.ndarray:
    """Palm-frame marker positions (F, 3, 3) of one digit for radian angles (F, 4|5)."""
    base = model.finger_bases[digit]
    L = model.segment_lengths[digit]
    R = _ry(-a[:, 0]) @ _rz(a[:, 1])
    if digit == "thumb":
        R = model.thumb_rotation @ R
    m1 = base + R[:, :, 0] * L[0]
    if digit == "thumb":
        R = R @ _ry(-a[:, 2]) @ _rz(a[:, 3])
        last = a[:, 4]
    else:
        R = R @ _ry(-a[:, 2])
        last = a[:, 3]
    m2 = m1 + R[:, :, 0] * L[1]
    R = R @ _ry(-last)
    m3 = m2 + R[:, :, 0] * L[2]
    return np.stack([m1, m2, m3], axis=1)


def _check_angles(angles: np.ndarray) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    if angles.ndim == 1:
        angles = angles[None]
    if angles.ndim != 2 or angles.shape[1] != N_DOF:
        raise ContractError(f"expected {N_DOF} joint angles per frame, got shape {angles.shape}")
    if not np.isfinite(angles).all():
        raise InputError("joint angles must be finite")
    return angles


def forward_kinematics_array(model: KinematicModel, angles_deg: np.ndarray) -> np.ndarray:
    """Marker positions (F, 23, 3) for joint angles (F, 24) in degrees."""
    angles = _check_angles(angles_deg)
    a = np.radians(angles)
    F = len(a)
    Rw = wrist_rotation(a[:, WRIST_DOFS])
    local = np.empty((F, N_MARKERS, 3))
    local[:, PALM_MARKERS] = model.palm_marker_layout
    for d in DIGITS:
        local[:, DIGIT_MARKERS[d]] = _digit_chain(model, d, a[:, DIGIT_DOFS[d]])
    out = np.einsum("fij,fkj->fki", Rw, local[:, :N_HAND_MARKERS])
    forearm = np.broadcast_to(model.forearm_markers, (F, 2, 3))
    return np.concatenate([out, forearm], axis=1)


def forward_kinematics(model: KinematicModel, angles: JointAngles) -> HandPose3D:
    if not isinstance(angles, JointAngles):
        angles = JointAngles(np.asarray(angles, dtype=float))
    markers = forward_kinematics_array(model, angles.values)[0]
    return HandPose3D(markers=markers, timestamp=angles.timestamp)


# -- inverse kinematics ----------------------------------------------------

def _euler_xyz(R: np.ndarray) -> np.ndarray:
    """(ps, fe, aa) radians from rotation matrices built as wrist_rotation does."""
    a = np.arctan2(-R[:, 1, 2], R[:, 2, 2])
    b = np.arcsin(np.clip(R[:, 0, 2], -1.0, 1.0))
    c = np.arctan2(-R[:, 0, 1], R[:, 0, 0])
    return np.stack([a, -b, c], axis=1)


def _palm_ok(layout: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per frame: at least 3 valid palm markers that are not collinear."""
    ok = valid.sum(axis=1) >= 3
    w = valid.astype(float)
    cnt = np.maximum(w.sum(axis=1), 1.0)
    centroid = (w[:, :, None] * layout).sum(axis=1) / cnt[:, None]
    centred = (layout - centroid[:, None, :]) * w[:, :, None]
    sv = np.linalg.svd(centred, compute_uv=False)
    scale = np.maximum(sv[:, 0], 1e-12)
    return ok & (sv[:, 1] > 1e-6 * scale)


def _phase1(model: KinematicModel, palm_obs: np.ndarray, palm_valid: np.ndarray):
    """Best-fit wrist rotation (Procrustes about the wrist centre)."""
    layout = np.asarray(model.palm_marker_layout)
    w = palm_valid.astype(float)
    H = np.einsum("fk,ki,fkj->fij", w, layout, np.nan_to_num(palm_obs))
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros((len(H), 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    ang = np.degrees(_euler_xyz(R))
    lo, hi = model.lower[WRIST_DOFS], model.upper[WRIST_DOFS]
    return np.clip(ang, lo, hi)


def ik_phase1_wrist(model: KinematicModel, pose: HandPose3D) -> np.ndarray:
    """Wrist (ps, fe, aa) in degrees from the six palm markers."""
    valid = pose.validity[PALM_MARKERS][None]
    if not _palm_ok(np.asarray(model.palm_marker_layout), valid)[0]:
        raise DegeneratePoseError("fewer than 3 non-collinear valid palm markers")
    return _phase1(model, pose.markers[None, PALM_MARKERS], valid)[0]


def _solve_digit(model, digit, palm_frame_obs, x0_deg, settings):
    lo = np.radians(model.lower[DIGIT_DOFS[digit]])
    hi = np.radians(model.upper[DIGIT_DOFS[digit]])
    target = palm_frame_obs.reshape(len(palm_frame_obs), 9)

    def residual(x, rows):
        return _digit_chain(model, digit, x).reshape(len(x), 9) - target[rows]

    res = solve_box_least_squares(residual, np.radians(x0_deg), lo, hi, settings)
    # clip in degrees as well so round-off never leaves the box
    ang = np.clip(np.degrees(res.x), model.lower[DIGIT_DOFS[digit]], model.upper[DIGIT_DOFS[digit]])
    return ang, res


def _to_palm_frame(model, markers, wrist_deg):
    Rw = wrist_rotation(np.radians(wrist_deg))
    return np.einsum("fji,fkj->fki", Rw, markers)


def _ik_digit(model, pose_palm, digit, settings):
    x0 = np.broadcast_to(model.rest_angles[DIGIT_DOFS[digit]], (len(pose_palm), DIGIT_DOFS[digit].stop - DIGIT_DOFS[digit].start))
    return _solve_digit(model, digit, pose_palm[:, DIGIT_MARKERS[digit]], x0, settings)


def ik_phase2_finger(model: KinematicModel, pose: HandPose3D, finger_id: str,
                     settings: SolverSettings = IK_SETTINGS, wrist_deg=None):
    """(MP F-E, MP A-A, IP F-E, ID F-E) for one finger, in degrees.

    Returns ``(angles, converged)``.  ``wrist_deg`` defaults to the phase 1
    estimate for the same pose.
    """
    if finger_id not in FINGERS:
        raise InputError(f"unknown finger {finger_id!r}; expected one of {FINGERS}")
    return _single_digit(model, pose, finger_id, settings, wrist_deg)


def ik_phase3_thumb(model: KinematicModel, pose: HandPose3D,
                    settings: SolverSettings = IK_SETTINGS, wrist_deg=None):
    """(MP F-E, MP A-A, IP F-E, IP A-A, ID F-E) for the thumb, in degrees."""
    return _single_digit(model, pose, "thumb", settings, wrist_deg)


def _single_digit(model, pose, digit, settings, wrist_deg):
    if not pose.validity[DIGIT_MARKERS[digit]].all():
        raise InputError(f"{digit} markers are not all valid")
    if wrist_deg is None:
        wrist_deg = ik_phase1_wrist(model, pose)
    palm = _to_palm_frame(model, pose.markers[None], np.asarray(wrist_deg, dtype=float)[None])
    ang, res = _ik_digit(model, palm, digit, settings)
    return ang[0], bool(res.converged[0])


def approximation_error(model: KinematicModel, angles_deg: np.ndarray, markers: np.ndarray,
                        valid: np.ndarray | None = None) -> np.ndarray:
    """Mean distance (mm) over valid hand markers between ``markers`` and FK(angles)."""
    est = forward_kinematics_array(model, angles_deg)[:, :N_HAND_MARKERS]
    obs = markers[:, :N_HAND_MARKERS]
    if valid is None:
        valid = np.isfinite(obs).all(axis=2)
    else:
        valid = valid[:, :N_HAND_MARKERS]
    dist = np.linalg.norm(np.nan_to_num(obs) - est, axis=2)
    return (dist * valid).sum(axis=1) / np.maximum(valid.sum(axis=1), 1)


def inverse_kinematics_batch(model: KinematicModel, markers: np.ndarray,
                             validity: np.ndarray | None = None,
                             settings: SolverSettings = IK_SETTINGS,
                             previous: np.ndarray | None = None) -> IkBatchResult:
    """Inverse kinematics for a stack of frames (F, 23, 3).

    Every frame is solved on its own from the rest angles.  When a digit's
    markers (or the palm) are missing in a frame, that digit keeps the value
    from the preceding frame (``previous`` for the first frame, else the rest
    angles) and the frame is flagged.
    """
    markers = np.asarray(markers, dtype=float)
    if markers.ndim == 2:
        markers = markers[None]
    if markers.shape[1:] != (N_MARKERS, 3):
        raise ContractError(f"expected (F, {N_MARKERS}, 3) markers, got {markers.shape}")
    F = len(markers)
    if validity is None:
        validity = np.isfinite(markers).all(axis=2)
    validity = np.asarray(validity, dtype=bool) & np.isfinite(markers).all(axis=2)

    angles = np.full((F, N_DOF), np.nan)
    iterations = np.zeros((F, 3), dtype=int)
    converged = np.ones(F, dtype=bool)

    palm_valid = validity[:, PALM_MARKERS]
    palm_ok = _palm_ok(np.asarray(model.palm_marker_layout), palm_valid)
    if palm_ok.any():
        angles[palm_ok, WRIST_DOFS] = _phase1(model, markers[palm_ok, PALM_MARKERS], palm_valid[palm_ok])
        iterations[palm_ok, 0] = 1

    solvable = {}
    for d in DIGITS:
        solvable[d] = palm_ok & validity[:, DIGIT_MARKERS[d]].all(axis=1)
    if palm_ok.any():
        palm = np.full_like(markers, np.nan)
        palm[palm_ok] = _to_palm_frame(model, markers[palm_ok], angles[palm_ok, WRIST_DOFS])
        for d in DIGITS:
            rows = np.flatnonzero(solvable[d])
            if len(rows) == 0:
                continue
            ang, res = _ik_digit(model, palm[rows], d, settings)
            angles[rows, DIGIT_DOFS[d]] = ang
            iterations[rows, 2 if d == "thumb" else 1] += res.iterations
            converged[rows] &= res.converged

    flagged = ~palm_ok
    for d in DIGITS:
        flagged |= ~solvable[d]
    if flagged.any():
        prev = np.asarray(model.rest_angles if previous is None else previous, dtype=float)
        for f in range(F):
            hole = np.isnan(angles[f])
            if hole.any():
                angles[f, hole] = prev[hole]
            prev = angles[f]

    err = approximation_error(model, angles, markers, validity)
    return IkBatchResult(angles=angles, approximation_error_mm=err, iterations=iterations,
                         converged=converged, flagged=flagged)


def inverse_kinematics(model: KinematicModel, pose: HandPose3D,
                       settings: SolverSettings = IK_SETTINGS,
                       previous: JointAngles | None = None) -> IkResult:
    """Joint angles for one pose: wrist, then each finger, then the thumb."""
    prev = None if previous is None else previous.values
    res = inverse_kinematics_batch(model, pose.markers[None], pose.validity[None], settings, prev)
    return IkResult(
        angles=JointAngles(res.angles[0], pose.timestamp),
        approximation_error_mm=float(res.approximation_error_mm[0]),
        per_phase_iterations=tuple(int(i) for i in res.iterations[0]),
        converged=bool(res.converged[0]),
        flagged=bool(res.flagged[0]),
    )


def calibrate_model(model: KinematicModel, rest_pose: HandPose3D) -> KinematicModel:
    """Rescale the model from one frame recorded with the hand at rest.

    The palm layout becomes the observed palm markers taken back into the palm
    frame; each digit's segment lengths become the base-to-first-marker and
    inter-marker distances.
    """
    if not rest_pose.validity[:N_HAND_MARKERS].all():
        raise InputError("calibration frame needs every hand marker")
    wrist = ik_phase1_wrist(model, rest_pose)
    palm = _to_palm_frame(model, rest_pose.markers[None], wrist[None])[0]
    lengths = {}
    for d in DIGITS:
        m = palm[DIGIT_MARKERS[d]]
        pts = np.vstack([model.finger_bases[d], m])
        lengths[d] = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return replace(model, segment_lengths=lengths, palm_marker_layout=palm[PALM_MARKERS].copy())
