"""Trial and processed-data files.

Files use the container layout in :mod:`rpcnet.containers`:

* ``.rpct`` trial: ``emg`` (n, 96) ``<i2`` ADC codes, ``markers`` (F, 23, 3)
  ``<f8`` mm, ``validity`` (F, 23) ``|u1``; header meta holds ids, role,
  rates, gain and the electrode grid / prompt schedule description.
* ``.rpcp`` processed: ``envelope`` (l, 96) and ``angles`` (l, 24) ``<f8``
  plus optional ``markers`` (l, 23, 3).

Importers for other on-disk layouts register with :func:`register_importer`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import containers
from .errors import ChannelCountError, ConfigError, ContractError, DurationMismatchError
from .kinematics import MARKER_NAMES, N_MARKERS
from .signals import (FS_EMG, FS_MARKERS, GAIN, DYNAMIC_RANGE_V, GRID_COLUMNS, GRID_ROWS, N_CHANNELS,
                      ProcessedAngles, ProcessedEmg, RawEmgRecording)

TRIAL_SUFFIX = ".rpct"
PROCESSED_SUFFIX = ".rpcp"
CHECKPOINT_SUFFIX = ".rpcc"

GRID_METADATA = {"rows": GRID_ROWS, "columns": GRID_COLUMNS, "pitch_mm": [10.0, 15.0],
                 "channel_order": "row-major, channel = (row - 1) * 16 + (column - 1)"}
PROMPT_SCHEDULE = {"prompts": 54, "period_s": 8.0}


@dataclass
class TrialRecord:
    subject_id: str
    trial_id: str
    role: str  # "train" | "test"
    emg: RawEmgRecording
    markers: np.ndarray  # (F, 23, 3) mm at fs_markers, NaN where missing
    validity: np.ndarray | None = None  # (F, 23) bool
    fs_markers: float = FS_MARKERS
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.markers = np.asarray(self.markers, dtype=float)
        if self.validity is None:
            self.validity = np.isfinite(self.markers).all(axis=-1) if self.markers.ndim == 3 else None
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
        self.validate()

    def validate(self) -> None:
        if self.role not in ("train", "test"):
            raise ConfigError(f"trial role must be 'train' or 'test', got {self.role!r}")
        if self.emg.n_channels != N_CHANNELS:
            raise ChannelCountError(f"trial {self.trial_id}: expected {N_CHANNELS} EMG channels, found {self.emg.n_channels}")
        if self.markers.ndim != 3 or self.markers.shape[1:] != (N_MARKERS, 3):
            raise ContractError(f"trial {self.trial_id}: expected (F, {N_MARKERS}, 3) markers, got {self.markers.shape}")
        if self.validity.shape != self.markers.shape[:2]:
            raise ContractError(f"trial {self.trial_id}: validity mask shape {self.validity.shape} does not match markers")
        d_markers = self.markers.shape[0] / self.fs_markers
        if abs(d_markers - self.emg.duration) > 1.0 / self.fs_markers:
            raise DurationMismatchError(
                f"trial {self.trial_id}: EMG lasts {self.emg.duration:.4f} s but markers last {d_markers:.4f} s"
            )

    @property
    def duration(self) -> float:
        return self.emg.duration


def save_trial(path: str | Path, trial: TrialRecord) -> None:
    meta = {
        "subject_id": trial.subject_id, "trial_id": trial.trial_id, "role": trial.role,
        "fs_emg": trial.emg.fs, "fs_markers": trial.fs_markers, "gain": trial.emg.gain,
        "dynamic_range_v": trial.emg.dynamic_range, "metadata": trial.metadata,
    }
    containers.write(path, "trial", meta, {
        "emg": trial.emg.samples.astype("<i2"),
        "markers": trial.markers.astype("<f8"),
        "validity": trial.validity.astype("u1"),
    })


def load_trial(path: str | Path) -> TrialRecord:
    _, meta, arr = containers.read(path, expect_kind="trial")
    emg = RawEmgRecording(arr["emg"].astype(np.int16), meta.get("fs_emg", FS_EMG),
                          meta.get("gain", GAIN), meta.get("dynamic_range_v", DYNAMIC_RANGE_V))
    return TrialRecord(meta["subject_id"], meta["trial_id"], meta["role"], emg,
                       arr["markers"], arr["validity"].astype(bool),
                       meta.get("fs_markers", FS_MARKERS), meta.get("metadata", {}))


def export_trial_csv(trial: TrialRecord, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``<trial>_emg.csv`` (ADC codes) and ``<trial>_markers.csv`` (mm, empty when missing)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emg_path = out_dir / f"{trial.trial_id}_emg.csv"
    mk_path = out_dir / f"{trial.trial_id}_markers.csv"
    with open(emg_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s"] + [f"ch{c}" for c in range(trial.emg.n_channels)])
        t = np.arange(trial.emg.samples.shape[0]) / trial.emg.fs
        for ti, row in zip(t, trial.emg.samples):
            w.writerow([f"{ti:.6f}"] + row.tolist())
    with open(mk_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s"] + [f"{m}_{a}" for m in MARKER_NAMES for a in "xyz"])
        for i, (frame, ok) in enumerate(zip(trial.markers, trial.validity)):
            vals = [f"{v:.6f}" if good else "" for p, good in zip(frame, ok) for v in p]
            w.writerow([f"{i / trial.fs_markers:.6f}"] + vals)
    return emg_path, mk_path


_IMPORTERS: dict[str, Callable[[Path], list[TrialRecord]]] = {}


def register_importer(name: str):
    """Decorator registering ``fn(path) -> list[TrialRecord]`` under ``name``."""
    def deco(fn):
        _IMPORTERS[name] = fn
        return fn
    return deco


def import_trials(path: str | Path, fmt: str) -> list[TrialRecord]:
    if fmt not in _IMPORTERS:
        raise ConfigError(f"no importer named {fmt!r}; known: {sorted(_IMPORTERS)}")
    return _IMPORTERS[fmt](Path(path))


@register_importer("native")
def _import_native(path: Path) -> list[TrialRecord]:
    files = sorted(path.glob(f"*{TRIAL_SUFFIX}")) if path.is_dir() else [path]
    return [load_trial(f) for f in files]


def save_processed(path: str | Path, emg: ProcessedEmg, angles: ProcessedAngles, meta: dict | None = None) -> None:
    arrays = {"envelope": emg.envelope.astype("<f8"), "angles": angles.trajectories.astype("<f8")}
    if angles.markers is not None:
        arrays["markers"] = angles.markers.astype("<f8")
    header = dict(meta or {})
    header.update(rate=emg.rate, n_above_one=emg.n_above_one, flagged_frames=angles.flagged_frames,
                  ik_error_mm=angles.ik_error_mm)
    containers.write(path, "processed", header, arrays)


def load_processed(path: str | Path) -> tuple[ProcessedEmg, ProcessedAngles, dict]:
    _, meta, arr = containers.read(path, expect_kind="processed")
    if len(arr["envelope"]) != len(arr["angles"]):
        raise DurationMismatchError(f"{path}: envelope and angle lengths differ")
    emg = ProcessedEmg(arr["envelope"], meta["rate"], meta.get("n_above_one", 0))
    ang = ProcessedAngles(arr["angles"], meta["rate"], meta.get("flagged_frames", 0),
                          meta.get("ik_error_mm", float("nan")), arr.get("markers"))
    return emg, ang, meta
