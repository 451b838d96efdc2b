"""Performance indicators: per-joint correlation, fingertip and all-marker distances, timing."""
from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, UndefinedStatisticError
from .kinematics import N_DOF, N_HAND_MARKERS, TIP_MARKERS, HandPose3D

WFD_TIPS = (TIP_MARKERS["index"], TIP_MARKERS["middle"], TIP_MARKERS["thumb"])
TABLE_COLUMNS = ("Subject", "MD", "T1", "T2", "Med", "MPCC", "T1", "T2", "Med")


def pcc(a, b) -> float:
    """Pearson product-moment correlation of two equal-length series."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ContractError("pcc needs two series of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedStatisticError("correlation is undefined for a constant series")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def pcc_per_joint(actual: np.ndarray, estimated: np.ndarray) -> np.ndarray:
    actual = np.asarray(actual)
    estimated = np.asarray(estimated)
    if actual.shape != estimated.shape or actual.ndim != 2:
        raise ContractError(f"angle arrays must share a (T, J) shape, got {actual.shape} and {estimated.shape}")
    return np.array([pcc(actual[:, j], estimated[:, j]) for j in range(actual.shape[1])])


def _markers(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, HandPose3D):
        return x.markers[None], x.validity[None]
    m = np.asarray(x, dtype=float)
    if m.ndim == 2:
        m = m[None]
    return m, np.isfinite(m).all(axis=-1)


def _distance_series(actual, estimated, idx) -> tuple[np.ndarray, int]:
    ma, va = _markers(actual)
    me, ve = _markers(estimated)
    if ma.shape != me.shape:
        raise ContractError(f"marker arrays differ in shape: {ma.shape} vs {me.shape}")
    d = np.linalg.norm(ma[:, idx] - me[:, idx], axis=-1).mean(axis=1)
    ok = (va[:, idx] & ve[:, idx]).all(axis=1)
    d[~ok] = np.nan
    return d, int((~ok).sum())


def wfd_series(actual, estimated) -> tuple[np.ndarray, int]:
    """Per-sample mean distance of the index, middle and thumb tips (mm).

    Samples with a missing tip marker are NaN; their count is returned.
    """
    return _distance_series(actual, estimated, list(WFD_TIPS))


def umd_series(actual, estimated) -> tuple[np.ndarray, int]:
    """Per-sample mean distance over the 21 hand markers (mm)."""
    return _distance_series(actual, estimated, list(range(N_HAND_MARKERS)))


def wfd(actual, estimated) -> float:
    d, _ = wfd_series(actual, estimated)
    return float(np.nanmean(d)) if np.isfinite(d).any() else float("nan")


def umd(actual, estimated) -> float:
    d, _ = umd_series(actual, estimated)
    return float(np.nanmean(d)) if np.isfinite(d).any() else float("nan")


def tertiles_and_median(x: np.ndarray) -> tuple[float, float, float]:
    """(first tertile, second tertile, median) with linear interpolation between order statistics."""
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return (float("nan"),) * 3
    t1, t2, med = np.quantile(x, [1 / 3, 2 / 3, 0.5])
    return float(t1), float(t2), float(med)


@dataclass
class TrialScores:
    pcc_per_joint: np.ndarray
    mpcc: float
    wfd_series: np.ndarray = field(repr=False)
    md: float
    umd_series: np.ndarray = field(repr=False)
    umd: float
    md_tertiles: tuple  # (T1, T2, median) of the WFD over time
    mpcc_tertiles: tuple  # (T1, T2, median) of the 24 PCCs
    umd_tertiles: tuple
    n_excluded: int = 0

    def table_row(self, subject: str) -> list:
        """Subject, MD (mm), T1, T2, Med, MPCC (%), T1, T2, Med."""
        return [subject, self.md, *self.md_tertiles, 100 * self.mpcc, *(100 * v for v in self.mpcc_tertiles)]

    def summary(self) -> dict:
        return {
            "MD": self.md, "MD_T1": self.md_tertiles[0], "MD_T2": self.md_tertiles[1], "MD_Med": self.md_tertiles[2],
            "MPCC": self.mpcc, "MPCC_T1": self.mpcc_tertiles[0], "MPCC_T2": self.mpcc_tertiles[1],
            "MPCC_Med": self.mpcc_tertiles[2], "UMD": self.umd, "PCC": self.pcc_per_joint.tolist(),
            "excluded_samples": self.n_excluded,
        }


def score_trial(actual_angles: np.ndarray, estimated_angles: np.ndarray,
                actual_markers: np.ndarray, estimated_markers: np.ndarray) -> TrialScores:
    """All indicators for one test trial; angles (T, 24), markers (T, 23, 3)."""
    p = pcc_per_joint(actual_angles, estimated_angles)
    if p.size != N_DOF:
        raise ContractError(f"expected {N_DOF} joints, got {p.size}")
    w, nw = wfd_series(actual_markers, estimated_markers)
    u, _ = umd_series(actual_markers, estimated_markers)
    if len(w) != len(actual_angles):
        raise ContractError("angle and marker streams differ in length")
    return TrialScores(
        pcc_per_joint=p, mpcc=float(p.mean()),
        wfd_series=w, md=float(np.nanmean(w)),
        umd_series=u, umd=float(np.nanmean(u)),
        md_tertiles=tertiles_and_median(w), mpcc_tertiles=tertiles_and_median(p),
        umd_tertiles=tertiles_and_median(u), n_excluded=nw,
    )


def write_table(rows: list[tuple[str, TrialScores]], csv_path: str | Path, json_path: str | Path | None = None,
                digits: int = 6) -> None:
    """Per-subject table with columns Subject, MD, T1, T2, Med, MPCC, T1, T2, Med (MPCC in %)."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for subject, s in rows:
            w.writerow([subject] + [f"{v:.{digits}f}" for v in s.table_row(subject)[1:]])
    if json_path is not None:
        data = {subject: s.summary() for subject, s in rows}
        Path(json_path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- inference time -------------------------------------------------------------

def hardware_descriptor() -> str:
    name = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    name = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{name}; {os.cpu_count()} logical CPUs; numpy {np.__version__}"


@dataclass
class InferenceTimeReport:
    mean_ms: float
    std_ms: float
    iterations: int
    hardware: str
    threads: int = 1
    note: str = "single forward pass, batch 1, CPU, measured on a quiescent machine"

    def to_dict(self) -> dict:
        return asdict(self)


def measure_inference_time(net, iterations: int = 100_000, warmup: int = 50, seed: int = 0,
                           threads: int = 1) -> InferenceTimeReport:
    """Time one full forward pass (all sub-networks, batch 1) on fixed random input.

    Input preparation, output filtering and forward kinematics are excluded.
    BLAS is limited to ``threads`` threads while timing.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    e = rng.random((1, net.emg_input_size)).astype(net.dtype)
    a = rng.random((1, net.angle_input_size)).astype(net.dtype) if net.angle_input_size else None
    times = np.empty(iterations)
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            net.forward(e, a)
        clock = time.perf_counter
        for i in range(iterations):
            t0 = clock()
            net.forward(e, a)
            times[i] = clock() - t0
    times *= 1e3
    return InferenceTimeReport(float(times.mean()), float(times.std()), iterations, hardware_descriptor(), threads)
