"""Ablation variants: previous-state branch, input length, width, electrodes, monolithic nets.

A variant is named by ``+``-joined tokens, e.g. ``"B"``, ``"full+E-3"``,
``"I-B"``, ``"full+B1"`` or ``"B+emg=0.4"``:

* base: ``full``, ``B``, ``I``, ``W``, ``I-B``, ``W-B`` (an ``RPC-Net-``
  prefix is accepted and ignored);
* ``E-1`` .. ``E-5``: EMG branch width 384, 307, 256, 219, 192;
* electrode subset codes ``A1``-``A3``, ``B1``-``B3``, ``C1``-``C6`` (rows)
  and ``D1``, ``D2``, ``F1``-``F4`` (columns);
* ``emg=<seconds>`` and ``angle=<seconds>``: input length, 0.1 to 0.8 s.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .network import RpcNet, SubNetworkConfig
from .signals import DEFAULT_PIPELINE, FS_EMG, GRID_COLUMNS, GRID_ROWS, WindowLayout

WIDTH_CODES = {"E-1": 384, "E-2": 307, "E-3": 256, "E-4": 219, "E-5": 192}

_ROW_SUBSETS = {
    "A1": (1, 2, 3, 4), "A2": (1, 2, 5, 6), "A3": (3, 4, 5, 6),
    "B1": (1, 2), "B2": (3, 4), "B3": (5, 6),
    "C1": (1,), "C2": (2,), "C3": (3,), "C4": (4,), "C5": (5,), "C6": (6,),
}
_COLUMN_SUBSETS = {
    "D1": tuple(range(2, 17, 2)), "D2": tuple(range(1, 17, 2)),
    "F1": (1, 5, 9, 13), "F2": (2, 6, 10, 14), "F3": (3, 7, 11, 15), "F4": (4, 8, 12, 16),
}
ELECTRODE_CODES = tuple(_ROW_SUBSETS) + tuple(_COLUMN_SUBSETS)
INPUT_LENGTHS_S = (0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
BASES = ("full", "B", "I", "W", "I-B", "W-B")


def channel_index(row: int, column: int) -> int:
    """Channel number (0-based) of grid electrode (row, column), both 1-based."""
    return (row - 1) * GRID_COLUMNS + (column - 1)


def electrode_channels(code: str) -> np.ndarray:
    if code in _ROW_SUBSETS:
        rows, cols = _ROW_SUBSETS[code], range(1, GRID_COLUMNS + 1)
    elif code in _COLUMN_SUBSETS:
        rows, cols = range(1, GRID_ROWS + 1), _COLUMN_SUBSETS[code]
    else:
        raise ConfigError(f"unknown electrode subset code {code!r}")
    return np.array(sorted(channel_index(r, c) for r in rows for c in cols))


@dataclass(frozen=True)
class VariantSpec:
    base: str = "full"
    width_code: str | None = None
    electrodes: str | None = None
    emg_length_s: float = 0.8
    angle_length_s: float = 0.8

    def __post_init__(self):
        if self.base not in BASES:
            raise ConfigError(f"unknown base variant {self.base!r}")
        if self.width_code is not None and self.width_code not in WIDTH_CODES:
            raise ConfigError(f"unknown width code {self.width_code!r}")
        if self.electrodes is not None:
            electrode_channels(self.electrodes)
        for v in (self.emg_length_s, self.angle_length_s):
            if not 0.05 <= v <= 0.8 + 1e-9:
                raise ConfigError(f"input length {v} s outside 0.1-0.8 s")

    @property
    def angle_branch(self) -> bool:
        return not self.base.endswith("B")

    @property
    def monolithic(self) -> str | None:
        return self.base[0] if self.base[0] in "IW" else None

    @classmethod
    def parse(cls, text: str) -> "VariantSpec":
        kw = {}
        for tok in re.split(r"[+,\s]+", text.strip()):
            if not tok:
                continue
            t = tok[len("RPC-Net-"):] if tok.startswith("RPC-Net-") else tok
            if t in ("RPC-Net", "full"):
                kw["base"] = "full"
            elif t in BASES:
                kw["base"] = t
            elif t in WIDTH_CODES:
                kw["width_code"] = t
            elif t in ELECTRODE_CODES:
                kw["electrodes"] = t
            elif m := re.fullmatch(r"(emg|angle)=([0-9.]+)s?", t):
                try:
                    kw[f"{m.group(1)}_length_s"] = float(m.group(2))
                except ValueError:
                    raise ConfigError(f"bad input length in {tok!r}") from None
            else:
                raise ConfigError(f"unknown variant token {tok!r}")
        return cls(**kw)

    @property
    def tag(self) -> str:
        parts = [self.base]
        if self.width_code:
            parts.append(self.width_code)
        if self.electrodes:
            parts.append(self.electrodes)
        if abs(self.emg_length_s - 0.8) > 1e-9:
            parts.append(f"emg={self.emg_length_s:g}")
        if abs(self.angle_length_s - 0.8) > 1e-9:
            parts.append(f"angle={self.angle_length_s:g}")
        return "+".join(parts)


def samples_for_length(length_s: float, stride: int, rate: float | None = None) -> int:
    """Retained samples for an input length at the given stride (0.8 s -> 16 at stride 4)."""
    rate = DEFAULT_PIPELINE.processed_rate(FS_EMG) if rate is None else rate
    return max(int(round(length_s * rate / stride)), 1)


def make_variant(spec: VariantSpec | str, seed: int = 0, dtype=np.float32,
                 n_channels: int = GRID_ROWS * GRID_COLUMNS) -> RpcNet:
    """Build a freshly initialised network for a variant request."""
    if isinstance(spec, str):
        spec = VariantSpec.parse(spec)
    channels = None if spec.electrodes is None else electrode_channels(spec.electrodes)
    n_ch = n_channels if channels is None else len(channels)
    cfg = DEFAULT_PIPELINE
    n_e = samples_for_length(spec.emg_length_s, cfg.emg_stride)
    n_a = samples_for_length(spec.angle_length_s, cfg.angle_stride)
    layout = WindowLayout(n_e, n_a, cfg.emg_stride, cfg.angle_stride, cfg.history)
    i_e = n_e * n_ch
    i_a = n_a * 24 if spec.angle_branch else 0
    emg_width = WIDTH_CODES.get(spec.width_code) if spec.width_code else None
    mono = spec.monolithic
    sub = SubNetworkConfig.from_inputs(
        i_e, i_a, emg_width,
        width_factor=5 if mono == "W" else 1,
        n_outputs=24 if mono else 1,
    )
    return RpcNet(sub, spec.base, n_networks=1 if mono else 24, layout=layout,
                  channels=channels, dtype=dtype, seed=seed, tag=spec.tag)
