"""Built-in example configurations."""

from __future__ import annotations

import numpy as np

from .filtering import Mode, ObservationPattern
from .model import LtvSystem
from .numerics import TimeGrid

EXAMPLE_A = [[0.0, 1.0], [-0.3, -0.7]]
EXAMPLE_B = [[0.0, 0.0], [1.0, 0.0]]
EXAMPLE_C = [[1.0, 0.0]]
EXAMPLE_D = [[0.0, 1.0]]
EXAMPLE_T = 45.0
EXAMPLE_H = 0.01
EXAMPLE_OBSERVED = (1, 3, 5, 9)
# Gaps whose end-point process values are not available.
EXAMPLE_NO_VALUES = (7,)


def example_entries(mode: str = "y") -> list[dict]:
    """Intervals of lengths 1, 2, ..., 9; odd-numbered ones observed except the seventh.

    Gaps use the pattern mode, except the seventh interval, which never
    exposes ``Delta y`` and is therefore an increments-only gap.
    """
    entries = []
    t = 0.0
    for i in range(1, 10):
        entry = {"start": t, "end": t + i, "state": "observed" if i in EXAMPLE_OBSERVED else "gap"}
        if i in EXAMPLE_NO_VALUES and mode == Mode.VALUES.value:
            entry["mode"] = Mode.INCREMENTS.value
        entries.append(entry)
        t += i
    return entries


def example_system(T: float = EXAMPLE_T, h: float = EXAMPLE_H) -> LtvSystem:
    grid = TimeGrid.from_span(0.0, T, h)
    return LtvSystem.constant(np.array(EXAMPLE_A), np.array(EXAMPLE_B), np.array(EXAMPLE_C), np.array(EXAMPLE_D), grid)


def example_pattern(grid: TimeGrid, mode: str = "y") -> ObservationPattern:
    """Example pattern clipped to ``grid`` (interval ends past ``grid.t_end`` are truncated)."""
    full = TimeGrid.from_span(0.0, EXAMPLE_T, grid.h)
    entries = [(e["start"], e["end"], e["state"], e.get("mode")) for e in example_entries(mode)]
    return ObservationPattern.from_times(full, entries, mode).regrid(grid)


def example_config(mode: str = "y") -> dict:
    """The reference example run as a config dictionary."""
    return {
        "system": {
            "n": 2,
            "m": 1,
            "p": 2,
            "A": EXAMPLE_A,
            "B": EXAMPLE_B,
            "C": EXAMPLE_C,
            "D": EXAMPLE_D,
        },
        "T": EXAMPLE_T,
        "h": EXAMPLE_H,
        "P0": "stationary",
        "pattern": example_entries(mode),
        "mode": mode,
        "seed": 0,
    }


def coarse_example_config(mode: str = "y", T: float = 5.0, h: float = 0.05) -> dict:
    cfg = example_config(mode)
    cfg["T"], cfg["h"] = T, h
    cfg["pattern"] = [e for e in cfg["pattern"] if e["start"] < T]
    cfg["pattern"][-1] = dict(cfg["pattern"][-1], end=min(cfg["pattern"][-1]["end"], T))
    return cfg


PRESETS = {
    "paper-example": example_config,
    "paper-example-coarse": coarse_example_config,
}
