"""JSON run configuration.

Example::

    {
      "system": {"n": 2, "m": 1, "p": 2,
                 "A": [[0, 1], [-0.3, -0.7]], "B": [[0, 0], [1, 0]],
                 "C": [[1, 0]], "D": [[0, 1]]},
      "T": 45, "h": 0.01, "P0": "stationary",
      "pattern": [{"start": 0, "end": 1, "state": "observed"},
                  {"start": 1, "end": 3, "state": "gap"}],
      "mode": "y", "seed": 0
    }

Matrices may be given once (time-invariant) or as one matrix per grid node.
Unknown keys are rejected, and errors name the offending field and, when
the text is available, its line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, OffGrid
from .filtering import Mode, ObservationPattern
from .model import CONTINUOUS, LtvSystem
from .numerics import TimeGrid

TOP_KEYS = {"system", "T", "h", "t0", "P0", "pattern", "mode", "seed", "output", "replications", "coordinates"}
REQUIRED = {"system", "T", "h"}
SYSTEM_KEYS = {"n", "m", "p", "A", "B", "C", "D"}
INTERVAL_KEYS = {"start", "end", "state", "mode"}
COORDINATES = ("original", "balanced")


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated run configuration; see the module docstring for the JSON layout."""

    n: int
    m: int
    p: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    T: float
    h: float
    t0: float = 0.0
    P0: object = "stationary"
    pattern: tuple = ()
    mode: str = "dy"
    seed: int = 0
    output: str = "out"
    replications: int = 20000
    coordinates: str = "original"
    source: str | None = field(default=None, repr=False)

    # -- parsing --------------------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, text: str | None = None) -> "RunConfig":
        def fail(msg, key):
            raise ConfigError(msg, field=key, line=_line_of(text, key.split(".")[-1].split("[")[0]))

        if not isinstance(data, dict):
            raise ConfigError("top level must be a JSON object")
        for key in data:
            if key not in TOP_KEYS:
                fail(f"unknown key (allowed: {', '.join(sorted(TOP_KEYS))})", key)
        for key in REQUIRED:
            if key not in data:
                raise ConfigError("required key is missing", field=key)
        system = data["system"]
        if not isinstance(system, dict):
            fail("must be an object", "system")
        for key in system:
            if key not in SYSTEM_KEYS:
                fail(f"unknown key (allowed: {', '.join(sorted(SYSTEM_KEYS))})", f"system.{key}")
        for key in SYSTEM_KEYS:
            if key not in system:
                raise ConfigError("required key is missing", field=f"system.{key}")
        dims = {}
        for key in ("n", "m", "p"):
            v = system[key]
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                fail("must be a positive integer", f"system.{key}")
            dims[key] = v
        n, m, p = dims["n"], dims["m"], dims["p"]

        def number(key, positive=False):
            v = data[key]
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                fail("must be a finite number", key)
            if positive and v <= 0:
                fail("must be positive", key)
            return float(v)

        T, h = number("T", positive=True), number("h", positive=True)
        t0 = number("t0") if "t0" in data else 0.0
        if T <= t0:
            fail("must exceed t0", "T")
        n_steps = round((T - t0) / h)
        if abs(t0 + n_steps * h - T) > 1e-9 * max(1.0, abs(T)):
            fail(f"horizon {T - t0} is not a multiple of h={h}", "T")

        def matrix(key, shape):
            try:
                M = np.asarray(system[key], dtype=float)
            except (TypeError, ValueError):
                fail("must be a numeric (nested) array", f"system.{key}")
            if M.shape != shape and M.shape != (n_steps + 1,) + shape:
                fail(f"expected shape {shape} or {(n_steps + 1,) + shape}, got {M.shape}", f"system.{key}")
            if not np.all(np.isfinite(M)):
                fail("entries must be finite", f"system.{key}")
            return M

        A = matrix("A", (n, n))
        B = matrix("B", (n, p))
        C = matrix("C", (m, n))
        D = matrix("D", (m, p))

        P0 = data.get("P0", "stationary")
        if isinstance(P0, str):
            if P0 != "stationary":
                fail("must be 'stationary' or an n x n matrix", "P0")
        else:
            try:
                P0 = np.asarray(P0, dtype=float)
            except (TypeError, ValueError):
                fail("must be 'stationary' or an n x n matrix", "P0")
            if P0.shape != (n, n):
                fail(f"expected shape {(n, n)}, got {P0.shape}", "P0")

        mode = data.get("mode", "dy")
        if mode not in {md.value for md in Mode}:
            fail("must be one of dy, y, signal-loss", "mode")

        pattern = data.get("pattern", [])
        if not isinstance(pattern, list):
            fail("must be a list of intervals", "pattern")
        entries = []
        for i, iv in enumerate(pattern):
            where = f"pattern[{i}]"
            if not isinstance(iv, dict):
                fail("interval must be an object", where)
            for key in iv:
                if key not in INTERVAL_KEYS:
                    fail(f"unknown key (allowed: {', '.join(sorted(INTERVAL_KEYS))})", f"{where}.{key}")
            for key in ("start", "end", "state"):
                if key not in iv:
                    raise ConfigError("required key is missing", field=f"{where}.{key}")
            if iv["state"] not in ("observed", "gap"):
                fail("state must be 'observed' or 'gap'", f"{where}.state")
            if "mode" in iv and iv["mode"] not in {md.value for md in Mode}:
                fail("must be one of dy, y, signal-loss", f"{where}.mode")
            for key in ("start", "end"):
                v = iv[key]
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    fail("must be a number", f"{where}.{key}")
                if abs((v - t0) / h - round((v - t0) / h)) * h > 1e-9 * max(1.0, abs(v)):
                    fail(f"{v} is not a multiple of h={h}", f"{where}.{key}")
            entries.append({k: (float(v) if k in ("start", "end") else v) for k, v in iv.items()})

        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            fail("must be an integer", "seed")
        reps = data.get("replications", 20000)
        if not isinstance(reps, int) or isinstance(reps, bool) or reps < 2:
            fail("must be an integer >= 2", "replications")
        output = data.get("output", "out")
        if not isinstance(output, str):
            fail("must be a string", "output")
        coords = data.get("coordinates", "original")
        if coords not in COORDINATES:
            fail("must be 'original' or 'balanced'", "coordinates")

        cfg = cls(n, m, p, A, B, C, D, T, h, t0, P0, tuple(entries), mode, seed, output, reps, coords, text)
        try:
            cfg.build_pattern(cfg.grid())
        except (ValueError, OffGrid) as exc:
            raise ConfigError(str(exc), field="pattern", line=_line_of(text, "pattern")) from None
        return cfg

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        return cls.from_dict(data, text)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    # -- serialization --------------------------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "system": {
                "n": self.n,
                "m": self.m,
                "p": self.p,
                "A": self.A.tolist(),
                "B": self.B.tolist(),
                "C": self.C.tolist(),
                "D": self.D.tolist(),
            },
            "T": self.T,
            "h": self.h,
            "t0": self.t0,
            "P0": self.P0 if isinstance(self.P0, str) else np.asarray(self.P0).tolist(),
            "pattern": [dict(e) for e in self.pattern],
            "mode": self.mode,
            "seed": self.seed,
            "output": self.output,
            "replications": self.replications,
            "coordinates": self.coordinates,
        }
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)

    # -- model construction ------------------------------------------------------------------

    def grid(self) -> TimeGrid:
        return TimeGrid.from_span(self.t0, self.T, self.h)

    def build_system(self) -> LtvSystem:
        grid = self.grid()
        constant = all(M.ndim == 2 for M in (self.A, self.B, self.C, self.D))
        if not constant and isinstance(self.P0, str):
            raise ConfigError("a time-varying system needs an explicit P0", field="P0", line=_line_of(self.source, "P0"))
        try:
            if constant:
                return LtvSystem.constant(self.A, self.B, self.C, self.D, grid, self.P0, CONTINUOUS)
            return LtvSystem(grid, self.A, self.B, self.C, self.D, np.asarray(self.P0), CONTINUOUS)
        except ValueError as exc:
            raise ConfigError(str(exc), field="system", line=_line_of(self.source, "system")) from None

    def build_pattern(self, grid: TimeGrid | None = None) -> ObservationPattern:
        grid = self.grid() if grid is None else grid
        entries = [(e["start"], e["end"], e["state"], e.get("mode")) for e in self.pattern]
        return ObservationPattern.from_times(grid, entries, self.mode)
