"""Command-line interface.

::

    twofilter run      --preset paper-example --out out/
    twofilter simulate --config run.json
    twofilter filter   --config run.json      # needs trajectory.csv
    twofilter smooth   --config run.json      # needs forward.csv, backward.csv
    twofilter verify   --preset paper-example-coarse

Every stage writes into the output directory.  CSV rows are grid nodes;
floats carry 17 significant digits so that files round-trip exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from .config import RunConfig
from .errors import ConfigError, MissingInput, PatternMismatch, TwoFilterError
from .filtering import FilterResult, backward_filter, forward_filter
from .fusion import fuse
from .model import balance, balance_residual
from .presets import PRESETS
from .simulate import Trajectory, simulate

COMMANDS = ("run", "simulate", "filter", "smooth", "verify")
FILES = {
    "trajectory": "trajectory.csv",
    "forward": "forward.csv",
    "backward": "backward.csv",
    "smoothed": "smoothed.csv",
    "report": "report.json",
    "manifest": "manifest.json",
}


# -- CSV ------------------------------------------------------------------------------------


def _vec_names(prefix, n):
    return [f"{prefix}{i}" for i in range(1, n + 1)]


def _mat_names(prefix, n):
    sep = "_" if n > 9 else ""
    return [f"{prefix}{i}{sep}{j}" for i in range(1, n + 1) for j in range(1, n + 1)]


def write_csv(path: Path, columns: list[str], data: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        np.savetxt(fh, data, fmt="%.17g", delimiter=",", header=",".join(columns), comments="")


def read_csv(path: Path, columns: list[str]) -> np.ndarray:
    if not path.exists():
        raise MissingInput(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header != columns:
        raise PatternMismatch(f"{path} has columns {header}, expected {columns}")
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))


# -- pipeline ---------------------------------------------------------------------------------


class Pipeline:
    """Model, pattern and file layout for one configuration."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.system = cfg.build_system()
        self.grid = self.system.grid
        self.pattern = cfg.build_pattern(self.grid)
        self.bal = balance(self.system)
        self.avail = self.pattern.availability()
        self.original = cfg.coordinates == "original"
        self.timings: dict[str, float] = {}

    def path(self, key: str) -> Path:
        return self.out / FILES[key]

    def _check_times(self, t, path):
        if t.shape != self.grid.times.shape or np.abs(t - self.grid.times).max() > 1e-9 * max(1.0, self.grid.t_end):
            raise PatternMismatch(f"{path} does not match the configured grid")

    # coordinate maps between balanced (internal) and written values
    def _export(self, x, Q=None):
        if not self.original:
            return x if Q is None else (x, Q)
        return self.bal.to_original(x, Q)

    def _import(self, x, Q=None):
        if not self.original:
            return x if Q is None else (x, Q)
        Pih = self.bal.cov.P_inv_half
        xb = np.einsum("kij,kj->ki", Pih, x)
        return xb if Q is None else (xb, Pih @ Q @ Pih)

    # stages
    def simulate(self) -> Trajectory:
        t = time.perf_counter()
        traj = simulate(self.bal, seed=self.cfg.seed)
        n, m = self.system.n, self.system.m
        cols = ["t"] + _vec_names("x", n) + _vec_names("y", m) + ["avail"]
        data = np.column_stack([self.grid.times, self._export(traj.x), traj.y, self.avail])
        write_csv(self.path("trajectory"), cols, data)
        self.timings["simulate"] = time.perf_counter() - t
        return traj

    def load_trajectory(self) -> Trajectory:
        n, m, p = self.system.n, self.system.m, self.system.p
        cols = ["t"] + _vec_names("x", n) + _vec_names("y", m) + ["avail"]
        path = self.path("trajectory")
        data = read_csv(path, cols)
        self._check_times(data[:, 0], path)
        x = self._import(data[:, 1 : 1 + n])
        y = data[:, 1 + n : 1 + n + m]
        dw = np.full((self.grid.n_steps, p), np.nan)
        return Trajectory(self.grid, x, y, dw, self.cfg.seed)

    def _filter_columns(self, prefix):
        n = self.system.n
        return ["t"] + _vec_names(f"x{prefix}", n) + _mat_names(f"Q{prefix}", n) + ["avail"]

    def filter(self, traj: Trajectory):
        t = time.perf_counter()
        fwd = forward_filter(self.bal, self.pattern, traj)
        bwd = backward_filter(self.bal, self.pattern, traj)
        n = self.system.n
        for key, prefix, res in (("forward", "m", fwd), ("backward", "p", bwd)):
            x, Q = self._export(res.x, res.Q)
            data = np.column_stack([self.grid.times, x, Q.reshape(-1, n * n), self.avail])
            write_csv(self.path(key), self._filter_columns(prefix), data)
        self.timings["filter"] = time.perf_counter() - t
        return fwd, bwd

    def load_filters(self):
        n = self.system.n
        out = []
        for key, prefix, direction in (("forward", "m", "forward"), ("backward", "p", "backward")):
            path = self.path(key)
            data = read_csv(path, self._filter_columns(prefix))
            self._check_times(data[:, 0], path)
            x, Q = self._import(data[:, 1 : 1 + n], data[:, 1 + n : 1 + n + n * n].reshape(-1, n, n))
            out.append(FilterResult(direction, self.grid, x, Q, np.zeros((self.grid.n_nodes, n, self.system.m))))
        return tuple(out)

    def smooth(self, fwd, bwd):
        t = time.perf_counter()
        sm = fuse(fwd, bwd)
        n = self.system.n
        x, Q = self._export(sm.x, sm.Q)
        cols = ["t"] + _vec_names("xs", n) + _mat_names("Qs", n)
        write_csv(self.path("smoothed"), cols, np.column_stack([self.grid.times, x, Q.reshape(-1, n * n)]))
        self.timings["smooth"] = time.perf_counter() - t
        return sm

    def write_report(self, results: list, extra: dict | None = None) -> None:
        report = {}
        for r in results:
            if r.name in report:
                raise RuntimeError(f"check {r.name} reported twice")
            report[r.name] = r.to_json()
        self.path("report").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        manifest = {
            "files": {k: str(self.path(k)) for k in FILES if self.path(k).exists() or k in ("report", "manifest")},
            "timings_s": self.timings,
            "details": {r.name: r.detail for r in results if r.detail},
        }
        manifest.update(extra or {})
        self.path("manifest").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    def scenario(self) -> checks.Scenario:
        return checks.Scenario(self.system, self.pattern, self.cfg.seed)


def run_pipeline(cfg: RunConfig, out: Path) -> list:
    """Simulate, filter both ways, fuse, and check invariants plus the coarse oracle."""
    pipe = Pipeline(cfg, out)
    traj = pipe.simulate()
    fwd, bwd = pipe.filter(traj)
    sm = pipe.smooth(fwd, bwd)
    t = time.perf_counter()
    slack = min(np.linalg.eigvalsh(fwd.Q - sm.Q).min(), np.linalg.eigvalsh(bwd.Q - sm.Q).min())
    tr = lambda Q: np.trace(Q, axis1=-2, axis2=-1)  # noqa: E731
    margin = (np.minimum(tr(fwd.Q), tr(bwd.Q)) - tr(sm.Q)).min()
    results = [
        checks.CheckResult.upper("balance_identity", balance_residual(pipe.bal.system).max(), 1e-8),
        checks.CheckResult.upper("covariance_identity", sm.identity_residual.max(), 1e-8),
        checks.CheckResult.upper("smoother_dominance", max(0.0, -slack), 1e-10),
        checks.CheckResult.flag("smoother_trace_bound", bool(margin >= -1e-12)),
    ]
    sc = pipe.scenario()
    coarse = sc.on_grid(checks.oracle_grid(sc)) if sc.grid.n_steps > checks.ORACLE_MAX_STEPS else sc
    *_, osm, oracle = checks.oracle_reference(coarse)
    results.append(checks.CheckResult.upper("oracle_max_error_mean", np.abs(osm.x - oracle.mean).max(), 1e-6, f"h={coarse.grid.h:g}"))
    results.append(checks.CheckResult.upper("oracle_max_error_cov", np.abs(osm.Q - oracle.cov).max(), 1e-6, f"h={coarse.grid.h:g}"))
    pipe.timings["checks"] = time.perf_counter() - t
    extra = {"near_singular_nodes": sm.flagged.tolist()}
    if any(not iv.observed and pipe.pattern.kind(iv) == "values" for iv in pipe.pattern.intervals):
        extra["interior_gap_value_effect"] = checks.interior_gap_effect(sc)
    pipe.write_report(results, extra)
    return results


def run_subcommand(name: str, cfg: RunConfig, out: Path, monte_carlo: bool = True) -> list:
    if name == "run":
        return run_pipeline(cfg, out)
    pipe = Pipeline(cfg, out)
    if name == "simulate":
        pipe.simulate()
        return []
    if name == "filter":
        pipe.filter(pipe.load_trajectory())
        return []
    if name == "smooth":
        pipe.smooth(*pipe.load_filters())
        return []
    if name == "verify":
        t = time.perf_counter()
        results = checks.run_suite(pipe.scenario(), monte_carlo=monte_carlo, n_rep=cfg.replications)
        pipe.timings["verify"] = time.perf_counter() - t
        pipe.write_report(results)
        return results
    raise ValueError(f"unknown command {name!r}")


# -- entry point --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twofilter", description="Two-filter smoothing under intermittent observations.")
    parser.add_argument("command", choices=COMMANDS)
    src = parser.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="JSON run configuration")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", type=Path, help="output directory (default: the configured one)")
    parser.add_argument("--skip-monte-carlo", action="store_true", help="verify: skip the statistical checks")
    return parser


def load_config(args) -> RunConfig:
    if args.config is not None:
        if not args.config.exists():
            raise MissingInput(args.config)
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_dict(PRESETS[args.preset]())
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = args.out if args.out is not None else Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        results = run_subcommand(args.command, cfg, out, monte_carlo=not args.skip_monte_carlo)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TwoFilterError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
