"""Verification suite shared by ``twofilter verify`` and the acceptance tests.

Every check takes a :class:`Scenario` (a continuous-time model plus an
observation pattern) and returns :class:`CheckResult` records holding the
measured residual, the tolerance and a pass flag.  Boolean checks use
residual 0/1 against tolerance 0.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from .filtering import Interval, Mode, ObservationPattern, backward_filter, forward_filter
from .fusion import batch_oracle, fuse
from .model import DISCRETE, LtvSystem, allpass_extension, balance, balance_residual, eval_structural_function, propagate_covariance
from .numerics import TimeGrid
from .presets import example_pattern, example_system
from .simulate import discretize_system, make_rng, simulate

MODES = ("dy", "y", "signal-loss")
ORACLE_MAX_STEPS = 200
MC_HORIZON = 5.0
MC_MAX_STEP = 0.02


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tolerance: float
    passed: bool
    detail: str = ""

    @classmethod
    def upper(cls, name, residual, tolerance, detail=""):
        residual = float(residual)
        return cls(name, residual, float(tolerance), bool(residual <= tolerance), detail)

    @classmethod
    def flag(cls, name, ok, detail=""):
        return cls(name, 0.0 if ok else 1.0, 0.0, bool(ok), detail)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: residual={self.residual:.3e} tolerance={self.tolerance:.3e}{extra}"

    def to_json(self) -> dict:
        return {"residual": self.residual, "tolerance": self.tolerance, "pass": self.passed}


@dataclass(frozen=True, eq=False)
class Scenario:
    """A continuous-time model, an observation pattern on its grid and a seed."""

    system: LtvSystem
    pattern: ObservationPattern
    seed: int = 0

    @classmethod
    def example(cls, T: float = 45.0, h: float = 0.01, mode: str = "y", seed: int = 0) -> "Scenario":
        sys = example_system(T, h)
        return cls(sys, example_pattern(sys.grid, mode), seed)

    @property
    def grid(self) -> TimeGrid:
        return self.system.grid

    def on_grid(self, grid: TimeGrid) -> "Scenario":
        return replace(self, system=self.system.resampled(grid), pattern=self.pattern.regrid(grid))

    def truncated(self, horizon: float) -> "Scenario":
        g = self.grid
        steps = min(g.n_steps, int(round(horizon / g.h)))
        return self.on_grid(TimeGrid(g.t0, g.h, steps)) if steps < g.n_steps else self

    def with_mode(self, mode) -> "Scenario":
        return replace(self, pattern=self.pattern.with_mode(mode))

    def with_pattern(self, pattern: ObservationPattern) -> "Scenario":
        return replace(self, pattern=pattern)


def run_filters(bal, pattern, traj):
    fwd = forward_filter(bal, pattern, traj)
    bwd = backward_filter(bal, pattern, traj)
    return fwd, bwd, fuse(fwd, bwd)


# -- balance and all-pass ------------------------------------------------------------


def check_balance(sc: Scenario) -> list[CheckResult]:
    bal = balance(sc.system)
    res = balance_residual(bal.system).max()
    cov = propagate_covariance(bal.system)
    drift = np.linalg.norm(cov.P - np.eye(sc.system.n), axis=(-2, -1)).max()
    return [
        CheckResult.upper("balance_identity", res, 1e-8),
        CheckResult.upper("balance_repropagation", drift, 1e-6),
    ]


def random_balanced_discrete(n: int = 3, p: int = 2, seed: int = 0, n_steps: int = 4) -> LtvSystem:
    """Random time-varying discrete model with ``A A' + B B' = I`` at every node.

    ``[A B]`` is the top block row of a random orthogonal matrix.
    """
    rng = make_rng(seed)
    A = np.empty((n_steps + 1, n, n))
    B = np.empty((n_steps + 1, n, p))
    for k in range(n_steps + 1):
        Q, _ = np.linalg.qr(rng.standard_normal((n + p, n + p)))
        A[k], B[k] = Q[:n, :n], Q[:n, n:]
    C = rng.standard_normal((1, n))
    D = np.zeros((1, p))
    D[0, -1] = 1.0
    return LtvSystem(TimeGrid(0.0, 1.0, n_steps), A, B, C, D, np.eye(n), DISCRETE)


def check_allpass(sc: Scenario, n_points: int = 20) -> list[CheckResult]:
    ext = balance(sc.truncated(sc.grid.h).system).extension
    rng = make_rng(sc.seed)
    omegas = rng.uniform(-20.0, 20.0, n_points)
    res_c = max(eval_structural_function(ext, 1j * w)[1] for w in omegas)
    dext = allpass_extension(balance(random_balanced_discrete(seed=sc.seed)))
    U = dext.U[:-1]
    Ut = np.swapaxes(U, -1, -2)
    eye = np.eye(U.shape[-1])
    res_d = max(np.linalg.norm(U @ Ut - eye, axis=(-2, -1)).max(), np.linalg.norm(Ut @ U - eye, axis=(-2, -1)).max())
    return [
        CheckResult.upper("allpass_continuous", res_c, 1e-8),
        CheckResult.upper("allpass_discrete_unitary", res_d, 1e-10),
    ]


# -- oracle equivalence ----------------------------------------------------------------


def mixed_pattern(grid: TimeGrid) -> ObservationPattern:
    """Observed start, then three gaps with different modes (values, signal loss, increments)."""
    n = grid.n_steps
    cuts = [0, round(0.2 * n), round(0.5 * n), round(0.7 * n), n]
    return ObservationPattern(
        grid,
        (
            Interval(cuts[0], cuts[1], True),
            Interval(cuts[1], cuts[2], False),
            Interval(cuts[2], cuts[3], False, Mode.SIGNAL_LOSS),
            Interval(cuts[3], cuts[4], False, Mode.INCREMENTS),
        ),
        Mode.VALUES,
    )


def oracle_grid(sc: Scenario, max_steps: int = ORACLE_MAX_STEPS) -> TimeGrid:
    """Coarsest-needed grid for the dense oracle: every pattern boundary stays a node."""
    g = sc.grid
    common = math.gcd(g.n_steps, *(iv.start for iv in sc.pattern.intervals))
    divisors = [d for d in range(1, common + 1) if common % d == 0]
    fitting = [d for d in divisors if g.n_steps // d <= max_steps]
    return g.coarsen(fitting[0] if fitting else divisors[-1])


def oracle_reference(sc: Scenario):
    """Exactly discretized balanced model, trajectory, filters, fusion and split oracle."""
    bal = balance(sc.system)
    dbal = balance(discretize_system(bal, signal_mask=sc.pattern.signal_mask()))
    traj = simulate(dbal, seed=sc.seed)
    fwd, bwd, sm = run_filters(dbal, sc.pattern, traj)
    return dbal, traj, fwd, bwd, sm, batch_oracle(dbal, sc.pattern, traj)


def check_oracle(sc: Scenario, include_configured: bool = False) -> list[CheckResult]:
    """Fused smoother versus the batch oracle for every mode and a mixed pattern."""
    coarse = sc.on_grid(oracle_grid(sc)) if sc.grid.n_steps > ORACLE_MAX_STEPS else sc
    cases = [(mode.replace("-", "_"), coarse.with_mode(mode)) for mode in MODES]
    cases.append(("mixed", coarse.with_pattern(mixed_pattern(coarse.grid))))
    if include_configured:
        cases.append(("configured", coarse))
    out = []
    for key, case in cases:
        *_, fwd, bwd, sm, oracle = oracle_reference(case)
        out.append(CheckResult.upper(f"oracle_{key}_mean", np.abs(sm.x - oracle.mean).max(), 1e-6))
        out.append(CheckResult.upper(f"oracle_{key}_cov", np.abs(sm.Q - oracle.cov).max(), 1e-6))
    return out


def interior_gap_effect(sc: Scenario) -> float:
    """Largest change in smoothed covariance if gap-end values were also used inside their gap."""
    coarse = sc.on_grid(oracle_grid(sc)) if sc.grid.n_steps > ORACLE_MAX_STEPS else sc
    coarse = coarse.with_mode("y")
    dbal, traj, *_ = oracle_reference(coarse)
    split = batch_oracle(dbal, coarse.pattern, traj)
    full = batch_oracle(dbal, coarse.pattern, traj, contract="full")
    return float(np.abs(split.cov - full.cov).max())


# -- full-horizon runs -------------------------------------------------------------------


def check_full_run(sc: Scenario) -> list[CheckResult]:
    """Covariance identity and PSD dominance on the configured run."""
    bal = balance(sc.system)
    traj = simulate(bal, seed=sc.seed)
    fwd, bwd, sm = run_filters(bal, sc.pattern, traj)
    slack = min(np.linalg.eigvalsh(fwd.Q - sm.Q).min(), np.linalg.eigvalsh(bwd.Q - sm.Q).min())
    flagged = f"{sm.flagged.size} near-singular nodes" if sm.flagged.size else ""
    return [
        CheckResult.upper("covariance_identity", sm.identity_residual.max(), 1e-8, flagged),
        CheckResult.upper("smoother_dominance", max(0.0, -slack), 1e-10, f"min eigenvalue {slack:.3e}"),
    ]


def _trace(Q):
    return np.trace(Q, axis1=-2, axis2=-1)


def check_qualitative(sc: Scenario) -> list[CheckResult]:
    """Uncertainty grows across increments-only gaps and the smoother beats both filters."""
    sc = sc.with_mode("dy")
    bal = balance(sc.system)
    traj = simulate(bal, seed=sc.seed)
    fwd, bwd, sm = run_filters(bal, sc.pattern, traj)
    gaps = [iv for iv in sc.pattern.intervals if not iv.observed]
    grows = all(_trace(fwd.Q[iv.end]) > _trace(fwd.Q[iv.start]) for iv in gaps)
    margin = (np.minimum(_trace(fwd.Q), _trace(bwd.Q)) - _trace(sm.Q)).min()
    return [
        CheckResult.flag("gap_uncertainty_growth", grows, f"{len(gaps)} gaps"),
        CheckResult.flag("smoother_trace_bound", bool(margin >= -1e-12), f"min margin {margin:.3e}"),
    ]


# -- Monte Carlo ---------------------------------------------------------------------------


def _moment(a, b):
    """Raw cross moment ``E{a b'}`` over the leading replication axis."""
    return np.einsum("ri,rj->ij", a, b) / a.shape[0]


def check_monte_carlo(sc: Scenario, n_rep: int = 20000, probes=(0.1, 0.4, 0.8), n_windows: int = 10) -> list[CheckResult]:
    """Statistical checks of the filters, the fusion and the backward noise.

    ``probes`` are fractions of the horizon (snapped to nodes).  The
    backward noise ``dwbar = dw - B' x dt`` is aggregated over ``n_windows``
    equal windows.
    """
    grid = sc.grid
    bal = balance(sc.system)
    traj = simulate(bal, seed=sc.seed, n_rep=n_rep)
    fwd, bwd, sm = run_filters(bal, sc.pattern, traj)
    eye = np.eye(sc.system.n)
    tol5, tol4 = 5.0 / np.sqrt(n_rep), 4.0 / np.sqrt(n_rep)
    stats = dict.fromkeys(["err_m", "err_p", "cross", "orth_m", "orth_p", "orth_sm", "orth_sp"], 0.0)

    def upd(key, value):
        stats[key] = max(stats[key], float(np.abs(value).max()))

    for frac in probes:
        k = int(round(frac * grid.n_steps))
        x, xm, xp, xs = traj.x[:, k], fwd.x[:, k], bwd.x[:, k], sm.x[:, k]
        upd("err_m", _moment(x - xm, x - xm) - fwd.Q[k])
        upd("err_p", _moment(x - xp, x - xp) - bwd.Q[k])
        upd("cross", _moment(xp, xm) - (eye - bwd.Q[k]) @ (eye - fwd.Q[k]))
        upd("orth_m", _moment(x - xm, xm))
        upd("orth_p", _moment(x - xp, xp))
        upd("orth_sm", _moment(x - xs, xm))
        upd("orth_sp", _moment(x - xs, xp))

    steps = grid.n_steps // n_windows
    length = steps * grid.h
    B = bal.system.B
    # trapezoidal quadrature of the B' x dt term
    Bx = np.einsum("kji,rkj->rki", B, traj.x)
    dwbar = traj.dw - 0.5 * (Bx[:, :-1] + Bx[:, 1:]) * grid.h
    W = dwbar[:, : n_windows * steps].reshape(n_rep, n_windows, steps, -1).sum(axis=2)
    p = W.shape[-1]
    win_cov = win_cross = past = 0.0
    for a in range(n_windows):
        win_cov = max(win_cov, np.abs(_moment(W[:, a], W[:, a]) - length * np.eye(p)).max())
        for b in range(a + 1, n_windows):
            win_cross = max(win_cross, np.abs(_moment(W[:, a], W[:, b])).max())
        # backward noise on a window is orthogonal to the state at the window's right end
        past = max(past, np.abs(_moment(W[:, a], traj.x[:, (a + 1) * steps])).max())

    return [
        CheckResult.upper("mc_forward_error_covariance", stats["err_m"], tol5),
        CheckResult.upper("mc_backward_error_covariance", stats["err_p"], tol5),
        CheckResult.upper("mc_filter_cross_covariance", stats["cross"], tol5),
        CheckResult.upper("mc_forward_orthogonality", stats["orth_m"], tol5),
        CheckResult.upper("mc_backward_orthogonality", stats["orth_p"], tol5),
        CheckResult.upper("mc_smoother_orthogonality_forward", stats["orth_sm"], tol5),
        CheckResult.upper("mc_smoother_orthogonality_backward", stats["orth_sp"], tol5),
        CheckResult.upper("mc_backward_noise_window_covariance", win_cov, tol4),
        CheckResult.upper("mc_backward_noise_window_cross", win_cross, tol4),
        CheckResult.upper("mc_backward_noise_state_orthogonality", past, tol4),
    ]


# -- convergence ---------------------------------------------------------------------------


def convergence_ratios(sc: Scenario, halvings: int = 3, n_rep: int = 200) -> np.ndarray:
    """Ratios of successive forward-estimate differences under step halving.

    All resolutions consume the same Brownian paths, simulated on the finest
    grid and subsampled.  The difference between two resolutions is the
    root-mean-square over replications, maxed over the nodes of ``sc.grid``.
    Returns ``halvings - 1`` ratios.
    """
    g = sc.grid
    finest = 2**halvings
    traj = simulate(balance(sc.system.resampled(g.refine(finest))), seed=sc.seed, n_rep=n_rep)
    estimates = []
    for lev in range(halvings + 1):
        level = sc.on_grid(g.refine(2**lev))
        factor = finest // 2**lev
        tr = traj.subsample(factor) if factor > 1 else traj
        estimates.append(forward_filter(balance(level.system), level.pattern, tr).x[:, :: 2**lev])
    diffs = np.array([np.sqrt(((estimates[i] - estimates[i + 1]) ** 2).mean(axis=0)).max() for i in range(halvings)])
    return diffs[:-1] / diffs[1:]


def check_convergence(sc: Scenario, halvings: int = 3, n_rep: int = 200) -> list[CheckResult]:
    ratios = convergence_ratios(sc, halvings, n_rep)
    worst = float(np.abs(ratios - 2.0).max())
    return [CheckResult.upper("convergence_ratio", worst, 0.3, "ratios " + ", ".join(f"{r:.3f}" for r in ratios))]


# -- determinism ---------------------------------------------------------------------------


def trajectory_digest(sc: Scenario) -> str:
    traj = simulate(balance(sc.system), seed=sc.seed)
    return hashlib.sha256(np.ascontiguousarray(np.hstack([traj.x, traj.y])).tobytes()).hexdigest()


def check_determinism(sc: Scenario) -> list[CheckResult]:
    return [CheckResult.flag("determinism", trajectory_digest(sc) == trajectory_digest(sc))]


def run_suite(sc: Scenario, monte_carlo: bool = True, n_rep: int = 20000) -> list[CheckResult]:
    """All checks on one scenario.

    The statistical checks use the first ``MC_HORIZON`` time units on a grid
    refined until the step is at most ``MC_MAX_STEP``: their tolerances
    shrink like ``1/sqrt(n_rep)`` while the Euler bias shrinks like the step.
    """
    results = check_balance(sc) + check_allpass(sc) + check_oracle(sc, include_configured=True)
    results += check_full_run(sc) + check_qualitative(sc)
    if monte_carlo:
        short = sc.truncated(MC_HORIZON)
        short = short.on_grid(short.grid.refine(math.ceil(short.grid.h / MC_MAX_STEP - 1e-9)))
        results += check_monte_carlo(short, n_rep=n_rep)
        results += check_convergence(short)
    results += check_determinism(sc)
    return results
