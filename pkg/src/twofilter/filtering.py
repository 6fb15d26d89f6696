"""Forward and backward Kalman filters under intermittent observations.

Both filters run on a :class:`~twofilter.model.BalancedModel`, so they start
from ``x = 0, Q = I`` at their respective boundaries.  How a gap is crossed
depends on its information pattern:

``dy`` (increments only)
    free evolution with zero gain.
``y`` (process values)
    free evolution inside the gap, then one discrete Kalman step that
    absorbs ``Delta y`` when the filter reaches the far end of the gap.
``signal-loss``
    the full filter with ``C = 0`` on the gap, which keeps the ``B D'``
    part of the gain.

Estimates carry an optional leading replication axis; covariances and
gains do not depend on the data and are computed once.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NotSPD, PatternMismatch
from .model import CONTINUOUS, BalancedModel
from .numerics import TimeGrid, check_spd, integrate_matrix_ode, psd_inverse, sample_at, step_transitions, symmetrize
from .simulate import GapUpdate, Trajectory, exact_discretize_gap, reverse_gap, step_update


class Mode(str, Enum):
    INCREMENTS = "dy"
    VALUES = "y"
    SIGNAL_LOSS = "signal-loss"


@dataclass(frozen=True)
class Interval:
    """Node range ``[start, end]``; ``mode`` optionally overrides the pattern mode on a gap."""

    start: int
    end: int
    observed: bool
    mode: Mode | None = None


@dataclass(frozen=True)
class ObservationPattern:
    """Intervals tiling the grid, each observed or a gap, plus the default gap mode."""

    grid: TimeGrid
    intervals: tuple
    mode: Mode = Mode.INCREMENTS

    def __post_init__(self):
        ivs = tuple(self.intervals)
        object.__setattr__(self, "intervals", ivs)
        object.__setattr__(self, "mode", Mode(self.mode))
        if not ivs:
            raise ValueError("pattern needs at least one interval")
        if ivs[0].start != 0 or ivs[-1].end != self.grid.n_steps:
            raise ValueError("pattern intervals must cover the whole grid")
        for a, b in zip(ivs, ivs[1:]):
            if a.end != b.start:
                raise ValueError(f"pattern intervals must be contiguous (node {a.end} vs {b.start})")
        for iv in ivs:
            if iv.end <= iv.start:
                raise ValueError(f"empty or reversed interval [{iv.start}, {iv.end}]")

    @classmethod
    def fully_observed(cls, grid: TimeGrid, mode=Mode.INCREMENTS) -> "ObservationPattern":
        return cls(grid, (Interval(0, grid.n_steps, True),), Mode(mode))

    @classmethod
    def from_times(cls, grid: TimeGrid, entries, mode=Mode.INCREMENTS) -> "ObservationPattern":
        """Build from ``(start, end, state[, mode])`` tuples with ``state`` in ``observed | gap``.

        Entries may also be dicts with those keys, as produced by :meth:`to_entries`.
        An empty list means fully observed.
        """
        if not entries:
            return cls.fully_observed(grid, mode)
        ivs = []
        for entry in entries:
            if isinstance(entry, dict):
                entry = (entry["start"], entry["end"], entry["state"], entry.get("mode"))
            start, end, state, *rest = entry
            if state not in ("observed", "gap"):
                raise ValueError(f"interval state must be 'observed' or 'gap', got {state!r}")
            gap_mode = Mode(rest[0]) if rest and rest[0] is not None else None
            ivs.append(Interval(grid.index_of(start), grid.index_of(end), state == "observed", gap_mode))
        return cls(grid, tuple(ivs), Mode(mode))

    def interval_mode(self, iv: Interval) -> Mode:
        return iv.mode if iv.mode is not None else self.mode

    def kind(self, iv: Interval) -> str:
        """``observed``, ``free``, ``values`` or ``loss`` for one interval."""
        if iv.observed:
            return "observed"
        return {Mode.INCREMENTS: "free", Mode.VALUES: "values", Mode.SIGNAL_LOSS: "loss"}[self.interval_mode(iv)]

    def signal_mask(self) -> np.ndarray:
        """Per-step multiplier on ``C``: zero on signal-loss gaps."""
        mask = np.ones(self.grid.n_steps)
        for iv in self.intervals:
            if self.kind(iv) == "loss":
                mask[iv.start : iv.end] = 0.0
        return mask

    def availability(self) -> np.ndarray:
        """1 at nodes inside (or on the boundary of) an observed interval, else 0."""
        avail = np.zeros(self.grid.n_nodes, dtype=int)
        for iv in self.intervals:
            if iv.observed:
                avail[iv.start : iv.end + 1] = 1
        return avail

    def to_entries(self) -> list:
        t = self.grid.times
        out = []
        for iv in self.intervals:
            entry = {"start": float(t[iv.start]), "end": float(t[iv.end]), "state": "observed" if iv.observed else "gap"}
            if iv.mode is not None:
                entry["mode"] = iv.mode.value
            out.append(entry)
        return out

    def with_mode(self, mode) -> "ObservationPattern":
        """Same intervals with every gap switched to ``mode``."""
        return ObservationPattern(self.grid, tuple(Interval(iv.start, iv.end, iv.observed) for iv in self.intervals), Mode(mode))

    def regrid(self, grid: TimeGrid) -> "ObservationPattern":
        """Same pattern on another grid, clipped to its span; interval ends must be nodes of ``grid``."""
        t = self.grid.times
        entries = []
        for iv in self.intervals:
            a, b = t[iv.start], min(t[iv.end], grid.t_end)
            if a >= grid.t_end - 1e-12:
                break
            entries.append((a, b, "observed" if iv.observed else "gap", iv.mode.value if iv.mode else None))
        return ObservationPattern.from_times(grid, entries, self.mode)


@dataclass(frozen=True, eq=False)
class FilterResult:
    """Estimates ``x`` (``(..., N+1, n)``), error covariances ``Q`` and gains ``K`` per node.

    Gains are zero on free-evolution steps.  For the backward pass ``K``
    follows the sign convention ``dxbar = -A' xbar dt + K (dy - Cbar xbar dt)``.
    """

    direction: str
    grid: TimeGrid
    x: np.ndarray
    Q: np.ndarray
    K: np.ndarray

    @property
    def P_est(self) -> np.ndarray:
        """Covariance of the estimate itself, ``I - Q`` in balanced coordinates."""
        return np.eye(self.Q.shape[-1]) - self.Q


def kalman_gap_step(x: np.ndarray, Q: np.ndarray, gap: GapUpdate, dy: np.ndarray):
    """One discrete Kalman predictor step across ``gap`` with correlated noise.

    ``x`` may carry leading batch axes; returns ``(x_next, Q_next, K)``.
    """
    A, C = gap.A, gap.C
    S = symmetrize(C @ Q @ C.T + gap.Syy)
    K = np.linalg.solve(S, (A @ Q @ C.T + gap.Sxy).T).T
    x_next = x @ A.T + (dy - x @ C.T) @ K.T
    Q_next = symmetrize(A @ Q @ A.T - K @ S @ K.T + gap.Sxx)
    return x_next, Q_next, K


def _r_inverse(R):
    m = R.shape[-1]
    eps = 1e-12 * np.trace(R, axis1=-2, axis2=-1).max() / max(m, 1)
    return psd_inverse(R, eps)


def _check_data(bal: BalancedModel, pattern: ObservationPattern, traj: Trajectory):
    sys = bal.system
    if traj.grid != sys.grid or pattern.grid != sys.grid:
        raise PatternMismatch("trajectory, pattern and model must share one grid")
    if traj.y.shape[-1] != sys.m:
        raise PatternMismatch(f"trajectory has {traj.y.shape[-1]} outputs, model has {sys.m}")
    y = traj.y
    for iv in pattern.intervals:
        kind = pattern.kind(iv)
        if kind in ("observed", "loss"):
            seg = y[..., iv.start : iv.end + 1, :]
        elif kind == "values":
            seg = y[..., [iv.start, iv.end], :]
        else:
            continue
        if not np.all(np.isfinite(seg)):
            raise PatternMismatch(f"trajectory lacks output data on [{traj.grid.times[iv.start]:g}, {traj.grid.times[iv.end]:g}]")


def _finish(direction, grid, x, Q, K):
    try:
        check_spd(Q, f"{direction} error covariance")
    except NotSPD as exc:
        raise NotSPD(str(exc)) from None
    x = np.moveaxis(x, 0, -2)
    return FilterResult(direction, grid, x, Q, K)


def _batch_dy(traj: Trajectory):
    # node-major views: y[k] has shape batch + (m,)
    return np.moveaxis(traj.y, -2, 0)


def forward_filter(bal: BalancedModel, pattern: ObservationPattern, traj: Trajectory) -> FilterResult:
    """Forward intermittent Kalman filter ``x_-`` with boundary ``x_-(t0) = 0``, ``Q_-(t0) = I``."""
    _check_data(bal, pattern, traj)
    if bal.time_kind == CONTINUOUS:
        return _forward_continuous(bal, pattern, traj)
    return _forward_discrete(bal, pattern, traj)


def backward_filter(bal: BalancedModel, pattern: ObservationPattern, traj: Trajectory) -> FilterResult:
    """Backward intermittent Kalman filter ``xbar_+`` with boundary ``xbar_+(T) = 0``, ``Qbar_+(T) = I``."""
    _check_data(bal, pattern, traj)
    if bal.time_kind == CONTINUOUS:
        return _backward_continuous(bal, pattern, traj)
    return _backward_discrete(bal, pattern, traj)


# -- continuous time ---------------------------------------------------------


def _forward_continuous(bal, pattern, traj):
    sys = bal.system
    grid = sys.grid
    N, n, m, h = grid.n_steps, sys.n, sys.m, grid.h
    A, C, S, X, R = sys.A, sys.C, sys.BBt, sys.BDt, sys.DDt
    R_inv = _r_inverse(R)
    Phi = step_transitions(A, grid)
    y = _batch_dy(traj)
    x = np.zeros((N + 1,) + traj.batch_shape + (n,))
    Q = np.empty((N + 1, n, n))
    K = np.zeros((N + 1, n, m))
    Q[0] = np.eye(n)
    eye = np.eye(n)

    def riccati(c):
        def rhs(t, P):
            At, Ct, Rt = sample_at(A, grid, t), c * sample_at(C, grid, t), sample_at(R, grid, t)
            Kt = np.linalg.solve(Rt, (P @ Ct.T + sample_at(X, grid, t)).T).T
            return At @ P + P @ At.T - Kt @ Rt @ Kt.T + sample_at(S, grid, t)

        return rhs

    def lyapunov(t, P):
        At = sample_at(A, grid, t)
        return At @ P + P @ At.T + sample_at(S, grid, t)

    for iv in pattern.intervals:
        a, b = iv.start, iv.end
        kind = pattern.kind(iv)
        if kind in ("observed", "loss"):
            c = 1.0 if kind == "observed" else 0.0
            Q[a : b + 1] = integrate_matrix_ode(riccati(c), Q[a], grid, a, b, symmetric=True)
            for k in range(a, b):
                Ck = c * C[k]
                Kk = (Q[k] @ Ck.T + X[k]) @ R_inv[k]
                K[k] = Kk
                M = eye + h * (A[k] - Kk @ Ck)
                x[k + 1] = x[k] @ M.T + (y[k + 1] - y[k]) @ Kk.T
        else:
            Q[a : b + 1] = integrate_matrix_ode(lyapunov, Q[a], grid, a, b, symmetric=True)
            for k in range(a, b):
                x[k + 1] = x[k] @ Phi[k].T
            if kind == "values":
                gap = exact_discretize_gap(sys, grid.times[a], grid.times[b])
                x[b], Q[b], _ = kalman_gap_step(x[a], Q[a], gap, y[b] - y[a])
    last = pattern.intervals[-1]
    if pattern.kind(last) in ("observed", "loss"):
        c = 1.0 if pattern.kind(last) == "observed" else 0.0
        K[N] = (Q[N] @ (c * C[N]).T + X[N]) @ R_inv[N]
    return _finish("forward", grid, x, Q, K)


def _backward_continuous(bal, pattern, traj):
    sys = bal.system
    grid = sys.grid
    N, n, m, h = grid.n_steps, sys.n, sys.m, grid.h
    A, C, D, R = sys.A, sys.C, sys.D, sys.DDt
    Abar = bal.Abar
    Bbar = bal.Bbar
    DBt = D @ np.swapaxes(Bbar, -1, -2)
    Sbar = Bbar @ np.swapaxes(Bbar, -1, -2)
    Xbar = Bbar @ np.swapaxes(D, -1, -2)
    R_inv = _r_inverse(R)
    Phi = step_transitions(A, grid)
    y = _batch_dy(traj)
    x = np.zeros((N + 1,) + traj.batch_shape + (n,))
    Q = np.empty((N + 1, n, n))
    K = np.zeros((N + 1, n, m))
    Q[N] = np.eye(n)
    eye = np.eye(n)

    def riccati(c):
        def rhs(t, P):
            Ab, Rt = sample_at(Abar, grid, t), sample_at(R, grid, t)
            Cb = c * sample_at(C, grid, t) + sample_at(DBt, grid, t)
            Kb = -np.linalg.solve(Rt, (P @ Cb.T - sample_at(Xbar, grid, t)).T).T
            return Ab @ P + P @ Ab.T + Kb @ Rt @ Kb.T - sample_at(Sbar, grid, t)

        return rhs

    def lyapunov(t, P):
        Ab = sample_at(Abar, grid, t)
        return Ab @ P + P @ Ab.T - sample_at(Sbar, grid, t)

    for iv in reversed(pattern.intervals):
        a, b = iv.start, iv.end
        kind = pattern.kind(iv)
        if kind in ("observed", "loss"):
            c = 1.0 if kind == "observed" else 0.0
            Q[a : b + 1] = integrate_matrix_ode(riccati(c), Q[b], grid, b, a, symmetric=True)[::-1]
            for k in range(b, a, -1):
                Cb = c * C[k] + DBt[k]
                Kb = -(Q[k] @ Cb.T - Xbar[k]) @ R_inv[k]
                K[k] = Kb
                M = eye - h * (Abar[k] - Kb @ Cb)
                x[k - 1] = x[k] @ M.T - (y[k] - y[k - 1]) @ Kb.T
        else:
            Q[a : b + 1] = integrate_matrix_ode(lyapunov, Q[b], grid, b, a, symmetric=True)[::-1]
            for k in range(b, a, -1):
                x[k - 1] = x[k] @ Phi[k - 1]
            if kind == "values":
                gap = reverse_gap(exact_discretize_gap(sys, grid.times[a], grid.times[b]), eye, eye)
                x[a], Q[a], _ = kalman_gap_step(x[b], Q[b], gap, y[b] - y[a])
    first = pattern.intervals[0]
    if pattern.kind(first) in ("observed", "loss"):
        c = 1.0 if pattern.kind(first) == "observed" else 0.0
        Cb = c * C[0] + DBt[0]
        K[0] = -(Q[0] @ Cb.T - Xbar[0]) @ R_inv[0]
    return _finish("backward", grid, x, Q, K)


# -- discrete time -----------------------------------------------------------


def _forward_discrete(bal, pattern, traj):
    sys = bal.system
    grid = sys.grid
    N, n, m = grid.n_steps, sys.n, sys.m
    y = _batch_dy(traj)
    x = np.zeros((N + 1,) + traj.batch_shape + (n,))
    Q = np.empty((N + 1, n, n))
    K = np.zeros((N + 1, n, m))
    Q[0] = np.eye(n)
    S = sys.BBt
    for iv in pattern.intervals:
        a, b = iv.start, iv.end
        kind = pattern.kind(iv)
        if kind in ("observed", "loss"):
            c = 1.0 if kind == "observed" else 0.0
            for k in range(a, b):
                x[k + 1], Q[k + 1], K[k] = kalman_gap_step(x[k], Q[k], step_update(sys, k, c), y[k + 1] - y[k])
        else:
            for k in range(a, b):
                x[k + 1] = x[k] @ sys.A[k].T
                Q[k + 1] = symmetrize(sys.A[k] @ Q[k] @ sys.A[k].T + S[k])
            if kind == "values":
                gap = exact_discretize_gap(sys, grid.times[a], grid.times[b])
                x[b], Q[b], _ = kalman_gap_step(x[a], Q[a], gap, y[b] - y[a])
    return _finish("forward", grid, x, Q, K)


def _backward_step(bal: BalancedModel, k: int, c: float) -> GapUpdate:
    """Backward one-step model from node ``k+1`` to node ``k`` built from the orthogonal extension."""
    sys, ext = bal.system, bal.extension
    F, G, H, J = ext.F[k], ext.G[k], ext.H[k], ext.J[k]
    Ck, Dk = c * sys.C[k], sys.D[k]
    Cbar = Ck @ F.T + Dk @ G.T
    Dbar = Ck @ H.T + Dk @ J.T
    BD = np.concatenate([H.T, Dbar], axis=0)
    t = sys.grid.times
    return GapUpdate(F.T, Cbar, BD @ BD.T, t[k + 1], t[k])


def _backward_discrete(bal, pattern, traj):
    sys = bal.system
    grid = sys.grid
    N, n, m = grid.n_steps, sys.n, sys.m
    y = _batch_dy(traj)
    x = np.zeros((N + 1,) + traj.batch_shape + (n,))
    Q = np.empty((N + 1, n, n))
    K = np.zeros((N + 1, n, m))
    Q[N] = np.eye(n)
    eye = np.eye(n)
    Hs = bal.extension.H
    for iv in reversed(pattern.intervals):
        a, b = iv.start, iv.end
        kind = pattern.kind(iv)
        if kind in ("observed", "loss"):
            c = 1.0 if kind == "observed" else 0.0
            for k in range(b - 1, a - 1, -1):
                x[k], Q[k], K[k + 1] = kalman_gap_step(x[k + 1], Q[k + 1], _backward_step(bal, k, c), y[k + 1] - y[k])
        else:
            for k in range(b - 1, a - 1, -1):
                F = sys.A[k]
                x[k] = x[k + 1] @ F
                Q[k] = symmetrize(F.T @ Q[k + 1] @ F + Hs[k].T @ Hs[k])
            if kind == "values":
                gap = reverse_gap(exact_discretize_gap(sys, grid.times[a], grid.times[b]), eye, eye)
                x[a], Q[a], _ = kalman_gap_step(x[b], Q[b], gap, y[b] - y[a])
    return _finish("backward", grid, x, Q, K)
