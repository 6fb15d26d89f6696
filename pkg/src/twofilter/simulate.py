"""Sample paths and exact discretization across observation gaps.

Trajectories are generated by Euler-Maruyama on the model grid from a
seeded counter-based generator (Philox), so a given ``(model, seed,
n_rep)`` always yields the same arrays.  Discrete-time models are simulated
exactly; their per-step outputs are stored as increments of a cumulative
``y`` so that both time kinds expose observations as ``diff(y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFinite, OffGrid
from .model import CONTINUOUS, DISCRETE, BalancedModel, LtvSystem
from .numerics import TimeGrid, integrate_matrix_ode, sample_at, symmetrize


def make_rng(seed: int) -> np.random.Generator:
    """Philox stream keyed by ``seed`` (any integer, reduced mod 2**64)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) % 2**64)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sample path(s) on a grid.

    ``x`` is ``(..., N+1, n)``, ``y`` is ``(..., N+1, m)`` with ``y[..., 0, :] = 0``
    and ``dw`` is ``(..., N, p)``.  A leading replication axis is present
    for batches produced with ``n_rep``.
    """

    grid: TimeGrid
    x: np.ndarray
    y: np.ndarray
    dw: np.ndarray
    seed: int
    time_kind: str = CONTINUOUS

    @property
    def dy(self) -> np.ndarray:
        return np.diff(self.y, axis=-2)

    @property
    def batch_shape(self) -> tuple:
        return self.x.shape[:-2]

    def subsample(self, factor: int) -> "Trajectory":
        """Trajectory on the grid coarsened by ``factor``; increments are aggregated."""
        grid = self.grid.coarsen(factor)
        dw = self.dw.reshape(self.dw.shape[:-2] + (grid.n_steps, factor, self.dw.shape[-1])).sum(axis=-2)
        return Trajectory(grid, self.x[..., ::factor, :], self.y[..., ::factor, :], dw, self.seed, self.time_kind)

    def replication(self, r: int) -> "Trajectory":
        return Trajectory(self.grid, self.x[r], self.y[r], self.dw[r], self.seed, self.time_kind)


def simulate(
    model: LtvSystem | BalancedModel,
    grid: TimeGrid | None = None,
    seed: int = 0,
    n_rep: int | None = None,
    c_mask: np.ndarray | None = None,
    x0: np.ndarray | None = None,
) -> Trajectory:
    """Simulate ``model`` on its grid.

    Parameters
    ----------
    model : LtvSystem or BalancedModel
        A balanced model is simulated in its normalized coordinates.
    grid : TimeGrid, optional
        Must equal the model grid when given.
    seed : int
        Identical seeds give bit-identical trajectories.
    n_rep : int, optional
        Number of independent replications (adds a leading axis).
    c_mask : array of shape (N,), optional
        Per-step multiplier on ``C``; zero entries model signal loss.
    x0 : array, optional
        Deterministic initial state instead of a draw from ``N(0, P0)``.

    Notes
    -----
    Draw order from the stream: the initial-state normals for every
    replication, then all noise increments, step-major.
    """
    sys = model.system if isinstance(model, BalancedModel) else model
    if grid is not None and grid != sys.grid:
        raise OffGrid(f"simulation grid {grid} differs from the model grid {sys.grid}")
    grid = sys.grid
    N, n, m, p = grid.n_steps, sys.n, sys.m, sys.p
    R = 1 if n_rep is None else int(n_rep)
    rng = make_rng(seed)
    if x0 is None:
        z0 = rng.standard_normal((R, n))
        lam, V = np.linalg.eigh(symmetrize(sys.P0))
        P0_half = (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
        x_start = z0 @ P0_half
    else:
        x_start = np.broadcast_to(np.asarray(x0, dtype=float), (R, n))
    noise = rng.standard_normal((N, R, p))
    mask = np.ones(N) if c_mask is None else np.asarray(c_mask, dtype=float)

    x = np.empty((N + 1, R, n))
    y = np.empty((N + 1, R, m))
    x[0] = x_start
    y[0] = 0.0
    if sys.time_kind == CONTINUOUS:
        h = grid.h
        dw = noise * np.sqrt(h)
        for k in range(N):
            xk = x[k]
            x[k + 1] = xk + h * (xk @ sys.A[k].T) + dw[k] @ sys.B[k].T
            y[k + 1] = y[k] + (h * mask[k]) * (xk @ sys.C[k].T) + dw[k] @ sys.D[k].T
    else:
        dw = noise
        for k in range(N):
            xk = x[k]
            x[k + 1] = xk @ sys.A[k].T + dw[k] @ sys.B[k].T
            y[k + 1] = y[k] + mask[k] * (xk @ sys.C[k].T) + dw[k] @ sys.D[k].T
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFinite("simulation overflowed; reduce the step or check model stability")
    x, y, dw = (np.moveaxis(a, 0, 1) for a in (x, y, dw))
    if n_rep is None:
        x, y, dw = x[0], y[0], dw[0]
    return Trajectory(grid, x, y, dw, int(seed), sys.time_kind)


@dataclass(frozen=True, eq=False)
class GapUpdate:
    """Discrete transition across ``[t1, t2]``.

    ``x(t2) = A x(t1) + u`` and ``Delta y = C x(t1) + eta`` where the noise
    ``(u, eta)`` has covariance ``gram``; ``B`` and ``D`` are the
    corresponding rows of its symmetric square root.
    """

    A: np.ndarray
    C: np.ndarray
    gram: np.ndarray
    t1: float
    t2: float

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def Sxx(self):
        return self.gram[: self.n, : self.n]

    @property
    def Sxy(self):
        return self.gram[: self.n, self.n :]

    @property
    def Syy(self):
        return self.gram[self.n :, self.n :]

    def noise_factor(self) -> np.ndarray:
        lam, V = np.linalg.eigh(symmetrize(self.gram))
        return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T

    @property
    def B(self):
        return self.noise_factor()[: self.n]

    @property
    def D(self):
        return self.noise_factor()[self.n :]


def _augmented_fields(sys: LtvSystem, signal: float):
    n, m = sys.n, sys.m
    M = np.zeros((sys.grid.n_nodes, n + m, n + m))
    M[:, :n, :n] = sys.A
    M[:, n:, :n] = signal * sys.C
    BD = np.concatenate([sys.B, sys.D], axis=1)
    return M, BD @ np.swapaxes(BD, -1, -2)


def exact_discretize_gap(sys: LtvSystem | BalancedModel, t1: float, t2: float, signal: float = 1.0, substeps: int = 1) -> GapUpdate:
    """Exact discrete update of state and output increment across ``[t1, t2]``.

    For continuous models a single augmented matrix ODE is integrated: the
    block ``Psi = [Phi(t, t1); int C Phi]`` obeys ``dPsi/dt = M Psi`` and the
    noise Gramian ``G`` obeys ``dG/dt = M G + G M' + [B; D][B; D]'`` with
    ``M = [[A, 0], [C, 0]]``, ``G(t1) = 0``.  Discrete models compose their
    one-step updates.  ``signal = 0`` discretizes with ``C = 0``.
    """
    sys = sys.system if isinstance(sys, BalancedModel) else sys
    grid = sys.grid
    i1, i2 = grid.index_of(t1), grid.index_of(t2)
    if i2 < i1:
        raise OffGrid(f"gap needs t1 <= t2, got [{t1}, {t2}]")
    n, m = sys.n, sys.m
    if sys.time_kind == DISCRETE:
        gap = identity_gap(n, m, t1)
        for k in range(i1, i2):
            gap = compose_gaps(gap, step_update(sys, k, signal))
        return gap
    M, SS = _augmented_fields(sys, signal)
    fine = grid.refine(substeps) if substeps > 1 else grid

    def rhs(t, X):
        Mt = sample_at(M, grid, t)
        Psi, G = X[:, :n], X[:, n:]
        return np.concatenate([Mt @ Psi, Mt @ G + G @ Mt.T + sample_at(SS, grid, t)], axis=1)

    X0 = np.zeros((n + m, 2 * n + m))
    X0[:n, :n] = np.eye(n)
    X = integrate_matrix_ode(rhs, X0, fine, i1 * substeps, i2 * substeps)[-1]
    return GapUpdate(X[:n, :n], X[n:, :n], symmetrize(X[:, n:]), grid.times[i1], grid.times[i2])


def identity_gap(n: int, m: int, t: float = 0.0) -> GapUpdate:
    return GapUpdate(np.eye(n), np.zeros((m, n)), np.zeros((n + m, n + m)), t, t)


def step_update(sys: LtvSystem, k: int, signal: float = 1.0) -> GapUpdate:
    """One step of a discrete-time model as a :class:`GapUpdate`."""
    BD = np.concatenate([sys.B[k], sys.D[k]], axis=0)
    t = sys.grid.times
    return GapUpdate(sys.A[k], signal * sys.C[k], BD @ BD.T, t[k], t[k + 1])


def compose_gaps(first: GapUpdate, second: GapUpdate) -> GapUpdate:
    """Update across ``[first.t1, second.t2]`` from two adjacent updates.

    The output increments add, so ``C = C1 + C2 A1`` and the noise maps
    through ``[[A2, 0], [C2, I]]``.
    """
    n, m = first.n, first.C.shape[0]
    T = np.zeros((n + m, n + m))
    T[:n, :n] = second.A
    T[n:, :n] = second.C
    T[n:, n:] = np.eye(m)
    gram = symmetrize(T @ first.gram @ T.T + second.gram)
    return GapUpdate(second.A @ first.A, first.C + second.C @ first.A, gram, first.t1, second.t2)


def reverse_gap(gap: GapUpdate, P1: np.ndarray | None = None, P2: np.ndarray | None = None) -> GapUpdate:
    """Backward form of ``gap``: regress ``(x(t1), Delta y)`` on ``x(t2)``.

    ``P1, P2`` are the state covariances at the two ends (identity in
    balanced coordinates).  The result maps ``x(t2)`` to ``x(t1)`` with a
    noise uncorrelated with ``x(t2)`` and with everything after ``t2``.
    """
    n, m = gap.n, gap.C.shape[0]
    P1 = np.eye(n) if P1 is None else np.asarray(P1, dtype=float)
    if P2 is None:
        P2 = symmetrize(gap.A @ P1 @ gap.A.T + gap.Sxx)
    P2_inv = np.linalg.inv(P2)
    cross_x = P1 @ gap.A.T
    cross_y = gap.C @ P1 @ gap.A.T + gap.Sxy.T
    Abar = cross_x @ P2_inv
    Cbar = cross_y @ P2_inv
    joint = np.block([[P1, P1 @ gap.C.T], [gap.C @ P1, gap.C @ P1 @ gap.C.T + gap.Syy]])
    L = np.concatenate([Abar, Cbar], axis=0)
    gram = symmetrize(joint - L @ P2 @ L.T)
    return GapUpdate(Abar, Cbar, gram, gap.t2, gap.t1)


def discretize_system(sys: LtvSystem | BalancedModel, signal_mask: np.ndarray | None = None, substeps: int = 1) -> LtvSystem:
    """Exact one-step discretization of a continuous model on its own grid.

    Step ``k`` becomes ``x_{k+1} = A_k x_k + B_k v_k``,
    ``Delta y_k = C_k x_k + D_k v_k`` with ``v_k`` standard normal of
    dimension ``n + m``.  ``signal_mask[k] = 0`` bakes signal loss into step
    ``k``.
    """
    sys = sys.system if isinstance(sys, BalancedModel) else sys
    if sys.time_kind != CONTINUOUS:
        raise ValueError("discretize_system expects a continuous-time model")
    grid = sys.grid
    N, n, m = grid.n_steps, sys.n, sys.m
    mask = np.ones(N) if signal_mask is None else np.asarray(signal_mask, dtype=float)
    A = np.empty((N + 1, n, n))
    B = np.empty((N + 1, n, n + m))
    C = np.empty((N + 1, m, n))
    D = np.empty((N + 1, m, n + m))
    t = grid.times
    for k in range(N):
        gap = exact_discretize_gap(sys, t[k], t[k + 1], signal=mask[k], substeps=substeps)
        F = gap.noise_factor()
        A[k], C[k], B[k], D[k] = gap.A, gap.C, F[:n], F[n:]
    A[N], B[N], C[N], D[N] = A[N - 1], B[N - 1], C[N - 1], D[N - 1]
    return LtvSystem(grid, A, B, C, D, sys.P0, DISCRETE)
