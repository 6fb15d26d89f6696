"""Small dense matrix kernel.

Lyapunov solvers, symmetric square roots, the derivative of ``P^{-1/2}``,
fixed-step RK4 integration of matrix ODEs on a uniform grid, transition
matrices and a guarded inverse for covariance matrices.  Everything here
works on plain ``numpy`` arrays; functions documented as "stack-aware"
accept arrays of shape ``(..., n, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import Indefinite, NonFinite, NotHurwitz, NotSchurStable, NotSPD, OffGrid

SPD_RTOL = 1e-12
_GRID_ATOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + h, ..., t0 + n_steps*h``."""

    t0: float
    h: float
    n_steps: int

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"grid step must be positive, got {self.h}")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")

    @classmethod
    def from_span(cls, t0: float, t_end: float, h: float) -> "TimeGrid":
        steps = (t_end - t0) / h
        k = int(round(steps))
        if abs(t0 + k * h - t_end) > _GRID_ATOL * max(1.0, abs(t_end)):
            raise OffGrid(f"span [{t0}, {t_end}] is not a multiple of h={h}")
        return cls(float(t0), float(h), k)

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.h

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n_nodes)

    def index_of(self, t: float) -> int:
        """Node index of time ``t``; raises :class:`OffGrid` if ``t`` is not a node."""
        s = (t - self.t0) / self.h
        k = int(round(s))
        if abs(self.t0 + k * self.h - t) > _GRID_ATOL * max(1.0, abs(t)) or not 0 <= k <= self.n_steps:
            raise OffGrid(f"time {t} is not a node of {self}")
        return k

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.h / factor, self.n_steps * factor)

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.n_steps % factor:
            raise OffGrid(f"cannot coarsen {self.n_steps} steps by {factor}")
        return TimeGrid(self.t0, self.h * factor, self.n_steps // factor)


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _vec(M):
    return M.reshape(-1, order="F")


def _unvec(v, n):
    return v.reshape(n, n, order="F")


def is_spd(M: np.ndarray, rtol: float = SPD_RTOL) -> bool:
    lam = np.linalg.eigvalsh(symmetrize(np.asarray(M, dtype=float)))
    lam_max = lam.max(axis=-1)
    return bool(np.all(lam_max > 0) and np.all(lam.min(axis=-1) >= rtol * lam_max))


def check_spd(M: np.ndarray, what: str = "matrix", rtol: float = SPD_RTOL) -> None:
    """Raise :class:`NotSPD` unless every matrix in the stack is SPD."""
    lam = np.linalg.eigvalsh(symmetrize(np.asarray(M, dtype=float)))
    lam = lam.reshape(-1, lam.shape[-1])
    lam_max = lam.max(axis=-1)
    bad = (lam_max <= 0) | (lam.min(axis=-1) < rtol * np.abs(lam_max))
    if np.any(bad):
        first = int(np.argmax(bad))
        raise NotSPD(f"{what} is not SPD (entry {first}, eigenvalues {lam[first]})")


def solve_lyapunov_continuous(A: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Solve ``A P + P A' + S = 0`` by Kronecker vectorization.

    Raises :class:`NotHurwitz` if the vectorized system is singular or the
    solution is not SPD (unstable ``A`` or a forcing that does not reach
    every state).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = A.shape[0]
    eye = np.eye(n)
    K = np.kron(eye, A) + np.kron(A, eye)
    try:
        p = np.linalg.solve(K, -_vec(S))
    except np.linalg.LinAlgError as exc:
        raise NotHurwitz(f"continuous Lyapunov operator is singular: {exc}") from None
    P = symmetrize(_unvec(p, n))
    if not is_spd(P):
        raise NotHurwitz("continuous Lyapunov solution is not positive definite")
    return P


def solve_lyapunov_discrete(A: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Solve ``P = A P A' + S``; raises :class:`NotSchurStable` on failure."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = A.shape[0]
    K = np.eye(n * n) - np.kron(A, A)
    try:
        p = np.linalg.solve(K, _vec(S))
    except np.linalg.LinAlgError as exc:
        raise NotSchurStable(f"discrete Lyapunov operator is singular: {exc}") from None
    P = symmetrize(_unvec(p, n))
    if not is_spd(P):
        raise NotSchurStable("discrete Lyapunov solution is not positive definite")
    return P


def _spd_eigh(M):
    lam, V = np.linalg.eigh(symmetrize(np.asarray(M, dtype=float)))
    lam_max = lam.max(axis=-1, keepdims=True)
    if np.any(lam_max <= 0) or np.any(lam < SPD_RTOL * lam_max):
        raise NotSPD("matrix square root requires an SPD argument")
    return lam, V


def _from_eig(V, d):
    return symmetrize((V * d[..., None, :]) @ np.swapaxes(V, -1, -2))


def sqrtm_spd(M: np.ndarray) -> np.ndarray:
    """Unique SPD square root via the symmetric eigendecomposition (stack-aware)."""
    lam, V = _spd_eigh(M)
    return _from_eig(V, np.sqrt(lam))


def sqrtm_spd_pair(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(M^{1/2}, M^{-1/2})`` from one eigendecomposition (stack-aware)."""
    lam, V = _spd_eigh(M)
    root = np.sqrt(lam)
    return _from_eig(V, root), _from_eig(V, 1.0 / root)


def ddt_inv_sqrt(P: np.ndarray, Pdot: np.ndarray) -> np.ndarray:
    """Time derivative of ``P^{-1/2}`` given ``P`` and ``dP/dt`` (stack-aware).

    With ``S = P^{-1/2}`` the derivative ``X`` solves the Sylvester equation
    ``X S + S X = -P^{-1} Pdot P^{-1}``, which is diagonal in the
    eigenbasis of ``P``.
    """
    lam, V = _spd_eigh(P)
    Vt = np.swapaxes(V, -1, -2)
    inv_lam = 1.0 / lam
    rhs = -(inv_lam[..., :, None] * (Vt @ np.asarray(Pdot, dtype=float) @ V) * inv_lam[..., None, :])
    s = 1.0 / np.sqrt(lam)
    X = rhs / (s[..., :, None] + s[..., None, :])
    return V @ X @ Vt


def psd_inverse(M: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Inverse of ``M + max(0, eps - lambda_min) I`` (stack-aware).

    Raises :class:`Indefinite` if ``lambda_min < -eps``.
    """
    lam, V = np.linalg.eigh(symmetrize(np.asarray(M, dtype=float)))
    lam_min = lam.min(axis=-1, keepdims=True)
    if np.any(lam_min < -eps):
        raise Indefinite(f"matrix has eigenvalue {float(lam_min.min())} below -{eps}")
    shifted = lam + np.maximum(0.0, eps - lam_min)
    if np.any(shifted <= 0):
        raise Indefinite("matrix is singular and no jitter was allowed")
    return _from_eig(V, 1.0 / shifted)


def sample_at(values: np.ndarray, grid: TimeGrid, t: float) -> np.ndarray:
    """Linear interpolation of node-sampled ``values`` (leading axis = node) at time ``t``."""
    s = (t - grid.t0) / grid.h
    i = min(max(int(math.floor(s)), 0), grid.n_steps - 1) if grid.n_steps else 0
    w = s - i
    if w <= 1e-12 or grid.n_steps == 0:
        return values[i]
    if w >= 1 - 1e-12:
        return values[i + 1]
    return (1.0 - w) * values[i] + w * values[i + 1]


def integrate_matrix_ode(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    X0: np.ndarray,
    grid: TimeGrid,
    i_start: int,
    i_end: int,
    symmetric: bool = False,
) -> np.ndarray:
    """Classical RK4 from node ``i_start`` to node ``i_end`` on ``grid``.

    Integrates backward in time when ``i_end < i_start``.  Returns one matrix
    per visited node in integration order, so ``out[0]`` is ``X0``.  With
    ``symmetric=True`` every iterate is replaced by its symmetric part.
    """
    X = np.array(X0, dtype=float)
    direction = 1 if i_end >= i_start else -1
    count = abs(i_end - i_start)
    out = np.empty((count + 1,) + X.shape)
    out[0] = X
    dt = direction * grid.h
    t = grid.t0 + i_start * grid.h
    for j in range(count):
        k1 = rhs(t, X)
        k2 = rhs(t + 0.5 * dt, X + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, X + 0.5 * dt * k2)
        k4 = rhs(t + dt, X + dt * k3)
        X = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if symmetric:
            X = symmetrize(X)
        if not np.all(np.isfinite(X)):
            raise NonFinite(f"matrix ODE diverged near t={t + dt:g}")
        t = grid.t0 + (i_start + direction * (j + 1)) * grid.h
        out[j + 1] = X
    return out


def transition_matrix(A_path: np.ndarray, grid: TimeGrid, t1: float, t2: float) -> np.ndarray:
    """Transition matrix ``Phi(t2, t1)`` of ``dx/dt = A(t) x`` for grid nodes ``t1 <= t2``."""
    i1, i2 = grid.index_of(t1), grid.index_of(t2)
    if i2 < i1:
        raise OffGrid(f"transition_matrix needs t1 <= t2, got {t1} > {t2}")
    A_path = np.asarray(A_path, dtype=float)
    n = A_path.shape[-1]
    path = integrate_matrix_ode(lambda t, X: sample_at(A_path, grid, t) @ X, np.eye(n), grid, i1, i2)
    return path[-1]


def step_transitions(A_path: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """One-step RK4 transition matrices ``Phi(t_{k+1}, t_k)`` for every grid step.

    Vectorized over steps; equivalent to calling :func:`transition_matrix`
    on each step.
    """
    A_path = np.asarray(A_path, dtype=float)
    h = grid.h
    A0 = A_path[:-1]
    A1 = A_path[1:]
    Am = 0.5 * (A0 + A1)
    n = A_path.shape[-1]
    eye = np.broadcast_to(np.eye(n), A0.shape)
    k1 = A0
    k2 = Am @ (eye + 0.5 * h * k1)
    k3 = Am @ (eye + 0.5 * h * k2)
    k4 = A1 @ (eye + h * k3)
    return eye + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
