"""Two-filter fusion and a brute-force Gaussian-conditioning oracle.

In balanced coordinates the smoothed estimate combines the forward and
backward filters as

    Q^{-1} = Q_-^{-1} + Qbar_+^{-1} - I,
    xhat   = Q (Q_-^{-1} x_- + Qbar_+^{-1} xbar_+).

:func:`batch_oracle` shares no code with the filters.  It writes every node
state and every observed quantity as a linear map of the initial state and
the stacked noise sequence of a discrete-time model, then conditions one
joint Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Indefinite, Singular
from .model import DISCRETE, BalancedModel, LtvSystem
from .numerics import TimeGrid, psd_inverse, symmetrize

FUSE_JITTER = 1e-12
NEAR_SINGULAR = 1e-9


@dataclass(frozen=True, eq=False)
class SmootherResult:
    """Fused estimate ``x`` (``(..., N+1, n)``), error covariance ``Q`` and mixing weights."""

    grid: TimeGrid
    x: np.ndarray
    Q: np.ndarray
    L_minus: np.ndarray
    L_plus: np.ndarray
    identity_residual: np.ndarray
    flagged: np.ndarray

    @property
    def weight_residual(self) -> np.ndarray:
        """Per-node ``||L_- + L_+ (I - Qbar_+) - I||_F`` given the backward ``Qbar_+`` is recoverable from ``L_+``."""
        n = self.Q.shape[-1]
        eye = np.eye(n)
        Qp = np.linalg.solve(self.L_plus, self.Q)
        return np.linalg.norm(self.L_minus + self.L_plus @ (eye - Qp) - eye, axis=(-2, -1))


def fuse(fwd, bwd, jitter: float = FUSE_JITTER) -> SmootherResult:
    """Combine forward and backward filter results node by node.

    Raises :class:`Indefinite` if ``Q_-^{-1} + Qbar_+^{-1} - I`` is not positive
    definite at some node, which means the inputs were not produced in
    balanced coordinates or the filters collapsed numerically.
    """
    if fwd.grid != bwd.grid:
        raise ValueError("forward and backward results live on different grids")
    Qm, Qp = fwd.Q, bwd.Q
    n = Qm.shape[-1]
    eye = np.eye(n)
    lam_m = np.linalg.eigvalsh(Qm)[:, 0]
    lam_p = np.linalg.eigvalsh(Qp)[:, 0]
    flagged = np.flatnonzero((lam_m < NEAR_SINGULAR) | (lam_p < NEAR_SINGULAR))
    Qm_inv = psd_inverse(Qm, jitter)
    Qp_inv = psd_inverse(Qp, jitter)
    info = symmetrize(Qm_inv + Qp_inv - eye)
    lam = np.linalg.eigvalsh(info)
    if np.any(lam[:, 0] <= 0):
        k = int(np.argmin(lam[:, 0]))
        raise Indefinite(f"fused information matrix is not positive definite at t={fwd.grid.times[k]:g}")
    Q = psd_inverse(info)
    L_minus = Q @ Qm_inv
    L_plus = Q @ Qp_inv
    x = np.einsum("kij,...kj->...ki", L_minus, fwd.x) + np.einsum("kij,...kj->...ki", L_plus, bwd.x)
    residual = np.linalg.norm(np.linalg.inv(Q) - np.linalg.inv(Qm) - np.linalg.inv(Qp) + eye, axis=(-2, -1))
    return SmootherResult(fwd.grid, x, Q, L_minus, L_plus, residual, flagged)


@dataclass(frozen=True, eq=False)
class OracleResult:
    """Conditional mean ``(N+1, n)``, conditional covariance and prior covariance per node."""

    grid: TimeGrid
    mean: np.ndarray
    cov: np.ndarray
    prior: np.ndarray
    n_obs: int


CONTRACTS = ("split", "causal", "anticausal", "full")


def _observation_blocks(pattern, n_steps: int):
    """``(first_step, last_step_exclusive, signal)`` for every observed quantity, plus the signal mask."""
    signal = np.ones(n_steps)
    blocks = []
    for iv in pattern.intervals:
        mode = iv.mode if iv.mode is not None else pattern.mode
        mode = getattr(mode, "value", mode)
        if not iv.observed and mode == "signal-loss":
            signal[iv.start : iv.end] = 0.0
        if iv.observed or mode == "signal-loss":
            blocks.extend((k, k + 1) for k in range(iv.start, iv.end))
        elif mode == "y":
            blocks.append((iv.start, iv.end))
    return blocks, signal


def batch_oracle(sys, pattern, observations, contract: str = "split") -> OracleResult:
    """Condition every node state on the observations by dense Gaussian algebra.

    Parameters
    ----------
    sys : LtvSystem or BalancedModel
        Discrete-time model; node ``k`` holds the matrices of step ``k -> k+1``.
    pattern : ObservationPattern
    observations : Trajectory or array
        A trajectory, or per-step increments ``dy`` of shape ``(N, m)``.
    contract : {'split', 'causal', 'anticausal', 'full'}
        Which observations each node may use.  ``causal`` keeps quantities
        ending at or before the node, ``anticausal`` those starting at or
        after it, ``split`` both (the smoother's information set: a
        process-value increment across a gap is hidden from nodes strictly
        inside that gap) and ``full`` every observation.
    """
    if contract not in CONTRACTS:
        raise ValueError(f"contract must be one of {CONTRACTS}")
    sys = sys.system if isinstance(sys, BalancedModel) else sys
    if not isinstance(sys, LtvSystem) or sys.time_kind != DISCRETE:
        raise ValueError("batch_oracle needs a discrete-time LtvSystem")
    dy = observations if isinstance(observations, np.ndarray) else np.diff(observations.y, axis=-2)
    grid = sys.grid
    N, n, m, p = grid.n_steps, sys.n, sys.m, sys.p
    if dy.shape != (N, m):
        raise ValueError(f"observations must have shape {(N, m)}, got {dy.shape}")

    # Base vector z ~ N(0, I): P0^{1/2} z_0 is the initial state, z_{k+1} drives step k.
    lam, V = np.linalg.eigh(symmetrize(sys.P0))
    P0_half = (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
    dim = n + N * p
    X = np.zeros((N + 1, n, dim))
    X[0, :, :n] = P0_half
    Y = np.zeros((N, m, dim))
    blocks, signal = _observation_blocks(pattern, N)
    for k in range(N):
        cols = slice(n + k * p, n + (k + 1) * p)
        X[k + 1] = sys.A[k] @ X[k]
        X[k + 1][:, cols] += sys.B[k]
        Y[k] = signal[k] * (sys.C[k] @ X[k])
        Y[k][:, cols] += sys.D[k]

    O = np.concatenate([Y[a:b].sum(axis=0) for a, b in blocks], axis=0) if blocks else np.zeros((0, dim))
    obs = np.concatenate([dy[a:b].sum(axis=0) for a, b in blocks]) if blocks else np.zeros(0)
    starts = np.repeat([a for a, _ in blocks], m) if blocks else np.zeros(0, dtype=int)
    ends = np.repeat([b for _, b in blocks], m) if blocks else np.zeros(0, dtype=int)

    prior = symmetrize(X @ np.swapaxes(X, -1, -2))
    S_oo = O @ O.T
    S_xo = X @ O.T
    mean = np.zeros((N + 1, n))
    cov = prior.copy()

    groups: dict = {}
    for j in range(N + 1):
        if contract == "causal":
            keep = ends <= j
        elif contract == "anticausal":
            keep = starts >= j
        elif contract == "split":
            keep = (ends <= j) | (starts >= j)
        else:
            keep = np.ones(len(starts), dtype=bool)
        groups.setdefault(keep.tobytes(), (keep, []))[1].append(j)

    for keep, nodes in groups.values():
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            continue
        S = S_oo[np.ix_(idx, idx)]
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise Singular("observation covariance is singular") from None
        if np.min(np.diag(L)) ** 2 < 1e-14 * np.max(np.diag(S)):
            raise Singular("observation covariance is numerically singular")
        nodes = np.asarray(nodes)
        W = np.linalg.solve(L, np.swapaxes(S_xo[nodes][:, :, idx], -1, -2))  # (k, |idx|, n)
        v = np.linalg.solve(L, obs[idx])
        mean[nodes] = np.einsum("kon,o->kn", W, v)
        cov[nodes] = symmetrize(prior[nodes] - np.swapaxes(W, -1, -2) @ W)
    return OracleResult(grid, mean, cov, prior, int(O.shape[0]))
