"""Balanced realizations, backward models and all-pass extensions.

A :class:`LtvSystem` stores its coefficient matrices sampled at every node
of a :class:`~twofilter.numerics.TimeGrid`.  For ``time_kind="discrete"``
the matrices at node ``k`` govern the step ``k -> k+1`` and the values at
the last node only pad the arrays to a uniform length.

The normalizing change of coordinates ``xi = P(t)^{-1/2} x`` produces a
model whose state covariance is the identity at every time, so that the
forward state and the state of the time-reversed model coincide.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NotBalanced, NotSPD, Singular
from .numerics import (
    TimeGrid,
    check_spd,
    ddt_inv_sqrt,
    integrate_matrix_ode,
    sample_at,
    solve_lyapunov_continuous,
    solve_lyapunov_discrete,
    sqrtm_spd_pair,
    symmetrize,
)

CONTINUOUS = "continuous"
DISCRETE = "discrete"
BALANCE_ATOL = 1e-6


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _per_node(M, grid: TimeGrid, name: str, ndim: int = 2):
    M = np.asarray(M, dtype=float)
    if M.ndim == ndim:
        M = np.broadcast_to(M, (grid.n_nodes,) + M.shape)
    elif M.ndim != ndim + 1 or M.shape[0] != grid.n_nodes:
        raise ValueError(f"{name} must be a matrix or one matrix per node ({grid.n_nodes}), got shape {M.shape}")
    return _frozen(M)


def _t(M):
    return np.swapaxes(M, -1, -2)


@dataclass(frozen=True, eq=False)
class LtvSystem:
    """``dx = A x dt + B dw``, ``dy = C x dt + D dw`` (or the discrete analogue).

    ``A, B, C, D`` have shapes ``(N+1, n, n)``, ``(N+1, n, p)``,
    ``(N+1, m, n)``, ``(N+1, m, p)``.  Use :meth:`constant` for
    time-invariant models.
    """

    grid: TimeGrid
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    P0: np.ndarray
    time_kind: str = CONTINUOUS

    def __post_init__(self):
        g = self.grid
        object.__setattr__(self, "A", _per_node(self.A, g, "A"))
        object.__setattr__(self, "B", _per_node(self.B, g, "B"))
        object.__setattr__(self, "C", _per_node(self.C, g, "C"))
        object.__setattr__(self, "D", _per_node(self.D, g, "D"))
        object.__setattr__(self, "P0", _frozen(self.P0))
        n, p = self.B.shape[1:]
        m = self.C.shape[1]
        if self.A.shape[1:] != (n, n) or self.C.shape[2] != n or self.D.shape[1:] != (m, p):
            raise ValueError(
                f"inconsistent dimensions: A{self.A.shape[1:]} B{self.B.shape[1:]} "
                f"C{self.C.shape[1:]} D{self.D.shape[1:]}"
            )
        if self.P0.shape != (n, n):
            raise ValueError(f"P0 must be {n}x{n}, got {self.P0.shape}")
        if self.time_kind not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"unknown time_kind {self.time_kind!r}")
        R = self.D @ _t(self.D)
        lam = np.linalg.eigvalsh(R)
        scale = np.maximum(lam.max(axis=-1), 1e-300)
        if m and np.any(lam.min(axis=-1) <= 1e-12 * scale):
            raise NotSPD("D D' must be invertible at every node (purely deterministic output component)")

    @classmethod
    def constant(cls, A, B, C, D, grid: TimeGrid, P0="stationary", time_kind: str = CONTINUOUS) -> "LtvSystem":
        A, B, C, D = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C, D))
        if isinstance(P0, str):
            if P0 != "stationary":
                raise ValueError(f"P0 must be a matrix or 'stationary', got {P0!r}")
            P0 = stationary_covariance(A, B, time_kind)
        return cls(grid, A, B, C, D, np.atleast_2d(np.asarray(P0, dtype=float)), time_kind)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.C.shape[1]

    @property
    def p(self) -> int:
        return self.B.shape[2]

    @property
    def BBt(self) -> np.ndarray:
        return self.B @ _t(self.B)

    @property
    def BDt(self) -> np.ndarray:
        return self.B @ _t(self.D)

    @property
    def DDt(self) -> np.ndarray:
        return self.D @ _t(self.D)

    def with_P0(self, P0) -> "LtvSystem":
        return replace(self, P0=np.asarray(P0, dtype=float))

    def resampled(self, grid: TimeGrid) -> "LtvSystem":
        """Continuous model on another grid inside the current span (linear interpolation between nodes)."""
        if self.time_kind != CONTINUOUS:
            raise ValueError("only continuous-time models can be resampled")
        if grid.t0 < self.grid.t0 - 1e-12 or grid.t_end > self.grid.t_end + 1e-9 * max(1.0, abs(grid.t_end)):
            raise ValueError(f"{grid} extends outside {self.grid}")
        if grid.t0 != self.grid.t0:
            raise ValueError("resampled grids must share the start time (P0 is attached to it)")
        fields = [np.stack([sample_at(M, self.grid, t) for t in grid.times]) for M in (self.A, self.B, self.C, self.D)]
        return LtvSystem(grid, *fields, self.P0, self.time_kind)


def stationary_covariance(A, B, time_kind: str = CONTINUOUS) -> np.ndarray:
    A = np.atleast_2d(A)
    S = B @ B.T
    if time_kind == CONTINUOUS:
        return solve_lyapunov_continuous(A, S)
    return solve_lyapunov_discrete(A, S)


@dataclass(frozen=True, eq=False)
class CovariancePath:
    """State covariance ``P(t)`` at every node with cached square roots.

    ``R`` is the drift correction ``[d/dt P^{-1/2}] P^{1/2}`` (zero for
    discrete-time models).
    """

    grid: TimeGrid
    P: np.ndarray
    P_half: np.ndarray
    P_inv_half: np.ndarray
    Pdot: np.ndarray
    R: np.ndarray


def propagate_covariance(sys: LtvSystem) -> CovariancePath:
    """Integrate (or iterate) the Lyapunov equation for ``P(t)`` from ``sys.P0``."""
    check_spd(sys.P0, "P0")
    grid = sys.grid
    S = sys.BBt
    if sys.time_kind == CONTINUOUS:
        A = sys.A

        def rhs(t, P):
            At = sample_at(A, grid, t)
            return At @ P + P @ At.T + sample_at(S, grid, t)

        P = integrate_matrix_ode(rhs, sys.P0, grid, 0, grid.n_steps, symmetric=True)
        Pdot = symmetrize(A @ P + P @ _t(A) + S)
    else:
        P = np.empty((grid.n_nodes, sys.n, sys.n))
        P[0] = sys.P0
        for k in range(grid.n_steps):
            P[k + 1] = symmetrize(sys.A[k] @ P[k] @ sys.A[k].T + S[k])
        Pdot = np.zeros_like(P)
    try:
        check_spd(P, "state covariance P(t)")
    except NotSPD as exc:
        raise NotSPD(f"{exc}; the model is not totally reachable on this grid") from None
    P_half, P_inv_half = sqrtm_spd_pair(P)
    if sys.time_kind == CONTINUOUS:
        R = ddt_inv_sqrt(P, Pdot) @ P_half
    else:
        R = np.zeros_like(P)
    return CovariancePath(grid, _frozen(P), _frozen(P_half), _frozen(P_inv_half), _frozen(Pdot), _frozen(R))


@dataclass(frozen=True, eq=False)
class AllPassExtension:
    """Per-node blocks of ``U = [F G; H J]``.

    Continuous time uses ``H = -G'`` and ``J = I``; in discrete time ``U`` is
    an orthogonal ``(n+p) x (n+p)`` matrix at every step.
    """

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    J: np.ndarray
    time_kind: str

    @property
    def U(self) -> np.ndarray:
        top = np.concatenate([self.F, self.G], axis=-1)
        bottom = np.concatenate([self.H, self.J], axis=-1)
        return np.concatenate([top, bottom], axis=-2)


@dataclass(frozen=True, eq=False)
class BalancedModel:
    """A model in coordinates where the state covariance is ``I`` at every node.

    ``system`` holds the normalized forward matrices.  ``Abar, Bbar, Cbar,
    Dbar`` describe the time-reversed model: in continuous time the
    backward drift is ``Abar = -A'``; in discrete time ``Abar = A'`` maps
    the state at node ``k+1`` to node ``k``.  ``cov`` is the covariance path
    of the original model, used to map results back.
    """

    system: LtvSystem
    cov: CovariancePath
    original: LtvSystem | None = None
    Abar: np.ndarray | None = None
    Bbar: np.ndarray | None = None
    Cbar: np.ndarray | None = None
    Dbar: np.ndarray | None = None
    extension: AllPassExtension | None = field(default=None, repr=False)

    @property
    def time_kind(self) -> str:
        return self.system.time_kind

    @property
    def grid(self) -> TimeGrid:
        return self.system.grid

    def to_original(self, x: np.ndarray, Q: np.ndarray | None = None):
        """Map balanced-coordinate estimates ``x`` (``(..., N+1, n)``) and covariances back."""
        Ph = self.cov.P_half
        x_raw = np.einsum("kij,...kj->...ki", Ph, x)
        if Q is None:
            return x_raw
        return x_raw, symmetrize(Ph @ Q @ Ph)


def balance(sys: LtvSystem, cov: CovariancePath | None = None) -> BalancedModel:
    """Normalize ``sys`` so that its state covariance is the identity.

    Continuous time: ``A <- P^{-1/2} A P^{1/2} + R``, ``B <- P^{-1/2} B``,
    ``C <- C P^{1/2}``.  Discrete time uses ``P(t+1)^{-1/2}`` on the left of
    ``A`` and ``B``.  The backward model is attached via
    :func:`backward_model`.
    """
    if cov is None:
        cov = propagate_covariance(sys)
    Ph, Pih = cov.P_half, cov.P_inv_half
    if sys.time_kind == CONTINUOUS:
        A = Pih @ sys.A @ Ph + cov.R
        B = Pih @ sys.B
    else:
        Pih_next = np.concatenate([Pih[1:], Pih[-1:]], axis=0)
        A = Pih_next @ sys.A @ Ph
        B = Pih_next @ sys.B
        A[-1], B[-1] = A[-2], B[-2]
    C = sys.C @ Ph
    balanced = LtvSystem(sys.grid, A, B, C, sys.D, np.eye(sys.n), sys.time_kind)
    return backward_model(BalancedModel(balanced, cov, original=sys))


def balance_residual(sys: LtvSystem) -> np.ndarray:
    """Per-node Frobenius norm of ``A+A'+BB'`` (continuous) or ``AA'+BB'-I`` (discrete)."""
    if sys.time_kind == CONTINUOUS:
        E = sys.A + _t(sys.A) + sys.BBt
        return np.linalg.norm(E, axis=(-2, -1))
    E = sys.A @ _t(sys.A) + sys.BBt - np.eye(sys.n)
    return np.linalg.norm(E[:-1], axis=(-2, -1))


def _require_balanced(sys: LtvSystem) -> None:
    res = balance_residual(sys)
    if res.size and res.max() > BALANCE_ATOL:
        k = int(np.argmax(res))
        raise NotBalanced(f"balanced identity fails at node {k} (t={sys.grid.times[k]:g}): residual {res[k]:.3e}")


def backward_model(bal: BalancedModel) -> BalancedModel:
    """Attach the time-reversed model matrices to a balanced model.

    Continuous: drift ``-A'``, ``Bbar = B`` (``P = I``), ``Cbar = C + D B'``,
    ``Dbar = D``.  Discrete: with ``[F G; H J]`` the orthogonal extension,
    ``Bbar = H'``, ``Cbar = C F' + D G'``, ``Dbar = C H' + D J'``; these are
    the general products ``C P A' + D B'`` and ``C P Bbar + D J'`` with
    ``P = I``.
    """
    sys = bal.system
    _require_balanced(sys)
    ext = allpass_extension(bal)
    if sys.time_kind == CONTINUOUS:
        Abar = -_t(sys.A)
        Bbar = np.array(sys.B)
        Cbar = sys.C + sys.D @ _t(sys.B)
        Dbar = np.array(sys.D)
    else:
        Abar = _t(sys.A)
        Bbar = _t(ext.H)
        Cbar = sys.C @ _t(sys.A) + sys.D @ _t(sys.B)
        Dbar = sys.C @ _t(ext.H) + sys.D @ _t(ext.J)
    return replace(
        bal,
        Abar=_frozen(Abar),
        Bbar=_frozen(Bbar),
        Cbar=_frozen(Cbar),
        Dbar=_frozen(Dbar),
        extension=ext,
    )


def _orthogonal_completion(M: np.ndarray) -> np.ndarray:
    """Rows completing the orthonormal rows of ``M`` (stack-aware) with ``det(U) = +1``."""
    n, width = M.shape[-2:]
    Qf, _ = np.linalg.qr(_t(M), mode="complete")
    comp = _t(Qf[..., :, n:])
    U = np.concatenate([M, comp], axis=-2)
    sign = np.sign(np.linalg.det(U))
    comp = comp.copy()
    comp[..., -1, :] *= np.where(sign < 0, -1.0, 1.0)[..., None]
    return comp


def allpass_extension(bal: BalancedModel) -> AllPassExtension:
    """Embed the balanced ``[A B]`` into an all-pass (continuous) or orthogonal (discrete) system."""
    sys = bal.system
    _require_balanced(sys)
    F, G = np.array(sys.A), np.array(sys.B)
    if sys.time_kind == CONTINUOUS:
        H = -_t(G)
        J = np.broadcast_to(np.eye(sys.p), (sys.grid.n_nodes, sys.p, sys.p)).copy()
    else:
        comp = _orthogonal_completion(np.concatenate([F, G], axis=-1))
        H, J = comp[..., : sys.n], comp[..., sys.n :]
    return AllPassExtension(_frozen(F), _frozen(G), _frozen(H), _frozen(J), sys.time_kind)


def _resolvent(F, freq):
    n = F.shape[0]
    M = freq * np.eye(n) - F
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 1e-13 * max(1.0, sv[0]):
        raise Singular(f"frequency {freq} is (numerically) an eigenvalue of F")
    return np.linalg.inv(M)


def eval_structural_function(ext: AllPassExtension, freq: complex, node: int = 0):
    """Evaluate ``U(freq) = H (freq I - F)^{-1} G + J`` at one node.

    Returns ``(U, residual)`` where ``residual = ||U(freq) U(dual)' - I||_F``
    with ``dual = -freq`` in continuous time and ``1/freq`` in discrete time.
    """
    F, G, H, J = ext.F[node], ext.G[node], ext.H[node], ext.J[node]

    def U_at(z):
        if np.isinf(z):
            return J.astype(complex)
        return H @ _resolvent(F, z) @ G + J

    U = U_at(freq)
    if ext.time_kind == CONTINUOUS:
        dual = -freq
    else:
        dual = np.inf if freq == 0 else 1.0 / freq
    Ud = U_at(dual)
    residual = float(np.linalg.norm(U @ Ud.T - np.eye(J.shape[0])))
    return U, residual
