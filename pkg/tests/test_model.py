import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_stable
from twofilter.checks import random_balanced_discrete
from twofilter.errors import NotBalanced, NotSPD, Singular
from twofilter.model import (
    DISCRETE,
    LtvSystem,
    allpass_extension,
    backward_model,
    balance,
    balance_residual,
    eval_structural_function,
    propagate_covariance,
)
from twofilter.numerics import TimeGrid
from twofilter.presets import EXAMPLE_A, EXAMPLE_B, EXAMPLE_C, EXAMPLE_D, example_system

R3 = np.sqrt(0.3)


def scalar_system(grid, P0=1.0, A=-0.5, B=((1.0, 0.0),), C=1.0, D=((0.0, 1.0),)):
    return LtvSystem.constant([[A]], np.array(B), [[C]], np.array(D), grid, P0=[[P0]])


# -- construction ---------------------------------------------------------------------------------


def test_system_shapes_and_products():
    sys = example_system(1.0, 0.1)
    assert (sys.n, sys.m, sys.p) == (2, 1, 2)
    assert sys.A.shape == (11, 2, 2)
    np.testing.assert_allclose(sys.DDt[0], [[1.0]])
    assert not sys.A.flags.writeable


def test_system_rejects_deterministic_output():
    with pytest.raises(NotSPD):
        LtvSystem.constant(EXAMPLE_A, EXAMPLE_B, EXAMPLE_C, [[0.0, 0.0]], TimeGrid(0, 0.1, 5))


def test_system_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        LtvSystem.constant(EXAMPLE_A, EXAMPLE_B, [[1.0, 0.0, 0.0]], EXAMPLE_D, TimeGrid(0, 0.1, 5))


# -- covariance propagation -----------------------------------------------------------------------


def test_stationary_path_is_constant():
    cov = propagate_covariance(example_system(2.0, 0.01))
    np.testing.assert_allclose(cov.P, np.broadcast_to(np.diag([50 / 21, 5 / 7]), cov.P.shape), atol=1e-12)
    np.testing.assert_allclose(cov.R, 0.0, atol=1e-12)


def test_scalar_closed_form():
    # dx = -0.5 x dt + dw, P(0) = 0.5  =>  P(t) = 1 - 0.5 exp(-t)
    grid = TimeGrid(0.0, 0.01, 100)
    cov = propagate_covariance(scalar_system(grid, P0=0.5))
    assert abs(cov.P[-1, 0, 0] - (1 - 0.5 * np.exp(-1.0))) <= 1e-8
    np.testing.assert_allclose(cov.Pdot[:, 0, 0], -cov.P[:, 0, 0] + 1.0, atol=1e-14)


def test_unreachable_state_is_rejected():
    A = [[-1.0, 0.0], [0.0, -1.0]]
    B = [[1.0, 0.0], [0.0, 0.0]]
    D = [[0.0, 1.0]]
    # the second state is never excited and starts deterministic
    sys = LtvSystem.constant(A, B, [[1.0, 0.0]], D, TimeGrid(0, 0.1, 20), P0=np.diag([1.0, 0.0]))
    with pytest.raises(NotSPD):
        propagate_covariance(sys)


def test_discrete_propagation():
    A = np.array([[0.5, 0.1], [0.0, 0.3]])
    B = np.eye(2)
    sys = LtvSystem.constant(A, B, [[1.0, 0.0]], [[0.0, 1.0]], TimeGrid(0, 1, 5), P0=np.eye(2), time_kind=DISCRETE)
    cov = propagate_covariance(sys)
    P = np.eye(2)
    for k in range(5):
        P = A @ P @ A.T + B @ B.T
        np.testing.assert_allclose(cov.P[k + 1], P, atol=1e-12)


# -- balancing ---------------------------------------------------------------------------------------


def test_balance_example_values():
    bal = balance(example_system(1.0, 0.01))
    A = bal.system.A[0]
    np.testing.assert_allclose(A, [[0.0, R3], [-R3, -0.7]], atol=1e-12)
    assert A[0, 1] == pytest.approx(0.547723, abs=1e-6)
    np.testing.assert_allclose(bal.system.BBt[0], [[0.0, 0.0], [0.0, 1.4]], atol=1e-12)
    np.testing.assert_allclose(A + A.T + bal.system.BBt[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(bal.system.C[0], [[1.543033, 0.0]], atol=1e-6)


def test_balance_idempotent_on_balanced_input():
    grid = TimeGrid(0.0, 0.01, 50)
    sys = scalar_system(grid)
    bal = balance(sys)
    for name in ("A", "B", "C", "D"):
        np.testing.assert_allclose(getattr(bal.system, name), getattr(sys, name), atol=1e-14)
    np.testing.assert_allclose(bal.cov.R, 0.0, atol=1e-14)
    assert balance_residual(bal.system).max() <= 1e-14


def test_balance_twice_is_identity():
    bal = balance(example_system(1.0, 0.01))
    again = balance(bal.system)
    np.testing.assert_allclose(again.system.A, bal.system.A, atol=1e-12)


@given(st.integers(1, 3), st.integers(0, 2**31))
def test_balance_time_varying(n, seed):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(0.0, 0.01, 200)
    A0, A1 = random_stable(rng, n), random_stable(rng, n)
    w = np.linspace(0, 1, grid.n_nodes)[:, None, None]
    A = (1 - w) * A0 + w * A1
    B = rng.standard_normal((n, n)) + 0.5 * np.eye(n)
    C = rng.standard_normal((1, n))
    D = np.concatenate([np.zeros((1, n)), [[1.0]]], axis=1)
    B = np.concatenate([B, np.zeros((n, 1))], axis=1)
    P0 = np.eye(n) * rng.uniform(0.2, 3.0)
    sys = LtvSystem(grid, A, B, C, D, P0)
    bal = balance(sys)
    assert balance_residual(bal.system).max() <= 1e-8
    again = propagate_covariance(bal.system)
    assert np.abs(again.P - np.eye(n)).max() <= 1e-6
    # the normalized state reproduces the original covariance
    np.testing.assert_allclose(bal.cov.P_half @ bal.cov.P_half, bal.cov.P, atol=1e-10)


def test_balance_discrete_random():
    rng = np.random.default_rng(3)
    A = np.array([[0.6, 0.2], [-0.1, 0.4]])
    sys = LtvSystem.constant(A, rng.standard_normal((2, 2)), [[1.0, 0.0]], [[0.0, 1.0]], TimeGrid(0, 1, 6), P0=np.diag([2.0, 0.5]), time_kind=DISCRETE)
    bal = balance(sys)
    assert balance_residual(bal.system).max() <= 1e-8
    np.testing.assert_allclose(propagate_covariance(bal.system).P, np.broadcast_to(np.eye(2), (7, 2, 2)), atol=1e-10)


# -- backward model -------------------------------------------------------------------------------------


def test_backward_model_example():
    bal = balance(example_system(1.0, 0.01))
    B = bal.system.B[0]
    np.testing.assert_allclose(B, [[0.0, 0.0], [np.sqrt(1.4), 0.0]], atol=1e-12)
    # D B' picks the second column of B, which is zero here
    np.testing.assert_allclose(bal.Cbar[0], [[1.543033, 0.0]], atol=1e-6)
    np.testing.assert_allclose(bal.Cbar, bal.system.C + bal.system.D @ np.swapaxes(bal.system.B, 1, 2), atol=1e-15)
    np.testing.assert_allclose(bal.Abar, -np.swapaxes(bal.system.A, 1, 2))
    np.testing.assert_array_equal(bal.Dbar, bal.system.D)


def test_backward_model_zero_D_keeps_C():
    grid = TimeGrid(0.0, 0.1, 5)
    sys = LtvSystem(grid, [[-0.5]], [[1.0, 0.0]], [[2.0]], [[0.0, 1.0]], [[1.0]])
    bal = balance(sys)
    np.testing.assert_allclose(bal.Cbar, bal.system.C)


def test_backward_model_correlated_noise():
    grid = TimeGrid(0.0, 0.1, 5)
    bal = balance(scalar_system(grid, B=((0.6, 0.8),), D=((0.5, 1.0),)))
    np.testing.assert_allclose(bal.Cbar[:, 0, 0], 1.0 + 0.5 * 0.6 + 1.0 * 0.8)


def test_backward_model_requires_balance():
    from twofilter.model import BalancedModel, CovariancePath

    sys = example_system(1.0, 0.1)
    bal = balance(sys)
    fake = BalancedModel(sys, bal.cov, original=sys)
    with pytest.raises(NotBalanced):
        backward_model(fake)


def test_discrete_backward_formulas():
    sys = random_balanced_discrete(seed=5)
    bal = balance(sys)
    ext = bal.extension
    S = bal.system
    T = lambda M: np.swapaxes(M, -1, -2)  # noqa: E731
    np.testing.assert_allclose(bal.Bbar, T(ext.H))
    np.testing.assert_allclose(bal.Cbar, S.C @ T(S.A) + S.D @ T(S.B), atol=1e-14)
    np.testing.assert_allclose(bal.Dbar, S.C @ T(ext.H) + S.D @ T(ext.J), atol=1e-14)
    # backward state noise keeps the identity covariance: A' A + Bbar Bbar' = I
    np.testing.assert_allclose(T(S.A) @ S.A + bal.Bbar @ T(bal.Bbar), np.broadcast_to(np.eye(3), S.A.shape), atol=1e-12)


# -- all-pass extension ------------------------------------------------------------------------------------


def test_continuous_extension_formula():
    ext = balance(scalar_system(TimeGrid(0.0, 0.1, 3))).extension
    assert ext.H[0, 0, 0] == pytest.approx(-1.0)
    np.testing.assert_allclose(ext.J[0], np.eye(2))


def test_discrete_extension_trivial():
    sys = LtvSystem(TimeGrid(0, 1, 2), [[0.0]], [[1.0]], [[1.0]], [[1.0]], [[1.0]], DISCRETE)
    ext = balance(sys).extension
    np.testing.assert_allclose(ext.U[0], [[0.0, 1.0], [-1.0, 0.0]], atol=1e-15)
    assert np.linalg.det(ext.U[0]) == pytest.approx(1.0)


@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 3))
def test_discrete_extension_orthogonal(seed, n, p):
    ext = allpass_extension(balance(random_balanced_discrete(n=n, p=p, seed=seed)))
    U = ext.U[:-1]
    eye = np.eye(n + p)
    assert np.linalg.norm(U @ np.swapaxes(U, 1, 2) - eye, axis=(1, 2)).max() <= 1e-10
    assert np.linalg.norm(np.swapaxes(U, 1, 2) @ U - eye, axis=(1, 2)).max() <= 1e-10
    np.testing.assert_allclose(np.linalg.det(U), 1.0, atol=1e-10)


def test_structural_function_scalar_closed_form():
    ext = balance(LtvSystem(TimeGrid(0, 0.1, 2), [[-0.5]], [[1.0]], [[1.0]], [[1.0]], [[1.0]])).extension
    for w in (0.0, 1.0, 10.0):
        s = 1j * w
        U, res = eval_structural_function(ext, s)
        assert U[0, 0] == pytest.approx((s - 0.5) / (s + 0.5))
        assert abs(U[0, 0]) == pytest.approx(1.0)
        assert res <= 1e-12


def test_structural_function_example_residual():
    ext = balance(example_system(1.0, 0.01)).extension
    assert eval_structural_function(ext, 1j)[1] <= 1e-10
    rng = np.random.default_rng(0)
    assert max(eval_structural_function(ext, 1j * w)[1] for w in rng.uniform(-50, 50, 20)) <= 1e-8


def test_structural_function_discrete_unit_circle_and_infinity():
    ext = balance(random_balanced_discrete(seed=2)).extension
    rng = np.random.default_rng(1)
    for th in rng.uniform(0, 2 * np.pi, 20):
        assert eval_structural_function(ext, np.exp(1j * th))[1] <= 1e-8
    U, _ = eval_structural_function(ext, np.inf)
    np.testing.assert_allclose(U, ext.J[0])


def test_structural_function_rejects_pole():
    ext = balance(LtvSystem(TimeGrid(0, 0.1, 2), [[-0.5]], [[1.0]], [[1.0]], [[1.0]], [[1.0]])).extension
    with pytest.raises(Singular):
        eval_structural_function(ext, -0.5)


def test_structural_factorization_continuous():
    bal = balance(example_system(1.0, 0.01))
    A, B, C, D = EXAMPLE_A, np.array(EXAMPLE_B), np.array(EXAMPLE_C), np.array(EXAMPLE_D)
    Ab, Bb, Cb = bal.system.A[0], bal.Bbar[0], bal.Cbar[0]
    rng = np.random.default_rng(4)
    for s in rng.normal(size=10) + 1j * rng.normal(size=10):
        W = C @ np.linalg.solve(s * np.eye(2) - np.array(A), B) + D
        Wb = Cb @ np.linalg.solve(s * np.eye(2) + Ab.T, Bb) + D
        U, _ = eval_structural_function(bal.extension, s)
        assert np.linalg.norm(W - Wb @ U) <= 1e-8


def test_structural_factorization_discrete():
    rng = np.random.default_rng(8)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    sys = LtvSystem.constant(Q[:2, :2], Q[:2, 2:], rng.standard_normal((1, 2)), [[0.3, 1.0]], TimeGrid(0, 1, 3), P0=np.eye(2), time_kind=DISCRETE)
    bal = balance(sys)
    F, G = bal.system.A[0], bal.system.B[0]
    for z in (0.3 + 0.8j, 2.0, -1.5j, np.exp(0.4j)):
        W = sys.C[0] @ np.linalg.solve(z * np.eye(2) - F, G) + sys.D[0]
        Wb = bal.Cbar[0] @ np.linalg.solve(np.eye(2) / z - F.T, bal.Bbar[0]) + bal.Dbar[0]
        U, _ = eval_structural_function(bal.extension, z)
        assert np.linalg.norm(W - Wb @ U) <= 1e-10


def test_to_original_roundtrip():
    bal = balance(example_system(1.0, 0.1))
    x = np.ones((11, 2))
    Q = np.broadcast_to(np.eye(2), (11, 2, 2))
    xo, Qo = bal.to_original(x, Q)
    np.testing.assert_allclose(Qo, bal.cov.P, atol=1e-12)
    np.testing.assert_allclose(xo[0], bal.cov.P_half[0] @ np.ones(2))
