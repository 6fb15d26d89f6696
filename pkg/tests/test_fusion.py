import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twofilter.checks import random_balanced_discrete
from twofilter.errors import Indefinite
from twofilter.filtering import FilterResult, Interval, Mode, ObservationPattern, backward_filter, forward_filter
from twofilter.fusion import CONTRACTS, batch_oracle, fuse
from twofilter.model import balance
from twofilter.numerics import TimeGrid
from twofilter.presets import example_system
from twofilter.simulate import simulate


def result(direction, x, Q):
    x, Q = np.atleast_2d(np.asarray(x, float)), np.asarray(Q, float)
    grid = TimeGrid(0.0, 1.0, x.shape[0] - 1)
    return FilterResult(direction, grid, x, Q, np.zeros(Q.shape[:-1] + (1,)))


def test_uninformative_filters_fuse_to_prior():
    eye = np.broadcast_to(np.eye(2), (3, 2, 2))
    sm = fuse(result("forward", np.zeros((3, 2)), eye), result("backward", np.zeros((3, 2)), eye))
    np.testing.assert_allclose(sm.Q, eye)
    np.testing.assert_allclose(sm.x, 0.0)


def test_scalar_fusion():
    Q = np.full((2, 1, 1), 0.5)
    sm = fuse(result("forward", [[1.0], [1.0]], Q), result("backward", [[1.1], [1.1]], Q))
    np.testing.assert_allclose(sm.Q[:, 0, 0], 1 / 3)
    np.testing.assert_allclose(sm.x[:, 0], 1.4)


def test_indefinite_information_is_rejected():
    Q = np.full((2, 1, 1), 2.0)
    with pytest.raises(Indefinite):
        fuse(result("forward", [[0.0], [0.0]], Q), result("backward", [[0.0], [0.0]], Q))


def test_grids_must_agree():
    a = result("forward", np.zeros((3, 1)), np.full((3, 1, 1), 0.5))
    b = result("backward", np.zeros((4, 1)), np.full((4, 1, 1), 0.5))
    with pytest.raises(ValueError):
        fuse(a, b)


def test_near_singular_nodes_are_flagged():
    Qm = np.array([[[0.5]], [[1e-12]], [[0.5]]])
    sm = fuse(result("forward", np.zeros((3, 1)), Qm), result("backward", np.zeros((3, 1)), np.full((3, 1, 1), 0.5)))
    assert sm.flagged.tolist() == [1]
    assert sm.Q[1, 0, 0] < 1e-11


def test_fusion_identities_on_example():
    sys = example_system(6.0, 0.01)
    bal = balance(sys)
    pat = ObservationPattern.from_times(sys.grid, [(0, 1, "observed"), (1, 3, "gap"), (3, 6, "observed")], "y")
    tr = simulate(bal, seed=0, n_rep=2)
    fwd, bwd = forward_filter(bal, pat, tr), backward_filter(bal, pat, tr)
    sm = fuse(fwd, bwd)
    assert sm.x.shape == (2, 601, 2)
    assert sm.identity_residual.max() < 1e-8
    assert sm.weight_residual.max() < 1e-8
    for other in (fwd.Q, bwd.Q):
        assert np.linalg.eigvalsh(other - sm.Q).min() > -1e-10


@settings(max_examples=15)
@given(
    seed=st.integers(0, 10_000),
    cuts=st.lists(st.integers(1, 11), min_size=0, max_size=4, unique=True),
    modes=st.lists(st.sampled_from(list(Mode)), min_size=5, max_size=5),
    first_observed=st.booleans(),
)
def test_fused_smoother_equals_oracle(seed, cuts, modes, first_observed):
    sys = random_balanced_discrete(n=2, p=2, seed=seed, n_steps=12)
    bounds = [0] + sorted(cuts) + [12]
    ivs = []
    for i, (a, b) in enumerate(zip(bounds, bounds[1:])):
        observed = (i % 2 == 0) == first_observed
        ivs.append(Interval(a, b, observed, None if observed else modes[i]))
    pat = ObservationPattern(sys.grid, tuple(ivs), Mode.INCREMENTS)
    bal = balance(sys)
    tr = simulate(bal, seed=seed)
    sm = fuse(forward_filter(bal, pat, tr), backward_filter(bal, pat, tr))
    oracle = batch_oracle(bal, pat, tr)
    np.testing.assert_allclose(sm.x, oracle.mean, atol=1e-8)
    np.testing.assert_allclose(sm.Q, oracle.cov, atol=1e-8)


def test_oracle_contracts():
    sys = random_balanced_discrete(n=2, p=2, seed=1, n_steps=10)
    tr = simulate(sys, seed=2)
    pat = ObservationPattern(sys.grid, (Interval(0, 3, True), Interval(3, 7, False), Interval(7, 10, True)), Mode.VALUES)
    res = {c: batch_oracle(sys, pat, tr, contract=c) for c in CONTRACTS}
    eye = np.eye(2)
    np.testing.assert_allclose(res["split"].prior, np.broadcast_to(eye, (11, 2, 2)), atol=1e-12)
    np.testing.assert_allclose(res["causal"].cov[0], eye, atol=1e-12)
    np.testing.assert_allclose(res["anticausal"].cov[-1], eye, atol=1e-12)
    # split only differs from full strictly inside the values gap
    inside = slice(4, 7)
    outside = np.r_[0:4, 7:11]
    np.testing.assert_allclose(res["split"].cov[outside], res["full"].cov[outside], atol=1e-12)
    assert np.abs(res["split"].cov[inside] - res["full"].cov[inside]).max() > 1e-6
    assert res["full"].n_obs == 7


def test_oracle_accepts_increments_and_rejects_bad_input():
    sys = random_balanced_discrete(seed=0, n_steps=4)
    tr = simulate(sys, seed=0)
    pat = ObservationPattern.fully_observed(sys.grid)
    a = batch_oracle(sys, pat, tr)
    b = batch_oracle(sys, pat, np.diff(tr.y, axis=0))
    np.testing.assert_array_equal(a.mean, b.mean)
    with pytest.raises(ValueError):
        batch_oracle(sys, pat, tr, contract="psychic")
    with pytest.raises(ValueError):
        batch_oracle(sys, pat, np.zeros((3, 1)))
    with pytest.raises(ValueError):
        batch_oracle(example_system(1.0, 0.1), ObservationPattern.fully_observed(TimeGrid(0, 0.1, 10)), np.zeros((10, 1)))
