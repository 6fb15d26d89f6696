"""Two-filter smoothing for linear stochastic systems observed intermittently.

Typical use::

    from twofilter import LtvSystem, TimeGrid, balance, simulate
    from twofilter import ObservationPattern, forward_filter, backward_filter, fuse

    sys = LtvSystem.constant(A, B, C, D, TimeGrid.from_span(0, 10, 0.01))
    bal = balance(sys)
    traj = simulate(bal, seed=1)
    pattern = ObservationPattern.from_times(bal.grid, [(0, 4, "observed"), (4, 10, "gap")], mode="y")
    smoothed = fuse(forward_filter(bal, pattern, traj), backward_filter(bal, pattern, traj))
"""

from .errors import (
    ConfigError,
    Indefinite,
    MissingInput,
    NonFinite,
    NotBalanced,
    NotHurwitz,
    NotSchurStable,
    NotSPD,
    OffGrid,
    PatternMismatch,
    Singular,
    TwoFilterError,
)
from .filtering import FilterResult, Interval, Mode, ObservationPattern, backward_filter, forward_filter, kalman_gap_step
from .fusion import OracleResult, SmootherResult, batch_oracle, fuse
from .model import (
    AllPassExtension,
    BalancedModel,
    CovariancePath,
    LtvSystem,
    allpass_extension,
    backward_model,
    balance,
    balance_residual,
    eval_structural_function,
    propagate_covariance,
    stationary_covariance,
)
from .numerics import (
    TimeGrid,
    ddt_inv_sqrt,
    integrate_matrix_ode,
    psd_inverse,
    solve_lyapunov_continuous,
    solve_lyapunov_discrete,
    sqrtm_spd,
    transition_matrix,
)
from .simulate import GapUpdate, Trajectory, compose_gaps, discretize_system, exact_discretize_gap, reverse_gap, simulate

__version__ = "0.1.0"
