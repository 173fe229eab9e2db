"""Matrix-free variational inference for sparse linear models.

Library layout: potentials (super-Gaussian duals), linops (matrix-free
operators), solvers (conjugate gradients and reweighted least squares),
variance (exact and Lanczos marginal variances), varinf (criterion,
double-loop driver, sparse estimation), design (information-gain
measurement selection), cli (command-line harness).
"""

from .linops import (
    GroupLayout,
    LinearOperator,
    make_dense,
    make_finite_difference_2d,
    make_haar_wavelet_2d,
    make_identity,
    make_isotropic_tv_2d,
    make_partial_orthotransform_2d,
    stack,
)
from .potentials import (
    BoundCoefficients,
    PenaltyEval,
    PotentialSpec,
    fenchel_gap,
    g_value_derivs,
    h_decompose_student_t,
    h_star,
    h_value_derivs,
)
from .solvers import (
    SolveReport,
    group_hessian_apply,
    irls_minimize,
    lcg_solve,
    map_estimate,
)
from .variance import (
    LanczosFactorization,
    exact_variances,
    lanczos_variances,
    variance_error_profile,
)
from .varinf import (
    BatchBounds,
    ModelSpec,
    VariationalState,
    ard_estimate,
    outer_update,
    phi_criterion,
    posterior_summary,
    run_double_loop,
)
from .design import (
    CandidateBlock,
    DesignTrajectory,
    baseline_design,
    run_sequential_design,
    score_exact,
    score_lanczos,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
