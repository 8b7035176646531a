"""einmor: model order reduction for tensor linear systems under the Einstein product."""

from einmor.krylov import (
    ArnoldiResult,
    BreakdownError,
    LanczosResult,
    SingularFactorError,
    gamma_correction,
    tba,
    tbl,
    trba,
    trbl,
)
from einmor.btr import BalancedReduction, balanced_truncate, hankel_values
from einmor.generators import gen_heat2d, gen_spdiags
from einmor.lyapunov import (
    LowRankSolution,
    LyapunovProblem,
    SingularPencilError,
    dense_lyap_solve,
    residual_norm_bound,
    save_solution,
    solve_coupled,
    solve_lyapunov_classic,
    solve_lyapunov_rational,
    truncate_lowrank,
)
from einmor.mor import (
    AdaptiveResult,
    EstimatorState,
    FrequencySample,
    MLTISystem,
    ReducedSystem,
    adaptive_reduce,
    check_stability,
    error_bound_arnoldi,
    error_estimate,
    eval_transfer,
    exact_error_identity,
    frequency_sweep,
    next_shift,
    project,
    residual_factors,
)
from einmor.tensor4 import (
    BlockLayout,
    ShiftedSolver,
    SingularOperatorError,
    Tensor4,
    block_concat,
    block_extract,
    eigenvalues,
    einstein_product,
    fold,
    from_array,
    fro_norm,
    identity,
    inner,
    inverse,
    ivec,
    read_t4,
    shifted_solve,
    singular_values,
    tensor_qr,
    tensor_svd,
    trace,
    transpose,
    unfold,
    write_t4,
    zeros,
)

__version__ = "0.1.0"
