"""Balanced truncation of stable multilinear systems.

The reduction balances reachability against observability: the coupled
Gramian pair P ~ U * U^T, Q ~ L * L^T is solved in low-rank factored
form, the unfolded cross product L^T * U is SVD'd into Y Sigma Z^T, and
the factors of the leading singular block give the projector pair

    W_r = L * fold(Y_1) * Sigma_1^(-1/2),
    V_r = U * fold(Z_1) * Sigma_1^(-1/2),

which satisfies W_r^T * V_r = I_r, so V_r * W_r^T is an oblique
projector.  Truncating to the leading r Hankel values yields the
reduced triple A_r = W_r^T * (A * V_r), B_r = W_r^T * B, C_r = C * V_r,
whose own Gramians are both approximately diag(retained values).
"""

import dataclasses
import warnings

import numpy as np

from .lyapunov import DTOL_DEFAULT, EPS_DEFAULT, solve_coupled
from .mor import _STABILITY_CHECK_LIMIT, ReducedSystem, check_stability
from .tensor4 import Tensor4

__all__ = [
    "SIGMA_TOL_DEFAULT",
    "BalancedReduction",
    "balanced_truncate",
    "hankel_values",
]

SIGMA_TOL_DEFAULT = 1e-8


@dataclasses.dataclass(frozen=True, eq=False)
class BalancedReduction:
    """Truncated balanced realization plus the projector pair behind it.

    `hankel_values` keeps the full nonincreasing diagonal of Sigma, not
    just the retained part, so truncation quality at other orders can be
    read off without resolving the Gramians.  `r` is the retained order
    (`reduced.order == r`); V_r and W_r have dims (J1, J2, 1, r).
    """

    reduced: ReducedSystem
    hankel_values: np.ndarray
    V_r: Tensor4
    W_r: Tensor4
    r: int


def _require_stable(sys):
    # Gramians exist only for asymptotically stable operators; the
    # eigenvalue check is skipped at scales where it would dominate cost
    if sys.A.data.shape[0] > _STABILITY_CHECK_LIMIT:
        return
    if check_stability(sys.A) != "asymptotically_stable":
        raise ValueError(
            "balanced truncation requires an asymptotically stable system"
        )


def _gramian_cross(sys, eps, dtol, m_max, shifts):
    p_sol, q_sol = solve_coupled(
        sys.A, sys.B, sys.C, eps=eps, dtol=dtol, m_max=m_max, shifts=shifts
    )
    umat = p_sol.Z1.data
    lmat = q_sol.Z1.data
    y, sgm, zt = np.linalg.svd(lmat.T @ umat, full_matrices=False)
    return umat, lmat, y, sgm, zt


def hankel_values(sys, eps=EPS_DEFAULT, dtol=DTOL_DEFAULT, m_max=30, shifts=None):
    """Hankel spectrum: singular values of the unfolded L^T * U.

    U and L are the factored Gramians from :func:`solve_coupled`
    (reachability P ~ U * U^T, observability Q ~ L * L^T); the solver
    tolerances and the optional `shifts` schedule are forwarded to it.
    Returns a nonincreasing nonnegative 1-D array.
    """
    _require_stable(sys)
    return _gramian_cross(sys, eps, dtol, m_max, shifts)[3]


def balanced_truncate(
    sys,
    r=None,
    sigma_tol=SIGMA_TOL_DEFAULT,
    eps=EPS_DEFAULT,
    dtol=DTOL_DEFAULT,
    m_max=30,
    shifts=None,
):
    """Reduce `sys` to the r dominant states of its balanced realization.

    With `r` None the order is the number of Hankel values at or above
    sigma_tol times the largest; an explicit `r` past the numerical rank
    of the cross product is clamped to that rank with a warning (the
    inverse square-root scaling is meaningless beyond it).  Solver
    options (`eps`, `dtol`, `m_max`, `shifts`) go to the coupled Gramian
    solve.  Unstable systems raise ValueError.

    Returns a :class:`BalancedReduction`; its `reduced` triple keeps V_r
    and W_r as `basis_primal`/`basis_dual`, so `frequency_sweep` and
    `eval_transfer` accept it directly.
    """
    _require_stable(sys)
    if sigma_tol <= 0.0:
        raise ValueError("sigma_tol must be positive")
    if r is not None and int(r) < 1:
        raise ValueError("r must be at least 1")
    umat, lmat, y, sgm, zt = _gramian_cross(sys, eps, dtol, m_max, shifts)
    if sgm.size == 0 or sgm[0] <= 0.0:
        raise ValueError("Hankel spectrum is identically zero")
    cut = sgm[0] * max(lmat.shape[1], umat.shape[1]) * np.finfo(sgm.dtype).eps
    num_rank = max(int(np.sum(sgm > cut)), 1)
    if r is None:
        r = min(max(int(np.sum(sgm >= sigma_tol * sgm[0])), 1), num_rank)
    else:
        r = int(r)
        if r > num_rank:
            warnings.warn(
                "requested order %d exceeds the numerical rank %d of the "
                "Hankel spectrum; truncating" % (r, num_rank)
            )
            r = num_rank
    scale = 1.0 / np.sqrt(sgm[:r])
    wr = lmat @ (y[:, :r] * scale)
    vr = umat @ (zt[:r].T * scale)
    row = sys.A.row_dims
    vr_t = Tensor4(vr, row + (1, r))
    wr_t = Tensor4(wr, row + (1, r))
    red = (1, r)
    reduced = ReducedSystem(
        A_m=Tensor4(wr.T @ (sys.A.data @ vr), red + red),
        B_m=Tensor4(wr.T @ sys.B.data, red + sys.B.col_dims),
        C_m=Tensor4(sys.C.data @ vr, sys.C.row_dims + red),
        basis_primal=vr_t,
        basis_dual=wr_t,
    )
    return BalancedReduction(
        reduced=reduced, hankel_values=sgm, V_r=vr_t, W_r=wr_t, r=r
    )
