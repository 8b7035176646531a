"""Low-rank Galerkin solvers for continuous-time Lyapunov tensor equations.

The target equation is A * X + X * A^T + B * B^T = 0 under the Einstein
product.  A two-sided block Lanczos basis (rational with adaptively
chosen shifts, or classic) is grown one block at a time; each iteration
solves the projected equation for Y_m, evaluates the computable residual
bound 2 * ||Gamma_m * Y_m * V_m^T||_F, and stops once the bound reaches
the requested tolerance.  Solutions are returned in the truncated
factored form X_m ~ Z1 * Z2^T.

The projected operator is always the direct compression W_m^T * A * V_m
and the bound uses the exact remainder Gamma_m = A * V_m - V_m * T_m, so
the Galerkin condition W^T * R_m * W = 0 and the two-term residual
splitting hold to working precision at every iterate.
"""

import dataclasses
import json
import math
import warnings

import numpy as np
from scipy import linalg as sla

from .krylov import (
    SingularFactorError,
    _ClassicLanczosBuilder,
    _RationalLanczosBuilder,
    _real_shift,
    gamma_correction,
)
from .mor import (
    _STABILITY_CHECK_LIMIT,
    EstimatorState,
    MLTISystem,
    _log_midpoint,
    _ranked_shifts,
    _spectrum_candidates,
    check_stability,
)
from .tensor4 import SingularOperatorError, Tensor4, write_t4

__all__ = [
    "DTOL_DEFAULT",
    "EPS_DEFAULT",
    "LowRankSolution",
    "LyapunovProblem",
    "SingularPencilError",
    "dense_lyap_solve",
    "residual_norm_bound",
    "save_solution",
    "solve_coupled",
    "solve_lyapunov_classic",
    "solve_lyapunov_rational",
    "truncate_lowrank",
]

EPS_DEFAULT = 1e-8
DTOL_DEFAULT = 1e-12

# above this unfolded dimension the projected equation is solved by the
# Schur-based routine instead of the explicit Kronecker system
_KRON_LIMIT = 40

_SOLVABILITY_RTOL = 1e-12

_NUM_CANDIDATES = 50


class SingularPencilError(Exception):
    """The spectrum violates lambda_i + conj(lambda_j) != 0, so the
    equation T * Y + Y * T^T = -Q has no unique solution."""

    def __init__(self, gap, scale):
        self.gap = gap
        self.scale = scale
        super().__init__(
            "smallest eigenvalue-pair sum %.3e is below the solvability "
            "threshold %.3e" % (gap, _SOLVABILITY_RTOL * scale)
        )


def _pencil_gap(lam):
    return float(np.abs(lam[:, None] + lam[None, :].conj()).min())


@dataclasses.dataclass(frozen=True)
class LyapunovProblem:
    """Problem data for A * X + X * A^T + B * B^T = 0."""

    A: Tensor4
    B: Tensor4

    def __post_init__(self):
        if self.A.row_dims != self.A.col_dims:
            raise ValueError("A must be square, got dims %r" % (self.A.dims,))
        if self.B.row_dims != self.A.row_dims:
            raise ValueError(
                "B row dims %r do not match A dims %r"
                % (self.B.row_dims, self.A.row_dims)
            )

    def solvable(self, rtol=_SOLVABILITY_RTOL):
        """Check the eigenvalue-pair condition directly (small scale only)."""
        lam = np.linalg.eigvals(self.A.data)
        scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
        return _pencil_gap(lam) >= rtol * scale


@dataclasses.dataclass(frozen=True)
class LowRankSolution:
    """Factored approximate solution X ~ Z1 * Z2^T.

    `rank` counts the retained singular (or eigen-) values; rank 0 keeps a
    single zero column so the factors stay well-formed tensors.  Driver
    metadata: `residual_bound` is the bound at the returned iterate,
    `iterations` the number of basis blocks, `shifts` the consumed shift
    list (None for the classic iteration), `converged` whether the bound
    met the tolerance.
    """

    Z1: Tensor4
    Z2: Tensor4
    rank: int
    dtol: float
    residual_bound: float = math.nan
    iterations: int = 0
    shifts: tuple = None
    converged: bool = True

    def reconstruct(self):
        """Dense X = Z1 * Z2^T as a Tensor4."""
        return Tensor4(
            self.Z1.data @ self.Z2.data.T, self.Z1.row_dims + self.Z2.row_dims
        )


def _lyap_solve_mat(tm, qm):
    """Solve T Y + Y T^T = -Q on unfolded data; symmetrizes symmetric Q."""
    lam = np.linalg.eigvals(tm)
    scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
    gap = _pencil_gap(lam)
    if gap < _SOLVABILITY_RTOL * scale:
        raise SingularPencilError(gap, scale)
    d = tm.shape[0]
    if d <= _KRON_LIMIT:
        lin = np.kron(np.eye(d), tm) + np.kron(tm.conj(), np.eye(d))
        y = np.linalg.solve(lin, -qm.reshape(-1, order="F"))
        y = y.reshape((d, d), order="F")
    else:
        y = sla.solve_continuous_lyapunov(tm, -qm)
    qscale = max(float(np.abs(qm).max(initial=0.0)), 1.0)
    if np.abs(qm - qm.T).max() <= 1e-12 * qscale:
        y = 0.5 * (y + y.T)
    return y


def dense_lyap_solve(t, q_rhs):
    """Direct solve of the small equation T * Y + Y * T^T + Q = 0.

    Uses the explicit Kronecker system up to unfolded dimension 40 and a
    Schur-based solver beyond; either way the result satisfies the
    equation to ~1e-10 relative residual and is symmetrized whenever Q is
    symmetric.

    Raises
    ------
    SingularPencilError
        When some eigenvalue pair of T sums to (numerically) zero.
    """
    if t.row_dims != t.col_dims:
        raise ValueError("T must be square, got dims %r" % (t.dims,))
    if q_rhs.dims != t.dims:
        raise ValueError(
            "right-hand side dims %r do not match T dims %r"
            % (q_rhs.dims, t.dims)
        )
    return Tensor4(_lyap_solve_mat(t.data, q_rhs.data), t.dims)


def _gram_bound(gamma, ym, vmat):
    # 2*||gamma @ ym @ vmat.T||_F via the two small Gram matrices; the
    # ambient-sized product is never formed
    gy = gamma @ ym
    val = float(np.sum((gy.T @ gy) * (vmat.T @ vmat)))
    return 2.0 * math.sqrt(max(val, 0.0))


def residual_norm_bound(basis, y_m, a):
    """Computable bound 2 * ||Gamma_m * Y_m * V_m^T||_F on the residual.

    `basis` is a two-sided Lanczos result, `y_m` the projected solution
    (Tensor4 or unfolded array) and `a` the operator.  The correction
    Gamma_m comes from :func:`~einmor.krylov.gamma_correction`, so the
    bound dominates ||A*X_m + X_m*A^T + B*B^T||_F whenever that splitting
    holds (always for classic bases; rational bases need the starting
    block to span B and a trailing zero shift).

    Raises
    ------
    SingularFactorError
        When the square H factor needed by the rational correction is
        singular.
    """
    gamma = gamma_correction(basis, a, side="primal")
    m, p = basis.m, basis.block_size
    vm = basis.V.data[:, : m * p]
    ym = y_m.data if isinstance(y_m, Tensor4) else np.asarray(y_m)
    return _gram_bound(gamma.data, ym, vm)


def truncate_lowrank(y_m, v, dtol, symmetric=False):
    """Truncated factorization of V * Y_m * V^T keeping values >= dtol.

    SVD route by default: Y_m ~ P_r Sigma_r Q_r^T with the r values
    satisfying sigma_{r+1} < dtol <= sigma_r, giving
    Z1 = V*(P_r*Sigma_r^(1/2)) and Z2 = V*(Q_r*Sigma_r^(1/2)).  With
    symmetric=True an eigendecomposition of the symmetrized Y_m is used
    instead and Z2 = Z1, which keeps the reconstruction symmetric
    positive semidefinite.  r = 0 returns zero factors of width 1.
    """
    ym = y_m.data if isinstance(y_m, Tensor4) else np.asarray(y_m)
    if ym.ndim != 2 or ym.shape[0] != ym.shape[1]:
        raise ValueError("Y_m must be square, got shape %r" % (ym.shape,))
    vmat = v.data
    if vmat.shape[1] != ym.shape[0]:
        raise ValueError(
            "V has %d basis columns but Y_m is %d x %d"
            % (vmat.shape[1], ym.shape[0], ym.shape[0])
        )
    dtol = float(dtol)
    if symmetric:
        lam, u = np.linalg.eigh(0.5 * (ym + ym.T))
        order = np.argsort(lam)[::-1]
        lam, u = lam[order], u[:, order]
        r = int(np.sum(lam >= dtol))
        left = right = u[:, :r] * np.sqrt(lam[:r])
    else:
        u, s, vt = np.linalg.svd(ym, full_matrices=False)
        r = int(np.sum(s >= dtol))
        root = np.sqrt(s[:r])
        left = u[:, :r] * root
        right = vt[:r].T * root
    if r == 0:
        zero = Tensor4(np.zeros((vmat.shape[0], 1)), v.row_dims + (1, 1))
        return LowRankSolution(Z1=zero, Z2=zero, rank=0, dtol=dtol)
    z1 = Tensor4(vmat @ left, v.row_dims + (1, r))
    z2 = z1 if right is left else Tensor4(vmat @ right, v.row_dims + (1, r))
    return LowRankSolution(Z1=z1, Z2=z2, rank=r, dtol=dtol)


@dataclasses.dataclass
class _Iterate:
    blocks: int
    bound: float
    bound_dual: float
    ym: np.ndarray
    ym_dual: np.ndarray
    vmat: np.ndarray
    wmat: np.ndarray


def _warn_if_unstable(a):
    n = a.data.shape[0]
    if n <= _STABILITY_CHECK_LIMIT and check_stability(a) == "unstable":
        warnings.warn(
            "Lyapunov solve with an unstable operator", stacklevel=3
        )


def _clamp_m_max(m_max, p, n):
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    return min(int(m_max), n // p)


def _galerkin_loop(a, bmat, cmat, builder, advance, eps, m_max, want_dual):
    """Extend/solve/bound loop shared by the drivers.

    Checks convergence on the current basis before growing it, so an
    invariant starting block converges at one block without risking a
    breakdown in a useless extra step.  Returns (best iterate, history,
    converged); iterations whose projected pencil is singular are skipped
    (recorded with an infinite bound) rather than fatal.
    """
    at = a.data.T
    best = None
    history = []
    converged = False
    for blocks in range(1, m_max + 1):
        tm = builder.wmat.T @ builder.av
        bm = builder.wmat.T @ bmat
        bound = bound_dual = math.inf
        ym = ym_dual = None
        try:
            ym = _lyap_solve_mat(tm, bm @ bm.T)
            gamma = builder.av - builder.vmat @ tm
            bound = _gram_bound(gamma, ym, builder.vmat)
            if want_dual:
                cm = cmat @ builder.vmat
                ym_dual = _lyap_solve_mat(tm.T, cm.T @ cm)
                gamma_dual = at @ builder.wmat - builder.wmat @ tm.T
                bound_dual = _gram_bound(gamma_dual, ym_dual, builder.wmat)
        except SingularPencilError:
            ym = ym_dual = None
        worst = max(bound, bound_dual) if want_dual else bound
        history.append((blocks, worst))
        if ym is not None and (best is None or worst < best_worst):
            best = _Iterate(
                blocks, bound, bound_dual, ym, ym_dual, builder.vmat,
                builder.wmat,
            )
            best_worst = worst
        if worst <= eps:
            converged = True
            break
        if blocks < m_max:
            advance(builder)
    if best is None:
        raise SingularPencilError(0.0, 1.0)
    return best, history, converged


def _step_with_fallbacks(builder, sigmas):
    # shifts too close to an eigenvalue of a non-normal operator can make
    # the shifted solve numerically singular; fall through the list until
    # one factors, re-raising only when all of them are unusable
    err = None
    for sigma in sigmas:
        try:
            builder.step(sigma)
            return
        except SingularOperatorError as exc:
            err = exc
    raise err


def _scheduled_advance(schedule):
    seq = [_real_shift(s, allow_inf=True) for s in schedule]
    if not seq:
        raise ValueError("empty shift schedule")

    def advance(builder):
        sigma = seq[builder.m % len(seq)]
        if math.isinf(sigma):
            builder.step(sigma)
            return
        scale = max(abs(sigma), 1.0)
        _step_with_fallbacks(
            builder, [sigma, sigma + 1e-3 * scale, sigma - 1e-3 * scale]
        )

    return advance


def _adaptive_advance(sysobj):
    def advance(builder):
        if builder.m == 0:
            # no residual machinery exists yet: take the log-midpoint of
            # the starting block's Rayleigh-quotient spectrum
            tm = builder.wmat.T @ builder.av
            mags = np.abs(np.linalg.eigvals(tm))
            mx = float(mags.max(initial=0.0))
            if mx <= 0.0:
                sigma = -1.0
            else:
                sigma = -_log_midpoint(max(float(mags.min()), mx * 1e-12), mx)
            sigmas = [sigma, 0.5 * sigma, 0.25 * sigma, 2.0 * sigma, -1.0]
        else:
            snap = builder.snapshot()
            try:
                state = EstimatorState(sysobj, snap)
                cands = _spectrum_candidates(state.am, _NUM_CANDIDATES)
                ranked = _ranked_shifts(state, cands, "lanczos")
            except SingularFactorError:
                # a singular recurrence factor leaves no usable residual
                # estimator; fall back to the unranked candidate grid
                tm = builder.wmat.T @ builder.av
                ranked = _spectrum_candidates(tm, _NUM_CANDIDATES)
            # near-repeats of earlier shifts add nearly dependent directions
            # and degrade the basis, so prefer candidates separated from all
            # used shifts; the unseparated remainder stays as a fallback
            used = [s for s in builder.shifts_used if math.isfinite(s)]
            fresh = [
                s for s in ranked
                if all(abs(s - u) > 0.05 * max(abs(s), abs(u)) for u in used)
            ]
            sigmas = fresh + [s for s in ranked if s not in fresh]
        _step_with_fallbacks(builder, sigmas)

    return advance


def _attach(sol, best, shifts, converged):
    return dataclasses.replace(
        sol,
        residual_bound=best.bound,
        iterations=best.blocks,
        shifts=shifts,
        converged=converged,
    )


def _basis_tensor(mat, row_dims, block_dims):
    K1, K2 = block_dims
    blocks = mat.shape[1] // (K1 * K2)
    return Tensor4(mat, row_dims + (K1, blocks * K2))


def _warn_nonconverged(best, eps, m_max):
    warnings.warn(
        "residual bound %.3e > eps %.3e at m_max=%d; returning the best "
        "iterate (%d blocks)" % (best.bound, eps, m_max, best.blocks),
        stacklevel=2,
    )


def solve_lyapunov_rational(
    A, B, C, eps=EPS_DEFAULT, dtol=DTOL_DEFAULT, m_max=30, shifts=None
):
    """Rational-basis Galerkin solve of A * X + X * A^T + B * B^T = 0.

    Grows the two-sided rational Lanczos basis on (A, B, C^T) starting
    from the polynomial block (infinite seed shift, so span V_1 = span B
    and the residual bound applies exactly).  With ``shifts=None`` the
    extension shifts are chosen adaptively: the first at the log-midpoint
    of the starting Rayleigh-quotient spectrum, each later one maximizing
    the combined residual objective over a spectrum-derived candidate
    grid.  Passing an explicit sequence instead cycles through it
    deterministically; entries are real shifts with ``inf`` meaning a
    multiplication by A (extended-Krylov style).  Iteration stops when
    the residual bound drops to eps; the projected solution is then
    truncated at dtol into Z1 * Z2^T form.

    Non-convergence at m_max returns the best iterate with `converged`
    False and a warning; a Lanczos breakdown propagates.
    """
    sysobj = MLTISystem(A=A, B=B, C=C)
    _warn_if_unstable(A)
    builder = _RationalLanczosBuilder(A, B, C, math.inf)
    m_max = _clamp_m_max(m_max, builder.p, builder.n)
    if shifts is None:
        advance = _adaptive_advance(sysobj)
    else:
        advance = _scheduled_advance(shifts)
    best, history, converged = _galerkin_loop(
        A, B.data, C.data, builder, advance, eps, m_max,
        want_dual=False,
    )
    if not converged:
        _warn_nonconverged(best, eps, m_max)
    vt = _basis_tensor(best.vmat, A.row_dims, B.col_dims)
    sol = truncate_lowrank(best.ym, vt, dtol)
    shifts = tuple(builder.shifts_used[: best.blocks])
    return _attach(sol, best, shifts, converged)


def solve_lyapunov_classic(A, B, C, eps=EPS_DEFAULT, dtol=DTOL_DEFAULT, m_max=30):
    """As :func:`solve_lyapunov_rational` but on the classic Lanczos basis.

    No shifts and no inner solves: each extension is one three-term
    recurrence step.  Typically needs more iterations than the rational
    driver for the same bound; kept as the benchmark baseline.  The
    returned solution has `shifts` None.
    """
    MLTISystem(A=A, B=B, C=C)
    _warn_if_unstable(A)
    builder = _ClassicLanczosBuilder(A, B, C)
    m_max = _clamp_m_max(m_max, builder.p, builder.n)
    best, history, converged = _galerkin_loop(
        A, B.data, C.data, builder, lambda b: b.step(), eps, m_max,
        want_dual=False,
    )
    if not converged:
        _warn_nonconverged(best, eps, m_max)
    vt = _basis_tensor(best.vmat, A.row_dims, B.col_dims)
    sol = truncate_lowrank(best.ym, vt, dtol)
    return _attach(sol, best, None, converged)


def solve_coupled(A, B, C, eps=EPS_DEFAULT, dtol=DTOL_DEFAULT, m_max=30, shifts=None):
    """Both Gramian equations from one rational Lanczos run.

    A single basis on (A, B, C^T) serves the pair: the primal equation
    T X + X T^T + B_m B_m^T = 0 yields P_m = V * X_m * V^T and the dual
    equation T^T Y + Y T + C_m^T C_m = 0 yields Q_m = W * Y_m * W^T.
    Convergence requires both residual bounds at or below eps.  The
    `shifts` argument works as in :func:`solve_lyapunov_rational`.
    Returns (P, Q) as symmetric low-rank factorizations (Z2 = Z1 each).
    """
    sysobj = MLTISystem(A=A, B=B, C=C)
    _warn_if_unstable(A)
    builder = _RationalLanczosBuilder(A, B, C, math.inf)
    m_max = _clamp_m_max(m_max, builder.p, builder.n)
    if shifts is None:
        advance = _adaptive_advance(sysobj)
    else:
        advance = _scheduled_advance(shifts)
    best, history, converged = _galerkin_loop(
        A, B.data, C.data, builder, advance, eps, m_max,
        want_dual=True,
    )
    if not converged:
        _warn_nonconverged(best, eps, m_max)
    shifts = tuple(builder.shifts_used[: best.blocks])
    vt = _basis_tensor(best.vmat, A.row_dims, B.col_dims)
    wt = _basis_tensor(best.wmat, A.row_dims, B.col_dims)
    p_sol = truncate_lowrank(best.ym, vt, dtol, symmetric=True)
    q_sol = truncate_lowrank(best.ym_dual, wt, dtol, symmetric=True)
    p_sol = _attach(p_sol, best, shifts, converged)
    q_sol = dataclasses.replace(
        q_sol,
        residual_bound=best.bound_dual,
        iterations=best.blocks,
        shifts=shifts,
        converged=converged,
    )
    return p_sol, q_sol


def save_solution(sol, prefix):
    """Write a factored solution: <prefix>_z1.t4, <prefix>_z2.t4 and a
    <prefix>.json sidecar with {rank, residual_bound, iterations, shifts}.

    Infinite shifts serialize as the string "inf" so the sidecar stays
    strict JSON.  Returns the three written paths.
    """
    prefix = str(prefix)
    paths = [prefix + "_z1.t4", prefix + "_z2.t4", prefix + ".json"]
    write_t4(paths[0], sol.Z1)
    write_t4(paths[1], sol.Z2)
    if sol.shifts is None:
        shifts = None
    else:
        shifts = ["inf" if math.isinf(s) else float(s) for s in sol.shifts]
    sidecar = {
        "rank": sol.rank,
        "residual_bound": sol.residual_bound,
        "iterations": sol.iterations,
        "shifts": shifts,
    }
    with open(paths[2], "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
