"""Projection-based model order reduction for tensor linear systems.

A continuous-time system (A, B, C) under the Einstein product has transfer
function F(s) = C * (sI - A)^{-1} * B.  This module evaluates F, projects
the triple onto Krylov bases from :mod:`einmor.krylov`, and provides the
exact error representation, a computable error bound, six residual-based
error estimators, and an adaptive loop that picks interpolation shifts from
the estimated error.

Evaluating transfer functions at distinct frequencies touches no shared
mutable state, so sweeps may run concurrently against one system object;
the adaptive loop itself is sequential.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from einmor.krylov import (
    ArnoldiResult,
    LanczosResult,
    SingularFactorError,
    _inv_last_block_row,
    trba,
    trbl,
)
from einmor.tensor4 import (
    ShiftedSolver,
    SingularOperatorError,
    Tensor4,
    _factorize,
    eigenvalues,
    shifted_solve,
)


@dataclass(frozen=True, eq=False)
class MLTISystem:
    """Operator triple of a continuous-time multilinear system.

    A is square with dims (J1, J2, J1, J2), B maps input blocks into the
    state space with dims (J1, J2, K1, K2), and C reads output blocks with
    dims (L1, L2, J1, J2).  States and inputs are implicit; only the triple
    is stored.
    """

    A: Tensor4
    B: Tensor4
    C: Tensor4

    def __post_init__(self):
        if self.A.row_dims != self.A.col_dims:
            raise ValueError("A must have square dims, got %r" % (self.A.dims,))
        if self.B.row_dims != self.A.col_dims:
            raise ValueError(
                "B row dims %r do not match A %r" % (self.B.row_dims, self.A.dims)
            )
        if self.C.col_dims != self.A.row_dims:
            raise ValueError(
                "C col dims %r do not match A %r" % (self.C.col_dims, self.A.dims)
            )

    @property
    def state_dims(self):
        return self.A.row_dims

    def stability(self):
        """Stability class of A; see :func:`check_stability`."""
        return check_stability(self.A)


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """Projected triple plus the bases that produced it.

    `basis_dual` is None for one-sided (orthogonal) projections.  The
    aliases A, B, C let reduced systems be evaluated by the same routines
    as full ones.
    """

    A_m: Tensor4
    B_m: Tensor4
    C_m: Tensor4
    basis_primal: Tensor4
    basis_dual: Tensor4 = None

    @property
    def A(self):
        return self.A_m

    @property
    def B(self):
        return self.B_m

    @property
    def C(self):
        return self.C_m

    @property
    def order(self):
        """Dimension of the reduced state space (unfolded)."""
        return self.A_m.data.shape[0]


@dataclass(frozen=True, eq=False)
class FrequencySample:
    """One point of a frequency sweep at s = j*omega.

    Norms are spectral norms of the unfolded transfer matrices; `error` is
    the spectral norm of the difference full - reduced.
    """

    omega: float
    norm_full: float
    norm_reduced: float
    error: float


def check_stability(a):
    """Classify a square operator by its unfolded spectrum.

    Returns "asymptotically_stable" when every eigenvalue has negative real
    part, "stable" when eigenvalues on the imaginary axis are all simple and
    none lie in the open right half-plane, and "unstable" otherwise.
    """
    lam = eigenvalues(a)
    scale = max(1.0, float(np.abs(lam).max()))
    tol = 1e-12 * scale
    re = lam.real
    if np.all(re < -tol):
        return "asymptotically_stable"
    if np.any(re > tol):
        return "unstable"
    crit = lam[np.abs(re) <= tol]
    for i in range(len(crit)):
        for j in range(i + 1, len(crit)):
            # repeated critical eigenvalue: polynomial growth possible
            if abs(crit[i] - crit[j]) <= 1e-8 * scale:
                return "unstable"
    return "stable"


def eval_transfer(sys, s):
    """Transfer function C * (sI - A)^{-1} * B at the complex point s.

    Accepts a full :class:`MLTISystem` or a :class:`ReducedSystem` (via its
    A/B/C aliases).  Raises the shifted-solve singularity error when s is an
    eigenvalue of A.
    """
    s = complex(s)
    x = shifted_solve(sys.A, s, sys.B)
    data = -(sys.C.data @ x.data)
    return Tensor4(data, sys.C.row_dims + sys.B.col_dims)


def _basis_matrices(basis):
    # unfolded V_m, W_m (W = V for one-sided) plus the trailing blocks
    m, p = basis.m, basis.block_size
    vm = basis.V.data[:, : m * p]
    vlast = basis.V.data[:, -p:]
    if isinstance(basis, LanczosResult):
        wm = basis.W.data[:, : m * p]
        wlast = basis.W.data[:, -p:]
    else:
        wm, wlast = vm, vlast
    return vm, wm, vlast, wlast


def project(sys, basis):
    """Reduced triple by (Petrov-)Galerkin projection onto a Krylov basis.

    One-sided bases give A_m = V_m^T * A * V_m, B_m = V_m^T * B and
    C_m = C * V_m; two-sided bases replace the left factor with W_m^T.
    """
    if basis.V.row_dims != sys.A.row_dims:
        raise ValueError(
            "basis row dims %r do not match system %r"
            % (basis.V.row_dims, sys.A.dims)
        )
    if sys.B.col_dims != basis.block_dims:
        raise ValueError(
            "basis block dims %r do not match B %r"
            % (basis.block_dims, sys.B.dims)
        )
    m, p = basis.m, basis.block_size
    K1, K2 = basis.block_dims
    vm, wm, _, _ = _basis_matrices(basis)
    av = sys.A.data @ vm
    red_dims = (K1, m * K2)
    row = sys.A.row_dims
    two_sided = isinstance(basis, LanczosResult)
    return ReducedSystem(
        A_m=Tensor4(wm.T @ av, red_dims + red_dims),
        B_m=Tensor4(wm.T @ sys.B.data, red_dims + sys.B.col_dims),
        C_m=Tensor4(sys.C.data @ vm, sys.C.row_dims + red_dims),
        basis_primal=Tensor4(vm, row + red_dims),
        basis_dual=Tensor4(wm, row + red_dims) if two_sided else None,
    )


def _reduced_solve(red, s, rhs):
    # (sI_m - A_m)^{-1} rhs on unfolded data
    am = red.A_m.data
    return np.linalg.solve(s * np.eye(am.shape[0]) - am, rhs)


def _reduced_solve_t(red, s, rhs):
    # (sI_m - A_m)^{-T} rhs; plain transpose also for complex s
    am = red.A_m.data
    return np.linalg.solve((s * np.eye(am.shape[0]) - am).T, rhs)


def _hbar_scale(mat):
    return float(np.linalg.norm(mat, 2))


def error_bound_arnoldi(sys, red, basis, s):
    """Upper bound on ||F(s) - F_m(s)|| from the basis decomposition.

    Evaluates the product of Frobenius norms

        ||C * (sI - A)^{-1}|| * ||A * V_{m+1} * H_{m+1,m} * E_m^T * H_m^{-1}
                                  * (sI_m - A_m)^{-1} * B_m||

    The bound is exact for one-sided bases under the decomposition
    conditions and is applied to two-sided bases as a heuristic.  A
    deflated basis gives 0: the reduction is then exact.
    """
    s = complex(s)
    m, p = basis.m, basis.block_size
    ct = shifted_solve(sys.A, s, sys.C.T, transposed=True)
    term_c = float(np.linalg.norm(ct.data))
    hbar = basis.H_bar.data
    inv_row = _inv_last_block_row(hbar[: m * p], p, "H", scale=_hbar_scale(hbar))
    y = _reduced_solve(red, s, red.B_m.data)
    z = basis.H_last.data @ (inv_row @ y)
    vlast = basis.V.data[:, -p:]
    term_r = float(np.linalg.norm((sys.A.data @ vlast) @ z))
    return term_c * term_r


def residual_factors(sys, red, basis, s):
    """Split residuals of the two-sided projection at the point s.

    Returns (B_t, R_B, C_t, R_C) where B_t = (V*W^T - I)*A*V_{m+1} and
    C_t = (W*V^T - I)*A^T*W_{m+1} are frequency independent, and

        R_B(s) = H_{m+1,m} * E_m^T * H_m^{-1} * (sI_m - A_m)^{-1} * B_m
        R_C(s) = G_{m+1,m} * E_m^T * G_m^{-1} * (sI_m - A_m)^{-T} * C_m^T

    so that B_t * R_B(s) reconstructs B - (sI - A)*V_m*(sI_m - A_m)^{-1}*B_m
    (and dually for C) whenever B lies in the span of the first block and
    the basis satisfies the trailing-zero-shift decomposition.
    """
    if not isinstance(basis, LanczosResult):
        raise TypeError("residual factors require a two-sided basis")
    s = complex(s)
    m, p = basis.m, basis.block_size
    K1, K2 = basis.block_dims
    vm, wm, vlast, wlast = _basis_matrices(basis)
    zb = sys.A.data @ vlast
    btilde = vm @ (wm.T @ zb) - zb
    zc = sys.A.data.T @ wlast
    ctilde = wm @ (vm.T @ zc) - zc
    hbar, gbar = basis.H_bar.data, basis.G_bar.data
    rb_row = basis.H_last.data @ _inv_last_block_row(
        hbar[: m * p], p, "H", scale=_hbar_scale(hbar)
    )
    rc_row = basis.G_last.data @ _inv_last_block_row(
        gbar[: m * p], p, "G", scale=_hbar_scale(gbar)
    )
    rb = rb_row @ _reduced_solve(red, s, red.B_m.data)
    rc = rc_row @ _reduced_solve_t(red, s, red.C_m.data.T)
    tall = sys.A.row_dims + (K1, K2)
    small = (K1, K2, K1, K2)
    return (
        Tensor4(btilde, tall),
        Tensor4(rb, small),
        Tensor4(ctilde, tall),
        Tensor4(rc, small),
    )


def exact_error_identity(sys, red, basis, s):
    """The error F(s) - F_m(s) assembled from projection residuals.

    Computes R_C(s)^T * (sI - A)^{-1} * R_B(s) with the residuals taken
    directly from their definitions,

        R_B(s)   = B - (sI - A) * V_m * (sI_m - A_m)^{-1} * B_m
        R_C(s)^T = C - C_m * (sI_m - A_m)^{-1} * W_m^T * (sI - A)

    an identity that needs only the projected structure of the reduced
    triple, not any shift condition.
    """
    s = complex(s)
    m, p = basis.m, basis.block_size
    vm, wm, _, _ = _basis_matrices(basis)
    y = _reduced_solve(red, s, red.B_m.data)
    xv = vm @ y
    r_b = sys.B.data - (s * xv - sys.A.data @ xv)
    z = _reduced_solve_t(red, s, red.C_m.data.T)
    wz = wm @ z
    r_ct = sys.C.data - (s * wz - sys.A.data.T @ wz).T
    inner = ShiftedSolver(sys.A, max_cached=1).solve_unfolded(s, r_b)
    return Tensor4(-(r_ct @ inner), sys.C.row_dims + sys.B.col_dims)


class EstimatorState:
    """Precomputed data for cheap per-frequency error estimates.

    Built once per basis, it caches the reduced triple, the inverted last
    block rows of the square Hessenberg factors, and (two-sided only) the
    projected frequency-independent residual factors.  Every estimate then
    costs one small reduced solve.  The surrogate transfer factor used by
    kinds 3 to 6 projects each residual factor onto the basis it is not
    orthogonal against -- the same-side projections vanish identically by
    the Petrov-Galerkin conditions.
    """

    def __init__(self, sys, basis, reduced=None):
        self.basis = basis
        self.reduced = project(sys, basis) if reduced is None else reduced
        self.two_sided = isinstance(basis, LanczosResult)
        m, p = basis.m, basis.block_size
        self._eye = np.eye(m * p)
        self.am = self.reduced.A_m.data
        self.bm = self.reduced.B_m.data
        self.cm = self.reduced.C_m.data
        hbar = basis.H_bar.data
        self.rb_row = basis.H_last.data @ _inv_last_block_row(
            hbar[: m * p], p, "H", scale=_hbar_scale(hbar)
        )
        if self.two_sided:
            gbar = basis.G_bar.data
            self.rc_row = basis.G_last.data @ _inv_last_block_row(
                gbar[: m * p], p, "G", scale=_hbar_scale(gbar)
            )
            vm, wm, vlast, wlast = _basis_matrices(basis)
            zb = sys.A.data @ vlast
            btilde = vm @ (wm.T @ zb) - zb
            zc = sys.A.data.T @ wlast
            ctilde = wm @ (vm.T @ zc) - zc
            self.bt_m = vm.T @ btilde
            self.ct_m = (wm.T @ ctilde).T

    def _solve(self, s, rhs):
        return np.linalg.solve(s * self._eye - self.am, rhs)

    def _solve_t(self, s, rhs):
        return np.linalg.solve((s * self._eye - self.am).T, rhs)

    def rtilde_b(self, s):
        """Frequency-dependent residual gain on the input side."""
        return self.rb_row @ self._solve(s, self.bm)

    def rtilde_c(self, s):
        """Frequency-dependent residual gain on the output side."""
        if not self.two_sided:
            raise ValueError("output-side residual requires a two-sided basis")
        return self.rc_row @ self._solve_t(s, self.cm.T)

    def surrogate_transfer(self, s):
        """Reduced-order stand-in for the error system's transfer factor."""
        if not self.two_sided:
            raise ValueError("the surrogate factor requires a two-sided basis")
        return self.ct_m @ self._solve(s, self.bt_m)

    def estimate(self, kind, s):
        """Frobenius norm of the selected estimator expression at s."""
        if kind not in (1, 2, 3, 4, 5, 6):
            raise ValueError("estimator kind must be in 1..6, got %r" % (kind,))
        if kind != 1 and not self.two_sided:
            raise ValueError("estimator kind %d requires a two-sided basis" % kind)
        s = complex(s)
        if kind == 1:
            return float(np.linalg.norm(self.rtilde_b(s)))
        if kind == 2:
            return float(np.linalg.norm(self.rtilde_c(s)))
        h = self.surrogate_transfer(s)
        if kind == 3:
            return float(np.linalg.norm(h @ self.rtilde_b(s)))
        if kind == 4:
            return float(np.linalg.norm(h))
        if kind == 5:
            return float(np.linalg.norm(self.rtilde_c(s).T @ h))
        return float(np.linalg.norm(self.rtilde_c(s).T @ h @ self.rtilde_b(s)))


def error_estimate(state, kind, s):
    """Error estimator of the given kind (1..6) at the point s.

    Kind 1 is the input-side residual gain norm, kind 2 the output-side
    one; kinds 3 to 6 combine them with the surrogate transfer factor.
    Kinds other than 1 need a two-sided basis.
    """
    return state.estimate(kind, s)


def _ranked_shifts(state, candidates, method):
    # candidates ordered by descending objective; ties keep input order so
    # the ranking is deterministic
    if method not in ("lanczos", "arnoldi"):
        raise ValueError("method must be 'lanczos' or 'arnoldi'")
    if method == "lanczos" and not state.two_sided:
        raise ValueError("the lanczos objective requires a two-sided basis")
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty candidate set")
    scored = []
    for s in candidates:
        try:
            rb = state.rtilde_b(complex(s))
            if method == "lanczos":
                val = float(np.linalg.norm(state.rtilde_c(complex(s)).T @ rb))
            else:
                val = float(np.linalg.norm(rb))
        except np.linalg.LinAlgError:
            continue
        scored.append((-val, len(scored), float(np.real(s))))
    if not scored:
        raise ValueError("every candidate made the reduced resolvent singular")
    scored.sort()
    return [s for _, _, s in scored]


def next_shift(state, candidates, method="lanczos"):
    """Interpolation point maximizing the residual objective over candidates.

    The objective is ||R_C(s)^T * R_B(s)|| for method "lanczos" and
    ||R_B(s)|| for method "arnoldi" (Frobenius norms of the residual
    gains).  Candidates making the reduced resolvent singular are skipped;
    the winner's real part is returned.
    """
    return _ranked_shifts(state, candidates, method)[0]


def _first_factorable(amat, ranked):
    # on heavily non-normal operators a shift can score well yet leave
    # A - sigma*I numerically singular; probe the ranked candidates in
    # order and take the best one whose resolvent actually factors
    err = None
    eye = np.eye(amat.shape[0])
    for s in ranked:
        try:
            _factorize(amat - s * eye, s)
            return s
        except SingularOperatorError as exc:
            err = exc
    raise err


def frequency_sweep(sys, reduced, omegas):
    """Sampled transfer norms and errors at s = j*omega for each omega."""
    out = []
    for omega in omegas:
        s = 1j * float(omega)
        f_full = eval_transfer(sys, s).data
        f_red = eval_transfer(reduced, s).data
        out.append(
            FrequencySample(
                omega=float(omega),
                norm_full=float(np.linalg.norm(f_full, 2)),
                norm_reduced=float(np.linalg.norm(f_red, 2)),
                error=float(np.linalg.norm(f_full - f_red, 2)),
            )
        )
    return out


@dataclass(frozen=True, eq=False)
class AdaptiveResult:
    """Outcome of :func:`adaptive_reduce`.

    Iterates as the triple (reduced, history, shifts); `converged` records
    whether the estimator met the tolerance, `achieved` its final value,
    and `estimates` the per-iteration (m, worst estimate) trace.
    """

    reduced: ReducedSystem
    history: list
    shifts: list
    converged: bool
    achieved: float
    estimates: tuple = field(default=())

    def __iter__(self):
        return iter((self.reduced, self.history, self.shifts))


# skip the advisory spectrum check above this unfolded dimension: a full
# eigendecomposition would dwarf the reduction itself
_STABILITY_CHECK_LIMIT = 600

_DEFAULT_SHIFT_INTERVAL = (-1e4, -1e-2)


def _log_midpoint(lo, hi):
    return 10.0 ** ((math.log10(lo) + math.log10(hi)) / 2.0)


def _interval_grid(interval, num):
    lo, hi = sorted((abs(interval[0]), abs(interval[1])))
    return -np.logspace(math.log10(lo), math.log10(hi), num)


def _spectrum_candidates(am, num, fallback=None):
    """Shift candidates from the reduced spectrum: log-spaced magnitudes
    between the smallest and largest |eigenvalue|, negated.  Magnitudes
    below 1e-12 of the largest are clamped; a spectrum of all zeros falls
    back to the given grid (default interval when fallback is None)."""
    if fallback is None:
        fallback = _interval_grid(_DEFAULT_SHIFT_INTERVAL, num)
    mags = np.abs(np.linalg.eigvals(am))
    mx = float(mags.max(initial=0.0))
    if mx <= 0.0:
        return fallback
    mn = max(float(mags.min()), mx * 1e-12)
    if mn >= mx:
        # a collapsed spread (e.g. a 1x1 reduced operator) would put every
        # candidate exactly on the reduced pole; widen it two decades
        mn = mx * 1e-2
    return -np.logspace(math.log10(mn), math.log10(mx), num)


def adaptive_reduce(
    sys,
    m_max,
    tol,
    method="trbl",
    estimator_kind=1,
    interval=(-1e4, -1e-2),
    num_candidates=50,
    sweep_omegas=None,
):
    """Grow a rational Krylov basis until the error estimate meets tol.

    Each iteration extends the basis by one block (method "trbl" two-sided,
    "trba" one-sided), evaluates the selected estimator at a candidate set
    of negative real points, and stops when the worst estimate drops to
    tol.  The candidate set is rebuilt every iteration from the reduced
    spectrum: `num_candidates` log-spaced magnitudes between the smallest
    and largest |eigenvalue| of A_m, negated.  Before any reduced operator
    exists the user `interval` of negative reals seeds both the candidates
    and the first shift (its log-midpoint); the following shift reuses the
    first one, and each later shift is the best-ranked candidate under the
    :func:`next_shift` objective whose shifted operator still factors in
    floating point (candidates with a numerically singular resolvent are
    skipped).

    The run is deterministic: identical inputs give identical shift
    sequences.  Non-convergence at m_max returns the last iterate with
    `converged` False and a warning.  `sweep_omegas` selects the frequency
    grid of the returned history (default 20 log-spaced points in
    [1e-2, 1e2]; pass an empty list to skip the sweep, which needs full
    solves).
    """
    method = str(method).lower()
    if method not in ("trbl", "trba"):
        raise ValueError("method must be 'trbl' or 'trba'")
    if estimator_kind not in (1, 2, 3, 4, 5, 6):
        raise ValueError("estimator kind must be in 1..6")
    if method == "trba" and estimator_kind != 1:
        raise ValueError("one-sided reduction supports estimator kind 1 only")
    n = sys.A.data.shape[0]
    p = sys.B.data.shape[1]
    if m_max < 1 or m_max * p > n:
        raise ValueError("m_max must satisfy 1 <= m_max*block_size <= dimension")
    lo, hi = sorted((abs(interval[0]), abs(interval[1])))
    if lo <= 0 or hi <= 0:
        raise ValueError("interval endpoints must be nonzero")
    if n <= _STABILITY_CHECK_LIMIT and check_stability(sys.A) == "unstable":
        warnings.warn("adaptive reduction on an unstable operator", stacklevel=2)

    sigma1 = -_log_midpoint(lo, hi)
    default_set = _interval_grid(interval, num_candidates)

    def candidate_set(state):
        return _spectrum_candidates(state.am, num_candidates, default_set)

    def shift_pool(state, kind):
        # the interval grid backs up the spectrum candidates in case every
        # one of them has a numerically singular resolvent
        return _ranked_shifts(state, candidate_set(state), kind) + _ranked_shifts(
            state, default_set, kind
        )

    def worst_estimate(state, cands):
        worst = -math.inf
        usable = False
        for s in cands:
            try:
                val = state.estimate(estimator_kind, s)
            except np.linalg.LinAlgError:
                continue
            usable = True
            worst = max(worst, val)
        return worst if usable else math.inf

    records = []

    def assess(partial):
        # a singular recurrence factor leaves no usable estimator at this
        # iterate; record no progress and let the caller steer from the
        # reduced spectrum instead
        try:
            state = EstimatorState(sys, partial)
        except SingularFactorError:
            records.append((partial.m, math.inf))
            return None, math.inf
        worst = worst_estimate(state, candidate_set(state))
        records.append((partial.m, worst))
        return state, worst

    def unranked_pool(partial):
        red = project(sys, partial)
        cands = _spectrum_candidates(red.A_m.data, num_candidates, default_set)
        return list(cands) + list(default_set)

    if method == "trbl":

        def source(k, partial):
            if k == 0 or partial is None:
                return sigma1
            state, worst = assess(partial)
            if worst <= tol:
                raise StopIteration
            if state is None:
                return _first_factorable(sys.A.data, unranked_pool(partial))
            return _first_factorable(sys.A.data, shift_pool(state, "lanczos"))

        basis = trbl(sys.A, sys.B, sys.C, source, m=m_max)
    else:

        def source(j, partial):
            if partial is None:
                return sigma1
            state, worst = assess(partial)
            if worst <= tol:
                raise StopIteration
            if state is None:
                return _first_factorable(sys.A.data, unranked_pool(partial))
            return _first_factorable(sys.A.data, shift_pool(state, "arnoldi"))

        basis = trba(sys.A, sys.B, source, m=m_max)

    reduced = project(sys, basis)
    if not records or records[-1][0] != basis.m:
        try:
            state = EstimatorState(sys, basis, reduced=reduced)
            final = worst_estimate(state, candidate_set(state))
        except SingularFactorError:
            final = math.inf
        records.append((basis.m, final))
    achieved = records[-1][1]
    converged = achieved <= tol
    if not converged:
        warnings.warn(
            "estimator reached %.3e > tol %.3e at m_max=%d"
            % (achieved, tol, m_max),
            stacklevel=2,
        )
    omegas = np.logspace(-2.0, 2.0, 20) if sweep_omegas is None else sweep_omegas
    history = frequency_sweep(sys, reduced, omegas)
    return AdaptiveResult(
        reduced=reduced,
        history=history,
        shifts=list(basis.shifts) if basis.shifts else [],
        converged=converged,
        achieved=achieved,
        estimates=tuple(records),
    )
