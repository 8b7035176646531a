"""Classic and rational block Krylov bases under the Einstein product.

Four factories grow block bases for a square operator tensor A:

- :func:`tba`   orthonormal basis of span{B, A*B, A^2*B, ...} (block Arnoldi),
- :func:`trba`  orthonormal basis of the shifted-inverse (rational) subspace,
- :func:`tbl`   bi-orthonormal pair for (A, B) and (A^T, C^T) (block Lanczos),
- :func:`trbl`  the rational two-sided variant with per-step shifts.

All bookkeeping happens on unfolded matrices: basis blocks are contiguous
column groups, so the returned tensors slice cheaply.  Results carry the
extended Hessenberg factors of the decompositions

    classic:   A * V_m = V_{m+1} * H_bar
    rational:  A * V_{m+1} * H_bar = V_{m+1} * K_bar   (all step shifts finite)

and, for Lanczos, the projected operator T_m.  The rational identities are
exact for the shifts actually consumed by each step; the square-factor
truncations used in error bounds additionally require the final step shift
to be zero, which callers arrange by appending a trailing zero shift.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_solve, solve_triangular

from einmor.tensor4 import (
    ShiftedSolver,
    SingularOperatorError,
    Tensor4,
    _factorize,
    _qr_pos,
)

# rank-loss threshold, relative to the largest QR diagonal seen so far
DEFLATION_RTOL = 1e-12
# bi-orthonormalization threshold on the singular values of W^T V
BREAKDOWN_RTOL = 1e-12
# square-factor inversion threshold, relative to the extended factor's norm
FACTOR_RTOL = 1e-12


class BreakdownError(Exception):
    """Serious Lanczos breakdown: W_{j+1}^T * V_{j+1} is numerically singular.

    `step` is the iteration at which bi-orthonormalization failed (0 for the
    initialization).  No look-ahead recovery is attempted.
    """

    def __init__(self, step):
        self.step = step
        super().__init__("Lanczos breakdown at step %d" % step)


class SingularFactorError(Exception):
    """A square Hessenberg factor needed for a derived quantity is singular.

    `factor` names the offending factor ("H" or "G").  When raised by
    :func:`trbl`, `result` carries the completed basis with the projected
    operator left unset.
    """

    def __init__(self, factor, result=None):
        self.factor = factor
        self.result = result
        super().__init__("singular %s factor" % factor)


def _real_shift(sigma, allow_inf):
    # complex shifts keep only their real part; inf marks a polynomial step
    value = float(np.real(sigma))
    if math.isnan(value):
        raise ValueError("shift must not be NaN")
    if math.isinf(value) and not allow_inf:
        raise ValueError("infinite shifts are only supported by trbl")
    return value


def _embed_last_block(x, m):
    # X -> X * E_m^T : place X in the last block column of m block columns
    p = x.shape[1]
    out = np.zeros((x.shape[0], m * p), dtype=x.dtype)
    out[:, -p:] = x
    return out


def _guard_square_factor(mmat, factor, scale, result=None):
    # rcond alone cannot flag a uniformly tiny factor (it is scale
    # invariant), so the smallest singular value is also measured against
    # the norm of the extended factor the block was cut from
    svals = np.linalg.svd(mmat, compute_uv=False)
    if svals[-1] < FACTOR_RTOL * max(svals[0], scale):
        raise SingularFactorError(factor, result=result)


def _right_solve(xmat, mmat, factor, scale, result=None):
    # X * M^{-1} with an explicit conditioning check on M
    _guard_square_factor(mmat, factor, scale, result)
    try:
        lu, piv = _factorize(mmat)
    except SingularOperatorError as exc:
        raise SingularFactorError(factor, result=result) from exc
    return lu_solve((lu, piv), xmat.T, trans=1).T


def _inv_last_block_row(mmat, p, factor, scale, result=None):
    # last p rows of M^{-1}: E_m^T * M^{-1}, via one factorization of M^T
    _guard_square_factor(mmat, factor, scale, result)
    try:
        lu, piv = _factorize(mmat.T)
    except SingularOperatorError as exc:
        raise SingularFactorError(factor, result=result) from exc
    rhs = np.zeros((mmat.shape[0], p), dtype=mmat.dtype)
    rhs[-p:] = np.eye(p)
    return lu_solve((lu, piv), rhs).T


def _biorthonormalize(vnew, wnew, hfac, gfac, step):
    # SVD-based rescaling making W^T V the identity block; scales the
    # outgoing factors so the products V*hfac and W*gfac are preserved.
    # Both inputs have orthonormal columns, so the singular values are
    # cosines of principal angles and 1 is the natural scale.
    u, s, zt = np.linalg.svd(wnew.T @ vnew)
    if s.min() < BREAKDOWN_RTOL * max(1.0, s.max()):
        raise BreakdownError(step)
    shalf = np.sqrt(s)
    return (
        (vnew @ zt.T) / shalf[None, :],
        (wnew @ u) / shalf[None, :],
        (shalf[:, None] * zt) @ hfac,
        (shalf[:, None] * u.T) @ gfac,
    )


def _stack_columns(cols, m, p):
    # pad per-step Hessenberg columns into the (m+1)p x mp extended factor
    out = np.zeros(((m + 1) * p, m * p))
    for j, col in enumerate(cols):
        out[: col.shape[0], j * p : (j + 1) * p] = col
    return out


def _coupling_factor(hbar, shifts, p):
    # K_bar = eye + H_bar * diag(shift_j I_p); exact per consumed step shifts
    m = hbar.shape[1] // p
    dmat = np.kron(np.diag(shifts), np.eye(p))
    return np.eye((m + 1) * p, m * p) + hbar @ dmat


@dataclass(frozen=True, eq=False)
class ArnoldiResult:
    """Orthonormal block basis with its extended Hessenberg decomposition.

    Attributes
    ----------
    V : Tensor4, dims (J1, J2, K1, (m+1)*K2)
        Basis blocks V_1..V_{m+1}, orthonormal columns when unfolded.
    H_bar : Tensor4, dims (K1, (m+1)*K2, K1, m*K2)
        Extended block upper Hessenberg factor.
    K_bar : Tensor4 or None
        Rational coupling factor; None for the classic iteration.
    shifts : list of float or None
        Shift consumed by each step (rational only).
    m : int
        Completed steps (block columns of H_bar).
    H_init : Tensor4
        Triangular factor of the starting block: B = V_1 * H_init.
    deflated : bool
        True when the last step hit rank loss; the final basis block and
        subdiagonal factor are then zero and the subspace is invariant.
    block_dims : tuple
        (K1, K2) of a single block.
    """

    V: Tensor4
    H_bar: Tensor4
    K_bar: Tensor4
    shifts: list
    m: int
    H_init: Tensor4
    deflated: bool
    block_dims: tuple

    @property
    def block_size(self):
        return self.block_dims[0] * self.block_dims[1]

    @property
    def H_square(self):
        """Leading m-by-m block part of H_bar."""
        p = self.block_size
        K1, K2 = self.block_dims
        return Tensor4(
            self.H_bar.data[: self.m * p], (K1, self.m * K2, K1, self.m * K2)
        )

    @property
    def H_last(self):
        """Subdiagonal block H_{m+1,m} closing the decomposition."""
        p = self.block_size
        K1, K2 = self.block_dims
        return Tensor4(self.H_bar.data[-p:, -p:], (K1, K2, K1, K2))

    def basis_block(self, i):
        """The i-th (1-based) basis block as a Tensor4."""
        p = self.block_size
        if not 1 <= i <= self.m + 1:
            raise IndexError("block index %d out of range 1..%d" % (i, self.m + 1))
        K1, K2 = self.block_dims
        return Tensor4(
            self.V.data[:, (i - 1) * p : i * p], self.V.row_dims + (K1, K2)
        )


@dataclass(frozen=True, eq=False)
class LanczosResult:
    """Bi-orthonormal block bases with their two-sided decompositions.

    V and W hold blocks V_1..V_{m+1} and W_1..W_{m+1} with unfold(W)^T
    unfold(V) = I.  For the classic iteration H_bar and G_bar are the
    extended tridiagonal factors of the three-term recurrences; for the
    rational iteration they collect the per-step orthogonalization
    coefficients, with K_bar/L_bar the coupling factors (None when a step
    used an infinite shift).  T_m is the projected operator W_m^T * A * V_m;
    None when its Hessenberg-route assembly hit a singular factor.

    H_init and G_init reconstruct the starting blocks: the classic iteration
    has B = V_1 * H_init and C^T = W_1 * G_init; the rational one has
    S_0 = V_1 * H_init and R_0 = W_1 * G_init for the initial (shifted) pair.
    """

    V: Tensor4
    W: Tensor4
    H_bar: Tensor4
    G_bar: Tensor4
    K_bar: Tensor4
    L_bar: Tensor4
    T_m: Tensor4
    shifts: list
    m: int
    H_init: Tensor4
    G_init: Tensor4
    block_dims: tuple

    @property
    def block_size(self):
        return self.block_dims[0] * self.block_dims[1]

    @property
    def H_square(self):
        p = self.block_size
        K1, K2 = self.block_dims
        return Tensor4(
            self.H_bar.data[: self.m * p], (K1, self.m * K2, K1, self.m * K2)
        )

    @property
    def H_last(self):
        p = self.block_size
        K1, K2 = self.block_dims
        return Tensor4(self.H_bar.data[-p:, -p:], (K1, K2, K1, K2))

    @property
    def G_square(self):
        p = self.block_size
        K1, K2 = self.block_dims
        return Tensor4(
            self.G_bar.data[: self.m * p], (K1, self.m * K2, K1, self.m * K2)
        )

    @property
    def G_last(self):
        p = self.block_size
        K1, K2 = self.block_dims
        return Tensor4(self.G_bar.data[-p:, -p:], (K1, K2, K1, K2))

    def basis_block(self, i, side="primal"):
        """The i-th (1-based) block of V (primal) or W (dual)."""
        if side not in ("primal", "dual"):
            raise ValueError("side must be 'primal' or 'dual'")
        src = self.V if side == "primal" else self.W
        p = self.block_size
        if not 1 <= i <= self.m + 1:
            raise IndexError("block index %d out of range 1..%d" % (i, self.m + 1))
        K1, K2 = self.block_dims
        return Tensor4(src.data[:, (i - 1) * p : i * p], src.row_dims + (K1, K2))


def _check_triplet(A, B, C=None):
    if A.row_dims != A.col_dims:
        raise ValueError("operator must have square dims, got %r" % (A.dims,))
    if B.row_dims != A.col_dims:
        raise ValueError(
            "starting block row dims %r do not match operator %r"
            % (B.row_dims, A.dims)
        )
    if C is not None:
        if C.col_dims != A.row_dims or C.row_dims != B.col_dims:
            raise ValueError(
                "output tensor dims %r incompatible with operator %r and input %r"
                % (C.dims, A.dims, B.dims)
            )


def _check_capacity(m, p, n):
    if m * p > n:
        raise ValueError(
            "m=%d blocks of size %d exceed the ambient dimension %d" % (m, p, n)
        )


class _ArnoldiBuilder:
    """Incremental block Arnoldi state on unfolded matrices.

    One basis block per `step`; the running A*V cache lets callers form
    reduced operators without repeated large products.
    """

    def __init__(self, A, B):
        _check_triplet(A, B)
        self.op = A
        self.row_dims = A.row_dims
        self.block_dims = B.col_dims
        self.p = B.data.shape[1]
        self.n = A.data.shape[0]
        q, r = _qr_pos(B.data)
        self.h_init = r
        self.vmat = q
        self.av = A.data @ q
        self.hcols = []
        self.shifts_used = []
        self.deflated = False
        self._diag_scale = float(np.abs(np.diag(r)).max()) if r.size else 0.0
        self._solver = ShiftedSolver(A, max_cached=2)

    @property
    def m(self):
        return len(self.hcols)

    def step(self, sigma=None):
        """Extend by one block: multiply by A (sigma None) or solve with
        (A - sigma*I).  Returns False when the step deflated."""
        if self.deflated:
            raise RuntimeError("cannot extend a deflated basis")
        j = self.m + 1
        p = self.p
        if sigma is None:
            w = self.av[:, -p:].copy()
        else:
            w = self._solver.solve_unfolded(sigma, self.vmat[:, -p:])
        hcol = np.zeros(((j + 1) * p, p))
        for i in range(j):
            vi = self.vmat[:, i * p : (i + 1) * p]
            hij = vi.T @ w
            w -= vi @ hij
            hcol[i * p : (i + 1) * p] = hij
        # one extra classical Gram-Schmidt pass; a single sweep loses
        # orthogonality in floating point
        corr = self.vmat.T @ w
        w -= self.vmat @ corr
        hcol[: j * p] += corr
        q, r = _qr_pos(w)
        d = np.abs(np.diag(r))
        self._diag_scale = max(self._diag_scale, float(d.max()))
        if self._diag_scale <= 0.0 or d.min() < DEFLATION_RTOL * self._diag_scale:
            q = np.zeros_like(q)
            r = np.zeros_like(r)
            self.deflated = True
        hcol[j * p :] = r
        self.hcols.append(hcol)
        self.vmat = np.hstack([self.vmat, q])
        if self.deflated:
            self.av = np.hstack([self.av, np.zeros_like(q)])
        else:
            self.av = np.hstack([self.av, self.op.data @ q])
        if sigma is not None:
            self.shifts_used.append(sigma)
        return not self.deflated

    def snapshot(self):
        """Freeze the current state into an ArnoldiResult (None before any step)."""
        m = self.m
        if m == 0:
            return None
        p = self.p
        K1, K2 = self.block_dims
        hbar = _stack_columns(self.hcols, m, p)
        rational = bool(self.shifts_used)
        kbar = None
        if rational:
            kmat = _coupling_factor(hbar, self.shifts_used, p)
            kbar = Tensor4(kmat, (K1, (m + 1) * K2, K1, m * K2))
        return ArnoldiResult(
            V=Tensor4(self.vmat, self.row_dims + (K1, (m + 1) * K2)),
            H_bar=Tensor4(hbar, (K1, (m + 1) * K2, K1, m * K2)),
            K_bar=kbar,
            shifts=list(self.shifts_used) if rational else None,
            m=m,
            H_init=Tensor4(self.h_init, (K1, K2, K1, K2)),
            deflated=self.deflated,
            block_dims=(K1, K2),
        )


def tba(A, B, m):
    """Tensor block Arnoldi iteration.

    Runs m steps of block modified Gram-Schmidt orthogonalization of the
    sequence B, A*B, A^2*B, ..., producing V with m+1 blocks and the
    extended Hessenberg factor with A * V_m = V_{m+1} * H_bar.  Rank loss in
    a new block signals an invariant subspace: the iteration stops early
    with a zero final block and `deflated` set.

    Parameters
    ----------
    A : Tensor4
        Square operator, dims (J1, J2, J1, J2).
    B : Tensor4
        Starting block, dims (J1, J2, K1, K2).
    m : int
        Number of steps; m*K1*K2 must not exceed J1*J2.

    Returns
    -------
    ArnoldiResult
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    builder = _ArnoldiBuilder(A, B)
    _check_capacity(m, builder.p, builder.n)
    for _ in range(m):
        if not builder.step():
            break
    return builder.snapshot()


def trba(A, B, shifts, m=None):
    """Tensor rational block Arnoldi iteration.

    Step j solves (A - sigma_j*I) * X = V_j and orthogonalizes X against the
    basis, so the basis spans the rational subspace of the consumed shifts.
    Reorthogonalization, deflation and early termination behave as in
    :func:`tba`.

    Parameters
    ----------
    A, B : Tensor4
        As in :func:`tba`; every (A - sigma_j*I) must be nonsingular.
    shifts : sequence of float, or callable
        Fixed shifts (at least m of them), or a callback
        ``shifts(j, partial)`` returning the shift for step j (1-based),
        where `partial` is the ArnoldiResult after j-1 steps (None for j=1).
        The callback may raise StopIteration to stop growing the basis.
        Complex values keep only their real part; infinite shifts are
        rejected.
    m : int, optional
        Steps to run; defaults to len(shifts) for fixed lists and is
        required with a callback.

    Returns
    -------
    ArnoldiResult
    """
    if callable(shifts):
        if m is None:
            raise ValueError("m is required when shifts is a callback")
        source = shifts
    else:
        fixed = [_real_shift(s, allow_inf=False) for s in shifts]
        if m is None:
            m = len(fixed)
        if len(fixed) < m:
            raise ValueError("need at least m=%d shifts, got %d" % (m, len(fixed)))

        def source(j, partial):
            return fixed[j - 1]

    if m < 1:
        raise ValueError("m must be at least 1")
    builder = _ArnoldiBuilder(A, B)
    _check_capacity(m, builder.p, builder.n)
    for j in range(1, m + 1):
        try:
            sigma = _real_shift(source(j, builder.snapshot()), allow_inf=False)
        except StopIteration:
            break
        if not builder.step(sigma):
            break
    return builder.snapshot()


class _ClassicLanczosBuilder:
    """Incremental two-sided block Lanczos state on unfolded matrices.

    Keeps the three-term recurrence coefficients and the pending next
    candidates, plus the running A*V cache.
    """

    def __init__(self, A, B, C):
        _check_triplet(A, B, C)
        self.op = A
        self.row_dims = A.row_dims
        self.block_dims = B.col_dims
        self.p = B.data.shape[1]
        self.n = A.data.shape[0]
        delta, beta = _qr_pos(C.data @ B.data)
        bd = np.abs(np.diag(beta))
        if bd.max() <= 0.0 or bd.min() < BREAKDOWN_RTOL * bd.max():
            raise BreakdownError(0)
        v1 = solve_triangular(beta, B.data.T, trans="T").T
        w1 = C.data.T @ delta
        self.h_init = beta
        self.g_init = delta.T
        self.vmat = v1
        self.wmat = w1
        self.av = A.data @ v1
        self.alphas = []
        self.betas = []
        self.deltas = []
        self._pending_v = self.av.copy()
        self._pending_w = A.data.T @ w1

    @property
    def m(self):
        return len(self.alphas)

    def step(self):
        """One three-term recurrence step; raises BreakdownError on failure."""
        j = self.m + 1
        p = self.p
        vj = self.vmat[:, -p:]
        wj = self.wmat[:, -p:]
        alpha = wj.T @ self._pending_v
        vt = self._pending_v - vj @ alpha
        wt = self._pending_w - wj @ alpha.T
        # the three-term recurrence is exact in theory, but biorthogonality
        # loss compounds exponentially on non-normal operators; two cleanup
        # passes against the whole basis keep it near machine precision and
        # the projected residue is rounding-sized, so no factors change
        for _ in range(2):
            vt = vt - self.vmat @ (self.wmat.T @ vt)
            wt = wt - self.wmat @ (self.vmat.T @ wt)
        vnew, beta_new = _qr_pos(vt)
        wnew, delta_t = _qr_pos(wt)
        vnew, wnew, beta_new, delta_t = _biorthonormalize(
            vnew, wnew, beta_new, delta_t, j
        )
        delta_new = delta_t.T
        avnew = self.op.data @ vnew
        self._pending_v = avnew - vj @ delta_new
        self._pending_w = self.op.data.T @ wnew - wj @ beta_new.T
        self.alphas.append(alpha)
        self.betas.append(beta_new)
        self.deltas.append(delta_new)
        self.vmat = np.hstack([self.vmat, vnew])
        self.wmat = np.hstack([self.wmat, wnew])
        self.av = np.hstack([self.av, avnew])

    def tridiagonal(self, m):
        # T_m from the recurrence coefficients: diag alpha_j, superdiagonal
        # delta_{j+1}, subdiagonal beta_{j+1}
        p = self.p
        t = np.zeros((m * p, m * p))
        for i in range(m):
            t[i * p : (i + 1) * p, i * p : (i + 1) * p] = self.alphas[i]
        for i in range(m - 1):
            t[(i + 1) * p : (i + 2) * p, i * p : (i + 1) * p] = self.betas[i]
            t[i * p : (i + 1) * p, (i + 1) * p : (i + 2) * p] = self.deltas[i]
        return t

    def snapshot(self):
        """Freeze into a LanczosResult (None before any step)."""
        m = self.m
        if m == 0:
            return None
        p = self.p
        K1, K2 = self.block_dims
        t = self.tridiagonal(m)
        hbar = np.vstack([t, _embed_last_block(self.betas[m - 1], m)])
        gbar = np.vstack([t.T, _embed_last_block(self.deltas[m - 1].T, m)])
        ext_dims = (K1, (m + 1) * K2, K1, m * K2)
        return LanczosResult(
            V=Tensor4(self.vmat, self.row_dims + (K1, (m + 1) * K2)),
            W=Tensor4(self.wmat, self.row_dims + (K1, (m + 1) * K2)),
            H_bar=Tensor4(hbar, ext_dims),
            G_bar=Tensor4(gbar, ext_dims),
            K_bar=None,
            L_bar=None,
            T_m=Tensor4(t, (K1, m * K2, K1, m * K2)),
            shifts=None,
            m=m,
            H_init=Tensor4(self.h_init, (K1, K2, K1, K2)),
            G_init=Tensor4(self.g_init, (K1, K2, K1, K2)),
            block_dims=(K1, K2),
        )


def tbl(A, B, C, m):
    """Tensor block Lanczos iteration.

    Builds bi-orthonormal bases for the subspaces generated by (A, B) and
    (A^T, C^T) with SVD-stabilized couplings, so that

        A   * V_m = V_m * T_m   + V_{m+1} * beta_{m+1}    * E_m^T
        A^T * W_m = W_m * T_m^T + W_{m+1} * delta_{m+1}^T * E_m^T

    with T_m block tridiagonal.  The start requires unfold(C) @ unfold(B)
    to admit a QR-based bi-orthogonal factorization.

    Parameters
    ----------
    A : Tensor4
        Square operator.
    B : Tensor4
        Input block, dims (J1, J2, K1, K2).
    C : Tensor4
        Output block, dims (K1, K2, J1, J2); its transpose starts the dual
        sequence.
    m : int
        Steps; m*K1*K2 must not exceed J1*J2.

    Returns
    -------
    LanczosResult

    Raises
    ------
    BreakdownError
        When bi-orthonormalization encounters a numerically singular
        coupling (step 0 denotes the initialization).
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    builder = _ClassicLanczosBuilder(A, B, C)
    _check_capacity(m, builder.p, builder.n)
    for _ in range(m):
        builder.step()
    return builder.snapshot()


class _RationalLanczosBuilder:
    """Incremental rational two-sided Lanczos state on unfolded matrices."""

    def __init__(self, A, B, C, sigma1):
        _check_triplet(A, B, C)
        sigma1 = _real_shift(sigma1, allow_inf=True)
        self.op = A
        self.row_dims = A.row_dims
        self.block_dims = B.col_dims
        self.p = B.data.shape[1]
        self.n = A.data.shape[0]
        self._solver = ShiftedSolver(A, max_cached=2)
        if math.isinf(sigma1):
            s0 = B.data.copy()
            r0 = C.data.T.copy()
        else:
            s0 = self._solver.solve_unfolded(sigma1, B.data)
            r0 = self._solver.solve_unfolded(sigma1, C.data.T, transposed=True)
        v1, h10 = _qr_pos(s0)
        w1, g10 = _qr_pos(r0)
        v1, w1, h10, g10 = _biorthonormalize(v1, w1, h10, g10, 0)
        self.h_init = h10
        self.g_init = g10
        self.vmat = v1
        self.wmat = w1
        self.av = A.data @ v1
        self.hcols = []
        self.gcols = []
        self.shifts_used = [sigma1]
        self._t_singular = False

    @property
    def m(self):
        return len(self.hcols)

    def step(self, sigma):
        """One rational step with shift sigma (inf multiplies by A)."""
        sigma = _real_shift(sigma, allow_inf=True)
        k = self.m + 1
        p = self.p
        if math.isinf(sigma):
            s = self.av[:, -p:].copy()
            r = self.op.data.T @ self.wmat[:, -p:]
        else:
            s = self._solver.solve_unfolded(sigma, self.vmat[:, -p:])
            r = self._solver.solve_unfolded(
                sigma, self.wmat[:, -p:], transposed=True
            )
        h = self.wmat.T @ s
        s = s - self.vmat @ h
        g = self.vmat.T @ r
        r = r - self.wmat @ g
        # second orthogonalization pass: the leftover projection is folded
        # into the coefficients, so the recurrence factors stay exact while
        # biorthogonality against an ill-conditioned basis is preserved
        h2 = self.wmat.T @ s
        s = s - self.vmat @ h2
        g2 = self.vmat.T @ r
        r = r - self.wmat @ g2
        h = h + h2
        g = g + g2
        vnew, hk1 = _qr_pos(s)
        wnew, gk1 = _qr_pos(r)
        vnew, wnew, hk1, gk1 = _biorthonormalize(vnew, wnew, hk1, gk1, k)
        self.hcols.append(np.vstack([h, hk1]))
        self.gcols.append(np.vstack([g, gk1]))
        self.vmat = np.hstack([self.vmat, vnew])
        self.wmat = np.hstack([self.wmat, wnew])
        self.av = np.hstack([self.av, self.op.data @ vnew])
        self.shifts_used.append(sigma)

    def direct_projection(self):
        # W^T * A * V over the full current basis, from the A*V cache
        return self.wmat.T @ self.av

    def snapshot(self):
        """Freeze into a LanczosResult (None before any step).

        T_m comes from the coupling-factor route when every step shift is
        finite; a singular square H factor leaves T_m as None and marks the
        builder.  With an infinite step shift the coupling factors do not
        exist and T_m is formed directly from the A*V cache.
        """
        m = self.m
        if m == 0:
            return None
        p = self.p
        K1, K2 = self.block_dims
        hbar = _stack_columns(self.hcols, m, p)
        gbar = _stack_columns(self.gcols, m, p)
        step_shifts = self.shifts_used[1:]
        kbar = lbar = tmat = None
        self._t_singular = False
        if all(math.isfinite(s) for s in step_shifts):
            kbar = _coupling_factor(hbar, step_shifts, p)
            lbar = _coupling_factor(gbar, step_shifts, p)
            wav_last = self.wmat[:, : m * p].T @ self.av[:, m * p :]
            correction = _embed_last_block(wav_last @ self.hcols[-1][-p:], m)
            try:
                tmat = _right_solve(
                    kbar[: m * p] - correction,
                    hbar[: m * p],
                    "H",
                    scale=np.linalg.norm(hbar, 2),
                )
            except SingularFactorError:
                self._t_singular = True
        else:
            tmat = self.wmat[:, : m * p].T @ self.av[:, : m * p]
        ext_dims = (K1, (m + 1) * K2, K1, m * K2)
        sq_dims = (K1, m * K2, K1, m * K2)
        wrap = lambda mat, dims: None if mat is None else Tensor4(mat, dims)
        return LanczosResult(
            V=Tensor4(self.vmat, self.row_dims + (K1, (m + 1) * K2)),
            W=Tensor4(self.wmat, self.row_dims + (K1, (m + 1) * K2)),
            H_bar=Tensor4(hbar, ext_dims),
            G_bar=Tensor4(gbar, ext_dims),
            K_bar=wrap(kbar, ext_dims),
            L_bar=wrap(lbar, ext_dims),
            T_m=wrap(tmat, sq_dims),
            shifts=list(self.shifts_used),
            m=m,
            H_init=Tensor4(self.h_init, (K1, K2, K1, K2)),
            G_init=Tensor4(self.g_init, (K1, K2, K1, K2)),
            block_dims=(K1, K2),
        )


def trbl(A, B, C, shifts, m=None):
    """Tensor rational block Lanczos iteration.

    The first shift seeds the starting pair S_0 = (A - sigma_1*I)^{-1} * B,
    R_0 = (A - sigma_1*I)^{-T} * C^T; each later step solves with its own
    shift on both sides (an infinite shift multiplies by A / A^T instead)
    and restores W^T V = I through an SVD coupling.  `result.shifts` lists
    all consumed shifts, the seed first.

    Parameters
    ----------
    A, B, C : Tensor4
        As in :func:`tbl`, with every finite-shifted operator nonsingular.
    shifts : sequence of float, or callable
        Fixed shifts (at least m+1: seed plus one per step), or a callback
        ``shifts(k, partial)`` where k=0 requests the seed (partial None)
        and k>=1 the step-k shift given the LanczosResult after k-1 steps.
        The callback may raise StopIteration to stop growing the basis.
        math.inf is accepted; complex values keep only their real part.
    m : int, optional
        Steps to run; defaults to len(shifts) - 1 for fixed lists and is
        required with a callback.

    Returns
    -------
    LanczosResult

    Raises
    ------
    BreakdownError
        On a numerically singular bi-orthonormalization coupling.
    SingularFactorError
        When the projected operator's assembly hits a singular square H
        factor; the completed basis rides on the error's `result`.
    """
    if callable(shifts):
        if m is None:
            raise ValueError("m is required when shifts is a callback")
        source = shifts
    else:
        fixed = [_real_shift(s, allow_inf=True) for s in shifts]
        if m is None:
            m = len(fixed) - 1
        if len(fixed) < m + 1:
            raise ValueError(
                "need at least m+1=%d shifts (seed plus one per step), got %d"
                % (m + 1, len(fixed))
            )

        def source(k, partial):
            return fixed[k]

    if m < 1:
        raise ValueError("m must be at least 1")
    builder = _RationalLanczosBuilder(A, B, C, source(0, None))
    _check_capacity(m, builder.p, builder.n)
    for k in range(1, m + 1):
        try:
            sigma = source(k, builder.snapshot())
        except StopIteration:
            break
        builder.step(sigma)
    result = builder.snapshot()
    if builder._t_singular:
        raise SingularFactorError("H", result=result)
    return result


def gamma_correction(result, A, side="primal"):
    """Correction term closing A * V_m = V_m * A_m + Gamma_m.

    For rational bases this evaluates the oblique-projected form

        (V_m * W_m^T - I) * A * V_{m+1} * H_{m+1,m} * E_m^T * H_m^{-1}

    (V_m^T in place of W_m^T for one-sided results; G factors and A^T for
    side="dual").  Classic bases use the recurrence's exact correction
    V_{m+1} * H_{m+1,m} * E_m^T instead, which involves no inversion.  The
    rational form is the one whose residual identity additionally requires
    the final step shift to be zero.

    Parameters
    ----------
    result : ArnoldiResult or LanczosResult
    A : Tensor4
        The operator the basis was built from.
    side : {"primal", "dual"}
        "dual" (the A^T-side correction) needs a two-sided result.

    Returns
    -------
    Tensor4 with dims (J1, J2, K1, m*K2).
    """
    if side not in ("primal", "dual"):
        raise ValueError("side must be 'primal' or 'dual'")
    one_sided = isinstance(result, ArnoldiResult)
    if one_sided and side == "dual":
        raise ValueError("the dual correction requires a two-sided basis")
    m = result.m
    p = result.block_size
    K1, K2 = result.block_dims
    out_dims = A.row_dims + (K1, m * K2)
    rational = result.shifts is not None
    if side == "primal":
        basis, lastblk = result.V.data, result.V.data[:, -p:]
        opmat, sq, last = A.data, result.H_square.data, result.H_last.data
        factor = "H"
        left = result.V.data if one_sided else result.W.data
    else:
        basis, lastblk = result.W.data, result.W.data[:, -p:]
        opmat, sq, last = A.data.T, result.G_square.data, result.G_last.data
        factor = "G"
        left = result.V.data
    if not rational:
        z = _embed_last_block(lastblk @ last, m)
        return Tensor4(z, out_dims)
    extended = result.H_bar.data if factor == "H" else result.G_bar.data
    inv_row = _inv_last_block_row(sq, p, factor, scale=np.linalg.norm(extended, 2))
    z = (opmat @ lastblk) @ (last @ inv_row)
    zin = basis[:, : m * p] @ (left[:, : m * p].T @ z)
    return Tensor4(zin - z, out_dims)
