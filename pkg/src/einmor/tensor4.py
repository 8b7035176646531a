"""Dense 4th-order tensor algebra under the Einstein product.

A 4th-order tensor with dimensions (J1, J2, K1, K2) acts on (K1, K2)-shaped
data the way a (J1*J2) x (K1*K2) matrix acts on vectors: the pairing
ivec((j1, j2), (J1, J2)) = j1 + (j2 - 1)*J1 flattens each index pair, and
the resulting "unfolding" turns the Einstein product into an ordinary matrix
product.  Every factorization, solve and eigenvalue routine here works by
unfolding, applying a reference dense kernel, and folding back; the unfolding
is an algebra isomorphism, so this is exact.

Storage is ivec-major: a tensor holds exactly its unfolded matrix, so
``unfold`` is a zero-copy view and ``fold`` only attaches dimensions.
"""

import warnings
from collections import OrderedDict

import numpy as np
from scipy.linalg import LinAlgWarning, get_lapack_funcs, lu_factor, lu_solve
from scipy.linalg import qr as _dense_qr
from scipy.linalg import svd as _dense_svd


class SingularOperatorError(Exception):
    """A (shifted) operator was numerically singular.

    Carries the shift and the reciprocal condition estimate from the
    factorization that failed.
    """

    def __init__(self, sigma, rcond):
        self.sigma = sigma
        self.rcond = rcond
        super().__init__(
            "singular operator for shift sigma=%r (rcond=%.3e)" % (sigma, rcond)
        )


def ivec(j, J):
    """Map a 1-based index pair onto its flat 1-based position.

    Parameters
    ----------
    j : pair of int
        1-based indices (j1, j2).
    J : pair of int
        Dimensions (J1, J2).

    Returns
    -------
    int
        j1 + (j2 - 1)*J1, a bijection from index pairs onto 1..J1*J2.
    """
    j1, j2 = j
    J1, J2 = J
    if not (1 <= j1 <= J1 and 1 <= j2 <= J2):
        raise IndexError("index pair %r out of range for dims %r" % (j, J))
    return j1 + (j2 - 1) * J1


class Tensor4:
    """Immutable dense 4th-order tensor in ivec-major (unfolded) storage.

    Parameters
    ----------
    data : array_like, shape (J1*J2, K1*K2)
        The unfolded matrix: entry (ivec((j1,j2),(J1,J2)), ivec((k1,k2),(K1,K2)))
        holds element (j1, j2, k1, k2).  Copied and marked read-only.
    dims : tuple of int
        (J1, J2, K1, K2), all positive.

    Arithmetic: ``+``, ``-``, scalar ``*`` / ``/``, and ``@`` for the
    Einstein product.  ``.T`` is the Einstein transpose.
    """

    __slots__ = ("data", "dims")

    def __init__(self, data, dims):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 4 or any(d < 1 for d in dims):
            raise ValueError("dims must be 4 positive integers, got %r" % (dims,))
        mat = np.array(data)
        if np.iscomplexobj(mat):
            mat = mat.astype(np.complex128, copy=False)
        else:
            mat = mat.astype(np.float64, copy=False)
        expect = (dims[0] * dims[1], dims[2] * dims[3])
        if mat.shape != expect:
            raise ValueError(
                "unfolded data shape %r does not match dims %r (expected %r)"
                % (mat.shape, dims, expect)
            )
        mat.setflags(write=False)
        object.__setattr__(self, "data", mat)
        object.__setattr__(self, "dims", dims)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor4 is immutable")

    @property
    def row_dims(self):
        return self.dims[:2]

    @property
    def col_dims(self):
        return self.dims[2:]

    @property
    def scalar_field(self):
        return "complex" if np.iscomplexobj(self.data) else "real"

    @property
    def T(self):
        return Tensor4(self.data.T, self.col_dims + self.row_dims)

    def to_array(self):
        """Return the tensor as a 4D ndarray indexed [j1, j2, k1, k2] (0-based)."""
        return self.data.reshape(self.dims, order="F").copy()

    def __repr__(self):
        return "Tensor4(dims=%r, %s)" % (self.dims, self.scalar_field)

    def _binop(self, other, op):
        if not isinstance(other, Tensor4):
            return NotImplemented
        if self.dims != other.dims:
            raise ValueError("dim mismatch: %r vs %r" % (self.dims, other.dims))
        return Tensor4(op(self.data, other.data), self.dims)

    def __add__(self, other):
        return self._binop(other, np.add)

    def __sub__(self, other):
        return self._binop(other, np.subtract)

    def __neg__(self):
        return Tensor4(-self.data, self.dims)

    def __mul__(self, scalar):
        return Tensor4(self.data * scalar, self.dims)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return Tensor4(self.data / scalar, self.dims)

    def __matmul__(self, other):
        return einstein_product(self, other)


def from_array(arr):
    """Build a Tensor4 from a 4D ndarray indexed [j1, j2, k1, k2] (0-based)."""
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ValueError("expected a 4D array, got ndim=%d" % arr.ndim)
    J1, J2, K1, K2 = arr.shape
    return Tensor4(arr.reshape(J1 * J2, K1 * K2, order="F"), arr.shape)


def unfold(t):
    """Return the (J1*J2) x (K1*K2) unfolding of ``t`` (read-only view)."""
    return t.data


def fold(mat, dims):
    """Inverse of :func:`unfold`: attach tensor dimensions to a matrix."""
    return Tensor4(mat, dims)


def identity(row_dims):
    """Identity tensor with dims (J1, J2, J1, J2)."""
    J1, J2 = row_dims
    return Tensor4(np.eye(J1 * J2), (J1, J2, J1, J2))


def zeros(dims, complex_field=False):
    """Zero tensor of the given dims."""
    dtype = np.complex128 if complex_field else np.float64
    n = dims[0] * dims[1]
    p = dims[2] * dims[3]
    return Tensor4(np.zeros((n, p), dtype=dtype), dims)


def einstein_product(a, b):
    """Einstein product a * b, contracting a's column pair against b's row pair.

    Equals fold(unfold(a) @ unfold(b)); that identity is the implementation.
    """
    if a.col_dims != b.row_dims:
        raise ValueError(
            "non-conformal dims: %r cannot contract %r" % (a.dims, b.dims)
        )
    return Tensor4(a.data @ b.data, a.row_dims + b.col_dims)


def transpose(a):
    """Einstein transpose: fold(unfold(a)^T) with swapped index pairs."""
    return a.T


def trace(a):
    """Sum of diagonal elements a[j1, j2, j1, j2]; requires square dims."""
    if a.row_dims != a.col_dims:
        raise ValueError("trace requires square dims, got %r" % (a.dims,))
    return np.trace(a.data)


def inner(x, y):
    """Inner product trace(x^T * y); dims must match."""
    if x.dims != y.dims:
        raise ValueError("dim mismatch: %r vs %r" % (x.dims, y.dims))
    return np.sum(np.conj(x.data) * y.data) if np.iscomplexobj(x.data) else np.sum(
        x.data * y.data
    )


def fro_norm(x):
    """Frobenius norm sqrt(inner(x, x))."""
    return float(np.linalg.norm(x.data))


def _factorize(mat, sigma=None):
    # LU with a 1-norm reciprocal condition estimate; rejects numerically
    # singular operators so downstream solves cannot silently produce inf/nan.
    anorm = np.linalg.norm(mat, 1)
    with warnings.catch_warnings():
        # exact singularity surfaces through the rcond check below
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(mat)
    gecon = get_lapack_funcs("gecon", (lu,))
    rcond, info = gecon(lu, anorm)
    if info != 0 or not np.isfinite(rcond) or rcond < np.finfo(lu.dtype).eps:
        raise SingularOperatorError(sigma, float(rcond))
    return lu, piv


def inverse(a):
    """Einstein inverse of a square tensor; raises if numerically singular."""
    if a.row_dims != a.col_dims:
        raise ValueError("inverse requires square dims, got %r" % (a.dims,))
    lu, piv = _factorize(a.data, sigma=None)
    n = a.data.shape[0]
    inv = lu_solve((lu, piv), np.eye(n, dtype=lu.dtype))
    return Tensor4(inv, a.dims)


class ShiftedSolver:
    """Cached factorizations of (A - sigma*I) for repeated solves.

    One LU per distinct shift serves any number of right-hand sides and both
    the plain and transposed-operator solves.  `max_cached` bounds the number
    of factorizations kept (least recently used are dropped); None keeps all.
    """

    def __init__(self, a, max_cached=None):
        if a.row_dims != a.col_dims:
            raise ValueError("operator must have square dims, got %r" % (a.dims,))
        if max_cached is not None and max_cached < 1:
            raise ValueError("max_cached must be at least 1")
        self.a = a
        self.max_cached = max_cached
        self._cache = OrderedDict()

    def _factors(self, sigma):
        key = complex(sigma)
        if key in self._cache:
            self._cache.move_to_end(key)
        else:
            mat = self.a.data
            shifted = mat - sigma * np.eye(mat.shape[0], dtype=np.result_type(mat, sigma))
            self._cache[key] = _factorize(shifted, sigma=sigma)
            if self.max_cached is not None and len(self._cache) > self.max_cached:
                self._cache.popitem(last=False)
        return self._cache[key]

    def solve_unfolded(self, sigma, mat, transposed=False):
        """As :meth:`solve` but on a raw unfolded matrix, returning an ndarray."""
        lu, piv = self._factors(sigma)
        if np.iscomplexobj(lu) and not np.iscomplexobj(mat):
            mat = mat.astype(np.complex128)
        return lu_solve((lu, piv), mat, trans=1 if transposed else 0)

    def solve(self, sigma, v, transposed=False):
        """Return (A - sigma*I)^-1 * v, or the transposed-operator solve."""
        if v.row_dims != self.a.col_dims:
            raise ValueError(
                "rhs row dims %r do not match operator %r" % (v.row_dims, self.a.dims)
            )
        out = self.solve_unfolded(sigma, v.data, transposed=transposed)
        return Tensor4(out, self.a.row_dims + v.col_dims)


def shifted_solve(a, sigma, v, transposed=False):
    """One-shot (A - sigma*I)^-1 * v; see :class:`ShiftedSolver` for caching."""
    return ShiftedSolver(a).solve(sigma, v, transposed=transposed)


def tensor_qr(a):
    """QR factorization a = Q * R with orthonormal Q and upper triangular R.

    The diagonal of unfold(R) is made nonnegative; that sign convention keeps
    outputs deterministic.  Rank-deficient inputs do not error (zero diagonal
    entries in R are permitted); callers detect rank loss from diag(R).
    """
    n = a.data.shape[0]
    p = a.data.shape[1]
    if n < p:
        raise ValueError("QR requires row size >= column size, got %r" % (a.dims,))
    q, r = _qr_pos(a.data)
    K = a.col_dims
    return (
        Tensor4(q, a.row_dims + K),
        Tensor4(r, K + K),
    )


def _qr_pos(mat):
    # economic QR with the nonnegative-diagonal sign convention
    q, r = _dense_qr(mat, mode="economic")
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    return q * sign, sign[:, None] * r


def tensor_svd(a):
    """Singular value decomposition a = U * S * V^T.

    U and V are orthogonal, S is diagonal with nonincreasing nonnegative
    entries.  For complex data the identity holds with the conjugate
    transpose of V in place of the plain transpose.
    """
    u, s, vh = _dense_svd(a.data)
    n, p = a.data.shape
    smat = np.zeros((n, p), dtype=s.dtype)
    smat[: len(s), : len(s)] = np.diag(s)
    J, K = a.row_dims, a.col_dims
    return (
        Tensor4(u, J + J),
        Tensor4(smat, J + K),
        Tensor4(vh.conj().T, K + K),
    )


def singular_values(a):
    """Singular values of the unfolding, nonincreasing."""
    return _dense_svd(a.data, compute_uv=False)


def eigenvalues(a):
    """Eigenvalues of the unfolding of a square tensor (complex ndarray)."""
    if a.row_dims != a.col_dims:
        raise ValueError("eigenvalues require square dims, got %r" % (a.dims,))
    return np.linalg.eigvals(a.data)


_CONCAT_AXIS = {
    (1, "row"): 1,
    (2, "row"): 3,
    (1, "column"): 0,
    (2, "column"): 2,
}


def block_concat(parts, mode):
    """Concatenate tensors along one of the four block modes.

    Parameters
    ----------
    parts : sequence of Tensor4
        Blocks sharing all dims except the concatenated one.
    mode : tuple
        (n, kind) with n in {1, 2} and kind in {"row", "column"}.
        n-mode row blocks extend the n-th column-group dimension
        (axis 1 for n=1, axis 3 for n=2); column blocks extend the
        n-th row-group dimension (axis 0 for n=1, axis 2 for n=2).
    """
    try:
        axis = _CONCAT_AXIS[(mode[0], mode[1])]
    except (KeyError, IndexError, TypeError):
        raise ValueError("mode must be (1|2, 'row'|'column'), got %r" % (mode,))
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one block")
    base = [d for i, d in enumerate(parts[0].dims) if i != axis]
    for p in parts[1:]:
        if [d for i, d in enumerate(p.dims) if i != axis] != base:
            raise ValueError("blocks disagree on non-concatenated dims")
    arr = np.concatenate([p.to_array() for p in parts], axis=axis)
    return from_array(arr)


class BlockLayout:
    """Interpretation of a (J1, J2, K1, m*K2) tensor as m stacked 2-mode row blocks."""

    __slots__ = ("block_dims", "count")

    def __init__(self, block_dims, count):
        self.block_dims = (int(block_dims[0]), int(block_dims[1]))
        self.count = int(count)
        if self.count < 1 or any(d < 1 for d in self.block_dims):
            raise ValueError("invalid layout %r x %d" % (block_dims, count))


def block_extract(t, layout, l):
    """Extract the l-th (1-based) block under a 2-mode row block layout.

    Under the unfolding, 2-mode row blocks are contiguous column groups of
    width K1*K2, so this is a plain column slice.
    """
    K1, K2 = layout.block_dims
    if t.col_dims != (K1, layout.count * K2):
        raise ValueError(
            "tensor col dims %r do not match layout %r x %d"
            % (t.col_dims, layout.block_dims, layout.count)
        )
    if not 1 <= l <= layout.count:
        raise IndexError("block index %d out of range 1..%d" % (l, layout.count))
    p = K1 * K2
    sub = t.data[:, (l - 1) * p : l * p]
    return Tensor4(sub, t.row_dims + (K1, K2))


def write_t4(path, t):
    """Write a tensor in the "T4 v1" text format.

    Line 1 is ``T4 J1 J2 K1 K2 field`` with field in {real, complex}; the
    remaining whitespace-separated values run in ivec-major order (row index
    fastest), complex entries as ``re im`` pairs.  Full precision, so a
    read-back round-trips bit-exactly.
    """
    J1, J2, K1, K2 = t.dims
    vals = t.data.flatten(order="F")
    with open(path, "w") as fh:
        fh.write("T4 %d %d %d %d %s\n" % (J1, J2, K1, K2, t.scalar_field))
        if t.scalar_field == "complex":
            for v in vals:
                fh.write("%.17e %.17e\n" % (v.real, v.imag))
        else:
            for v in vals:
                fh.write("%.17e\n" % v)


def read_t4(path):
    """Read a tensor written by :func:`write_t4`."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 6 or header[0] != "T4":
            raise ValueError("not a T4 v1 file: bad header %r" % (header,))
        dims = tuple(int(x) for x in header[1:5])
        field = header[5]
        if field not in ("real", "complex"):
            raise ValueError("unknown scalar field %r" % field)
        tokens = fh.read().split()
    count = dims[0] * dims[1] * dims[2] * dims[3]
    if field == "complex":
        if len(tokens) != 2 * count:
            raise ValueError(
                "expected %d value pairs, found %d tokens" % (count, len(tokens))
            )
        raw = np.array(tokens, dtype=np.float64).reshape(count, 2)
        vals = raw[:, 0] + 1j * raw[:, 1]
    else:
        if len(tokens) != count:
            raise ValueError(
                "expected %d values, found %d tokens" % (count, len(tokens))
            )
        vals = np.array(tokens, dtype=np.float64)
    n = dims[0] * dims[1]
    p = dims[2] * dims[3]
    return Tensor4(vals.reshape((n, p), order="F"), dims)
