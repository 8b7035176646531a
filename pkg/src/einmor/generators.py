"""Seeded problem generators for experiments and benchmarks.

Both generators return an :class:`~einmor.mor.MLTISystem` whose operator
unfolds to an N^2 x N^2 matrix (state dims (N, N)) and whose input/output
blocks have dims (K1, K2).  Randomness comes from the counter-based
Philox bit generator, so a given (generator, N, K1, K2, seed) tuple
yields a bit-identical system on every platform and run.
"""

import numpy as np

from .mor import MLTISystem
from .tensor4 import fold

__all__ = ["gen_heat2d", "gen_spdiags"]

SPARSE_DENSITY = 0.05


def _rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


def _validate(N, K1, K2):
    if int(N) < 2:
        raise ValueError("N must be at least 2, got %r" % (N,))
    if int(K1) < 1 or int(K2) < 1:
        raise ValueError("K1 and K2 must be positive, got (%r, %r)" % (K1, K2))
    return int(N), int(K1), int(K2)


def gen_spdiags(N, K1, K2, seed=0):
    """Lower-bidiagonal stable operator with sparse input, dense output.

    The operator unfolds to the N^2 x N^2 matrix with -2 on the diagonal
    and 1 on the first subdiagonal, so every eigenvalue is -2 and the
    system is asymptotically stable by construction.  B is sparse random
    (density 0.05, surviving entries uniform in [0, 1)); C^T is dense
    random.  Draw order is fixed: B values, then the B sparsity mask,
    then C values.
    """
    N, K1, K2 = _validate(N, K1, K2)
    rng = _rng(seed)
    n = N * N
    p = K1 * K2
    amat = -2.0 * np.eye(n) + np.diag(np.ones(n - 1), k=-1)
    bvals = rng.random((n, p))
    bmask = rng.random((n, p)) < SPARSE_DENSITY
    bmat = np.where(bmask, bvals, 0.0)
    ct = rng.random((n, p))
    return MLTISystem(
        A=fold(amat, (N, N, N, N)),
        B=fold(bmat, (N, N, K1, K2)),
        C=fold(ct.T, (K1, K2, N, N)),
    )


def gen_heat2d(N, K1, K2, c=1.0, dt=None, h=None, seed=0):
    """Scaled 2D discrete Laplacian (Dirichlet) with dense random blocks.

    The grid operator is kron(T, I) + kron(I, T) with T the N x N
    tridiagonal (1, -2, 1) matrix, scaled by c^2*dt/h^2.  Defaults
    h = pi/(N+1) and dt = h^2 make the scaling c^2, so with c = 1 the
    operator is the plain Laplacian stencil sum.  B is drawn first, then
    C^T, both dense uniform in [0, 1).
    """
    N, K1, K2 = _validate(N, K1, K2)
    c = float(c)
    h = np.pi / (N + 1) if h is None else float(h)
    dt = h * h if dt is None else float(dt)
    if c <= 0 or dt <= 0 or h <= 0:
        raise ValueError("c, dt and h must be positive")
    rng = _rng(seed)
    n = N * N
    p = K1 * K2
    tmat = -2.0 * np.eye(N) + np.diag(np.ones(N - 1), 1) + np.diag(np.ones(N - 1), -1)
    lap = np.kron(tmat, np.eye(N)) + np.kron(np.eye(N), tmat)
    amat = (c * c * dt / (h * h)) * lap
    bmat = rng.random((n, p))
    ct = rng.random((n, p))
    return MLTISystem(
        A=fold(amat, (N, N, N, N)),
        B=fold(bmat, (N, N, K1, K2)),
        C=fold(ct.T, (K1, K2, N, N)),
    )
