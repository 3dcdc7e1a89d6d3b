"""DPP kernel construction and exact determinant primitives.

Kernels are plain ``float64`` numpy arrays.  Embeddings may arrive in lower
precision and are widened on ingestion.
"""

import itertools

import numpy as np

from .errors import (
    DimensionMismatch,
    InputError,
    NotNormalized,
    NumericalFailure,
    TooLarge,
    ZeroNormRow,
)

#: det of the empty principal submatrix.
EMPTY_DET = 1.0

ZERO_NORM = 1e-12
DEFAULT_SCORE_FLOOR = 1e-6
PARTITION_MAX_N = 12


def as_embedding_matrix(E):
    """Validate and widen an ``N x d`` embedding matrix."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] < 1:
        raise DimensionMismatch(f"expected a non-empty N x d matrix, got shape {E.shape}")
    if not np.all(np.isfinite(E)):
        raise InputError("embedding matrix contains non-finite entries")
    return E


def as_kernel(K):
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatch(f"kernel must be square, got shape {K.shape}")
    return K


def as_subset(S, n):
    """Return ``S`` as a sorted, unique ``intp`` array checked against ``[0, n)``."""
    idx = np.asarray(sorted(int(i) for i in S), dtype=np.intp)
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise InputError(f"subset indices out of bounds for N={n}: {idx.tolist()}")
    if np.any(np.diff(idx) == 0):
        raise InputError(f"subset has duplicate indices: {idx.tolist()}")
    return idx


def normalize_rows(E):
    """Scale every row to unit L2 norm.

    Raises:
        ZeroNormRow: a row's norm is below ``1e-12``.
    """
    E = as_embedding_matrix(E)
    norms = np.linalg.norm(E, axis=1)
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroNormRow(int(bad[0]))
    return E / norms[:, None]


def build_kernel(E):
    """Cosine kernel ``E @ E.T`` of unit-norm rows."""
    E = as_embedding_matrix(E)
    sq = np.einsum("ij,ij->i", E, E)
    if np.any(np.abs(sq - 1.0) > 1e-9):
        raise NotNormalized("rows must be unit norm; call normalize_rows first")
    K = E @ E.T
    # exact symmetry and unit diagonal; matmul can differ in the last ulp
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return K


def quality_from_scores(s, floor=DEFAULT_SCORE_FLOOR):
    """Quality weights ``sqrt(max(s_i, floor))``.

    Returns:
        (q, clamped): the weight vector and the indices whose score was
        non-positive, non-finite, or below ``floor``.
    """
    if floor <= 0:
        raise InputError("score floor must be positive")
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    bad = ~np.isfinite(s) | (s < floor)
    clean = np.where(bad, floor, s)
    return np.sqrt(clean), [int(i) for i in np.flatnonzero(bad)]


def fuse_quality(L, q):
    """``Q L Q`` with ``Q = diag(q)``."""
    L = as_kernel(L)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != L.shape[0]:
        raise DimensionMismatch(f"quality vector has {q.shape[0]} entries, kernel is {L.shape[0]}x{L.shape[0]}")
    if np.any(~np.isfinite(q)) or np.any(q <= 0):
        raise InputError("quality weights must be positive and finite")
    return q[:, None] * L * q[None, :]


def _cholesky_logdet(A):
    """log det of a PSD matrix via Cholesky, with jitter then eigen-clip fallback.

    Returns ``-inf`` for a (numerically) singular matrix.
    """
    n = A.shape[0]
    if n == 0:
        return 0.0
    try:
        C = np.linalg.cholesky(A)
        return 2.0 * float(np.sum(np.log(np.diag(C))))
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * float(np.trace(A)) / n
    if jitter > 0:
        try:
            C = np.linalg.cholesky(A + jitter * np.eye(n))
            return 2.0 * float(np.sum(np.log(np.diag(C))))
        except np.linalg.LinAlgError:
            pass
    try:
        w = np.linalg.eigvalsh(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition failed: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise NumericalFailure("non-finite eigenvalues")
    w = np.clip(w, 0.0, None)
    if np.any(w == 0.0):
        return -np.inf
    return float(np.sum(np.log(w)))


def logdet_submatrix(K, S):
    K = as_kernel(K)
    idx = as_subset(S, K.shape[0])
    if idx.size == 0:
        return 0.0
    return _cholesky_logdet(K[np.ix_(idx, idx)])


def det_submatrix(K, S):
    """``det(K[S, S])`` for a nonempty subset ``S``."""
    K = as_kernel(K)
    idx = as_subset(S, K.shape[0])
    if idx.size == 0:
        raise InputError("subset must be nonempty (the empty determinant is EMPTY_DET)")
    return float(np.exp(_cholesky_logdet(K[np.ix_(idx, idx)])))


def logdet_plus_identity(L):
    L = as_kernel(L)
    return _cholesky_logdet(L + np.eye(L.shape[0]))


def dpp_probability(L, S):
    """``P(S) = det(L_S) / det(L + I)`` evaluated in log space."""
    L = as_kernel(L)
    idx = as_subset(S, L.shape[0])
    log_num = 0.0 if idx.size == 0 else _cholesky_logdet(L[np.ix_(idx, idx)])
    return float(np.exp(log_num - logdet_plus_identity(L)))


def partition_check(L):
    """Brute-force the normalizer: ``(sum_S det(L_S), det(L + I))``.

    Returns:
        (lhs, rhs, rel_err)
    """
    L = as_kernel(L)
    n = L.shape[0]
    if n > PARTITION_MAX_N:
        raise TooLarge(f"partition_check enumerates 2^N subsets; N={n} exceeds {PARTITION_MAX_N}")
    # Independent route: LU determinants of every subset, no Cholesky.
    lhs = EMPTY_DET
    for r in range(1, n + 1):
        for S in itertools.combinations(range(n), r):
            lhs += float(np.linalg.det(L[np.ix_(S, S)]))
    rhs = float(np.linalg.det(L + np.eye(n)))
    return lhs, rhs, abs(lhs - rhs) / abs(rhs)
