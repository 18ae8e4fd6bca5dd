"""Direct sparse solves with a cached fill-reducing ordering and iterative refinement."""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import SuperLU, splu

from libraries.errors import AccuracyError, DimensionError, SingularMatrixError

BACKWARD_ERROR_TOL = 1e-12
MAX_REFINEMENT_STEPS = 2
PIVOT_RATIO_WARN = 1e12

SparseMatrix = sp.csr_matrix


def finalize(matrix: sp.spmatrix) -> SparseMatrix:
    """Row-compressed copy with summed duplicates, sorted columns and no stored zeros."""
    out = sp.csr_matrix(matrix, dtype=float, copy=True)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def pattern_key(matrix: SparseMatrix) -> str:
    """Digest of the sparsity pattern."""
    digest = hashlib.blake2b(digest_size=16)
    digest.update(np.asarray(matrix.shape, dtype=np.int64).tobytes())
    digest.update(matrix.indptr.astype(np.int64).tobytes())
    digest.update(matrix.indices.astype(np.int64).tobytes())
    return digest.hexdigest()


@dataclass
class OrderingCache:
    """Symmetric reverse Cuthill-McKee permutations per sparsity pattern."""

    orderings: dict[str, np.ndarray] = field(default_factory=dict)
    hits: int = 0

    def ordering(self, matrix: SparseMatrix) -> np.ndarray:
        """Permutation for ``matrix``, computed once per pattern."""
        key = pattern_key(matrix)
        if key in self.orderings:
            self.hits += 1
            return self.orderings[key]
        structure = abs(matrix) + abs(matrix.T)
        perm = np.asarray(reverse_cuthill_mckee(sp.csr_matrix(structure), symmetric_mode=True), dtype=int)
        self.orderings[key] = perm
        logging.debug(f"[Solver] new ordering for pattern {key[:8]} of size {matrix.shape[0]}.")
        return perm


@dataclass(frozen=True)
class Factorization:
    """LU factors of a symmetrically permuted matrix.

    ``perm`` is applied to rows and columns before factorizing; SuperLU adds
    its own row pivoting on top of it.
    """

    matrix: SparseMatrix
    perm: np.ndarray
    lu: SuperLU
    pivot_ratio: float

    @property
    def ill_conditioned(self) -> bool:
        """True when the U diagonal spans more than 12 orders of magnitude."""
        return self.pivot_ratio > PIVOT_RATIO_WARN


def factorize(matrix: sp.spmatrix, cache: OrderingCache | None = None) -> Factorization:
    """Factorize a square sparse matrix.

    Args:
        matrix (sp.spmatrix): The matrix.
        cache (OrderingCache | None): Ordering cache shared across calls.

    Returns:
        The factorization.
    """
    A = finalize(matrix)
    n, m = A.shape
    if n != m:
        raise DimensionError(f"cannot factorize a {n}x{m} matrix")
    empty = np.flatnonzero(np.diff(A.indptr) == 0)
    if empty.size:
        raise SingularMatrixError(f"row {empty[0]} has no nonzero entries", int(empty[0]))

    perm = (cache or OrderingCache()).ordering(A)
    permuted = A[perm][:, perm].tocsc()
    try:
        lu = splu(permuted, permc_spec="NATURAL")
    except RuntimeError as exc:
        raise SingularMatrixError(f"sparse LU failed: {exc}") from exc

    diag = np.abs(lu.U.diagonal())
    if np.any(diag == 0.0):
        index = int(np.flatnonzero(diag == 0.0)[0])
        raise SingularMatrixError(f"zero pivot at position {index}", index)
    ratio = float(diag.max() / diag.min()) if n else 1.0
    if ratio > PIVOT_RATIO_WARN:
        logging.warning(f"[Solver] pivot ratio {ratio:.3e}, the system may be ill conditioned.")
    return Factorization(matrix=A, perm=perm, lu=lu, pivot_ratio=ratio)


def backward_error(matrix: sp.spmatrix, x: np.ndarray, b: np.ndarray) -> float:
    """Normwise backward error ||Ax - b|| / (||A|| ||x|| + ||b||) in the infinity norm."""
    residual = matrix @ x - b
    norm_a = float(abs(matrix).sum(axis=1).max()) if matrix.shape[0] else 0.0
    denominator = norm_a * float(np.max(np.abs(x), initial=0.0)) + float(np.max(np.abs(b), initial=0.0))
    if denominator == 0.0:
        return 0.0
    return float(np.max(np.abs(residual), initial=0.0)) / denominator


def _apply(factor: Factorization, b: np.ndarray) -> np.ndarray:
    x = np.empty_like(b)
    x[factor.perm] = factor.lu.solve(b[factor.perm])
    return x


def solve(factor: Factorization, b: np.ndarray) -> np.ndarray:
    """Solve A x = b, refining iteratively while the backward error exceeds 1e-12.

    A backward error still above the bound after refinement raises, unless
    Python runs optimized (``-O``) without debug logging.

    Args:
        factor (Factorization): Factors of A.
        b (np.ndarray): Right-hand side.

    Returns:
        The solution.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (factor.matrix.shape[0],):
        raise DimensionError(f"right-hand side has shape {b.shape}, matrix is {factor.matrix.shape}")
    x = _apply(factor, b)
    error = backward_error(factor.matrix, x, b)
    steps = 0
    while error > BACKWARD_ERROR_TOL and steps < MAX_REFINEMENT_STEPS:
        x = x + _apply(factor, b - factor.matrix @ x)
        error = backward_error(factor.matrix, x, b)
        steps += 1
    if error > BACKWARD_ERROR_TOL:
        logging.warning(f"[Solver] backward error {error:.3e} after {steps} refinement steps.")
        if __debug__ or logging.getLogger().isEnabledFor(logging.DEBUG):
            raise AccuracyError(error, BACKWARD_ERROR_TOL)
    else:
        logging.debug(f"[Solver] backward error {error:.3e}, {steps} refinement steps.")
    return x


def dump_matrix_market(matrix: sp.spmatrix, path: str) -> None:
    """Write ``matrix`` in MatrixMarket coordinate format."""
    mmwrite(path, sp.coo_matrix(matrix))
    logging.info(f"[Solver] dumped {matrix.shape[0]}x{matrix.shape[1]} matrix to {path}.")
