"""
Operator Service
================

Discrete operators over a tet mesh:

    - P1 stiffness L and lumped (barycentric) mass
    - Bilaplacian A = L Mass^-1 L
    - epsilon-regularized operator with its precomputed inverse
    - shaved operator (one row/column removed) with its inverse
    - quadratic deformation energy

Accumulation runs per tet in tet index order so repeated assembly is
bitwise reproducible.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from optctrl.exceptions import ConfigError, NumericalError
from optctrl.services.mesh import TetMesh, signed_volumes

logger = logging.getLogger(__name__)

# Default regularization relative to trace(A) / N
DEFAULT_EPSILON_SCALE = 1e-8

# Condition estimate above which a shaved operator counts as singular
SHAVE_CONDITION_LIMIT = 1e14

# Shaved operators up to this size get an exact 2-norm condition number
EXACT_CONDITION_MAX_N = 600


def assemble_stiffness(mesh: TetMesh) -> sp.csr_matrix:
    """
    Linear FEM stiffness, positive-semidefinite sign convention.

    Each tet contributes vol * G G^T, where the rows of G are the gradients
    of its four barycentric basis functions.
    """
    positions, tets = mesh.positions, mesh.tets
    volumes = signed_volumes(positions, tets)
    scale = mesh.bbox_diagonal
    if (volumes <= 1e-12 * scale ** 3).any():
        bad = int(np.flatnonzero(volumes <= 1e-12 * scale ** 3)[0])
        raise NumericalError(f"degenerate or inverted tet {bad} during stiffness assembly")

    p0 = positions[tets[:, 0]]
    edges = np.stack(
        [positions[tets[:, 1]] - p0, positions[tets[:, 2]] - p0, positions[tets[:, 3]] - p0],
        axis=1,
    )
    # Columns of inv(edges) are the gradients of barycentric coordinates 1..3
    grads = np.linalg.inv(edges).transpose(0, 2, 1)
    grads = np.concatenate([-grads.sum(axis=1, keepdims=True), grads], axis=1)
    local = volumes[:, None, None] * np.einsum("tic,tjc->tij", grads, grads)

    rows = np.repeat(tets, 4, axis=1).ravel()
    cols = np.tile(tets, (1, 4)).ravel()
    n = mesh.n_vertices
    stiffness = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    stiffness.sum_duplicates()
    stiffness.sort_indices()

    # Rows sum to zero exactly: rebuild the diagonal from the off-diagonals
    off_diagonal = stiffness - sp.diags(stiffness.diagonal())
    stiffness.setdiag(-np.asarray(off_diagonal.sum(axis=1)).ravel())
    return stiffness


def lumped_mass(mesh: TetMesh) -> np.ndarray:
    """Diagonal of the barycentric mass: a quarter of each adjacent tet's volume."""
    quarter = np.repeat(np.abs(mesh.volumes) / 4.0, 4)
    return np.bincount(mesh.tets.ravel(), weights=quarter, minlength=mesh.n_vertices)


def bilaplacian_matrix(mesh: TetMesh) -> Tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Exact (singular) Bilaplacian A = L Mass^-1 L, with L and the mass diagonal."""
    stiffness = assemble_stiffness(mesh)
    mass = lumped_mass(mesh)
    if (mass <= 0).any():
        raise NumericalError("vertex with zero lumped mass (not referenced by any tet)")
    bilaplacian = (stiffness @ sp.diags(1.0 / mass) @ stiffness).tocsr()
    bilaplacian.sort_indices()
    return bilaplacian, stiffness, mass


def default_epsilon(bilaplacian: sp.spmatrix) -> float:
    """Regularization scaled to the operator's magnitude."""
    return DEFAULT_EPSILON_SCALE * float(bilaplacian.diagonal().sum()) / bilaplacian.shape[0]


def energy(bilaplacian: sp.spmatrix, positions: np.ndarray) -> float:
    """1/2 trace(X^T A X)."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] != bilaplacian.shape[0]:
        raise ValueError("positions and operator disagree on N")
    return 0.5 * float(np.sum(positions * (bilaplacian @ positions)))


@dataclass(frozen=True, eq=False)
class BilaplacianOperator:
    """
    Bilaplacian with its regularized inverse.

    The inverse of A_eps = A + eps*I is held in deflated form: `deflated_inv`
    is the inverse of A_eps + alpha*11^T, and `null_weight` is the extra
    coefficient of 11^T that restores the constant mode:

        A_eps^-1 = deflated_inv + null_weight * 11^T

    Gathering columns never touches 1/eps-sized numbers until the constant
    mode is folded back in analytically (see biharmonic.FastSystem).
    """
    A: sp.csr_matrix = field(repr=False)
    epsilon: float
    deflated_inv: np.ndarray = field(repr=False)
    null_weight: float
    mesh_hash: str = ""

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def A_eps(self) -> sp.csr_matrix:
        return (self.A + self.epsilon * sp.identity(self.n, format="csr")).tocsr()

    @property
    def A_inv(self) -> np.ndarray:
        """Dense inverse of A_eps (materialized on every access)."""
        return self.deflated_inv + self.null_weight

    def inverse_columns(self, indices: np.ndarray) -> np.ndarray:
        """Columns of A_eps^-1 at `indices` without materializing the full inverse."""
        return self.deflated_inv[:, indices] + self.null_weight


def _inverse_from_cholesky(matrix: np.ndarray) -> np.ndarray:
    # Single solve call: column blocking must not depend on the thread count
    factor = sla.cho_factor(matrix, lower=True, check_finite=False)
    return sla.cho_solve(factor, np.eye(matrix.shape[0]), check_finite=False)


def assemble_bilaplacian(
    mesh: TetMesh,
    epsilon: Optional[float] = None,
) -> BilaplacianOperator:
    """
    Assemble A and precompute the regularized inverse.

    epsilon=None uses 1e-8 * trace(A) / N. epsilon=0 is rejected: the exact
    operator is singular, use `shave` for the unregularized path.
    """
    bilaplacian, _, _ = bilaplacian_matrix(mesh)
    n = bilaplacian.shape[0]
    if epsilon is None:
        epsilon = default_epsilon(bilaplacian)
    if epsilon <= 0:
        raise ConfigError("epsilon must be > 0 for the regularized inverse; use shave() for the exact path")

    # A.1 = 0, so adding alpha*11^T lifts only the constant mode
    mean_diagonal = float(bilaplacian.diagonal().sum()) / n
    alpha = mean_diagonal / n
    lifted = bilaplacian.toarray()
    lifted[np.diag_indices(n)] += epsilon
    lifted += alpha

    try:
        deflated = _inverse_from_cholesky(lifted)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(
            f"factorization of the regularized Bilaplacian failed: {exc}",
            condition=_condition_estimate(lifted),
        ) from None
    deflated = 0.5 * (deflated + deflated.T)

    null_weight = (1.0 / epsilon - 1.0 / (epsilon + alpha * n)) / n
    logger.info("Assembled Bilaplacian: N=%d, nnz=%d, epsilon=%.3e", n, bilaplacian.nnz, epsilon)
    return BilaplacianOperator(
        A=bilaplacian,
        epsilon=float(epsilon),
        deflated_inv=deflated,
        null_weight=float(null_weight),
        mesh_hash=mesh.content_hash(),
    )


def _condition_estimate(matrix: np.ndarray, inverse: Optional[np.ndarray] = None) -> float:
    if inverse is None:
        if matrix.shape[0] <= EXACT_CONDITION_MAX_N:
            return float(np.linalg.cond(matrix))
        try:
            inverse = np.linalg.inv(matrix)
        except np.linalg.LinAlgError:
            return float("inf")
    return float(np.linalg.norm(matrix, 1) * np.linalg.norm(inverse, 1))


@dataclass(frozen=True, eq=False)
class ShavedOperator:
    """A with one vertex's row and column removed, and its dense inverse."""
    fixed_vertex: int
    A_tilde: np.ndarray = field(repr=False)
    A_tilde_inv: np.ndarray = field(repr=False)
    shaved_row: np.ndarray = field(repr=False)
    shaved_diagonal: float
    keep: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.A_tilde.shape[0] + 1

    def local_index(self, vertex: int) -> int:
        """Index of a kept vertex inside the shaved system."""
        if vertex == self.fixed_vertex:
            raise ValueError("the fixed vertex has no shaved index")
        return vertex if vertex < self.fixed_vertex else vertex - 1


def shave(bilaplacian: sp.spmatrix, fixed_vertex: int) -> ShavedOperator:
    """Drop `fixed_vertex`'s row and column; the rank N-1 operator becomes full rank."""
    n = bilaplacian.shape[0]
    if not 0 <= fixed_vertex < n:
        raise ValueError(f"fixed vertex {fixed_vertex} out of range [0, {n})")

    keep = np.delete(np.arange(n), fixed_vertex)
    dense = bilaplacian.toarray() if sp.issparse(bilaplacian) else np.asarray(bilaplacian)
    a_tilde = dense[np.ix_(keep, keep)]
    row = dense[fixed_vertex, keep].copy()

    try:
        inverse = sla.inv(a_tilde, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalError(
            "shaved Bilaplacian is singular (disconnected mesh or assembly bug)",
            condition=float("inf"),
        ) from None

    condition = _condition_estimate(a_tilde, None if n <= EXACT_CONDITION_MAX_N else inverse)
    if not np.isfinite(condition) or condition > SHAVE_CONDITION_LIMIT:
        raise NumericalError(
            "shaved Bilaplacian is numerically singular (disconnected mesh or assembly bug)",
            condition=condition,
        )
    logger.debug("Shaved vertex %d, condition %.3e", fixed_vertex, condition)

    for array in (a_tilde, inverse, row, keep):
        array.setflags(write=False)
    return ShavedOperator(
        fixed_vertex=int(fixed_vertex),
        A_tilde=a_tilde,
        A_tilde_inv=inverse,
        shaved_row=row,
        shaved_diagonal=float(dense[fixed_vertex, fixed_vertex]),
        keep=keep,
    )
