"""
Biharmonic Weights Service
==========================

Biharmonic weights W (N x K) map control point positions C to all vertex
positions, V = W C. Four interchangeable solve paths:

    - naive:  W = S^T - T^T (T A T^T)^-1 T A S^T, one sparse factorization
              of the free-vertex block
    - kkt:    the full saddle-point system [[A, S^T], [S, 0]]; ground truth
    - fast:   W = S^T + T^T (T A^-1 S^T (S A^-1 S^T)^-1) with the precomputed
              regularized inverse; only a K x K system per selector
    - shaved: exact path on the singular A with one control point fixed and
              its row/column removed; a (K+1) x (K+1) system per selector

S and T are never materialized: applying S gathers rows at the selector's
indices, applying T gathers rows at the complement.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from optctrl.exceptions import NumericalError
from optctrl.services.operators import BilaplacianOperator, ShavedOperator

logger = logging.getLogger(__name__)

# Small dense systems above this condition number get logged
REPORT_CONDITION = 1e12

# ...and above this one are treated as singular
SINGULAR_CONDITION = 1e15

WeightsPath = Literal["naive", "fast", "shaved"]


@dataclass(frozen=True, eq=False)
class Selector:
    """Ordered K distinct vertex indices s_1..s_K out of N."""
    indices: np.ndarray
    n: int

    def __post_init__(self):
        indices = np.array(self.indices, dtype=np.int64).ravel()
        if len(indices) == 0:
            raise ValueError("selector needs at least one index")
        if len(indices) >= self.n:
            raise ValueError(f"selector must leave at least one free vertex (K={len(indices)}, N={self.n})")
        if indices.min() < 0 or indices.max() >= self.n:
            raise ValueError(f"selector index out of range [0, {self.n})")
        if len(np.unique(indices)) != len(indices):
            raise ValueError("selector indices must be distinct")
        indices.setflags(write=False)
        object.__setattr__(self, "indices", indices)

    @property
    def k(self) -> int:
        return len(self.indices)

    @cached_property
    def complement(self) -> np.ndarray:
        """Free vertex indices (the rows T picks), ascending."""
        mask = np.ones(self.n, dtype=bool)
        mask[self.indices] = False
        free = np.flatnonzero(mask)
        free.setflags(write=False)
        return free

    def position(self, vertex: int) -> int:
        """Rank of `vertex` in the selector."""
        hits = np.flatnonzero(self.indices == vertex)
        if len(hits) == 0:
            raise ValueError(f"vertex {vertex} is not selected")
        return int(hits[0])

    def replace(self, k: int, vertex: int) -> "Selector":
        """Same selector with the k-th control point swapped for `vertex`."""
        indices = self.indices.copy()
        indices[k] = vertex
        return Selector(indices, self.n)

    def permute(self, order: Sequence[int]) -> "Selector":
        return Selector(self.indices[np.asarray(order)], self.n)

    def __contains__(self, vertex: int) -> bool:
        return bool((self.indices == vertex).any())


@dataclass(frozen=True, eq=False)
class ControlPositions:
    """K x d control point positions, row k for selector index s_k."""
    C: np.ndarray

    def __post_init__(self):
        positions = np.array(self.C, dtype=np.float64)
        if positions.ndim == 1:
            positions = positions[:, None]
        if positions.ndim != 2:
            raise ValueError("control positions must be a (K, d) array")
        if not np.isfinite(positions).all():
            raise ValueError("control positions must be finite")
        object.__setattr__(self, "C", positions)

    @classmethod
    def gather(cls, positions: np.ndarray, selector: Selector) -> "ControlPositions":
        """Rows of a full (N, d) array at the selector's indices (S applied)."""
        return cls(np.asarray(positions)[selector.indices])

    @property
    def k(self) -> int:
        return self.C.shape[0]


ControlsLike = Union[ControlPositions, np.ndarray]


def _controls(controls: ControlsLike, selector: Selector) -> np.ndarray:
    array = controls.C if isinstance(controls, ControlPositions) else ControlPositions(controls).C
    if array.shape[0] != selector.k:
        raise ValueError(f"expected {selector.k} control rows, got {array.shape[0]}")
    return array


@dataclass(frozen=True, eq=False)
class BiharmonicWeights:
    """Dense N x K weights for one selector."""
    W: np.ndarray = field(repr=False)
    selector: Selector
    path: WeightsPath

    @property
    def shape(self):
        return self.W.shape


def _check_small_system(matrix: np.ndarray, selector: Selector, what: str, offset: int = 0) -> None:
    """Log ill-conditioned K x K systems; raise when numerically singular."""
    condition = float(np.linalg.cond(matrix))
    if np.isfinite(condition) and condition <= REPORT_CONDITION:
        return
    if not np.isfinite(condition) or condition > SINGULAR_CONDITION:
        # Indices carrying the near-null direction are the near-duplicates
        _, _, vt = np.linalg.svd(matrix)
        weights = np.abs(vt[-1])
        ranks = np.flatnonzero(weights >= 0.5 * weights.max()) - offset
        ranks = ranks[(ranks >= 0) & (ranks < selector.k)]
        raise NumericalError(
            f"{what} system is numerically singular (duplicate or near-duplicate control points)",
            condition=condition,
            indices=selector.indices[ranks].tolist(),
        )
    logger.warning("%s system is ill-conditioned (condition %.3e)", what, condition)


# =============================================================================
# NAIVE AND KKT PATHS
# =============================================================================

def weights_naive(A: sp.spmatrix, selector: Selector) -> BiharmonicWeights:
    """W = S^T - T^T (T A T^T)^-1 T A S^T via one sparse LU of the free block."""
    A = sp.csr_matrix(A)
    free, fixed = selector.complement, selector.indices
    rows = A[free]
    free_block = rows[:, free].tocsc()
    coupling = rows[:, fixed].toarray()

    try:
        factor = splu(free_block)
        free_weights = -factor.solve(coupling)
    except RuntimeError as exc:
        raise NumericalError(f"free-vertex block factorization failed: {exc}") from None
    if not np.isfinite(free_weights).all():
        raise NumericalError("free-vertex block solve produced non-finite weights")

    weights = np.zeros((selector.n, selector.k))
    weights[fixed, np.arange(selector.k)] = 1.0
    weights[free] = free_weights
    return BiharmonicWeights(W=weights, selector=selector, path="naive")


def kkt_solve(A: sp.spmatrix, selector: Selector, controls: ControlsLike) -> np.ndarray:
    """
    Solve [[A, S^T], [S, 0]] [X; L] = [0; C] and return X.

    Independent of every other path; the Lagrange multipliers are dropped.
    """
    C = _controls(controls, selector)
    n, k = selector.n, selector.k
    select = sp.csr_matrix((np.ones(k), (np.arange(k), selector.indices)), shape=(k, n))
    saddle = sp.bmat([[sp.csr_matrix(A), select.T], [select, None]], format="csc")
    rhs = np.vstack([np.zeros((n, C.shape[1])), C])

    try:
        solution = splu(saddle).solve(rhs)
    except RuntimeError as exc:
        raise NumericalError(f"saddle-point system is singular: {exc}") from None
    if not np.isfinite(solution).all():
        raise NumericalError("saddle-point solve produced non-finite values")
    return solution[:n]


# =============================================================================
# FAST PATH
# =============================================================================

class FastSystem:
    """
    The fast path's K x K system for one selector, factorized once.

    With A_eps^-1 = D + beta*11^T (see BilaplacianOperator), the columns
    Y = A_eps^-1 S^T are D_S + beta*11^T and the system matrix is
    Y_S = D_SS + beta*11^T. The rank-one part is handled with
    Sherman-Morrison, so no 1/eps-sized numbers enter the arithmetic:

        u = D_SS^-1 1,  v = D_SS^-1 C
        g = 1^T v / (1/beta + 1^T u)
        V = D_S (v - u g^T) + 1 g^T
    """

    def __init__(self, op: BilaplacianOperator, selector: Selector):
        if selector.n != op.n:
            raise ValueError(f"selector is for N={selector.n}, operator has N={op.n}")
        self.selector = selector
        self.columns = op.deflated_inv[:, selector.indices]
        block = self.columns[selector.indices]
        _check_small_system(block, selector, "K x K")
        self._factor = sla.lu_factor(block, check_finite=False)
        self._ones = sla.lu_solve(self._factor, np.ones(selector.k), check_finite=False)
        self._denominator = 1.0 / op.null_weight + self._ones.sum()

    def solve(self, controls: np.ndarray) -> np.ndarray:
        """Deformed positions (N, d) for control positions (K, d)."""
        v = sla.lu_solve(self._factor, controls, check_finite=False)
        g = v.sum(axis=0) / self._denominator
        z = v - np.outer(self._ones, g)
        positions = self.columns @ z + g
        # Interpolation holds exactly on the selected rows
        positions[self.selector.indices] = controls
        return positions


def weights_fast(op: BilaplacianOperator, selector: Selector) -> BiharmonicWeights:
    """Weights from the regularized inverse; no (N-K)-sized system."""
    weights = FastSystem(op, selector).solve(np.eye(selector.k))
    return BiharmonicWeights(W=weights, selector=selector, path="fast")


def deform_fast(op: BilaplacianOperator, selector: Selector, controls: ControlsLike) -> np.ndarray:
    """deform(weights_fast(op, selector), C) without materializing W."""
    return FastSystem(op, selector).solve(_controls(controls, selector))


# =============================================================================
# SHAVED PATH
# =============================================================================

def _shaved_solve(shaved: ShavedOperator, selector: Selector, controls: np.ndarray) -> np.ndarray:
    """
    Solve the shaved saddle system and return full (N, d) positions.

    Unknowns are the N-1 kept vertices plus [x_fixed; multipliers]. With the
    fixed vertex at selector rank p and a = its removed row of A:

        S~ = [a^T; rows e_{s_k} for k != p; zero row for k = p]
        Z~ = [[a_ff, e_p^T], [e_p, 0]]
        X~ = A~^-1 S~^T (S~ A~^-1 S~^T - Z~)^-1 [0; C]
    """
    if selector.n != shaved.n:
        raise ValueError(f"selector is for N={selector.n}, shaved operator has N={shaved.n}")
    fixed = shaved.fixed_vertex
    if fixed not in selector:
        raise ValueError(f"fixed vertex {fixed} must be one of the control points")

    k = selector.k
    p = selector.position(fixed)
    others = [rank for rank in range(k) if rank != p]
    local = np.array([shaved.local_index(int(selector.indices[rank])) for rank in others], dtype=np.int64)

    # G = A~^-1 S~^T, (N-1) x (K+1)
    g = np.zeros((shaved.n - 1, k + 1))
    g[:, 0] = shaved.A_tilde_inv @ shaved.shaved_row
    g[:, np.array(others, dtype=np.int64) + 1] = shaved.A_tilde_inv[:, local]

    system = np.zeros((k + 1, k + 1))
    system[0] = shaved.shaved_row @ g
    system[np.array(others, dtype=np.int64) + 1] = g[local]
    system[0, 0] -= shaved.shaved_diagonal
    system[0, p + 1] -= 1.0
    system[p + 1, 0] -= 1.0

    _check_small_system(system, selector, "(K+1) x (K+1)", offset=1)
    rhs = np.vstack([np.zeros((1, controls.shape[1])), controls])
    kept_positions = g @ sla.solve(system, rhs, check_finite=False)

    positions = np.empty((shaved.n, controls.shape[1]))
    positions[shaved.keep] = kept_positions
    positions[selector.indices] = controls
    return positions


def weights_shaved(shaved: ShavedOperator, selector: Selector) -> BiharmonicWeights:
    """Exact weights on the singular A; the fixed vertex must be a control point."""
    weights = _shaved_solve(shaved, selector, np.eye(selector.k))
    return BiharmonicWeights(W=weights, selector=selector, path="shaved")


def deform_shaved(shaved: ShavedOperator, selector: Selector, controls: ControlsLike) -> np.ndarray:
    return _shaved_solve(shaved, selector, _controls(controls, selector))


# =============================================================================
# APPLICATION
# =============================================================================

def deform(weights: BiharmonicWeights, controls: ControlsLike) -> np.ndarray:
    """V = W C."""
    return weights.W @ _controls(controls, weights.selector)


def export_weights(weights: BiharmonicWeights) -> str:
    """Row-major ASCII dense matrix with an `N K` header."""
    n, k = weights.shape
    lines = [f"{n} {k}"]
    lines.extend(" ".join(repr(value) for value in row) for row in weights.W.tolist())
    return "\n".join(lines) + "\n"
