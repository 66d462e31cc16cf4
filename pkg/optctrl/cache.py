"""
Inverse Cache
=============

On-disk store for the regularized Bilaplacian inverse, keyed by mesh
content. Precompute is the only O(N^3) step of a run, so repeated runs on
the same template load it instead.

Layout (little-endian):
    magic        8 bytes   b"OPTCINV1"
    N            uint64
    epsilon      float64
    null_weight  float64
    mesh hash    64 bytes  hex sha256 of positions + tets
    payload      N*N float64, row-major deflated inverse
"""
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from optctrl.exceptions import ConfigError
from optctrl.formats import atomic_write_bytes
from optctrl.services.mesh import TetMesh
from optctrl.services.operators import BilaplacianOperator, assemble_bilaplacian, bilaplacian_matrix, default_epsilon

logger = logging.getLogger(__name__)

MAGIC = b"OPTCINV1"
_HEADER = struct.Struct("<8sQdd64s")


def cache_path(cache_dir: Path, mesh_hash: str) -> Path:
    return Path(cache_dir) / f"{mesh_hash}.optcinv"


def save_inverse(op: BilaplacianOperator, cache_dir: Path) -> Path:
    """Write the operator's deflated inverse; returns the file path."""
    path = cache_path(cache_dir, op.mesh_hash)
    header = _HEADER.pack(MAGIC, op.n, op.epsilon, op.null_weight, op.mesh_hash.encode("ascii"))
    payload = np.ascontiguousarray(op.deflated_inv, dtype="<f8").tobytes()
    atomic_write_bytes(path, header + payload)
    logger.info("Cached inverse to %s (%.1f MB)", path, len(payload) / 1e6)
    return path


def load_inverse(path: Path, n: int, epsilon: float, mesh_hash: str) -> Optional[Tuple[np.ndarray, float]]:
    """
    (deflated_inv, null_weight) from `path`, or None if the file is missing
    or was written for another mesh, size or epsilon.
    """
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        logger.info("Inverse cache miss: %s", path)
        return None
    except OSError as exc:
        logger.warning("Inverse cache unreadable (%s): %s", path, exc)
        return None

    if len(data) < _HEADER.size:
        logger.warning("Inverse cache truncated: %s", path)
        return None
    magic, cached_n, cached_eps, null_weight, cached_hash = _HEADER.unpack_from(data)
    if magic != MAGIC:
        logger.warning("Inverse cache has bad magic: %s", path)
        return None
    if cached_hash.decode("ascii", errors="replace") != mesh_hash or cached_n != n:
        logger.info("Inverse cache is for another mesh: %s", path)
        return None
    if cached_eps != epsilon:
        logger.info("Inverse cache epsilon %.3e != %.3e: %s", cached_eps, epsilon, path)
        return None
    if len(data) != _HEADER.size + 8 * n * n:
        logger.warning("Inverse cache payload has the wrong size: %s", path)
        return None

    deflated = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n, n).astype(np.float64)
    logger.info("Inverse cache hit: %s", path)
    return deflated, float(null_weight)


def cached_bilaplacian(
    mesh: TetMesh,
    epsilon: Optional[float] = None,
    cache_dir: Optional[Path] = None,
) -> BilaplacianOperator:
    """assemble_bilaplacian, reusing and refreshing the inverse cache when `cache_dir` is set."""
    if cache_dir is None:
        return assemble_bilaplacian(mesh, epsilon)

    bilaplacian, _, _ = bilaplacian_matrix(mesh)
    if epsilon is None:
        epsilon = default_epsilon(bilaplacian)
    mesh_hash = mesh.content_hash()

    hit = load_inverse(cache_path(cache_dir, mesh_hash), mesh.n_vertices, float(epsilon), mesh_hash)
    if hit is not None:
        deflated, null_weight = hit
        return BilaplacianOperator(
            A=bilaplacian,
            epsilon=float(epsilon),
            deflated_inv=deflated,
            null_weight=null_weight,
            mesh_hash=mesh_hash,
        )

    op = assemble_bilaplacian(mesh, epsilon)
    try:
        save_inverse(op, cache_dir)
    except ConfigError as exc:
        logger.warning("Inverse cache not written: %s", exc)
    return op
