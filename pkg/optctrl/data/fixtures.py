"""
Synthetic Fixtures
==================

Desk-scale stand-ins for scanned templates: a structured tetrahedral bar
and the hinge used to bend it.

Grid cells are split into six tets along the cell's main diagonal
(Freudenthal split). Every cell uses the same diagonal direction, so shared
faces are cut identically and the result is conforming.
"""
import itertools
from typing import Tuple

import numpy as np

from optctrl.services.mesh import HingeSpec, TetMesh

# Axis orderings for the six tets of one cell
_PERMUTATIONS = list(itertools.permutations(range(3)))


def bar_mesh(
    nx: int,
    ny: int = 2,
    nz: int = 2,
    size: Tuple[float, float, float] = (4.0, 1.0, 1.0),
) -> TetMesh:
    """Box [0, sx] x [0, sy] x [0, sz] with nx*ny*nz cells; (nx+1)(ny+1)(nz+1) vertices."""
    if min(nx, ny, nz) < 1:
        raise ValueError("bar needs at least one cell per axis")

    counts = np.array([nx + 1, ny + 1, nz + 1])
    axes = [np.linspace(0.0, extent, count) for extent, count in zip(size, counts)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    def vid(i, j, k):
        return (i * counts[1] + j) * counts[2] + k

    tets = []
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        for perm in _PERMUTATIONS:
            corner = np.array([i, j, k])
            path = [corner.copy()]
            for axis in perm:
                corner[axis] += 1
                path.append(corner.copy())
            tets.append([vid(*p) for p in path])

    return TetMesh.from_arrays(grid, np.array(tets))


def bar_with_vertices(target: int, aspect: Tuple[int, int] = (1, 1)) -> TetMesh:
    """Bar of length 4 whose vertex count is close to `target` (cross-section ~ length / 4)."""
    best = None
    for side in range(1, 40):
        ny, nz = side * aspect[0], side * aspect[1]
        nx = max(1, round(target / ((ny + 1) * (nz + 1))) - 1)
        count = (nx + 1) * (ny + 1) * (nz + 1)
        score = (abs(count - target), abs(nx - 4 * ny))
        if best is None or score < best[0]:
            best = (score, (nx, ny, nz))
    nx, ny, nz = best[1]
    return bar_mesh(nx, ny, nz)


def default_hinge(mesh: TetMesh, position: float = 0.5) -> HingeSpec:
    """Hinge across the bar's long (x) axis at a fraction of its length, bending about z."""
    lo = mesh.positions.min(axis=0)
    hi = mesh.positions.max(axis=0)
    point = lo + (hi - lo) * np.array([position, 0.5, 0.5])
    return HingeSpec(
        point=tuple(float(c) for c in point),
        normal=(1.0, 0.0, 0.0),
        axis=(0.0, 0.0, 1.0),
    )
