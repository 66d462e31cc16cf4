"""
Deform Command
==============

Apply a report's control points to a template: V = W C, written as an OBJ
surface. When the positions file is a full target (N rows) rather than K
control positions, the per-vertex distance to it goes to a CSV sidecar.
"""
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from optctrl.cache import cached_bilaplacian
from optctrl.config import get_settings
from optctrl.exceptions import MeshParseError
from optctrl.formats import (
    atomic_write_text,
    format_distance_csv,
    format_obj,
    load_mesh,
    parse_xyz,
    read_report,
    read_text,
)
from optctrl.services.biharmonic import ControlPositions, FastSystem, Selector, export_weights, weights_fast
from optctrl.services.mesh import TargetSet
from optctrl.services.search import fitting_residuals

logger = logging.getLogger(__name__)


def cmd_deform(
    template: Path,
    report_path: Path,
    positions_path: Path,
    out: Path,
    *,
    epsilon: Optional[float] = None,
    cache_dir: Optional[Path] = None,
    normalize: bool = True,
    weights_out: Optional[Path] = None,
) -> np.ndarray:
    """Write the deformed surface to `out`; returns the deformed (N, 3) positions."""
    mesh = load_mesh(template, normalize=normalize)
    report = read_report(report_path)
    n = mesh.n_vertices
    try:
        selector = Selector(np.array(report.control_points, dtype=np.int64), n)
    except ValueError as exc:
        raise MeshParseError(f"{report_path}: control points do not fit the template: {exc}") from None

    positions = parse_xyz(read_text(positions_path), str(positions_path))
    if positions.shape[0] == n:
        target = positions
        controls = ControlPositions.gather(target, selector)
    elif positions.shape[0] == selector.k:
        target = None
        controls = ControlPositions(positions)
    else:
        raise MeshParseError(
            f"{positions_path}: {positions.shape[0]} rows; expected K={selector.k} control positions or N={n}"
        )

    op = cached_bilaplacian(mesh, epsilon, cache_dir or get_settings().cache_dir)
    deformed = FastSystem(op, selector).solve(controls.C)
    atomic_write_text(out, format_obj(deformed, mesh.surface_tris))
    logger.info("Wrote deformed surface to %s", out)

    if target is not None:
        residuals = fitting_residuals(op, selector, TargetSet(target[None]))[0]
        sidecar = Path(out).with_suffix(".csv")
        atomic_write_text(sidecar, format_distance_csv(residuals))
        logger.info("Mean distance to target %.6g; per-vertex distances in %s", residuals.mean(), sidecar)
    else:
        rest = mesh.positions[selector.indices]
        logger.info("Max control displacement from rest %.6g", float(np.abs(controls.C - rest).max()))

    if weights_out is not None:
        atomic_write_text(weights_out, export_weights(weights_fast(op, selector)))
        logger.info("Wrote weights to %s", weights_out)
    return deformed
