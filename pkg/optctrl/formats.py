"""
File Formats
============

Reading and writing everything the CLI touches on disk:

    - Medit templates (.mesh)
    - target directories (one .xyz file per target)
    - deformed surfaces (.obj) and per-vertex error sidecars (.csv)
    - FitReport JSON

All writes go through a temp file in the destination directory and
os.replace, so a failed run never leaves a partial output behind.
"""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import ValidationError

from optctrl.exceptions import ConfigError, MeshParseError
from optctrl.schemas import FitReport
from optctrl.services.mesh import TargetSet, TetMesh, normalize_unit_sphere, parse_medit

logger = logging.getLogger(__name__)

TARGET_PATTERN = "target_{:04d}.xyz"

PathLike = Union[str, Path]


# =============================================================================
# ATOMIC WRITES
# =============================================================================

def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write `data` to `path` via a sibling temp file and os.replace."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None

    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise ConfigError(f"cannot write {path}: {exc}") from None


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("ascii"))


def read_text(path: PathLike) -> str:
    try:
        return Path(path).read_text(encoding="ascii")
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except UnicodeDecodeError:
        raise MeshParseError(f"{path}: not an ASCII file") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


# =============================================================================
# MESHES AND TARGETS
# =============================================================================

def load_mesh(path: PathLike, normalize: bool = True) -> TetMesh:
    """Parse a Medit template, optionally normalized to the unit sphere."""
    try:
        mesh = parse_medit(read_text(path))
    except MeshParseError as exc:
        raise MeshParseError(f"{path}: {exc}") from None
    if normalize:
        mesh = normalize_unit_sphere(mesh)
    logger.info("Loaded template %s: N=%d, T=%d", path, mesh.n_vertices, mesh.n_tets)
    return mesh


def parse_xyz(text: str, source: str = "<xyz>") -> np.ndarray:
    """`x y z` per line; blank lines and '#' comments skipped."""
    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise MeshParseError(f"{source}:{number}: expected 3 coordinates, got {len(fields)}")
        try:
            rows.append([float(value) for value in fields])
        except ValueError:
            raise MeshParseError(f"{source}:{number}: invalid coordinate in {line!r}") from None

    positions = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(positions).all():
        raise MeshParseError(f"{source}: non-finite coordinate")
    return positions


def format_xyz(positions: np.ndarray) -> str:
    """One `x y z` line per vertex at round-trip precision."""
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(positions, dtype=np.float64).tolist())


def read_targets_dir(directory: PathLike, n_vertices: Optional[int] = None) -> TargetSet:
    """Load every .xyz file of `directory`, in name order, as one TargetSet."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"targets directory not found: {directory}")
    paths = sorted(directory.glob("*.xyz"))
    if not paths:
        raise MeshParseError(f"{directory}: no .xyz target files")

    shapes = []
    for path in paths:
        positions = parse_xyz(read_text(path), str(path))
        expected = n_vertices if n_vertices is not None else (shapes[0].shape[0] if shapes else None)
        if expected is not None and positions.shape[0] != expected:
            raise MeshParseError(f"{path}: {positions.shape[0]} vertices, expected {expected}")
        shapes.append(positions)

    logger.info("Loaded %d targets from %s", len(shapes), directory)
    return TargetSet(np.stack(shapes))


def write_targets_dir(targets: TargetSet, directory: PathLike) -> List[Path]:
    directory = Path(directory)
    written = []
    for i, shape in enumerate(targets.targets):
        path = directory / TARGET_PATTERN.format(i)
        atomic_write_text(path, format_xyz(shape))
        written.append(path)
    logger.info("Wrote %d targets to %s", len(written), directory)
    return written


# =============================================================================
# DEFORMATION OUTPUTS
# =============================================================================

def format_obj(positions: np.ndarray, triangles: np.ndarray) -> str:
    """
    Surface as ASCII OBJ.

    Every mesh vertex is written so OBJ vertex i is template vertex i-1;
    faces reference the boundary triangles only.
    """
    lines = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(positions, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in np.asarray(triangles).tolist()]
    return "".join(lines)


def format_distance_csv(distances: np.ndarray) -> str:
    """Per-vertex distance sidecar: `vertex,distance`, 0-based."""
    rows = ["vertex,distance\n"]
    rows += [f"{i},{d!r}\n" for i, d in enumerate(np.asarray(distances, dtype=np.float64).tolist())]
    return "".join(rows)


# =============================================================================
# REPORTS
# =============================================================================

def read_report(path: PathLike) -> FitReport:
    text = read_text(path)
    try:
        return FitReport.model_validate(json.loads(text))
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"{path}: invalid JSON: {exc}") from None
    except ValidationError as exc:
        raise MeshParseError(f"{path}: invalid report: {exc.error_count()} error(s), first: {exc.errors()[0]['msg']}") from None


def write_report(report: FitReport, path: PathLike) -> None:
    atomic_write_text(path, report.to_json())
    logger.info("Wrote report to %s", path)
