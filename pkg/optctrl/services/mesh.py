"""
Tetrahedral Mesh Service
========================

Template geometry and everything derived from it before any operator is
assembled:

    - Medit (.mesh) parsing and writing
    - boundary surface and edge graphs
    - unit-sphere normalization
    - geodesic farthest point sampling over the surface graph
    - vertex partitioning by graph proximity
    - synthetic hinge-bend target sets
"""
import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial.transform import Rotation

from optctrl.exceptions import ConfigError, MeshParseError

logger = logging.getLogger(__name__)

# Relative volume below which a tet counts as degenerate (scaled by bbox diagonal cubed)
DEGENERATE_VOLUME_TOL = 1e-12

# Local faces of a positively oriented tet, wound so normals point outward
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])

# Local edges of a tet
_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

# Medit sections: tokens per entry (reference label included)
_SECTION_WIDTHS = {
    "Vertices": 4,
    "Tetrahedra": 5,
    "Triangles": 4,
    "Edges": 3,
    "Quadrilaterals": 5,
    "Hexahedra": 9,
    "Corners": 1,
    "RequiredVertices": 1,
    "Ridges": 1,
}


def signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volume of each tet, positive when (1-0, 2-0, 3-0) is right-handed."""
    p0 = positions[tets[:, 0]]
    edges = np.stack(
        [positions[tets[:, 1]] - p0, positions[tets[:, 2]] - p0, positions[tets[:, 3]] - p0],
        axis=1,
    )
    return np.linalg.det(edges) / 6.0


def _edge_graph(edges: np.ndarray, lengths: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.concatenate([lengths, lengths])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def _unique_edges(simplices: np.ndarray, local_edges: np.ndarray) -> np.ndarray:
    pairs = simplices[:, local_edges].reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def _freeze(*arrays: np.ndarray) -> None:
    for array in arrays:
        array.setflags(write=False)


@dataclass(frozen=True, eq=False)
class TetMesh:
    """
    Template geometry: rest positions, positively oriented tets and the
    derived boundary surface and edge graphs.

    Build with `TetMesh.from_arrays` (or `parse_medit`), which validates and
    derives everything; the constructor itself trusts its inputs.
    """
    positions: np.ndarray
    tets: np.ndarray
    surface_tris: np.ndarray
    edges: np.ndarray
    edge_lengths: np.ndarray
    edge_graph: sp.csr_matrix = field(repr=False)

    @classmethod
    def from_arrays(cls, positions: np.ndarray, tets: np.ndarray) -> "TetMesh":
        """Validate raw arrays, fix tet orientation and derive graphs."""
        positions = np.array(positions, dtype=np.float64, order="C")
        tets = np.array(tets, dtype=np.int64, order="C")

        if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) == 0:
            raise MeshParseError("positions must be a non-empty (N, 3) array")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshParseError("tets must be a (T, 4) array")
        if len(tets) == 0:
            raise MeshParseError("no tetrahedra")

        n = len(positions)
        if tets.min() < 0 or tets.max() >= n:
            bad = int(np.flatnonzero((tets < 0).any(axis=1) | (tets >= n).any(axis=1))[0])
            raise MeshParseError(f"tet {bad} references a vertex outside [0, {n})")
        sorted_tets = np.sort(tets, axis=1)
        repeated = (np.diff(sorted_tets, axis=1) == 0).any(axis=1)
        if repeated.any():
            raise MeshParseError(f"tet {int(np.flatnonzero(repeated)[0])} repeats a vertex")

        volumes = signed_volumes(positions, tets)
        scale = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
        degenerate = np.abs(volumes) <= DEGENERATE_VOLUME_TOL * scale ** 3
        if degenerate.any():
            raise MeshParseError(f"tet {int(np.flatnonzero(degenerate)[0])} is degenerate (zero volume)")

        # One-time orientation fix
        flipped = volumes < 0
        if flipped.any():
            logger.debug("Reorienting %d of %d tets", int(flipped.sum()), len(tets))
            tets[flipped] = tets[flipped][:, [0, 2, 1, 3]]

        edges = _unique_edges(tets, _TET_EDGES)
        lengths = np.linalg.norm(positions[edges[:, 1]] - positions[edges[:, 0]], axis=1)
        graph = _edge_graph(edges, lengths, n)

        n_components, _ = connected_components(graph, directed=False)
        if n_components != 1:
            raise MeshParseError(f"edge graph is disconnected ({n_components} components)")

        surface = _boundary_faces(tets)
        _freeze(positions, tets, surface, edges, lengths)
        return cls(
            positions=positions,
            tets=tets,
            surface_tris=surface,
            edges=edges,
            edge_lengths=lengths,
            edge_graph=graph,
        )

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def volumes(self) -> np.ndarray:
        return signed_volumes(self.positions, self.tets)

    @cached_property
    def surface_vertices(self) -> np.ndarray:
        """Sorted indices of vertices on the boundary surface."""
        return np.unique(self.surface_tris)

    @cached_property
    def surface_graph(self) -> sp.csr_matrix:
        """Surface edges weighted by Euclidean length (interior vertices isolated)."""
        edges = _unique_edges(self.surface_tris, np.array([[0, 1], [1, 2], [0, 2]]))
        lengths = np.linalg.norm(self.positions[edges[:, 1]] - self.positions[edges[:, 0]], axis=1)
        return _edge_graph(edges, lengths, self.n_vertices)

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))

    def content_hash(self) -> str:
        """sha256 over positions and (oriented) tets; keys the inverse cache."""
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.positions, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(self.tets, dtype="<i8").tobytes())
        return digest.hexdigest()


def _boundary_faces(tets: np.ndarray) -> np.ndarray:
    """Tet faces that occur exactly once, in sorted-key order, outward wound."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    return faces[first[counts == 1]]


# =============================================================================
# MEDIT I/O
# =============================================================================

def parse_medit(text: str) -> TetMesh:
    """
    Parse an ASCII Medit mesh.

    Vertices and Tetrahedra are required; Triangles and the other standard
    sections are read past and ignored. File indices are 1-based.
    """
    tokens: List[str] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())

    sections = {}
    pos = 0
    while pos < len(tokens):
        keyword = tokens[pos]
        pos += 1
        if keyword == "End":
            break
        if keyword in ("MeshVersionFormatted", "Dimension"):
            if pos >= len(tokens):
                raise MeshParseError(f"{keyword} is missing its value")
            if keyword == "Dimension" and tokens[pos] != "3":
                raise MeshParseError(f"only 3D meshes are supported, got Dimension {tokens[pos]}")
            pos += 1
            continue
        if keyword not in _SECTION_WIDTHS:
            raise MeshParseError(f"unknown Medit keyword {keyword!r}")

        try:
            count = int(tokens[pos])
        except (IndexError, ValueError):
            raise MeshParseError(f"{keyword} section has no valid entry count") from None
        pos += 1
        width = _SECTION_WIDTHS[keyword]
        end = pos + count * width
        if end > len(tokens):
            raise MeshParseError(f"{keyword} section is truncated (expected {count} entries)")
        sections[keyword] = tokens[pos:end]
        pos = end

    if "Vertices" not in sections:
        raise MeshParseError("missing Vertices section")
    if "Tetrahedra" not in sections:
        raise MeshParseError("missing Tetrahedra section")

    try:
        vertices = np.array(sections["Vertices"], dtype=np.float64).reshape(-1, 4)
        tets = np.array(sections["Tetrahedra"], dtype=np.int64).reshape(-1, 5)
    except ValueError as exc:
        raise MeshParseError(f"malformed numeric entry: {exc}") from None

    if len(tets) == 0:
        raise MeshParseError("no tetrahedra")
    n = len(vertices)
    indices = tets[:, :4]
    if indices.min() < 1 or indices.max() > n:
        raise MeshParseError(f"tetrahedron index out of range [1, {n}]")

    mesh = TetMesh.from_arrays(vertices[:, :3], indices - 1)
    logger.debug("Parsed Medit mesh: %d vertices, %d tets", mesh.n_vertices, mesh.n_tets)
    return mesh


def serialize_medit(mesh: TetMesh) -> str:
    """Write Vertices, Tetrahedra and boundary Triangles with round-trip precision."""
    lines = ["MeshVersionFormatted 1", "", "Dimension 3", "", "Vertices", str(mesh.n_vertices)]
    lines.extend(f"{x!r} {y!r} {z!r} 0" for x, y, z in mesh.positions.tolist())
    lines.extend(["", "Tetrahedra", str(mesh.n_tets)])
    lines.extend(f"{a + 1} {b + 1} {c + 1} {d + 1} 0" for a, b, c, d in mesh.tets.tolist())
    lines.extend(["", "Triangles", str(len(mesh.surface_tris))])
    lines.extend(f"{a + 1} {b + 1} {c + 1} 0" for a, b, c in mesh.surface_tris.tolist())
    lines.extend(["", "End", ""])
    return "\n".join(lines)


# =============================================================================
# GEOMETRY
# =============================================================================

def normalize_unit_sphere(mesh: TetMesh) -> TetMesh:
    """Center on the vertex centroid and scale so the farthest vertex has norm 1."""
    centered = mesh.positions - mesh.positions.mean(axis=0)
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius == 0.0:
        raise MeshParseError("all vertices coincide; cannot normalize")
    return TetMesh.from_arrays(centered / radius, mesh.tets)


def surface_geodesic_fps(mesh: TetMesh, k: int) -> np.ndarray:
    """
    Farthest point sampling over the surface edge graph.

    Starts at the surface vertex farthest from the centroid; every pick then
    maximizes the shortest-path distance to the picks so far. Ties go to the
    lowest vertex index.
    """
    surface = mesh.surface_vertices
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if k > len(surface):
        raise ConfigError(f"K={k} exceeds the {len(surface)} surface vertices")

    centroid = mesh.positions.mean(axis=0)
    start = int(surface[np.argmax(np.linalg.norm(mesh.positions[surface] - centroid, axis=1))])

    chosen = [start]
    nearest = np.full(mesh.n_vertices, np.inf)
    graph = mesh.surface_graph
    while len(chosen) < k:
        nearest = np.minimum(nearest, dijkstra(graph, directed=False, indices=chosen[-1]))
        scores = np.full(mesh.n_vertices, -np.inf)
        scores[surface] = nearest[surface]
        scores[chosen] = -np.inf
        chosen.append(int(np.argmax(scores)))

    return np.array(chosen, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Partition:
    """Disjoint cover of the vertices, one region per seed."""
    seeds: np.ndarray
    labels: np.ndarray
    regions: Tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.regions)

    def region_of(self, vertex: int) -> int:
        return int(self.labels[vertex])


def partition_by_proximity(mesh: TetMesh, seeds: Sequence[int]) -> Partition:
    """
    Assign each vertex to the seed nearest over the full tet edge graph.

    Ties go to the seed listed first.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if seeds.ndim != 1 or len(seeds) == 0:
        raise ValueError("seeds must be a non-empty 1D sequence")
    if seeds.min() < 0 or seeds.max() >= mesh.n_vertices:
        raise ValueError("seed index out of range")
    if len(np.unique(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")

    distances = np.atleast_2d(dijkstra(mesh.edge_graph, directed=False, indices=seeds))
    labels = np.argmin(distances, axis=0)
    regions = tuple(np.flatnonzero(labels == rank) for rank in range(len(seeds)))
    _freeze(seeds, labels, *regions)

    logger.debug("Partition sizes: %s", [len(r) for r in regions])
    return Partition(seeds=seeds, labels=labels, regions=regions)


# =============================================================================
# TARGETS
# =============================================================================

@dataclass(frozen=True, eq=False)
class TargetSet:
    """M corresponded target shapes, each (N, 3) in template vertex order."""
    targets: np.ndarray
    angles: Optional[np.ndarray] = None

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.float64)
        if targets.ndim != 3 or targets.shape[2] != 3 or len(targets) == 0:
            raise MeshParseError("targets must be a non-empty (M, N, 3) array")
        object.__setattr__(self, "targets", targets)

    @property
    def n_targets(self) -> int:
        return self.targets.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.targets.shape[1]

    def check_against(self, mesh: TetMesh) -> None:
        if self.n_vertices != mesh.n_vertices:
            raise MeshParseError(
                f"targets have {self.n_vertices} rows but the template has {mesh.n_vertices} vertices"
            )

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.targets, dtype="<f8").tobytes()).hexdigest()

    def concat(self, other: "TargetSet") -> "TargetSet":
        return TargetSet(np.concatenate([self.targets, other.targets], axis=0))


@dataclass(frozen=True)
class HingeSpec:
    """
    Hinge used by the synthetic bend generator.

    Vertices on the positive side of the plane (point, normal) rotate about
    the line through `point` along `axis`. `falloff` is the width of the
    blend band; None means 10% of the bounding-box diagonal.
    """
    point: Tuple[float, float, float]
    normal: Tuple[float, float, float]
    axis: Optional[Tuple[float, float, float]] = None
    falloff: Optional[float] = None

    def unit_normal(self) -> np.ndarray:
        normal = np.asarray(self.normal, dtype=np.float64)
        length = np.linalg.norm(normal)
        if length == 0.0:
            raise ConfigError("hinge normal must be non-zero")
        return normal / length

    def unit_axis(self) -> np.ndarray:
        """Hinge axis projected into the plane; defaults to a fixed in-plane direction."""
        normal = self.unit_normal()
        if self.axis is None:
            helper = np.eye(3)[int(np.argmin(np.abs(normal)))]
            axis = np.cross(normal, helper)
        else:
            axis = np.asarray(self.axis, dtype=np.float64)
            axis = axis - axis.dot(normal) * normal
        length = np.linalg.norm(axis)
        if length == 0.0:
            raise ConfigError("hinge axis must not be parallel to the normal")
        return axis / length


def hinge_blend(mesh: TetMesh, hinge: HingeSpec) -> np.ndarray:
    """Per-vertex rotation fraction in [0, 1]: 0 behind the plane, smoothstep across the band."""
    signed = (mesh.positions - np.asarray(hinge.point, dtype=np.float64)) @ hinge.unit_normal()
    if signed.max() <= 0.0:
        raise ConfigError("hinge plane leaves the positive side empty")
    if signed.min() > 0.0:
        raise ConfigError("hinge plane does not cut the mesh")
    width = hinge.falloff if hinge.falloff is not None else 0.1 * mesh.bbox_diagonal
    if width <= 0.0:
        raise ConfigError("hinge falloff width must be positive")
    u = np.clip(signed / width, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def bend(mesh: TetMesh, hinge: HingeSpec, angle: float, blend: Optional[np.ndarray] = None) -> np.ndarray:
    """Rotate the positive side of the hinge by `angle` (radians), blended across the band."""
    if blend is None:
        blend = hinge_blend(mesh, hinge)
    point = np.asarray(hinge.point, dtype=np.float64)
    relative = mesh.positions - point
    rotation = Rotation.from_rotvec((angle * blend)[:, None] * hinge.unit_axis()[None, :])
    return mesh.positions + (rotation.apply(relative) - relative)


def generate_bend_targets(
    mesh: TetMesh,
    m: int,
    seed: int,
    hinge: HingeSpec,
    angle_range: Tuple[float, float] = (-np.pi / 4, np.pi / 4),
) -> TargetSet:
    """M hinge bends with angles drawn uniformly from `angle_range` by a seeded generator."""
    if m < 1:
        raise ConfigError(f"M must be >= 1, got {m}")
    low, high = angle_range
    if low > high:
        raise ConfigError(f"angle range is inverted: [{low}, {high}]")

    blend = hinge_blend(mesh, hinge)
    angles = np.random.default_rng(seed).uniform(low, high, size=m)
    targets = np.stack([bend(mesh, hinge, float(angle), blend) for angle in angles])
    logger.info("Generated %d hinge targets (seed %d)", m, seed)
    return TargetSet(targets=targets, angles=angles)
