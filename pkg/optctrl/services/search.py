"""
Control Point Search Service
============================

Finds the K-subset of template vertices whose biharmonic deformations best
reproduce a set of corresponded targets.

Objective:
    mean over targets i of d(f(X_i), W(S) C(S; X_i)), with C(S; X_i) the
    selected rows of f(X_i) and d the mean per-vertex Euclidean distance
    (or its square).

Search (per pass, for each control point k):
    1. FindRegion: sample one random unselected vertex per region, keep the
       region whose sample improves the distance most
    2. FindVertex: scan that region exhaustively for the best replacement

Baselines: FPS only, best-of-N random subsets, exhaustive enumeration.
"""
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from optctrl.config import get_settings
from optctrl.exceptions import ConfigError
from optctrl.schemas import DistanceKind, FitReport, SearchConfig
from optctrl.services.biharmonic import ControlPositions, FastSystem, Selector, deform, weights_naive
from optctrl.services.mesh import Partition, TargetSet, TetMesh, partition_by_proximity, surface_geodesic_fps
from optctrl.services.operators import BilaplacianOperator

logger = logging.getLogger(__name__)

# Largest number of subsets exhaustive_search will enumerate
EXHAUSTIVE_LIMIT = 10 ** 6

# Candidates per parallel batch in the baselines
BATCH_SIZE = 512

EvaluationHook = Callable[[np.ndarray, float], None]


# =============================================================================
# FITTING DISTANCE
# =============================================================================

def fitting_residuals(op: BilaplacianOperator, selector: Selector, targets: TargetSet) -> np.ndarray:
    """(M, N) Euclidean distances between each deformed template and its target."""
    shapes = targets.targets
    m, n, dim = shapes.shape
    if n != op.n:
        raise ValueError(f"targets have {n} vertices, operator has {op.n}")
    k = selector.k

    # All targets share one K x K factorization: stack them as extra columns
    controls = shapes[:, selector.indices, :].transpose(1, 0, 2).reshape(k, m * dim)
    deformed = FastSystem(op, selector).solve(controls)
    deformed = deformed.reshape(n, m, dim).transpose(1, 0, 2)
    return np.linalg.norm(deformed - shapes, axis=2)


def per_target_distances(
    op: BilaplacianOperator,
    selector: Selector,
    targets: TargetSet,
    kind: DistanceKind = "mean_norm",
) -> np.ndarray:
    residuals = fitting_residuals(op, selector, targets)
    if kind == "mean_squared_norm":
        residuals = residuals ** 2
    return residuals.mean(axis=1)


def fitting_distance(
    op: BilaplacianOperator,
    selector: Selector,
    targets: TargetSet,
    kind: DistanceKind = "mean_norm",
) -> float:
    """Mean over targets of the mean per-vertex distance after deformation."""
    return float(np.mean(per_target_distances(op, selector, targets, kind)))


def fitting_distance_naive(
    A: sp.spmatrix,
    selector: Selector,
    targets: TargetSet,
    kind: DistanceKind = "mean_norm",
) -> float:
    """Same objective through weights_naive: one (N-K) sparse factorization per call."""
    weights = weights_naive(A, selector)
    residuals = np.stack([
        np.linalg.norm(deform(weights, ControlPositions.gather(shape, selector)) - shape, axis=1)
        for shape in targets.targets
    ])
    if kind == "mean_squared_norm":
        residuals = residuals ** 2
    return float(np.mean(residuals.mean(axis=1)))


class CandidateEvaluator:
    """
    Evaluates fitting distances for batches of candidate selectors.

    Results come back in submission order whatever the thread count; the
    tracing hook also fires in that order.
    """

    def __init__(
        self,
        op: BilaplacianOperator,
        targets: TargetSet,
        kind: DistanceKind = "mean_norm",
        threads: Optional[int] = None,
        on_evaluation: Optional[EvaluationHook] = None,
    ):
        self.op = op
        self.targets = targets
        self.kind = kind
        self.threads = threads if threads is not None else get_settings().threads
        self.on_evaluation = on_evaluation

    def distance(self, selector: Selector) -> float:
        return fitting_distance(self.op, selector, self.targets, self.kind)

    def evaluate(self, selectors: Sequence[Selector]) -> List[float]:
        if self.threads > 1 and len(selectors) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                distances = list(pool.map(self.distance, selectors))
        else:
            distances = [self.distance(selector) for selector in selectors]

        if self.on_evaluation is not None:
            for selector, distance in zip(selectors, distances):
                self.on_evaluation(selector.indices, distance)
        return distances


# =============================================================================
# ALGORITHM STEPS
# =============================================================================

@dataclass(frozen=True, eq=False)
class SearchState:
    """
    Coordinator state of the search.

    `d_min` is the fitting distance of `selector`, except between
    find_region and find_vertex, where it may belong to `incumbent`: the
    sample that improved it, which becomes the k-th control point unless
    find_vertex finds better.
    """
    selector: Selector
    d_min: float
    partition: Partition
    rng: np.random.Generator
    eval_count: int = 0
    incumbent: Optional[int] = None


def find_region(
    state: SearchState,
    k: int,
    op: BilaplacianOperator,
    targets: TargetSet,
    *,
    kind: DistanceKind = "mean_norm",
    threads: Optional[int] = None,
    on_evaluation: Optional[EvaluationHook] = None,
) -> Tuple[int, SearchState]:
    """
    Try one random unselected vertex per region as the k-th control point.

    Returns the region whose sample beat d_min by the most (strictly), or the
    region holding the current k-th point when none did. Fully selected
    regions are skipped. All draws happen before any evaluation.
    """
    evaluator = CandidateEvaluator(op, targets, kind, threads, on_evaluation)
    selector = state.selector
    current = int(selector.indices[k])

    samples = []
    for rank, region in enumerate(state.partition.regions):
        if np.isin(region, selector.indices).all():
            continue
        while True:
            vertex = int(region[state.rng.integers(len(region))])
            if vertex not in selector:
                break
        samples.append((rank, vertex))

    distances = evaluator.evaluate([selector.replace(k, vertex) for _, vertex in samples])

    best_region = state.partition.region_of(current)
    best_vertex = current
    d_min = state.d_min
    for (rank, vertex), distance in zip(samples, distances):
        if distance < d_min:
            d_min, best_region, best_vertex = distance, rank, vertex

    logger.debug("find_region k=%d -> region %d (d_min %.6g)", k, best_region, d_min)
    return best_region, replace(
        state,
        d_min=d_min,
        eval_count=state.eval_count + len(samples),
        incumbent=best_vertex,
    )


def find_vertex(
    state: SearchState,
    k: int,
    region: np.ndarray,
    op: BilaplacianOperator,
    targets: TargetSet,
    *,
    kind: DistanceKind = "mean_norm",
    threads: Optional[int] = None,
    on_evaluation: Optional[EvaluationHook] = None,
) -> Tuple[int, SearchState]:
    """
    Try every unselected vertex of `region` (ascending) as the k-th point.

    Returns the best one if it beats d_min, otherwise the incumbent (the
    current k-th point, or find_region's improving sample). Ties go to the
    lowest vertex index.
    """
    evaluator = CandidateEvaluator(op, targets, kind, threads, on_evaluation)
    selector = state.selector
    fallback = state.incumbent if state.incumbent is not None else int(selector.indices[k])

    candidates = np.setdiff1d(np.asarray(region, dtype=np.int64), selector.indices)
    distances = evaluator.evaluate([selector.replace(k, int(vertex)) for vertex in candidates])

    vertex, d_min = fallback, state.d_min
    if len(distances):
        best = int(np.argmin(distances))
        if distances[best] < d_min:
            vertex, d_min = int(candidates[best]), distances[best]

    return vertex, replace(
        state,
        d_min=d_min,
        eval_count=state.eval_count + len(candidates),
        incumbent=vertex,
    )


def commit(state: SearchState, k: int, vertex: int) -> SearchState:
    """Make `vertex` the k-th control point."""
    selector = state.selector
    if int(selector.indices[k]) != vertex:
        selector = selector.replace(k, vertex)
    return replace(state, selector=selector, incumbent=None)


# =============================================================================
# SEARCH AND BASELINES
# =============================================================================

def _check_inputs(mesh: Optional[TetMesh], op: BilaplacianOperator, targets: TargetSet, k: int) -> None:
    if targets.n_vertices != op.n:
        raise ConfigError(f"targets have {targets.n_vertices} vertices, operator has {op.n}")
    if mesh is not None and mesh.n_vertices != op.n:
        raise ConfigError(f"mesh has {mesh.n_vertices} vertices, operator has {op.n}")
    if not 1 <= k < op.n:
        raise ConfigError(f"K must be in [1, {op.n - 1}], got {k}")


def optimize(
    mesh: TetMesh,
    op: BilaplacianOperator,
    targets: TargetSet,
    cfg: SearchConfig,
    *,
    threads: Optional[int] = None,
    on_evaluation: Optional[EvaluationHook] = None,
    on_update: Optional[Callable[[int, SearchState], None]] = None,
) -> FitReport:
    """
    Full search: FPS start, proximity partition, then `cfg.passes` sweeps of
    find_region / find_vertex over the K control points.

    The partition is built once from the FPS seeds. Later passes continue
    the same random stream. `on_update(k, state)` fires after every commit.
    """
    _check_inputs(mesh, op, targets, cfg.k)
    started = time.perf_counter()
    options = dict(kind=cfg.distance_kind, threads=threads, on_evaluation=on_evaluation)

    seeds = surface_geodesic_fps(mesh, cfg.k)
    selector = Selector(seeds, mesh.n_vertices)
    partition = partition_by_proximity(mesh, seeds)
    evaluator = CandidateEvaluator(op, targets, **options)
    initial = evaluator.evaluate([selector])[0]
    logger.info("FPS start: K=%d, distance %.6g", cfg.k, initial)

    state = SearchState(
        selector=selector,
        d_min=initial,
        partition=partition,
        rng=np.random.default_rng(cfg.seed),
        eval_count=1,
    )
    pass_distances = []
    for sweep in range(cfg.passes):
        before = state.eval_count
        for k in range(cfg.k):
            region, state = find_region(state, k, op, targets, **options)
            vertex, state = find_vertex(state, k, partition.regions[region], op, targets, **options)
            state = commit(state, k, vertex)
            if on_update is not None:
                on_update(k, state)
        pass_distances.append(state.d_min)
        logger.info(
            "Pass %d/%d: distance %.6g (%d evaluations)",
            sweep + 1, cfg.passes, state.d_min, state.eval_count - before,
        )

    per_target = per_target_distances(op, state.selector, targets, cfg.distance_kind)
    return FitReport(
        method="optctrl",
        control_points=state.selector.indices.tolist(),
        k=cfg.k,
        mean_distance=state.d_min,
        per_target=per_target.tolist(),
        initial_fps_distance=initial,
        eval_count=state.eval_count,
        passes_run=cfg.passes,
        seed=cfg.seed,
        timings={"search": (time.perf_counter() - started) * 1000.0},
        pass_distances=pass_distances,
    )


def fps_baseline(
    mesh: TetMesh,
    op: BilaplacianOperator,
    targets: TargetSet,
    k: int,
    kind: DistanceKind = "mean_norm",
) -> FitReport:
    """The FPS starting points used as the final answer."""
    _check_inputs(mesh, op, targets, k)
    started = time.perf_counter()
    selector = Selector(surface_geodesic_fps(mesh, k), mesh.n_vertices)
    per_target = per_target_distances(op, selector, targets, kind)
    distance = float(np.mean(per_target))
    return FitReport(
        method="fps",
        control_points=selector.indices.tolist(),
        k=k,
        mean_distance=distance,
        per_target=per_target.tolist(),
        initial_fps_distance=distance,
        eval_count=1,
        passes_run=0,
        timings={"search": (time.perf_counter() - started) * 1000.0},
    )


def _best_of(evaluator: CandidateEvaluator, subsets, n: int) -> Tuple[Optional[Selector], float, int]:
    """Strict-minimum scan in order; the first of equal minima wins."""
    best, best_distance, count = None, math.inf, 0
    while True:
        batch = [Selector(subset, n) for subset in itertools.islice(subsets, BATCH_SIZE)]
        if not batch:
            return best, best_distance, count
        distances = evaluator.evaluate(batch)
        count += len(batch)
        position = int(np.argmin(distances))
        if distances[position] < best_distance:
            best, best_distance = batch[position], distances[position]


def random_search(
    op: BilaplacianOperator,
    targets: TargetSet,
    k: int,
    trials: int,
    seed: int,
    *,
    kind: DistanceKind = "mean_norm",
    threads: Optional[int] = None,
    on_evaluation: Optional[EvaluationHook] = None,
) -> FitReport:
    """Best of `trials` uniformly random K-subsets (seeded)."""
    _check_inputs(None, op, targets, k)
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    subsets = (rng.choice(op.n, size=k, replace=False) for _ in range(trials))

    evaluator = CandidateEvaluator(op, targets, kind, threads, on_evaluation)
    best, distance, count = _best_of(evaluator, subsets, op.n)
    logger.info("Random search: best of %d subsets, distance %.6g", count, distance)

    per_target = per_target_distances(op, best, targets, kind)
    return FitReport(
        method="random",
        control_points=best.indices.tolist(),
        k=k,
        mean_distance=distance,
        per_target=per_target.tolist(),
        eval_count=count,
        passes_run=0,
        seed=seed,
        timings={"search": (time.perf_counter() - started) * 1000.0},
    )


def exhaustive_search(
    op: BilaplacianOperator,
    targets: TargetSet,
    k: int,
    *,
    kind: DistanceKind = "mean_norm",
    threads: Optional[int] = None,
    limit: int = EXHAUSTIVE_LIMIT,
) -> Tuple[Selector, float]:
    """Global optimum over all K-subsets, in lexicographic order; tiny instances only."""
    _check_inputs(None, op, targets, k)
    total = math.comb(op.n, k)
    if total > limit:
        raise ConfigError(f"exhaustive search over C({op.n}, {k}) = {total} subsets exceeds the limit of {limit}")

    evaluator = CandidateEvaluator(op, targets, kind, threads)
    best, distance, _ = _best_of(evaluator, itertools.combinations(range(op.n), k), op.n)
    logger.info("Exhaustive search over %d subsets: distance %.6g", total, distance)
    return best, distance
