import math

import numpy as np
import pytest
from pydantic import ValidationError

from optctrl.data import bar_mesh, default_hinge
from optctrl.exceptions import ConfigError
from optctrl.schemas import FitReport, SearchConfig
from optctrl.services.biharmonic import Selector, deform_fast
from optctrl.services.mesh import (
    Partition,
    TargetSet,
    TetMesh,
    generate_bend_targets,
    normalize_unit_sphere,
    partition_by_proximity,
    surface_geodesic_fps,
)
from optctrl.services.operators import assemble_bilaplacian, bilaplacian_matrix
from optctrl.services.search import (
    SearchState,
    commit,
    exhaustive_search,
    find_region,
    find_vertex,
    fitting_distance,
    fitting_distance_naive,
    fitting_residuals,
    fps_baseline,
    optimize,
    per_target_distances,
    random_search,
)


@pytest.fixture(scope="module")
def tiny_instance():
    """N = 24 bar with four hinge targets; small enough to enumerate K = 2."""
    mesh = normalize_unit_sphere(bar_mesh(3, 2, 1))
    op = assemble_bilaplacian(mesh)
    targets = generate_bend_targets(mesh, 4, 1, default_hinge(mesh))
    return mesh, op, targets


def start_state(mesh, op, targets, k, seed=0) -> SearchState:
    seeds = surface_geodesic_fps(mesh, k)
    selector = Selector(seeds, mesh.n_vertices)
    return SearchState(
        selector=selector,
        d_min=fitting_distance(op, selector, targets),
        partition=partition_by_proximity(mesh, seeds),
        rng=np.random.default_rng(seed),
        eval_count=1,
    )


# =============================================================================
# FITTING DISTANCE
# =============================================================================

def test_residuals_shape_and_control_rows(bar_op, hinge_targets):
    selector = Selector([0, 20, 40, 62], bar_op.n)
    residuals = fitting_residuals(bar_op, selector, hinge_targets)
    assert residuals.shape == (hinge_targets.n_targets, bar_op.n)
    assert (residuals >= 0).all()
    assert (residuals[:, selector.indices] == 0.0).all()


def test_distance_kinds(bar_op, hinge_targets):
    selector = Selector([0, 20, 40, 62], bar_op.n)
    residuals = fitting_residuals(bar_op, selector, hinge_targets)

    per_target = per_target_distances(bar_op, selector, hinge_targets)
    np.testing.assert_allclose(per_target, residuals.mean(axis=1), rtol=1e-14)
    assert fitting_distance(bar_op, selector, hinge_targets) == pytest.approx(residuals.mean(), rel=1e-12)

    squared = fitting_distance(bar_op, selector, hinge_targets, "mean_squared_norm")
    assert squared == pytest.approx((residuals ** 2).mean(), rel=1e-12)


def test_fast_distance_matches_naive(bar_op, hinge_targets, rng):
    for _ in range(5):
        selector = Selector(rng.choice(bar_op.n, size=5, replace=False), bar_op.n)
        assert fitting_distance(bar_op, selector, hinge_targets) == pytest.approx(
            fitting_distance_naive(bar_op.A_eps, selector, hinge_targets), abs=1e-8
        )


def test_identical_targets_give_identical_residuals(bar, bar_op):
    targets = generate_bend_targets(bar, 2, 0, default_hinge(bar), angle_range=(0.0, 0.0))
    selector = Selector([5, 25, 45], bar.n_vertices)
    residuals = fitting_residuals(bar_op, selector, targets)
    np.testing.assert_allclose(residuals[0], residuals[1], rtol=1e-14, atol=1e-15)


def test_reachable_target_has_zero_distance(bar_op, rng):
    selector = Selector([3, 17, 33, 50, 61], bar_op.n)
    reachable = deform_fast(bar_op, selector, rng.normal(size=(5, 3)))
    assert fitting_distance(bar_op, selector, TargetSet(reachable[None])) < 1e-10


def test_duplicated_targets_keep_mean(bar_op, hinge_targets):
    selector = Selector([3, 17, 33, 50], bar_op.n)
    doubled = hinge_targets.concat(hinge_targets)
    assert doubled.n_targets == 2 * hinge_targets.n_targets
    assert fitting_distance(bar_op, selector, doubled) == pytest.approx(
        fitting_distance(bar_op, selector, hinge_targets), rel=1e-12
    )


def test_distance_matches_dense_kkt_pipeline():
    mesh = normalize_unit_sphere(bar_mesh(4, 2, 1))
    assert mesh.n_vertices == 30
    target = generate_bend_targets(mesh, 1, 4, default_hinge(mesh), angle_range=(0.5, 0.5))
    selector = Selector([0, 29], mesh.n_vertices)

    dense = bilaplacian_matrix(mesh)[0].toarray()
    picks = np.eye(mesh.n_vertices)[selector.indices]
    system = np.block([[dense, picks.T], [picks, np.zeros((2, 2))]])
    rhs = np.vstack([np.zeros((mesh.n_vertices, 3)), target.targets[0][selector.indices]])
    solved = np.linalg.solve(system, rhs)[: mesh.n_vertices]
    expected = np.linalg.norm(solved - target.targets[0], axis=1).mean()

    op = assemble_bilaplacian(mesh, epsilon=1e-14)
    assert fitting_distance(op, selector, target) == pytest.approx(expected, abs=1e-8)


def test_scaling_template_scales_distances(bar, bar_op, hinge_targets, rng):
    scaled = TetMesh.from_arrays(2.0 * bar.positions, bar.tets)
    scaled_op = assemble_bilaplacian(scaled)
    scaled_targets = TargetSet(2.0 * hinge_targets.targets)

    distances, scaled_distances = [], []
    for _ in range(30):
        selector = Selector(rng.choice(bar.n_vertices, size=4, replace=False), bar.n_vertices)
        distances.append(fitting_distance(bar_op, selector, hinge_targets))
        scaled_distances.append(fitting_distance(scaled_op, selector, scaled_targets))
    np.testing.assert_allclose(scaled_distances, 2.0 * np.array(distances), rtol=1e-8)
    assert int(np.argmin(scaled_distances)) == int(np.argmin(distances))


# =============================================================================
# ALGORITHM STEPS
# =============================================================================

def test_find_region_budget_and_incumbent(bar, bar_op, hinge_targets):
    state = start_state(bar, bar_op, hinge_targets, 5)
    region, after = find_region(state, 2, bar_op, hinge_targets)

    assert after.eval_count - state.eval_count <= 5
    assert after.d_min <= state.d_min
    assert 0 <= region < 5
    if after.d_min < state.d_min:
        assert after.incumbent not in state.selector
        assert after.partition.region_of(after.incumbent) == region
        assert after.d_min == fitting_distance(bar_op, state.selector.replace(2, after.incumbent), hinge_targets)
    else:
        assert after.incumbent == int(state.selector.indices[2])
        assert region == state.partition.region_of(after.incumbent)


def test_find_vertex_commits_consistent_distance(bar, bar_op, hinge_targets):
    state = start_state(bar, bar_op, hinge_targets, 5)
    region, state = find_region(state, 0, bar_op, hinge_targets)
    before = state.eval_count
    vertex, state = find_vertex(state, 0, state.partition.regions[region], bar_op, hinge_targets)
    state = commit(state, 0, vertex)

    assert state.eval_count - before <= len(state.partition.regions[region])
    assert state.incumbent is None
    assert int(state.selector.indices[0]) == vertex
    assert state.d_min == fitting_distance(bar_op, state.selector, hinge_targets)


def test_find_vertex_without_improvement_keeps_point(bar, bar_op, hinge_targets):
    state = start_state(bar, bar_op, hinge_targets, 3)
    current = int(state.selector.indices[1])
    # A region consisting of selected vertices offers no candidates
    vertex, after = find_vertex(state, 1, state.selector.indices, bar_op, hinge_targets)
    assert vertex == current
    assert after.eval_count == state.eval_count
    assert after.d_min == state.d_min


def test_find_vertex_matches_exhaustive_scan(tiny_instance):
    mesh, op, targets = tiny_instance
    state = start_state(mesh, op, targets, 3)
    for k in range(3):
        for region in state.partition.regions:
            candidates = [int(v) for v in region if v not in state.selector]
            scanned = [fitting_distance(op, state.selector.replace(k, v), targets) for v in candidates]
            vertex, after = find_vertex(state, k, region, op, targets)

            if candidates and min(scanned) < state.d_min:
                assert vertex == candidates[int(np.argmin(scanned))]
                assert after.d_min == pytest.approx(min(scanned), rel=1e-14)
            else:
                assert vertex == int(state.selector.indices[k])
                assert after.d_min == state.d_min


def hinge_split_state(mesh, op, targets, seed) -> SearchState:
    """
    Controls pin the fixed arm (corners of cell layers 0 and 2); the last
    one is a redundant end-face vertex. Region 0 is the fixed arm, region 1
    starts at the hinge plane (layer 3) and holds the rotating arm.
    """
    layer = np.arange(mesh.n_vertices) // 9
    labels = (layer >= 3).astype(np.int64)
    partition = Partition(
        seeds=np.array([1, 27]),
        labels=labels,
        regions=(np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)),
    )
    selector = Selector([0, 2, 6, 8, 18, 20, 24, 26, 1], mesh.n_vertices)
    return SearchState(
        selector=selector,
        d_min=fitting_distance(op, selector, targets),
        partition=partition,
        rng=np.random.default_rng(seed),
        eval_count=1,
    )


def test_find_region_prefers_hinge_region(bar, bar_op, hinge_targets):
    hinge_vertex = 3 * 9 + 4
    assert bar.positions[hinge_vertex, 0] == pytest.approx(default_hinge(bar).point[0], abs=1e-12)

    picked = []
    for seed in range(20):
        state = hinge_split_state(bar, bar_op, hinge_targets, seed)
        region, _ = find_region(state, 8, bar_op, hinge_targets)
        picked.append(region == state.partition.region_of(hinge_vertex))
    assert sum(picked) > 10


# =============================================================================
# SEARCH
# =============================================================================

def test_optimize_improves_on_fps(bar, bar_op, hinge_targets):
    updates = []

    def on_update(k, state):
        updates.append((k, state.d_min, fitting_distance(bar_op, state.selector, hinge_targets)))

    cfg = SearchConfig(k=4, seed=7, passes=2)
    report = optimize(bar, bar_op, hinge_targets, cfg, on_update=on_update)

    assert report.mean_distance <= report.initial_fps_distance
    assert len(set(report.control_points)) == 4
    assert report.passes_run == 2
    assert len(report.pass_distances) == 2
    assert report.pass_distances[1] <= report.pass_distances[0]
    assert report.pass_distances[-1] == report.mean_distance

    assert len(updates) == 8
    distances = [d for _, d, _ in updates]
    assert all(b <= a for a, b in zip(distances, distances[1:]))
    assert all(d == recomputed for _, d, recomputed in updates)


def test_optimize_eval_budget(bar, bar_op, hinge_targets):
    k = 4
    report = optimize(bar, bar_op, hinge_targets, SearchConfig(k=k, seed=1, passes=1))
    partition = partition_by_proximity(bar, surface_geodesic_fps(bar, k))
    largest = max(len(region) for region in partition.regions)
    assert report.eval_count - 1 <= k * k + k * largest


def test_optimize_counts_every_evaluation(bar, bar_op, hinge_targets):
    seen = []
    report = optimize(
        bar, bar_op, hinge_targets, SearchConfig(k=3, seed=2),
        on_evaluation=lambda indices, distance: seen.append((tuple(indices), distance)),
    )
    assert len(seen) == report.eval_count
    assert seen[0][1] == report.initial_fps_distance
    assert min(distance for _, distance in seen) == report.mean_distance


def test_optimize_deterministic_across_threads(bar, bar_op, hinge_targets):
    cfg = SearchConfig(k=4, seed=11)
    serial = optimize(bar, bar_op, hinge_targets, cfg, threads=1)
    parallel = optimize(bar, bar_op, hinge_targets, cfg, threads=4)
    again = optimize(bar, bar_op, hinge_targets, cfg, threads=1)
    for other in (parallel, again):
        assert other.control_points == serial.control_points
        assert other.mean_distance == serial.mean_distance
        assert other.eval_count == serial.eval_count


def test_fps_baseline_matches_search_start(bar, bar_op, hinge_targets):
    baseline = fps_baseline(bar, bar_op, hinge_targets, 5)
    report = optimize(bar, bar_op, hinge_targets, SearchConfig(k=5))
    assert baseline.mean_distance == report.initial_fps_distance
    assert baseline.control_points == surface_geodesic_fps(bar, 5).tolist()
    assert baseline.eval_count == 1


def test_random_search_nested_seeds(bar_op, hinge_targets):
    one = random_search(bar_op, hinge_targets, 4, 1, seed=5)
    many = random_search(bar_op, hinge_targets, 4, 100, seed=5)
    assert many.mean_distance <= one.mean_distance
    assert many.eval_count == 100
    assert many.initial_fps_distance is None
    assert many.method == "random"


def test_exhaustive_is_global_optimum(tiny_instance):
    mesh, op, targets = tiny_instance
    best, distance = exhaustive_search(op, targets, 2)
    assert math.comb(mesh.n_vertices, 2) <= 10 ** 6
    assert distance == fitting_distance(op, best, targets)

    sampled = random_search(op, targets, 2, 50, seed=0)
    assert distance <= sampled.mean_distance * (1 + 1e-12)
    searched = optimize(mesh, op, targets, SearchConfig(k=2, seed=0))
    assert distance <= searched.mean_distance * (1 + 1e-12)


def test_exhaustive_guard(tiny_instance):
    _, op, targets = tiny_instance
    with pytest.raises(ConfigError, match="exceeds"):
        exhaustive_search(op, targets, 2, limit=10)


def test_search_input_validation(bar, bar_op, hinge_targets):
    with pytest.raises(ConfigError):
        optimize(bar, bar_op, hinge_targets, SearchConfig(k=bar.n_vertices))
    with pytest.raises(ConfigError):
        random_search(bar_op, hinge_targets, 3, 0, seed=0)
    with pytest.raises(ValidationError):
        SearchConfig(k=0)
    with pytest.raises(ValidationError):
        SearchConfig(k=3, passes=0)


def test_report_validation():
    with pytest.raises(ValidationError):
        FitReport(control_points=[1, 2], k=3, mean_distance=0.1, per_target=[0.1], eval_count=1)
    with pytest.raises(ValidationError):
        FitReport(control_points=[1], k=1, mean_distance=0.2, per_target=[0.2], initial_fps_distance=0.1, eval_count=1)


def test_report_json_keys(bar, bar_op, hinge_targets):
    report = fps_baseline(bar, bar_op, hinge_targets, 3)
    data = report.model_dump(by_alias=True)
    assert set(data) == {
        "control_points", "k", "mean_fit_distance", "per_target", "initial_fps_distance",
        "evals", "passes", "seed", "timings_ms", "config_hash",
    }
