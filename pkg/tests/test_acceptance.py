"""End-to-end scenarios on larger bars. Run with `pytest -m slow`."""
import statistics
import time

import numpy as np
import pytest

from optctrl.data import bar_mesh, bar_with_vertices, default_hinge
from optctrl.schemas import SearchConfig
from optctrl.services.biharmonic import (
    Selector,
    deform,
    deform_fast,
    deform_shaved,
    kkt_solve,
    weights_fast,
    weights_naive,
)
from optctrl.services.mesh import (
    generate_bend_targets,
    normalize_unit_sphere,
    partition_by_proximity,
    surface_geodesic_fps,
)
from optctrl.services.operators import assemble_bilaplacian, bilaplacian_matrix, shave
from optctrl.services.search import (
    exhaustive_search,
    fitting_distance,
    fitting_distance_naive,
    fps_baseline,
    optimize,
    random_search,
)

pytestmark = pytest.mark.slow

SEEDS = range(5)


@pytest.fixture(scope="module")
def hinge_bar():
    """Bar with ~1500 vertices and 50 hinge bends."""
    mesh = normalize_unit_sphere(bar_with_vertices(1500))
    op = assemble_bilaplacian(mesh)
    targets = generate_bend_targets(mesh, 50, 0, default_hinge(mesh))
    return mesh, op, targets


# =============================================================================
# NUMERICS
# =============================================================================

@pytest.mark.parametrize("k", [4, 8, 16])
def test_fast_matches_naive_medium(medium_op, k):
    rng = np.random.default_rng(k)
    for _ in range(20):
        selector = Selector(rng.choice(medium_op.n, size=k, replace=False), medium_op.n)
        np.testing.assert_allclose(
            weights_fast(medium_op, selector).W,
            weights_naive(medium_op.A_eps, selector).W,
            atol=1e-8,
        )


def test_exact_paths_agree_medium(medium_bar):
    bilaplacian, _, _ = bilaplacian_matrix(medium_bar)
    rng = np.random.default_rng(3)
    n = medium_bar.n_vertices
    for k in (4, 12):
        selector = Selector(rng.choice(n, size=k, replace=False), n)
        controls = rng.normal(size=(k, 3))
        reference = kkt_solve(bilaplacian, selector, controls)
        shaved = shave(bilaplacian, int(selector.indices[0]))
        np.testing.assert_allclose(deform_shaved(shaved, selector, controls), reference, atol=1e-8)
        np.testing.assert_allclose(deform(weights_naive(bilaplacian, selector), controls), reference, atol=1e-8)


# =============================================================================
# SEARCH
# =============================================================================

def test_two_pass_search_on_hinge_bar(hinge_bar):
    mesh, op, targets = hinge_bar
    k = 8
    distances, counts = [], []

    def on_update(_, state):
        distances.append(state.d_min)
        counts.append(state.eval_count)

    report = optimize(mesh, op, targets, SearchConfig(k=k, seed=0, passes=2), on_update=on_update)

    partition = partition_by_proximity(mesh, surface_geodesic_fps(mesh, k))
    largest = max(len(region) for region in partition.regions)
    first_pass = counts[k - 1] - 1
    second_pass = counts[2 * k - 1] - counts[k - 1]
    assert first_pass <= k * k + k * largest
    assert second_pass <= k * k + k * largest
    assert counts[-1] == report.eval_count

    assert all(b <= a for a, b in zip(distances, distances[1:]))
    assert report.pass_distances[1] <= report.pass_distances[0]
    assert report.mean_distance <= report.initial_fps_distance
    assert report.mean_distance == fitting_distance(op, Selector(report.control_points, mesh.n_vertices), targets)


def test_quality_ordering(hinge_bar):
    mesh, op, targets = hinge_bar
    k = 8
    fps = fps_baseline(mesh, op, targets, k).mean_distance

    searched, sampled = [], []
    for seed in SEEDS:
        report = optimize(mesh, op, targets, SearchConfig(k=k, seed=seed))
        assert report.mean_distance <= fps
        searched.append(report.mean_distance)
        sampled.append(random_search(op, targets, k, mesh.n_vertices * k, seed).mean_distance)

    assert statistics.median(searched) <= statistics.median(sampled)


def test_near_optimal_on_tiny_instance(record_property):
    mesh = normalize_unit_sphere(bar_mesh(3, 2, 1))
    op = assemble_bilaplacian(mesh)
    targets = generate_bend_targets(mesh, 8, 2, default_hinge(mesh))

    _, optimum = exhaustive_search(op, targets, 2)
    best = min(optimize(mesh, op, targets, SearchConfig(k=2, seed=seed)).mean_distance for seed in range(3))
    record_property("optimality_ratio", best / optimum)
    assert best <= 1.1 * optimum


def _best_wall_time(fn, repeats=3) -> float:
    times = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        times.append(time.perf_counter() - started)
    return min(times)


def test_speedup_at_desk_scale(record_property):
    mesh = normalize_unit_sphere(bar_with_vertices(3000))
    op = assemble_bilaplacian(mesh)
    targets = generate_bend_targets(mesh, 20, 0, default_hinge(mesh))
    k = 16
    n = mesh.n_vertices
    selector = Selector(surface_geodesic_fps(mesh, k), n)
    regularized = op.A_eps

    naive = _best_wall_time(lambda: fitting_distance_naive(regularized, selector, targets))
    fast = _best_wall_time(lambda: fitting_distance(op, selector, targets))
    record_property("eval_ratio", naive / fast)
    assert naive / fast >= 10

    started = time.perf_counter()
    optimize(mesh, op, targets, SearchConfig(k=k, seed=0))
    search_time = time.perf_counter() - started
    started = time.perf_counter()
    random_search(op, targets, k, n * k, 0)
    random_time = time.perf_counter() - started
    record_property("search_seconds", search_time)
    record_property("random_seconds", random_time)
    assert search_time < random_time


def test_selection_specializes_to_motion():
    mesh = normalize_unit_sphere(bar_with_vertices(400))
    op = assemble_bilaplacian(mesh)
    near = generate_bend_targets(mesh, 20, 0, default_hinge(mesh, 0.3))
    far = generate_bend_targets(mesh, 20, 1, default_hinge(mesh, 0.7))
    both = near.concat(far)
    k = 6
    n = mesh.n_vertices

    def fitted(targets):
        return Selector(optimize(mesh, op, targets, SearchConfig(k=k, seed=0)).control_points, n)

    for_near, for_far, for_both = fitted(near), fitted(far), fitted(both)

    own_near = fitting_distance(op, for_near, near)
    own_far = fitting_distance(op, for_far, far)
    assert fitting_distance(op, for_far, near) >= own_near
    assert fitting_distance(op, for_near, far) >= own_far
    assert own_near <= fitting_distance(op, for_both, near)
    assert own_far <= fitting_distance(op, for_both, far)


def test_deform_fast_beats_materialized_weights(record_property):
    mesh = normalize_unit_sphere(bar_with_vertices(3000))
    op = assemble_bilaplacian(mesh)
    n = mesh.n_vertices
    selector = Selector(surface_geodesic_fps(mesh, 16), n)
    controls = np.random.default_rng(0).normal(size=(16, 3))

    np.testing.assert_allclose(
        deform_fast(op, selector, controls), deform(weights_fast(op, selector), controls), atol=1e-8
    )
    direct = _best_wall_time(lambda: deform_fast(op, selector, controls), repeats=7)
    materialized = _best_wall_time(lambda: deform(weights_fast(op, selector), controls), repeats=7)
    record_property("deform_ratio", materialized / direct)
    assert direct < materialized
