"""
Optimize and Baseline Commands
==============================

Load template and targets, assemble (or load) the operator, run one search
method and write its FitReport.
"""
import logging
import math
import time
from typing import Optional

from optctrl.cache import cached_bilaplacian
from optctrl.config import get_settings
from optctrl.formats import load_mesh, read_targets_dir, write_report
from optctrl.schemas import FitReport, RunConfig
from optctrl.services.mesh import TargetSet, TetMesh
from optctrl.services.operators import BilaplacianOperator
from optctrl.services.search import (
    exhaustive_search,
    fps_baseline,
    optimize,
    per_target_distances,
    random_search,
)

logger = logging.getLogger(__name__)


def _run_method(
    cfg: RunConfig,
    mesh: TetMesh,
    op: BilaplacianOperator,
    targets: TargetSet,
    threads: Optional[int],
) -> FitReport:
    search = cfg.search_config()

    if cfg.method == "optctrl":
        return optimize(mesh, op, targets, search, threads=threads)

    if cfg.method == "fps":
        return fps_baseline(mesh, op, targets, cfg.k, cfg.distance)

    if cfg.method == "random":
        trials = cfg.trials if cfg.trials is not None else mesh.n_vertices * cfg.k
        return random_search(op, targets, cfg.k, trials, cfg.seed, kind=cfg.distance, threads=threads)

    started = time.perf_counter()
    selector, distance = exhaustive_search(op, targets, cfg.k, kind=cfg.distance, threads=threads)
    return FitReport(
        method="exhaustive",
        control_points=selector.indices.tolist(),
        k=cfg.k,
        mean_distance=distance,
        per_target=per_target_distances(op, selector, targets, cfg.distance).tolist(),
        eval_count=math.comb(op.n, cfg.k),
        passes_run=0,
        timings={"search": (time.perf_counter() - started) * 1000.0},
    )


def run_search(cfg: RunConfig, threads: Optional[int] = None) -> FitReport:
    """Everything `optimize` and `baseline` do except writing the report."""
    settings = get_settings()
    started = time.perf_counter()
    mesh = load_mesh(cfg.template, normalize=cfg.normalize)
    targets = read_targets_dir(cfg.targets, mesh.n_vertices)
    loaded = time.perf_counter()

    op = cached_bilaplacian(mesh, cfg.epsilon, cfg.cache_dir or settings.cache_dir)
    assembled = time.perf_counter()

    report = _run_method(cfg, mesh, op, targets, threads)
    timings = {
        "load": (loaded - started) * 1000.0,
        "precompute": (assembled - loaded) * 1000.0,
        "search": report.timings.get("search", (time.perf_counter() - assembled) * 1000.0),
    }
    if cfg.no_timings:
        timings = {name: 0.0 for name in timings}

    logger.info(
        "%s: K=%d, distance %.6g after %d evaluations",
        cfg.method, cfg.k, report.mean_distance, report.eval_count,
    )
    return report.model_copy(update={
        "seed": cfg.seed,
        "timings": timings,
        "config_hash": cfg.config_hash(mesh.content_hash(), targets.content_hash()),
    })


def cmd_optimize(cfg: RunConfig, threads: Optional[int] = None) -> FitReport:
    report = run_search(cfg, threads)
    write_report(report, cfg.out)
    return report
