"""
Bench Command
=============

Timing comparison on a bar fixture or a given template:

    - one fitting-distance evaluation via the naive path (sparse solve of
      the free block) against the fast path (K x K system on the
      precomputed inverse), precompute reported separately
    - full search against best-of-random at an equal-or-larger budget
"""
import logging
import time
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader

from optctrl.commands.targets import load_bar
from optctrl.config import get_settings
from optctrl.data import default_hinge
from optctrl.exceptions import ConfigError
from optctrl.formats import atomic_write_text, load_mesh
from optctrl.schemas import BenchReport, SearchConfig
from optctrl.services.biharmonic import Selector
from optctrl.services.mesh import generate_bend_targets, normalize_unit_sphere
from optctrl.services.operators import assemble_bilaplacian
from optctrl.services.search import fitting_distance, fitting_distance_naive, optimize, random_search

logger = logging.getLogger(__name__)


def _milliseconds(started: float) -> float:
    return (time.perf_counter() - started) * 1000.0


def render_bench(report: BenchReport) -> str:
    """Plain-text table for the terminal."""
    env = Environment(
        loader=FileSystemLoader(str(get_settings().templates_dir)),
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    return env.get_template("bench.txt.j2").render(report=report)


def cmd_bench(
    bar: Optional[Sequence[int]] = (24, 4, 4),
    k: int = 8,
    m: int = 20,
    repeats: int = 5,
    seed: int = 0,
    *,
    random_trials: Optional[int] = None,
    skip_search: bool = False,
    threads: Optional[int] = None,
    template: Optional[Path] = None,
    out: Optional[Path] = None,
) -> Tuple[BenchReport, str]:
    """
    Run the timings; returns the report and its rendered table (also written as JSON to `out`).

    The instance is the bar fixture, or `template` when given.
    """
    for name, value in (("k", k), ("m", m), ("repeats", repeats)):
        if value < 1:
            raise ConfigError(f"--{name} must be >= 1, got {value}")
    if random_trials is not None and random_trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {random_trials}")

    if template is not None:
        mesh = load_mesh(template)
    elif bar is not None:
        mesh = normalize_unit_sphere(load_bar(bar))
    else:
        raise ConfigError("bench needs --bar or --template")
    if k > len(mesh.surface_vertices):
        raise ConfigError(f"--k {k} exceeds the {len(mesh.surface_vertices)} surface vertices")

    targets = generate_bend_targets(mesh, m, seed, default_hinge(mesh))
    n = mesh.n_vertices
    logger.info("Bench instance: N=%d, K=%d, M=%d", n, k, m)

    started = time.perf_counter()
    op = assemble_bilaplacian(mesh)
    precompute_ms = _milliseconds(started)

    rng = np.random.default_rng(seed)
    selectors = [Selector(rng.choice(n, size=k, replace=False), n) for _ in range(repeats)]
    regularized = op.A_eps

    started = time.perf_counter()
    for selector in selectors:
        fitting_distance_naive(regularized, selector, targets)
    naive_ms = _milliseconds(started) / repeats

    started = time.perf_counter()
    for selector in selectors:
        fitting_distance(op, selector, targets)
    fast_ms = _milliseconds(started) / repeats

    report = BenchReport(
        n=n,
        k=k,
        m=m,
        repeats=repeats,
        precompute_ms=precompute_ms,
        naive_eval_ms=naive_ms,
        fast_eval_ms=fast_ms,
        eval_ratio=naive_ms / fast_ms if fast_ms > 0 else float("inf"),
    )

    if not skip_search:
        trials = random_trials if random_trials is not None else n * k

        started = time.perf_counter()
        fitted = optimize(mesh, op, targets, SearchConfig(k=k, seed=seed), threads=threads)
        optimize_ms = _milliseconds(started)

        started = time.perf_counter()
        baseline = random_search(op, targets, k, trials, seed, threads=threads)
        random_ms = _milliseconds(started)

        report = report.model_copy(update={
            "random_trials": trials,
            "optimize_ms": optimize_ms,
            "random_ms": random_ms,
            "optimize_distance": fitted.mean_distance,
            "random_distance": baseline.mean_distance,
            "optimize_evals": fitted.eval_count,
        })

    if out is not None:
        atomic_write_text(out, report.model_dump_json(indent=2) + "\n")
        logger.info("Wrote bench report to %s", out)
    return report, render_bench(report)
