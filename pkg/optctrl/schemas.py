"""
Pydantic Schemas
================

Validated configuration and report records.
Run configs come from flags (or a TOML file); reports are written as JSON
with a stable key set.
"""
import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

DistanceKind = Literal["mean_norm", "mean_squared_norm"]
Method = Literal["optctrl", "fps", "random", "exhaustive"]

# CLI spelling -> internal distance kind
DISTANCE_FLAGS = {"mean-norm": "mean_norm", "mean-squared": "mean_squared_norm"}


class SearchConfig(BaseModel):
    """Parameters of one control point search."""
    model_config = ConfigDict(frozen=True)

    k: int = Field(..., ge=1)
    epsilon: Optional[float] = Field(None, gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    passes: int = Field(default=1, ge=1)
    distance_kind: DistanceKind = "mean_norm"


class FitReport(BaseModel):
    """
    Outcome of one search: the chosen control points and their distances.

    Serialized keys are stable: control_points, k, mean_fit_distance,
    per_target, initial_fps_distance, evals, passes, seed, timings_ms,
    config_hash.
    """
    model_config = ConfigDict(populate_by_name=True)

    control_points: List[int]
    k: int
    mean_distance: float = Field(..., alias="mean_fit_distance")
    per_target: List[float]
    initial_fps_distance: Optional[float] = None
    eval_count: int = Field(..., ge=0, alias="evals")
    passes_run: int = Field(default=0, ge=0, alias="passes")
    seed: Optional[int] = None
    timings: Dict[str, float] = Field(default_factory=dict, alias="timings_ms")
    config_hash: str = ""

    # In-memory only
    method: Method = Field(default="optctrl", exclude=True)
    pass_distances: List[float] = Field(default_factory=list, exclude=True)

    @model_validator(mode="after")
    def check_distances(self) -> "FitReport":
        if len(self.control_points) != self.k:
            raise ValueError(f"{len(self.control_points)} control points for k={self.k}")
        if self.per_target:
            mean = sum(self.per_target) / len(self.per_target)
            if abs(mean - self.mean_distance) > 1e-12 * max(1.0, abs(mean)):
                raise ValueError("mean_fit_distance disagrees with per_target")
        if self.initial_fps_distance is not None and self.mean_distance > self.initial_fps_distance:
            raise ValueError("search ended above its FPS starting distance")
        return self

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2) + "\n"


class RunConfig(BaseModel):
    """Merged view of a CLI run: config file values overridden by flags."""
    model_config = ConfigDict(frozen=True)

    template: Path
    targets: Path
    out: Path
    k: int = Field(..., ge=1)
    epsilon: Optional[float] = Field(None, gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    passes: int = Field(default=1, ge=1)
    distance: DistanceKind = "mean_norm"
    method: Method = "optctrl"
    trials: Optional[int] = Field(None, ge=1)
    cache_dir: Optional[Path] = None
    normalize: bool = True
    no_timings: bool = False

    @model_validator(mode="after")
    def check_paths(self) -> "RunConfig":
        if not self.template.is_file():
            raise ValueError(f"template not found: {self.template}")
        if not self.targets.is_dir():
            raise ValueError(f"targets directory not found: {self.targets}")
        return self

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            k=self.k,
            epsilon=self.epsilon,
            seed=self.seed,
            passes=self.passes,
            distance_kind=self.distance,
        )

    def config_hash(self, *content_hashes: str) -> str:
        """sha256 over the run parameters and input content (paths excluded)."""
        payload = self.model_dump(mode="json", exclude={"template", "targets", "out", "cache_dir", "no_timings"})
        payload["inputs"] = list(content_hashes)
        encoded = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(encoded).hexdigest()


class BenchReport(BaseModel):
    """Timings of one benchmark run."""
    n: int
    k: int
    m: int
    repeats: int
    precompute_ms: float
    naive_eval_ms: float
    fast_eval_ms: float
    eval_ratio: float
    random_trials: Optional[int] = None
    optimize_ms: Optional[float] = None
    random_ms: Optional[float] = None
    optimize_distance: Optional[float] = None
    random_distance: Optional[float] = None
    optimize_evals: Optional[int] = None
