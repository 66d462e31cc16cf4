"""
Target Generation Command
=========================

Bend a template about a hinge M times and write the results as a target
directory. With `bar`, the template is the bundled bar fixture and is
written next to the targets as template.mesh.
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from optctrl.data import bar_mesh, default_hinge
from optctrl.exceptions import ConfigError
from optctrl.formats import atomic_write_text, load_mesh, write_targets_dir
from optctrl.services.mesh import (
    HingeSpec,
    TetMesh,
    generate_bend_targets,
    normalize_unit_sphere,
    serialize_medit,
)

logger = logging.getLogger(__name__)

TEMPLATE_NAME = "template.mesh"


def load_bar(bar: Sequence[int]) -> TetMesh:
    """Bar fixture from CLI cell counts; bad counts are a usage error."""
    if len(bar) != 3 or min(bar) < 1:
        raise ConfigError(f"--bar needs three cell counts >= 1, got {list(bar)}")
    return bar_mesh(*bar)


def cmd_gen_targets(
    out_dir: Path,
    m: int,
    seed: int,
    *,
    template: Optional[Path] = None,
    bar: Optional[Sequence[int]] = None,
    hinge_position: float = 0.5,
    hinge_point: Optional[Tuple[float, float, float]] = None,
    hinge_normal: Tuple[float, float, float] = (1.0, 0.0, 0.0),
    hinge_axis: Optional[Tuple[float, float, float]] = None,
    falloff: Optional[float] = None,
    angle_range: Tuple[float, float] = (-np.pi / 4, np.pi / 4),
    normalize: bool = True,
) -> List[Path]:
    """
    Write target_0000.xyz ... into `out_dir`.

    Targets are generated in the frame `optimize` will see: the template is
    normalized first unless `normalize` is off. Without an explicit hinge
    point, the hinge is the default bar hinge at `hinge_position` along x.
    """
    if (template is None) == (bar is None):
        raise ConfigError("give exactly one of --template or --bar")

    out_dir = Path(out_dir)
    if bar is not None:
        raw = load_bar(bar)
        atomic_write_text(out_dir / TEMPLATE_NAME, serialize_medit(raw))
        logger.info("Wrote bar template (N=%d) to %s", raw.n_vertices, out_dir / TEMPLATE_NAME)
        mesh = normalize_unit_sphere(raw) if normalize else raw
    else:
        mesh = load_mesh(template, normalize=normalize)

    if hinge_point is None:
        hinge = default_hinge(mesh, hinge_position)
        if hinge_axis is not None or falloff is not None:
            hinge = HingeSpec(point=hinge.point, normal=hinge_normal, axis=hinge_axis or hinge.axis, falloff=falloff)
    else:
        hinge = HingeSpec(point=hinge_point, normal=hinge_normal, axis=hinge_axis, falloff=falloff)

    targets = generate_bend_targets(mesh, m, seed, hinge, angle_range)
    return write_targets_dir(targets, out_dir)
