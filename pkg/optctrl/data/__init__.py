"""Synthetic fixtures: templates and hinge targets used by tests, bench and docs."""
from optctrl.data.fixtures import bar_mesh, bar_with_vertices, default_hinge
