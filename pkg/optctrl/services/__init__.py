"""Numerical services: mesh, operators, biharmonic weights and control point search."""
