"""
OptCtrl
=======

Data-driven control point selection for biharmonic deformation of
tetrahedral meshes: precompute the regularized Bilaplacian inverse once,
then search for the K vertices whose deformations best fit a set of
example targets.
"""
__version__ = "1.0.0"
