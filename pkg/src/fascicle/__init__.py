"""Stochastic homogenization toolkit for bundles of randomly packed axons.

The package is organized around the pipeline

    random disk geometry  ->  density / Palm statistics  ->  nonlinear
    effective conductivity (cell problem)  ->  macroscopic multidomain
    solver with FitzHugh-Nagumo membrane dynamics,

plus a desk-scale microscopic verifier that checks the homogenized
energies against direct solves on resolved geometries.
"""

__version__ = "0.1.0"
