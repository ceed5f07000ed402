"""
blockspin
=========

Exact and measured checks for multiscale block-spin renormalization on small
periodic lattices: block averaging, Gaussian flows, Green's functions with
random-walk expansions, fluctuation covariances, polymer combinatorics and
the cluster expansion with holes.
"""

__version__ = "0.1.0"
