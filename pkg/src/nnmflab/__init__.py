"""nnmflab: neighborhood-coupled matrix factorization laboratory.

A small research library for implicit-feedback recommenders where each
user/item embedding is a similarity-weighted combination of neighbor rows,
plus the experiment harness (baselines, accuracy, multi-seed stability)
needed to study it.
"""

__version__ = "0.1.0"
