"""Permutation-keyed watermarks for Transformer backbones.

The package implements a small numpy Transformer with reverse-mode autodiff,
head-constrained feature permutations, two watermark schemes keyed by a
secret permutation (classification-style ``B`` and secret-vector ``S``), a
prefix-trigger baseline, and the attacks used to stress them.
"""

__version__ = "0.1.0"
