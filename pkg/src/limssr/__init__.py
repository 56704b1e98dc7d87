"""Incomplete multimodal score regression with prompted sequence imputation.

Numpy implementation: a small autodiff engine, a miniature causal
transformer with low-rank adapters, prompted sequence assembly with
placeholder blocks for missing modalities, fusion tokens, a mask-aware
dual-path head, and the evaluation protocol over modality conditions.
"""

__version__ = "0.1.0"
