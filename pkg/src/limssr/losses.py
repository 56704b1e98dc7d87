"""Training objective: task MSE, dual-path consistency, fusion-token diversity."""

from dataclasses import dataclass

import numpy as np

from .numerics.tensor import (
    Tensor,
    add,
    amax,
    amin,
    div,
    matmul,
    mean,
    mul,
    relu,
    sqrt,
    sub,
    swapaxes,
    tsum,
)

# Norm floor for cosine similarity: ||h|| is taken as sqrt(|h|^2 + eps^2), so an
# all-zero fusion row gives similarity 0 and a finite gradient.
COSINE_EPS = 1e-12


@dataclass
class LossWeights:
    task: float = 10.0
    con: float = 1.0
    reg: float = 1.0
    margin: float = 1.0

    def __post_init__(self):
        for name in ("task", "con", "reg", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def _check_pair(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        raise ValueError(f"{op}: empty batch")


def task_loss(y_hat, y):
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=y_hat.dtype))
    _check_pair("task_loss", y_hat, y)
    d = sub(y_hat, y)
    return mean(mul(d, d))


def consistency_loss(y_main, y_aux):
    _check_pair("consistency_loss", y_main, y_aux)
    d = sub(y_main, y_aux)
    return mean(mul(d, d))


def cosine_matrix(H):
    """Pairwise cosine similarities of the rows of ``H`` ((K, D) or (B, K, D))."""
    norms = sqrt(add(tsum(mul(H, H), axis=-1, keepdims=True), COSINE_EPS**2))
    U = div(H, norms)
    return matmul(U, swapaxes(U, -1, -2))


def metric_reg(H_fusion, margin=1.0):
    """Sum over tokens of [max_{j!=i} sim - min_{j!=i} sim + margin]_+.

    For a batch (B, K, D) the per-sample values are averaged.
    """
    K = H_fusion.shape[-2]
    if K < 2:
        raise ValueError(f"metric_reg needs at least 2 fusion tokens, got {K}")
    S = cosine_matrix(H_fusion)
    # push the diagonal out of reach of max / min
    eye = np.eye(K, dtype=H_fusion.dtype)
    hi = amax(add(S, Tensor(eye * -4.0)), axis=-1)
    lo = amin(add(S, Tensor(eye * 4.0)), axis=-1)
    per_token = relu(add(sub(hi, lo), margin))
    per_sample = tsum(per_token, axis=-1)
    return mean(per_sample) if per_sample.ndim else per_sample


def total_loss(y_hat, y_main, y_aux, y, H_fusion, weights, use_consistency=True, use_metric_reg=True):
    """Weighted objective plus a dict of the individual (float) components."""
    parts = {"task": task_loss(y_hat, y)}
    if use_consistency:
        parts["con"] = consistency_loss(y_main, y_aux)
    if use_metric_reg and H_fusion is not None:
        parts["reg"] = metric_reg(H_fusion, weights.margin)
    total = mul(parts["task"], weights.task)
    if "con" in parts:
        total = add(total, mul(parts["con"], weights.con))
    if "reg" in parts:
        total = add(total, mul(parts["reg"], weights.reg))
    comps = {k: float(parts[k].data) if k in parts else 0.0 for k in ("task", "con", "reg")}
    comps["total"] = float(total.data)
    return total, comps
