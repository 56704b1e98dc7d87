"""Mask-aware dual-path aggregation.

Path 1 refines the fused vector with a mask-conditioned gate and residual.
Path 2 runs self-attention over the three pooled modality vectors, gates
each modality row, and mixes rows with availability-dependent weights
``alpha = m + (1 - m) * sigmoid(lambda_m)``.  The two regression heads are
blended by a learnable scalar ``lambda_syn``.
"""

import numpy as np

from .numerics.nn import AUX, HEAD, LayerNorm, Linear, MLP, Module, Parameter
from .numerics.tensor import (
    Tensor,
    add,
    concat,
    dropout,
    gelu,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax,
    sub,
    swapaxes,
    transpose,
    tsum,
)

_MASK_VALUE = -1e30


def _mask_tensor(mask, dtype):
    m = np.asarray(mask, dtype=dtype)
    return Tensor(m)


class ModalAttention(Module):
    """Multi-head self-attention over a handful of rows: no positions, no causal mask."""

    def __init__(self, rng, d, num_heads=4, dtype=np.float64):
        if d % num_heads:
            raise ValueError(f"width {d} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = Linear(rng, d, d, group=AUX, dtype=dtype)
        self.k = Linear(rng, d, d, group=AUX, dtype=dtype)
        self.v = Linear(rng, d, d, group=AUX, dtype=dtype)
        self.o = Linear(rng, d, d, group=AUX, dtype=dtype)

    def __call__(self, x, key_mask=None):
        squeeze = x.ndim == 2
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        b, n, d = x.shape
        h = self.num_heads
        dh = d // h

        def heads(t):
            return transpose(reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
        if key_mask is not None:
            km = np.where(np.asarray(key_mask).reshape(b, 1, 1, n) > 0, 0.0, _MASK_VALUE).astype(x.dtype)
            scores = add(scores, km)
        ctx = reshape(transpose(matmul(softmax(scores, axis=-1), v), (0, 2, 1, 3)), (b, n, d))
        out = self.o(ctx)
        return reshape(out, (n, d)) if squeeze else out


class RegressionHead(Module):
    """FC -> LayerNorm -> GELU -> Dropout -> FC to a scalar."""

    def __init__(self, rng, d, hidden, dropout_rate=0.15, dtype=np.float64):
        self.fc1 = Linear(rng, d, hidden, group=HEAD, dtype=dtype)
        self.ln = LayerNorm(hidden, group=HEAD, dtype=dtype)
        self.fc2 = Linear(rng, hidden, 1, group=HEAD, dtype=dtype)
        self.dropout_rate = dropout_rate

    def __call__(self, z, train=False, rng=None):
        h = dropout(gelu(self.ln(self.fc1(z))), self.dropout_rate, train, rng)
        y = self.fc2(h)
        return reshape(y, y.shape[:-1])


class MDA(Module):
    def __init__(self, rng, d, hidden=None, num_heads=4, dropout_rate=0.15, lambda_m=0.6, lambda_syn=0.7,
                 dtype=np.float64):
        hidden = d if hidden is None else hidden
        n_mod = 3
        # path 1
        self.gate = MLP(rng, d + n_mod, hidden, d, group=AUX, dtype=dtype)
        self.res = MLP(rng, d + n_mod, hidden, d, group=AUX, dtype=dtype)
        # path 2
        self.attn = ModalAttention(rng, d, num_heads, dtype=dtype)
        self.modal_gate = MLP(rng, d, hidden, d, group=AUX, dtype=dtype)
        self.lambda_m = Parameter(np.full(n_mod, lambda_m, dtype=dtype), group=AUX)
        # decoding
        self.lambda_syn = Parameter(np.array(lambda_syn, dtype=dtype), group=HEAD)
        self.head_sem = RegressionHead(rng, d, hidden, dropout_rate, dtype=dtype)
        self.head_dyn = RegressionHead(rng, d, hidden, dropout_rate, dtype=dtype)

    # -- path 1 ------------------------------------------------------------------

    def calibrate(self, z_main, mask, return_gate=False):
        """z_main + g * residual, both conditioned on [z_main, mask]."""
        m = _mask_tensor(mask, z_main.dtype)
        if z_main.ndim == 1:
            m = reshape(m, (3,))
        x = concat([z_main, m], axis=-1)
        g = sigmoid(self.gate(x))
        out = add(z_main, mul(g, self.res(x)))
        return (out, g) if return_gate else out

    # -- path 2 ------------------------------------------------------------------

    def confidences(self):
        """gamma_m = sigmoid(lambda_m)."""
        return sigmoid(self.lambda_m)

    def alpha(self, mask, dtype=np.float64):
        m = _mask_tensor(mask, dtype)
        return add(m, mul(sub(1.0, m), self.confidences()))

    def modal_gates(self, H_stack):
        """Per-row gate logits, softmax-normalised across the modality axis."""
        return softmax(self.modal_gate(H_stack), axis=-2)

    def pattern_recover(self, H_stack, mask, return_parts=False):
        """z_aux = sum_m alpha_m * (z_attn_m * G_m).

        ``H_stack`` is (3, D) or (B, 3, D) in (v, f, a) order.
        """
        z_attn = self.attn(H_stack)
        G = self.modal_gates(H_stack)
        a = self.alpha(mask, H_stack.dtype)
        a = reshape(a, a.shape + (1,))
        parts = mul(a, mul(z_attn, G))
        z_aux = tsum(parts, axis=-2)
        if return_parts:
            return z_aux, {"z_attn": z_attn, "gates": G, "alpha": a, "contributions": parts}
        return z_aux

    # -- decoding ------------------------------------------------------------------

    def decode(self, z_tilde_main, z_aux, train=False, rng=None):
        y_main = self.head_sem(z_tilde_main, train, rng)
        y_aux = self.head_dyn(z_aux, train, rng)
        lam = self.lambda_syn
        y_hat = add(mul(lam, y_main), mul(sub(1.0, lam), y_aux))
        return y_hat, y_main, y_aux
