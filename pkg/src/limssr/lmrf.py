"""Role-weighted aggregation of fusion-token hidden states."""

import numpy as np

from .numerics.nn import HEAD, Module, Parameter
from .numerics.tensor import ShapeError, matmul, reshape, softmax


class RoleWeights(Module):
    """Global length-K logits; ``softmax`` gives each fusion slot's share."""

    def __init__(self, K, dtype=np.float64):
        self.w_role = Parameter(np.zeros(K, dtype=dtype), group=HEAD)

    @property
    def K(self):
        return self.w_role.shape[0]

    def weights(self):
        return softmax(self.w_role, axis=0)

    def __call__(self, H_fusion):
        return aggregate(H_fusion, self.w_role)


def aggregate(H_fusion, w_role):
    """Convex combination of the K fusion rows.

    ``H_fusion`` is (K, D) or (B, K, D); returns (D,) or (B, D).
    """
    K = w_role.shape[0]
    if H_fusion.shape[-2] != K:
        raise ShapeError(f"aggregate: H_fusion has {H_fusion.shape[-2]} rows but w_role has {K} entries")
    w = reshape(softmax(w_role, axis=0), (1, K))
    z = matmul(w, H_fusion)
    return reshape(z, H_fusion.shape[:-2] + (H_fusion.shape[-1],))
