"""Per-modality projection of raw segment features into the model width."""

import numpy as np

from .numerics import nn
from .numerics.nn import AUX, Module, Parameter
from .numerics.tensor import ShapeError, Tensor, add, batch_norm, dropout, mul, relu, reshape

MODALITIES = ("v", "f", "a")


class ProjectionBlock(Module):
    """Position-wise Linear -> BatchNorm -> ReLU -> Dropout -> Linear.

    Both linear maps act on each time step independently (a 1x1 conv over
    time).  Batch-norm statistics pool the batch and time axes.  With
    ``plain=True`` the norm, activation and dropout are skipped; together
    with :meth:`set_identity` this gives an exact pass-through for tests.
    """

    def __init__(self, rng, d_in, d_model, dropout_rate=0.15, momentum=0.1, eps=1e-5, plain=False, dtype=np.float64):
        self.d_in = d_in
        self.fc1 = nn.Linear(rng, d_in, d_model, group=AUX, dtype=dtype)
        self.fc2 = nn.Linear(rng, d_model, d_model, group=AUX, dtype=dtype)
        self.plain = plain
        self.bn_gamma = Parameter(np.ones(d_model, dtype=dtype), group=AUX)
        self.bn_beta = Parameter(np.zeros(d_model, dtype=dtype), group=AUX)
        self._buffers = {
            "running_mean": np.zeros(d_model, dtype=dtype),
            "running_var": np.ones(d_model, dtype=dtype),
        }
        self.momentum = momentum
        self.eps = eps
        self.dropout_rate = dropout_rate

    def set_identity(self):
        if self.fc1.weight.shape[0] != self.fc1.weight.shape[1]:
            raise ShapeError("set_identity needs d_in == d_model")
        for lin in (self.fc1, self.fc2):
            lin.weight.data[...] = np.eye(lin.weight.shape[0], dtype=lin.weight.dtype)
            lin.bias.data[...] = 0.0

    def __call__(self, x, train=False, rng=None):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"projection: expected feature width {self.d_in}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        h = self.fc1(reshape(x, (-1, self.d_in)))
        if not self.plain:
            h = self._norm(h, train)
            h = relu(h)
            h = dropout(h, self.dropout_rate, train, rng)
        h = self.fc2(h)
        return reshape(h, lead + (h.shape[-1],))

    def _norm(self, h, train):
        buf = self._buffers
        if train:
            out, mu, var = batch_norm(h, self.bn_gamma, self.bn_beta, self.eps)
            n = h.shape[0]
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = self.momentum
            buf["running_mean"][...] = (1 - m) * buf["running_mean"] + m * mu
            buf["running_var"][...] = (1 - m) * buf["running_var"] + m * unbiased
            return out
        scale = Tensor(1.0 / np.sqrt(buf["running_var"] + self.eps))
        centred = add(h, Tensor(-buf["running_mean"]))
        return add(mul(mul(centred, scale), self.bn_gamma), self.bn_beta)


class Projection(Module):
    """One :class:`ProjectionBlock` per modality in canonical order (v, f, a)."""

    def __init__(self, rng, dims, d_model, dropout_rate=0.15, plain=False, dtype=np.float64):
        missing = [m for m in MODALITIES if m not in dims]
        if missing:
            raise ValueError(f"projection: no feature width given for modalities {missing}")
        self.blocks = {
            m: ProjectionBlock(rng, dims[m], d_model, dropout_rate=dropout_rate, plain=plain, dtype=dtype)
            for m in MODALITIES
        }

    def project(self, x, modality, train=False, rng=None):
        if modality not in self.blocks:
            raise KeyError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        return self.blocks[modality](x if isinstance(x, Tensor) else Tensor(x), train, rng)
