"""Parameters, modules and a few stock layers."""

from collections import OrderedDict

import numpy as np

from .tensor import Tensor, gelu, layer_norm, linear

# Parameter groups used for the trainable partition and weight decay.
BASE = "base"
ADAPTER = "adapter"
EMBEDDING = "embedding"
HEAD = "head"
AUX = "aux"
GROUPS = (BASE, ADAPTER, EMBEDDING, HEAD, AUX)


class Parameter(Tensor):
    __slots__ = ("group", "decay")

    def __init__(self, data, group=AUX, decay=None, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        self.group = group
        # decoupled weight decay only for dense matrices by default
        self.decay = (self.data.ndim >= 2 and group != EMBEDDING) if decay is None else decay


class Module:
    """Minimal container: parameters/buffers discovered in attribute order."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict) and not key.startswith("_"):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{k}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self, prefix=""):
        """Non-trainable state (e.g. running statistics) as {name: ndarray}."""
        out = OrderedDict()
        for key, val in getattr(self, "_buffers", {}).items():
            out[f"{prefix}{key}"] = val
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                out.update(val.named_buffers(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{name}.{i}."))
            elif isinstance(val, dict) and not key.startswith("_"):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{name}.{k}."))
        return out

    def set_buffer(self, dotted, value):
        head, _, rest = dotted.partition(".")
        if not rest:
            self._buffers[head][...] = value
            return
        child = getattr(self, head, None)
        if isinstance(child, Module):
            child.set_buffer(rest, value)
            return
        idx, _, rest2 = rest.partition(".")
        container = getattr(self, head)
        item = container[int(idx)] if isinstance(container, (list, tuple)) else container[idx]
        item.set_buffer(rest2, value)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def init_matrix(rng, fan_in, fan_out, dtype, scale=None):
    std = (1.0 / fan_in) ** 0.5 if scale is None else scale
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, group=AUX, dtype=np.float64, bias=True):
        self.weight = Parameter(init_matrix(rng, d_in, d_out, dtype), group=group)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), group=group) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, group=AUX, dtype=np.float64, eps=1e-5):
        self.gamma = Parameter(np.ones(d, dtype=dtype), group=group)
        self.beta = Parameter(np.zeros(d, dtype=dtype), group=group)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two fully connected layers with a GELU in between."""

    def __init__(self, rng, d_in, d_hidden, d_out, group=AUX, dtype=np.float64):
        self.fc1 = Linear(rng, d_in, d_hidden, group=group, dtype=dtype)
        self.fc2 = Linear(rng, d_hidden, d_out, group=group, dtype=dtype)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))
