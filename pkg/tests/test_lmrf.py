import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from limssr.lmrf import RoleWeights, aggregate
from limssr.numerics.tensor import ShapeError, Tensor


def test_uniform_roles_give_mean(rng):
    H = rng.normal(size=(4, 6))
    z = aggregate(Tensor(H), Tensor(np.zeros(4))).data
    assert np.allclose(z, H.mean(0), atol=1e-14)


def test_single_token_exact(rng):
    H = rng.normal(size=(1, 6))
    assert np.array_equal(aggregate(Tensor(H), Tensor(np.array([2.3]))).data, H[0])


def test_peaked_roles_oracle(rng):
    H = rng.normal(size=(4, 5))
    w1 = math.exp(10) / (math.exp(10) + 3)
    w0 = 1 / (math.exp(10) + 3)
    want = [w1 * H[0, d] + w0 * (H[1, d] + H[2, d] + H[3, d]) for d in range(5)]
    z = aggregate(Tensor(H), Tensor(np.array([10.0, 0, 0, 0]))).data
    assert np.allclose(z, want, atol=1e-12, rtol=0)


def test_batched(rng):
    H = rng.normal(size=(3, 4, 5))
    w = rng.normal(size=4)
    z = aggregate(Tensor(H), Tensor(w)).data
    assert z.shape == (3, 5)
    for b in range(3):
        assert np.allclose(z[b], aggregate(Tensor(H[b]), Tensor(w)).data, atol=1e-14)


def test_k_mismatch():
    with pytest.raises(ShapeError):
        aggregate(Tensor(np.zeros((3, 2))), Tensor(np.zeros(4)))


def test_role_weights_module():
    r = RoleWeights(4)
    w = r.weights().data
    assert np.allclose(w, 0.25) and abs(w.sum() - 1) < 1e-12


@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, 4, elements=st.floats(-20, 20)),
       st.floats(-50, 50))
def test_convex_hull_and_shift(H, w, c):
    z = aggregate(Tensor(H), Tensor(w)).data
    assert np.all(z >= H.min(0) - 1e-9) and np.all(z <= H.max(0) + 1e-9)
    z2 = aggregate(Tensor(H), Tensor(w + c)).data
    assert np.allclose(z, z2, atol=1e-12 * max(1.0, np.abs(H).max()), rtol=0)
