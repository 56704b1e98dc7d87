"""Central-difference gradient verification."""

import numpy as np

from .tensor import no_grad


class NonFiniteLossError(FloatingPointError):
    pass


def relative_error(analytic, numeric):
    """|a - n| / max(1, |n|), elementwise."""
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def grad_check(scalar_fn, params, eps=1e-5, return_details=False, numeric_fns=None):
    """Compare analytic gradients against central differences.

    ``scalar_fn()`` must rebuild the loss from the current parameter values
    and return a scalar Tensor; it has to be deterministic (dropout off).
    Every entry of every tensor in ``params`` is perturbed by ``±eps``.

    ``numeric_fns`` optionally gives, per parameter, a cheaper function for
    the perturbed evaluations (e.g. one that reuses cached activations
    upstream of that parameter).  It must compute the same loss.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over all entries.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = scalar_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError(f"grad_check: loss is not finite ({loss.data})")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    details = []
    with no_grad():
        fns = numeric_fns or [scalar_fn] * len(params)
        for p, ga, fn in zip(params, analytic, fns):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            p_worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                down = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NonFiniteLossError("grad_check: perturbed loss is not finite")
                num = (up - down) / (2.0 * eps)
                err = relative_error(gflat[i], num)
                if err > p_worst:
                    p_worst = err
            details.append(p_worst)
            worst = max(worst, p_worst)
    if return_details:
        return worst, details
    return worst
