"""Finite-difference gradient checking.

Central differences with h=1e-3 over float64 tensors.  The production path
is float32; 32-bit finite differences are too noisy to be a useful oracle,
so callers are expected to build their probe tensors with
``dtype=np.float64``.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def finite_difference_grad(f, tensors, tensor_idx, coord, h=1e-3):
    """Central-difference derivative of ``f(tensors)`` w.r.t. one coordinate."""
    t = tensors[tensor_idx]
    orig = t.data.flat[coord]
    t.data.flat[coord] = orig + h
    fp = f(*tensors).item()
    t.data.flat[coord] = orig - h
    fm = f(*tensors).item()
    t.data.flat[coord] = orig
    return (fp - fm) / (2 * h)


def check_gradients(f, tensors, n_probes=100, h=1e-3, rtol=1e-4, rng=None,
                    floor=1e-2):
    """Compare analytic gradients of scalar ``f`` against central differences.

    Probes ``n_probes`` random coordinates spread across all tensors that
    require grad.  Relative error uses ``max(|analytic|, |numeric|, floor)``
    as the denominator so near-zero derivatives are held to an absolute
    tolerance of ``rtol * floor``.

    Returns the maximum relative error observed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors")
        t.grad = None
    loss = f(*tensors)
    loss.backward()
    del loss
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
             for t in tensors]

    checkable = [i for i, t in enumerate(tensors) if t.requires_grad]
    if not checkable:
        raise ValueError("no tensor requires grad")
    max_err = 0.0
    for _ in range(n_probes):
        ti = checkable[rng.integers(len(checkable))]
        coord = int(rng.integers(tensors[ti].data.size))
        num = finite_difference_grad(f, tensors, ti, coord, h=h)
        ana = float(grads[ti].flat[coord])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        if err > max_err:
            max_err = err
        assert err <= rtol, (
            f"gradient mismatch at tensor {ti} coord {coord}: "
            f"analytic {ana:.8g} vs numeric {num:.8g} (rel err {err:.3g})")
    return max_err
