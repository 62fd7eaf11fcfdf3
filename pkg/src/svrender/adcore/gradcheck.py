"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from svrender.adcore.tensor import backward, no_grad


class NondeterministicError(RuntimeError):
    """Raised when two identical forward evaluations disagree."""


def finite_difference_check(f, params, eps=1e-5):
    """Compare tape gradients of scalar ``f(params)`` against central differences.

    ``f`` maps a list of Parameter objects to a scalar Tensor.  Returns the
    maximum relative error |analytic - numeric| / max(1, |numeric|) across
    every element of every parameter.  The forward map is evaluated twice up
    front; any bitwise disagreement raises NondeterministicError, because a
    nondeterministic objective makes the numeric baseline meaningless.
    """
    with no_grad():
        y0 = f(params).data.copy()
        y1 = f(params).data.copy()
    if y0.shape != y1.shape or not np.array_equal(y0, y1):
        raise NondeterministicError(
            "objective returned different values on identical inputs"
        )

    for p in params:
        p.zero_grad()
    out = f(params)
    backward(out)
    analytic = [p.value.grad.copy() for p in params]

    max_rel = 0.0
    with no_grad():
        for p, g in zip(params, analytic):
            base = p.value.data
            flat = base.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(params).data)
                flat[i] = orig - eps
                lo = float(f(params).data)
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * eps)
                rel = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
                if rel > max_rel:
                    max_rel = rel
    return max_rel
