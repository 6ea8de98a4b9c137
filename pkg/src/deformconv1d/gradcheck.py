"""Central finite differences for checking analytic gradients.

The interpolation kernel is piecewise linear with kinks at integer sampling
positions, so checks must keep every deformed position a safe distance from
the integers; :func:`nudge_offsets_off_integers` adjusts offset biases until
that holds.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, arrays: dict, eps: float = 1e-5) -> dict:
    """Numerical gradient of scalar ``f()`` w.r.t. each array, element-wise.

    ``f`` must read the arrays in-place; they are restored after probing.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|), ignoring entries where both are ~0."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n)
    rel = np.where(scale > floor, err / np.maximum(scale, floor), 0.0)
    return float(rel.max()) if rel.size else 0.0


def nudge_offsets_off_integers(layer, x, margin: float = 1.5e-3,
                               step: float = 0.00371,
                               max_rounds: int = 2000) -> None:
    """Shift the layer's offset biases until no deformed position sits within
    ``margin`` of an integer.

    Finite-difference probes move positions by well under the margin, so the
    floor in the interpolation never flips during a check.
    """
    from .conv import offset_forward

    for _ in range(max_rounds):
        p = offset_forward(layer, x).p_prime
        dist = np.abs(p - np.round(p))
        if p.size == 0 or float(dist.min()) > margin:
            return
        layer.offset_bias += np.asarray(step, dtype=layer.offset_bias.dtype)
    raise RuntimeError("could not move all sampling positions off integers")
