"""
D.I.S.C.O. Numerical Helpers
Batch central finite differences on black-box vectorized maps.
"""

from typing import Callable

import numpy as np

Array = np.ndarray

RELATIVE_STEP = 1e-6


def fd_steps(z: Array) -> Array:
    """Per-coordinate step 1e-6 * (1 + |z_i|)."""
    return RELATIVE_STEP * (1.0 + np.abs(np.asarray(z, dtype=float)))


def _stencil(z: Array) -> tuple:
    """Points z +- h_i e_i stacked as (2d, d), plus the step vector."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    h = fd_steps(z)
    shifts = np.diag(h)
    return np.concatenate([z + shifts, z - shifts]), h


def central_gradient(func: Callable[[Array], Array], z) -> Array:
    """Gradient of a scalar map evaluated on (P, d) batches."""
    points, h = _stencil(z)
    values = np.asarray(func(points), dtype=float).reshape(2, -1)
    return (values[0] - values[1]) / (2.0 * h)


def central_jacobian(func: Callable[[Array], Array], z) -> Array:
    """Jacobian (k, d) of a vector map evaluated on (P, d) batches returning (P, k)."""
    points, h = _stencil(z)
    d = h.size
    values = np.asarray(func(points), dtype=float).reshape(2 * d, -1)
    return ((values[:d] - values[d:]) / (2.0 * h)[:, None]).T


def split_pair(z: Array, n: int):
    """Split joint (..., n+m) coordinates into (x, u)."""
    z = np.asarray(z, dtype=float)
    return z[..., :n], z[..., n:]
