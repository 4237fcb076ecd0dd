"""
D.I.S.C.O. Multilinear Interpolation
Cell lookup and corner weights on rectilinear grids.

Query points are clipped into the grid box first, so every weight lies in
[0, 1] and the weights of a point sum to one.
"""

from itertools import product
from typing import Sequence, Tuple

import numpy as np
from scipy import sparse

Array = np.ndarray


def _axis_cells(axis: Array, coords: Array) -> Tuple[Array, Array]:
    """Lower cell index and the fractional position inside that cell along one axis."""
    hi = np.searchsorted(axis, coords, side="right")
    hi = np.clip(hi, 1, axis.size - 1)
    lo = hi - 1
    width = axis[hi] - axis[lo]
    weight = np.where(width > 0, (coords - axis[lo]) / width, 0.0)
    return lo, np.clip(weight, 0.0, 1.0)


def cell_weights(axes: Sequence[Array], points) -> Tuple[Array, Array]:
    """
    Flat corner indices and multilinear weights.

    Returns (indices, weights), both of shape (P, 2**d), for points of shape
    (P, d). Flat indices follow C ('ij') ordering of the grid nodes.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, len(axes))
    shape = tuple(a.size for a in axes)
    los, fracs = [], []
    for k, axis in enumerate(axes):
        coords = np.clip(pts[:, k], axis[0], axis[-1])
        lo, frac = _axis_cells(axis, coords)
        los.append(lo)
        fracs.append(frac)

    corners = list(product((0, 1), repeat=len(axes)))
    indices = np.empty((pts.shape[0], len(corners)), dtype=np.int64)
    weights = np.empty((pts.shape[0], len(corners)), dtype=float)
    for c, corner in enumerate(corners):
        multi = tuple(lo + bit for lo, bit in zip(los, corner))
        indices[:, c] = np.ravel_multi_index(multi, shape)
        w = np.ones(pts.shape[0])
        for frac, bit in zip(fracs, corner):
            w = w * (frac if bit else 1.0 - frac)
        weights[:, c] = w
    return indices, weights


def interpolate(axes: Sequence[Array], values: Array, points) -> Array:
    """Multilinear interpolation of node values (flat, C order) at points (..., d)."""
    pts = np.asarray(points, dtype=float)
    lead = pts.shape[:-1]
    indices, weights = cell_weights(axes, pts)
    return np.sum(values[indices] * weights, axis=1).reshape(lead)


def transition_matrix(axes: Sequence[Array], points) -> sparse.csr_matrix:
    """Sparse (P, N) matrix W with (W @ values)[p] = interpolate(axes, values, points[p])."""
    indices, weights = cell_weights(axes, points)
    rows = np.repeat(np.arange(indices.shape[0]), indices.shape[1])
    size = int(np.prod([a.size for a in axes]))
    return sparse.csr_matrix(
        (weights.ravel(), (rows, indices.ravel())), shape=(indices.shape[0], size)
    )
