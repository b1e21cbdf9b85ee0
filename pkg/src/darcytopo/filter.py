"""Helmholtz (screened-Poisson) density filter.

The filtered field solves ``(-r^2 lap + 1) x = gamma`` on the nodes with
zero-flux boundaries; element values are the mean of their eight nodes.
With a row-sum lumped mass the discrete operator

    F = V^-1 P^T (r^2 K + M_L)^-1 P,     P_ne = v_e / 8 if node n in e

preserves constants and total volume exactly and is symmetric on uniform
grids.  On cube elements ``r^2 K + M_L`` is an M-matrix, so ``F`` has
non-negative entries with unit row sums (discrete maximum principle).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import ElementGeometry
from .mesh import HEAT


class FilterStateError(RuntimeError):
    """Filter applied before its operator was assembled."""


@dataclass(eq=False)
class FilterOperator:
    radius: float          # physical filter radius R
    r: float               # Helmholtz length R / (2 sqrt 3)
    matrix: sp.csr_matrix  # r^2 K + M_L on the nodes
    P: sp.csr_matrix       # element -> node load map, (n_nodes, n_elements)
    volumes: np.ndarray
    factor: object = None

    @property
    def assembled(self):
        return self.factor is not None

    def apply(self, gamma):
        """Unmasked filter ``F gamma`` on the full element vector."""
        if not self.assembled:
            raise FilterStateError("filter operator has not been assembled")
        x = self.factor.solve(self.P @ np.asarray(gamma, dtype=float))
        return (self.P.T @ x) / self.volumes

    def apply_transpose(self, v):
        if not self.assembled:
            raise FilterStateError("filter operator has not been assembled")
        x = self.factor.solve(self.P @ (np.asarray(v, dtype=float) / self.volumes))
        return self.P.T @ x


def filter_radius(mesh, multiplier=2.5):
    """Filter radius as a multiple of the (cube-root) element size."""
    return multiplier * mesh.element_volume ** (1.0 / 3.0)


def build_filter(mesh, radius, backend="auto"):
    """Assemble and factorize the Helmholtz operator for radius ``R``."""
    from .solver import factorize

    if radius < 0:
        raise ValueError("filter radius must be non-negative")
    r = radius / (2.0 * np.sqrt(3.0))
    g = ElementGeometry.for_mesh(mesh)
    Ke = np.einsum("q,qdi,qdj->ij", g.w, g.B, g.B)
    E, nn = mesh.n_elements, mesh.n_nodes
    el = mesh.elements
    rows = np.repeat(el, 8, axis=1).ravel()
    cols = np.tile(el, (1, 8)).ravel()
    K = sp.csr_matrix((np.tile(Ke.ravel(), E), (rows, cols)), shape=(nn, nn))
    v = mesh.element_volumes()
    P = sp.csr_matrix(((np.repeat(v / 8.0, 8)), (el.ravel(), np.repeat(np.arange(E), 8))),
                      shape=(nn, E))
    M = sp.diags(np.asarray(P.sum(axis=1)).ravel())
    A = (r * r * K + M).tocsr()
    op = FilterOperator(float(radius), float(r), A, P, v)
    op.factor = factorize(A, backend)
    return op


def passive_values(tags):
    """Fixed densities of passive elements: 1 in the heat source, 0 in fluid."""
    return np.where(tags.region == HEAT, 1.0, 0.0)


def filter_density(gamma_raw, op, tags):
    """Filter a full per-element density field and re-impose passive values."""
    gamma_raw = np.asarray(gamma_raw, dtype=float)
    if gamma_raw.shape != tags.region.shape:
        raise ValueError("density must have one entry per element")
    if np.any(gamma_raw < 0) or np.any(gamma_raw > 1) or np.any(np.isnan(gamma_raw)):
        raise ValueError("raw densities must lie in [0, 1]")
    out = op.apply(gamma_raw)
    passive = ~tags.design
    out[passive] = passive_values(tags)[passive]
    return np.clip(out, 0.0, 1.0)


def filter_backward(dfdg, op, tags):
    """Chain ``df/d(filtered)`` back to ``df/d(raw)``; passive entries are zeroed."""
    v = np.array(dfdg, dtype=float)
    v[~tags.design] = 0.0  # passive outputs are overwritten in the forward map
    out = op.apply_transpose(v)
    out[~tags.design] = 0.0
    return out
