"""Spawning biomass, the Beverton-Holt recruitment law, and the age-zero
boundary fill.

Spawning biomass in region i is the weighted integral of the density over
all ages and over lengths from the maturity threshold up to the length
extent.  It is computed by trapezoidal quadrature; when the maturity
threshold falls strictly inside a length cell, that cell contributes with
fractional trapezoid weights so the lower integration limit is honored
exactly for piecewise-linear integrands.

Recruitment follows the saturating Beverton-Holt relation: the age-zero
density equals ``psi(t) * P / (theta + P)`` on lengths up to the recruit
threshold and zero beyond.  Negative biomass arguments are clamped to zero
(solutions of the model are nonnegative, so on solutions the clamp is
inactive; unlike an absolute value it keeps the law monotone in P for all
arguments).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_core import CoefficientSet

__all__ = [
    "BiomassVector",
    "RecruitmentParams",
    "trapezoid_weights",
    "trapezoid_weights_above",
    "cell_fraction_weights",
    "spawning_biomass",
    "beverton_holt",
    "fill_recruitment_boundary",
]


@dataclass(frozen=True)
class BiomassVector:
    """Per-region spawning biomass at one instant."""

    values: np.ndarray
    t: float


@dataclass(frozen=True)
class RecruitmentParams:
    """Handles into the recruitment-related pieces of a coefficient set."""

    half_saturation: tuple
    recruit_length: float
    modulation: tuple

    @classmethod
    def from_coefficients(cls, coeffs: CoefficientSet) -> "RecruitmentParams":
        return cls(coeffs.half_saturation, coeffs.recruit_length,
                   coeffs.recruitment_modulation)


# ---------------------------------------------------------------------------
# Quadrature weights on a node lattice
# ---------------------------------------------------------------------------


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Composite trapezoid weights for the full node range."""
    w = np.zeros(len(nodes))
    h = np.diff(nodes)
    w[:-1] += h / 2.0
    w[1:] += h / 2.0
    return w


def trapezoid_weights_above(nodes: np.ndarray, cutoff: float) -> np.ndarray:
    """Node weights integrating a piecewise-linear function over
    [cutoff, nodes[-1]] exactly.

    Cells entirely above the cutoff get standard trapezoid weights; the cell
    straddling the cutoff contributes the exact integral of the linear
    interpolant over its part above the cutoff.
    """
    w = np.zeros(len(nodes))
    if cutoff >= nodes[-1]:
        return w
    for m in range(len(nodes) - 1):
        x0, x1 = nodes[m], nodes[m + 1]
        if x1 <= cutoff:
            continue
        if x0 >= cutoff:
            w[m] += (x1 - x0) / 2.0
            w[m + 1] += (x1 - x0) / 2.0
        else:
            # straddling cell: integrate the interpolant over [cutoff, x1]
            h = x1 - x0
            theta = (cutoff - x0) / h
            w[m] += h * (1.0 - theta) ** 2 / 2.0
            w[m + 1] += h * (1.0 - theta) * (1.0 + theta) / 2.0
    return w


def cell_fraction_weights(nodes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fraction of each node's control volume lying inside [lo, hi].

    Control volumes are the cells of the staggered lattice: half-cells at
    the two wall nodes, full cells elsewhere.  Interior weights are 1, nodes
    outside get 0, and the node whose volume straddles an endpoint gets the
    overlap fraction, so integrals of the filled values vary continuously as
    the endpoint moves across the lattice.
    """
    n = len(nodes)
    left = np.empty(n)
    right = np.empty(n)
    left[0], right[-1] = nodes[0], nodes[-1]
    left[1:] = (nodes[:-1] + nodes[1:]) / 2.0
    right[:-1] = left[1:]
    overlap = np.maximum(0.0, np.minimum(right, hi) - np.maximum(left, lo))
    return overlap / (right - left)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def spawning_biomass(state, coeffs: CoefficientSet, grid, t: float) -> BiomassVector:
    """Weighted abundance of mature fish per region at time ``t``.

    Trapezoidal in age over the full age range and in length over
    [maturity_length, max_length] with fractional weights at the maturity
    cutoff.  Linear in the state and nonnegative for nonnegative states.
    """
    values = state.values if hasattr(state, "values") else np.asarray(state)
    n = coeffs.n_regions
    if values.shape != (n, len(grid.a_nodes), len(grid.l_nodes)):
        raise ValueError(
            f"state shape {values.shape} does not match grid/regions "
            f"({n}, {len(grid.a_nodes)}, {len(grid.l_nodes)})")
    wa = trapezoid_weights(grid.a_nodes)
    wl = trapezoid_weights_above(grid.l_nodes, coeffs.maturity_length)
    aa = grid.a_nodes[:, None]
    ll = grid.l_nodes[None, :]
    out = np.empty(n)
    for i in range(n):
        wgt = np.asarray(coeffs.weighting[i](t, aa, ll), float)
        wgt = np.broadcast_to(wgt, (len(grid.a_nodes), len(grid.l_nodes)))
        out[i] = np.einsum("j,m,jm,jm->", wa, wl, wgt, values[i])
    return BiomassVector(out, float(t))


def beverton_holt(t: float, l, biomass: float, params: RecruitmentParams,
                  region: int):
    """Recruited density at length(s) ``l`` for the given spawning biomass.

    Returns ``indicator(l in [0, recruit_length]) * psi(t) * P+ / (theta + P+)``
    with ``P+ = max(biomass, 0)``.  Monotone nondecreasing in the biomass and
    bounded above by ``psi(t)``.
    """
    p_pos = max(float(biomass), 0.0)
    psi = float(params.modulation[region](t, 0.0, 0.0))
    u = p_pos / (params.half_saturation[region] + p_pos)
    l = np.asarray(l, dtype=float)
    inside = (l >= 0.0) & (l <= params.recruit_length)
    return np.where(inside, psi * u, 0.0)


def recruitment_row(t: float, biomass_values: np.ndarray,
                    params: RecruitmentParams, l_nodes: np.ndarray) -> np.ndarray:
    """Age-zero rows for all regions, shape (N, len(l_nodes)).

    The recruit-length indicator is applied through control-volume fractions
    (``cell_fraction_weights``) rather than sharply at the nodes, so the
    recruited abundance equals ``recruit_length * psi * P+/(theta+P+)``
    exactly under the lattice quadrature, wherever the threshold falls.
    """
    frac = cell_fraction_weights(l_nodes, 0.0, params.recruit_length)
    rows = np.empty((len(biomass_values), len(l_nodes)))
    for i, p in enumerate(biomass_values):
        p_pos = max(float(p), 0.0)
        psi = float(params.modulation[i](t, 0.0, 0.0))
        rows[i] = frac * (psi * (p_pos / (params.half_saturation[i] + p_pos)))
    return rows


def fill_recruitment_boundary(state, coeffs: CoefficientSet, grid, t: float,
                              biomass: BiomassVector):
    """Return a copy of ``state`` whose age-zero row is the recruitment law
    evaluated at time ``t`` with the given biomass; all other entries are
    untouched."""
    from .solver import State  # deferred: solver depends on this module

    values = state.values
    n = coeffs.n_regions
    if values.shape[0] != n or len(biomass.values) != n:
        raise ValueError("state/biomass region count mismatch")
    if values.shape[2] != len(grid.l_nodes):
        raise ValueError("state length axis does not match grid")
    params = RecruitmentParams.from_coefficients(coeffs)
    new_values = values.copy()
    new_values[:, 0, :] = recruitment_row(t, biomass.values, params, grid.l_nodes)
    return State(new_values, state.time_index)
