"""Supplier cost model.

Every cost term lives in one closed family: a polynomial in the current
aggregate demand plus hinge-quadratic ramp terms

    alpha * max(beta * A_cur - gamma * A_prev - delta, 0)^2

which are convex and continuously differentiable (the derivative of the
hinge is ``2*alpha*max(u,0)`` times the inner slope, continuous at ``u=0``).
Single-argument costs (primary cost, initial-stage ancillary cost) use
``gamma = 0``.  The family is closed under the per-capita population scaling
``f_n(A) = n * f(A / n)``, so one representation serves both the continuum
model and every n-consumer model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

__all__ = [
    "Hinge",
    "CostFunction",
    "CostModel",
    "scale_to_n",
]


@dataclass(frozen=True)
class Hinge:
    """One ramp term ``alpha * max(beta*cur - gamma*prev - delta, 0)**2``."""

    alpha: float
    beta: float
    gamma: float = 0.0
    delta: float = 0.0

    def inner(self, prev, cur):
        return self.beta * np.asarray(cur, dtype=float) - self.gamma * np.asarray(prev, dtype=float) - self.delta


@dataclass(frozen=True)
class CostFunction:
    """Polynomial in the current demand plus hinge-quadratic terms.

    ``poly`` holds coefficients in increasing degree order.
    """

    poly: tuple[float, ...] = ()
    hinges: tuple[Hinge, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "poly", tuple(float(c) for c in self.poly))
        object.__setattr__(self, "hinges", tuple(self.hinges))

    def value(self, prev, cur):
        cur = np.asarray(cur, dtype=float)
        out = np.zeros_like(cur)
        for k in range(len(self.poly) - 1, -1, -1):
            out = out * cur + self.poly[k]
        for h in self.hinges:
            u = np.maximum(h.inner(prev, cur), 0.0)
            out = out + h.alpha * u * u
        return out

    def d_cur(self, prev, cur):
        """Partial derivative with respect to the current demand."""
        cur = np.asarray(cur, dtype=float)
        out = np.zeros_like(cur)
        for k in range(len(self.poly) - 1, 0, -1):
            out = out * cur + k * self.poly[k]
        for h in self.hinges:
            u = np.maximum(h.inner(prev, cur), 0.0)
            out = out + 2.0 * h.alpha * h.beta * u
        return out

    def d_prev(self, prev, cur):
        """Partial derivative with respect to the previous demand."""
        cur = np.asarray(cur, dtype=float)
        out = np.zeros_like(cur)
        for h in self.hinges:
            u = np.maximum(h.inner(prev, cur), 0.0)
            out = out - 2.0 * h.alpha * h.gamma * u
        return out

    def depends_on_prev(self) -> bool:
        return any(h.gamma != 0.0 for h in self.hinges)

    def scaled_to_n(self, n: int) -> "CostFunction":
        """Per-capita scaling: ``C_n(A) = n * C(A / n)`` within the family."""
        poly = tuple(c / float(n) ** (k - 1) for k, c in enumerate(self.poly))
        hinges = tuple(
            Hinge(h.alpha / n, h.beta, h.gamma, h.delta * n) for h in self.hinges
        )
        return CostFunction(poly=poly, hinges=hinges)


_ZERO = CostFunction()

CostTable = Union[CostFunction, Mapping]


def _lookup(table: CostTable, key) -> CostFunction:
    if isinstance(table, CostFunction):
        return table
    return table[key]


@dataclass(frozen=True)
class CostModel:
    """Primary cost, initial ancillary cost, and stagewise ancillary cost.

    Each slot is either one :class:`CostFunction` shared by all exogenous
    states or a mapping keyed by state label (state-label pair for the
    stagewise ancillary cost).  ``reserve_policy`` is a free-text note about
    how the operator's reserve rule was folded into the cost functions; it is
    documentation only and never evaluated.
    """

    primary: CostTable = _ZERO
    ancillary0: CostTable = _ZERO
    ancillary: CostTable = _ZERO
    price_bound: float = float("inf")
    reserve_policy: str = ""

    def primary_at(self, state) -> CostFunction:
        return _lookup(self.primary, state)

    def ancillary0_at(self, state) -> CostFunction:
        return _lookup(self.ancillary0, state)

    def ancillary_at(self, state_prev, state_cur) -> CostFunction:
        return _lookup(self.ancillary, (state_prev, state_cur))


def _scale_table(table: CostTable, n: int) -> CostTable:
    if isinstance(table, CostFunction):
        return table.scaled_to_n(n)
    return {k: f.scaled_to_n(n) for k, f in table.items()}


def scale_to_n(costs: CostModel, n: int) -> CostModel:
    """Cost model of the n-consumer market matching the per-capita model.

    Marginal costs are preserved at matching per-capita demand:
    ``C_n'(A) = C'(A/n)`` and likewise for both ancillary partials.
    """
    if n < 1:
        raise ValueError(f"population size must be >= 1, got {n}")
    n = int(n)
    if n == 1:
        return costs
    return CostModel(
        primary=_scale_table(costs.primary, n),
        ancillary0=_scale_table(costs.ancillary0, n),
        ancillary=_scale_table(costs.ancillary, n),
        price_bound=costs.price_bound,
        reserve_policy=costs.reserve_policy,
    )
