"""Prices induced by a demand path, per-stage consumer payoffs, and the
consumer/supplier accounting identity.

At each history node the three price components are the analytic marginal
costs of the cost family: ``p`` from the primary cost at the node's demand,
``w`` from the ancillary cost with respect to the current demand, and ``q``
from the ancillary cost with respect to the previous demand (charged at this
stage on the previous action).  The root stage has ``q = 0`` and takes ``w``
from the initial-stage ancillary cost.  Production code never differences
cost functions; finite differences appear only in tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .costs import CostModel
from .scenario import HistoryTree, Scenario

__all__ = [
    "DemandPath",
    "PricePath",
    "Mechanism",
    "PaymentMode",
    "induced_prices",
    "stage_payoff",
    "accounting",
    "Accounting",
    "average_retail_price",
    "write_price_csv",
]


class Mechanism(str, Enum):
    PROPOSED = "proposed"
    MCP = "mcp"
    FLAT = "flat"


@dataclass(frozen=True)
class PaymentMode:
    """What a consumer is charged: the proposed three-part prices, marginal
    cost only, or a fixed retail rate."""

    mechanism: Mechanism
    flat_rate: float = 0.0

    def __post_init__(self):
        if self.mechanism is Mechanism.FLAT and self.flat_rate < 0.0:
            raise ValueError("flat rate must be >= 0")

    @staticmethod
    def proposed() -> "PaymentMode":
        return PaymentMode(Mechanism.PROPOSED)

    @staticmethod
    def mcp() -> "PaymentMode":
        return PaymentMode(Mechanism.MCP)

    @staticmethod
    def flat(rate: float) -> "PaymentMode":
        return PaymentMode(Mechanism.FLAT, flat_rate=rate)


@dataclass(frozen=True)
class DemandPath:
    """Average per-consumer demand at every history node."""

    tree: HistoryTree
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.tree.num_nodes,):
            raise ValueError("demand path must hold one value per history node")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class PricePath:
    """Per-node price triple (p, w, q)."""

    tree: HistoryTree
    p: np.ndarray
    w: np.ndarray
    q: np.ndarray

    @property
    def total_current(self) -> np.ndarray:
        """Price charged on the current action, ``p + w``."""
        return self.p + self.w


def _price_arrays(costs: CostModel, tree: HistoryTree, demand: np.ndarray):
    demand = np.asarray(demand, dtype=float)
    if np.any(demand < 0.0):
        raise ValueError("demand path has negative entries")
    n = tree.num_nodes
    p = np.zeros(n)
    w = np.zeros(n)
    q = np.zeros(n)
    labels = tree.chain.states

    root_state = labels[tree.state_of[0]]
    p[0] = costs.primary_at(root_state).d_cur(0.0, demand[0])
    w[0] = costs.ancillary0_at(root_state).d_cur(0.0, demand[0])

    for t in range(1, tree.num_stages):
        ids = tree.stages[t]
        parents = tree.parent[ids]
        # group nodes by (previous state, current state) so each cost
        # function evaluates once over a vector
        keys = tree.state_of[parents] * len(labels) + tree.state_of[ids]
        for key in np.unique(keys):
            sel = ids[keys == key]
            sp = labels[key // len(labels)]
            sc = labels[key % len(labels)]
            prev = demand[tree.parent[sel]]
            cur = demand[sel]
            p[sel] = costs.primary_at(sc).d_cur(0.0, cur)
            h = costs.ancillary_at(sp, sc)
            w[sel] = h.d_cur(prev, cur)
            q[sel] = h.d_prev(prev, cur)
    return p, w, q


def induced_prices(costs: CostModel, demand: DemandPath) -> PricePath:
    """Analytic marginal-cost prices at every node of the demand path."""
    p, w, q = _price_arrays(costs, demand.tree, demand.values)
    for arr in (p, w, q):
        arr.setflags(write=False)
    return PricePath(tree=demand.tree, p=p, w=w, q=q)


def stage_payoff(type_spec, t: int, z: float, s_index: int, action: float,
                 prev_action: float, p: float, w: float, q: float,
                 mode: PaymentMode) -> float:
    """One consumer's stage payoff: utility minus the mode's charges."""
    u = float(type_spec.utility.value(t, z, action, s_index))
    if mode.mechanism is Mechanism.PROPOSED:
        return u - (p + w) * action - q * prev_action
    if mode.mechanism is Mechanism.MCP:
        return u - (p + w) * action
    return u - mode.flat_rate * action


def _charge_per_node(tree: HistoryTree, prices: PricePath, actions: np.ndarray,
                     mode: PaymentMode) -> np.ndarray:
    """Money one consumer pays at each node for the given per-node actions."""
    pay = np.zeros(tree.num_nodes)
    if mode.mechanism is Mechanism.FLAT:
        pay += mode.flat_rate * actions
        return pay
    pay += (prices.p + prices.w) * actions
    if mode.mechanism is Mechanism.PROPOSED:
        nz = tree.parent >= 0
        pay[nz] += prices.q[nz] * actions[tree.parent[nz]]
    return pay


@dataclass(frozen=True)
class Accounting:
    consumer_surplus: float
    supplier_revenue: float
    supplier_cost: float
    welfare: float
    residual: float


def accounting(scenario: Scenario, strategy, mode: PaymentMode,
               prices: PricePath | None = None) -> Accounting:
    """Cross-check that type-weighted consumer surplus plus supplier profit
    reproduces the social welfare; the mismatch is reported as ``residual``.
    """
    from .equilibrium import aggregate_demand, continuum_welfare, type_utilities

    tree = strategy.tree
    demand = aggregate_demand(strategy, scenario)
    if prices is None:
        prices = induced_prices(scenario.costs, demand)
    weights = scenario.type_weights(tree.chain.states[tree.s0_index])

    utilities = type_utilities(scenario, strategy)  # (X, N) expected stage utilities
    surplus = 0.0
    revenue = 0.0
    for x in range(scenario.num_types):
        pay = _charge_per_node(tree, prices, strategy.actions[x], mode)
        surplus += weights[x] * float(tree.prob @ (utilities[x] - pay))
        revenue += weights[x] * float(tree.prob @ pay)

    report = continuum_welfare(strategy, scenario)
    cost = report.primary_cost_total + report.ancillary_cost_total
    residual = abs(surplus + revenue - cost - report.total)
    return Accounting(
        consumer_surplus=surplus,
        supplier_revenue=revenue,
        supplier_cost=cost,
        welfare=report.total,
        residual=residual,
    )


def average_retail_price(demand: DemandPath, prices: PricePath,
                         actions: np.ndarray | None = None,
                         include_q: bool = False) -> float:
    """Expected total payment divided by expected total demand.

    With ``include_q=False`` only the ``(p+w)`` charges count; with
    ``include_q=True`` the backward charges ``q_t * a_{t-1}`` are added.
    ``actions`` defaults to the aggregate demand path itself (exact for a
    single type; the per-consumer average otherwise).
    """
    tree = demand.tree
    a = demand.values if actions is None else np.asarray(actions, dtype=float)
    total_quantity = float(tree.prob @ a)
    if total_quantity <= 0.0:
        raise ZeroDivisionError("total demand is zero, average price undefined")
    payment = float(tree.prob @ ((prices.p + prices.w) * a))
    if include_q:
        nz = tree.parent >= 0
        payment += float(tree.prob[nz] @ (prices.q[nz] * a[tree.parent[nz]]))
    return payment / total_quantity


def write_price_csv(prices: PricePath, path) -> None:
    tree = prices.tree
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "history_id", "p", "w", "q", "p_plus_w"])
        for i in range(tree.num_nodes):
            writer.writerow(
                [
                    int(tree.stage_of[i]),
                    i,
                    f"{prices.p[i]:.12g}",
                    f"{prices.w[i]:.12g}",
                    f"{prices.q[i]:.12g}",
                    f"{prices.p[i] + prices.w[i]:.12g}",
                ]
            )
