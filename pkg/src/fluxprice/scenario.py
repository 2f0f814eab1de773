"""Market-game data model and the exogenous-history scenario tree.

A :class:`Scenario` bundles the exogenous Markov chain, the consumer types
with their initial-type weights, the supplier cost model, and the global
bounds.  All objects are immutable after construction and safe to share
across workers.  :func:`enumerate_histories` expands the chain into the
positive-probability history tree that indexes every strategy, demand path
and price path downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .behavior import Transition, Utility
from .costs import CostModel, scale_to_n  # noqa: F401  (re-exported)

__all__ = [
    "ExogenousChain",
    "HistoryTree",
    "ConsumerTypeSpec",
    "Bounds",
    "Scenario",
    "ValidationReport",
    "Violation",
    "CapacityError",
    "validate",
    "enumerate_histories",
    "scale_to_n",
]

DEFAULT_NODE_BUDGET = 1_000_000


class CapacityError(RuntimeError):
    """The scenario tree exceeds the configured node budget."""


@dataclass(frozen=True)
class ExogenousChain:
    """Finite Markov chain for the exogenous state, over stages 0..horizon."""

    states: tuple[str, ...]
    transition: np.ndarray
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(str(s) for s in self.states))
        mat = np.array(self.transition, dtype=float)
        mat.setflags(write=False)
        object.__setattr__(self, "transition", mat)

    @property
    def num_states(self) -> int:
        return len(self.states)

    def state_index(self, state) -> int:
        if isinstance(state, (int, np.integer)):
            return int(state)
        return self.states.index(str(state))


@dataclass(frozen=True)
class ConsumerTypeSpec:
    """One consumer type: initial internal state, utility, and dynamics."""

    type_id: str
    z0: float
    utility: Utility
    transition: Transition


@dataclass(frozen=True)
class Bounds:
    """Global bounds: action cap B, internal-state cap Z, marginal-cost
    bound P, utility bound Q."""

    action: float
    internal: float
    price: float
    utility: float


@dataclass(frozen=True)
class Scenario:
    chain: ExogenousChain
    types: tuple[ConsumerTypeSpec, ...]
    eta: dict
    costs: CostModel
    bounds: Bounds

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))

    @property
    def num_types(self) -> int:
        return len(self.types)

    def type_weights(self, s0) -> np.ndarray:
        """Initial-type weights for the given initial state, aligned with
        ``self.types``."""
        label = self.chain.states[self.chain.state_index(s0)]
        raw = self.eta[label]
        if isinstance(raw, dict):
            vec = np.array([raw[t.type_id] for t in self.types], dtype=float)
        else:
            vec = np.array(raw, dtype=float)
        return vec

    def tree(self, s0=None, node_budget: int = DEFAULT_NODE_BUDGET) -> "HistoryTree":
        if s0 is None:
            s0 = self.chain.states[0]
        return enumerate_histories(self.chain, s0, node_budget=node_budget)


class HistoryTree:
    """Enumeration of positive-probability exogenous histories from one
    initial state.

    Nodes are stored in breadth-first order, so the children of any node are
    contiguous.  ``prob`` holds the probability of each history conditional
    on the initial state; ``cond_prob`` the one-step probability given the
    parent.
    """

    def __init__(self, chain: ExogenousChain, s0_index: int, parent, state_of, prob):
        self.chain = chain
        self.s0_index = int(s0_index)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.state_of = np.asarray(state_of, dtype=np.int64)
        self.prob = np.asarray(prob, dtype=float)
        self.num_nodes = len(self.parent)

        stage_of = np.zeros(self.num_nodes, dtype=np.int64)
        for i in range(1, self.num_nodes):
            stage_of[i] = stage_of[self.parent[i]] + 1
        self.stage_of = stage_of
        self.num_stages = int(stage_of.max()) + 1 if self.num_nodes else 0
        self.stages = [np.flatnonzero(stage_of == t) for t in range(self.num_stages)]

        cond = np.ones(self.num_nodes)
        nz = self.parent >= 0
        cond[nz] = self.prob[nz] / self.prob[self.parent[nz]]
        self.cond_prob = cond

        for arr in (self.parent, self.state_of, self.prob, self.stage_of, self.cond_prob):
            arr.setflags(write=False)

    @property
    def root(self) -> int:
        return 0

    def children(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.parent == node)

    def history(self, node: int) -> tuple[str, ...]:
        """State labels along the history ending at ``node``."""
        seq = []
        i = node
        while i >= 0:
            seq.append(self.chain.states[self.state_of[i]])
            i = self.parent[i]
        return tuple(reversed(seq))

    def state_labels(self) -> list[str]:
        return [self.chain.states[s] for s in self.state_of]


def enumerate_histories(chain: ExogenousChain, s0, node_budget: int = DEFAULT_NODE_BUDGET) -> HistoryTree:
    """Expand the chain from ``s0`` into the positive-probability tree.

    Raises :class:`CapacityError` when the node count would exceed
    ``node_budget``; that signals the scenario is too large for exact tree
    methods.
    """
    s0_idx = chain.state_index(s0)
    if not (0 <= s0_idx < chain.num_states):
        raise ValueError(f"unknown initial state {s0!r}")

    parent = [-1]
    state_of = [s0_idx]
    prob = [1.0]
    frontier = [0]
    for _t in range(chain.horizon):
        nxt = []
        for node in frontier:
            row = chain.transition[state_of[node]]
            for s_next in np.flatnonzero(row > 0.0):
                if len(parent) >= node_budget:
                    raise CapacityError(
                        f"history tree exceeds node budget {node_budget} "
                        f"(S={chain.num_states}, T={chain.horizon})"
                    )
                nxt.append(len(parent))
                parent.append(node)
                state_of.append(int(s_next))
                prob.append(prob[node] * float(row[s_next]))
        frontier = nxt
    return HistoryTree(chain, s0_idx, parent, state_of, prob)


@dataclass(frozen=True)
class Violation:
    check: str
    message: str


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, check: str, message: str):
        self.violations.append(Violation(check, message))

    def __str__(self):
        if self.ok:
            return "scenario valid"
        return "\n".join(f"[{v.check}] {v.message}" for v in self.violations)


def _sample_grid(lo: float, hi: float, n: int = 41) -> np.ndarray:
    return np.linspace(lo, hi, n)


def validate(scenario: Scenario) -> ValidationReport:
    """Mechanical invariant checks; sampled where not decidable in closed
    form.  Sampling grids: 41 points per axis over the declared bounds."""
    rep = ValidationReport()
    chain = scenario.chain
    S = chain.num_states

    if S < 1:
        rep.add("chain.states", "state set is empty")
        return rep
    if chain.horizon < 0:
        rep.add("chain.horizon", f"horizon must be >= 0, got {chain.horizon}")
    if chain.transition.shape != (S, S):
        rep.add("chain.transition", f"transition must be {S}x{S}, got {chain.transition.shape}")
        return rep
    for i, row in enumerate(chain.transition):
        if np.any(row < 0.0):
            rep.add("chain.transition", f"row {chain.states[i]} has negative entries")
        total = float(row.sum())
        if abs(total - 1.0) > 1e-12:
            rep.add("chain.transition", f"row {chain.states[i]} not stochastic (sums to {total:.12g})")

    b = scenario.bounds
    for name, val in (("B", b.action), ("Z", b.internal), ("P", b.price), ("Q", b.utility)):
        if not val > 0.0:
            rep.add("bounds", f"bound {name} must be positive, got {val}")

    ids = [t.type_id for t in scenario.types]
    if len(set(ids)) != len(ids):
        rep.add("types", "duplicate type ids")
    for s in chain.states:
        try:
            w = scenario.type_weights(s)
        except KeyError:
            rep.add("types.eta", f"no initial-type weights for state {s}")
            continue
        if len(w) != scenario.num_types:
            rep.add("types.eta", f"weights for state {s} have wrong length")
            continue
        if np.any(w < 0.0):
            rep.add("types.eta", f"negative weight under state {s}")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            rep.add("types.eta", f"weights under state {s} sum to {w.sum():.12g}")

    a_grid = _sample_grid(0.0, b.action)
    demand_grid = _sample_grid(0.0, b.action)
    z_grid = _sample_grid(0.0, b.internal)

    costs = scenario.costs
    for s in chain.states:
        c = costs.primary_at(s)
        if c.depends_on_prev():
            rep.add("costs.primary", f"primary cost under state {s} depends on previous demand")
        vals = c.value(0.0, demand_grid)
        if np.any(vals < -1e-12):
            rep.add("costs.primary", f"primary cost negative under state {s}")
        if np.any(np.diff(vals) < -1e-12):
            rep.add("costs.primary", f"primary cost decreasing under state {s}")
        if np.any(np.abs(c.d_cur(0.0, demand_grid)) > b.price + 1e-9):
            rep.add("costs.primary", f"primary marginal cost exceeds bound P under state {s}")

        c0 = costs.ancillary0_at(s)
        if c0.depends_on_prev():
            rep.add("costs.ancillary0", f"initial ancillary cost under state {s} depends on previous demand")
        if np.any(c0.value(0.0, demand_grid) < -1e-12):
            rep.add("costs.ancillary0", f"initial ancillary cost negative under state {s}")
        if np.any(np.abs(c0.d_cur(0.0, demand_grid)) > b.price + 1e-9):
            rep.add("costs.ancillary0", f"initial ancillary marginal cost exceeds bound P under state {s}")

    prev_mesh, cur_mesh = np.meshgrid(demand_grid, demand_grid, indexing="ij")
    for sp in chain.states:
        for sc in chain.states:
            try:
                h = costs.ancillary_at(sp, sc)
            except KeyError:
                rep.add("costs.ancillary", f"no ancillary cost for state pair ({sp}, {sc})")
                continue
            vals = h.value(prev_mesh, cur_mesh)
            if np.any(vals < -1e-12):
                rep.add("costs.ancillary", f"ancillary cost negative for pair ({sp}, {sc})")
            if np.any(np.abs(h.d_cur(prev_mesh, cur_mesh)) > b.price + 1e-9) or np.any(
                np.abs(h.d_prev(prev_mesh, cur_mesh)) > b.price + 1e-9
            ):
                rep.add("costs.ancillary", f"ancillary marginal cost exceeds bound P for pair ({sp}, {sc})")
            for hinge in h.hinges:
                if hinge.alpha < 0.0:
                    rep.add("costs.ancillary", f"hinge with negative weight for pair ({sp}, {sc})")

    for spec in scenario.types:
        if not (0.0 <= spec.z0 <= b.internal):
            rep.add("types.z0", f"type {spec.type_id}: initial state {spec.z0} outside [0, Z]")
        za, aa = np.meshgrid(z_grid, a_grid, indexing="ij")
        for t in range(chain.horizon + 1):
            for si in range(S):
                u = spec.utility.value(t, za, aa, si)
                if np.any(u < -1e-12):
                    rep.add("types.utility", f"type {spec.type_id}: negative utility at stage {t}")
                if np.any(u > b.utility + 1e-9):
                    rep.add("types.utility", f"type {spec.type_id}: utility exceeds bound Q at stage {t}")
        for si in range(S):
            z_next = spec.transition.next_state(za, aa, si)
            # monotone in the action with the declared sign, nondecreasing in z
            sign = spec.transition.action_sign
            diffs = np.diff(z_next, axis=1)
            if sign == 1 and np.any(diffs < -1e-9):
                rep.add("types.transition", f"type {spec.type_id}: transition not nondecreasing in action")
            if sign == -1 and np.any(diffs > 1e-9):
                rep.add("types.transition", f"type {spec.type_id}: transition not nonincreasing in action")
            if sign == 0 and np.any(np.abs(diffs) > 1e-9):
                rep.add("types.transition", f"type {spec.type_id}: transition not constant in action")
            if np.any(np.diff(z_next, axis=0) < -1e-9):
                rep.add("types.transition", f"type {spec.type_id}: transition decreasing in internal state")

        # internal state must stay inside [0, Z] along every feasible path:
        # propagate the reachable range stage by stage under sampled actions
        z_lo = z_hi = spec.z0
        for t in range(1, chain.horizon + 1):
            zr, ar = np.meshgrid(_sample_grid(z_lo, z_hi), a_grid, indexing="ij")
            lo, hi = np.inf, -np.inf
            for si in range(S):
                z_next = spec.transition.next_state(zr, ar, si)
                lo = min(lo, float(np.min(z_next)))
                hi = max(hi, float(np.max(z_next)))
            if lo < -1e-9 or hi > b.internal + 1e-9:
                rep.add(
                    "types.transition",
                    f"type {spec.type_id}: reachable internal state [{lo:.6g}, {hi:.6g}] "
                    f"leaves [0, {b.internal}] at stage {t}",
                )
                break
            z_lo, z_hi = lo, hi

    return rep
