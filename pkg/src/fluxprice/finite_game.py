"""Finite-population experiments.

Three experiments quantify how the continuum solution behaves with n
consumers: realized per-capita welfare when everyone conforms, the best
payoff improvement one tagged consumer can reach by deviating (her action
moves prices through the population-scaled cost model), and the welfare gap
to the exact n-conditional optimum.

Only the initial type draw is Monte Carlo; the expectation over exogenous
histories is always exact over the tree.  Per-draw random streams are
spawned from the master seed and the draw index, so results are bit
identical for a given (scenario, n, seed) at any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .equilibrium import (
    DEFAULT_SEED,
    ObliviousStrategy,
    SolveConfig,
    _maximize_welfare,
    _welfare_total,
    type_state_paths_single,
    type_utilities,
)
from .scenario import CapacityError, Scenario

__all__ = [
    "PopulationSample",
    "SimulationResult",
    "DeviationResult",
    "WelfareGapResult",
    "sample_population",
    "simulate_symmetric",
    "deviation_gain",
    "welfare_gap",
    "write_experiment_csv",
]

DP_CELL_BUDGET = 200_000_000


def _draw_rng(seed: int, draw: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(draw),)))


@dataclass(frozen=True)
class PopulationSample:
    """One draw of n initial types: counts per type and the empirical
    distribution, reproducible from (n, seed, draw)."""

    n: int
    counts: np.ndarray
    seed: int
    draw: int

    @property
    def empirical(self) -> np.ndarray:
        return self.counts / float(self.n)


def sample_population(scenario: Scenario, s0, n: int, seed: int, draw: int) -> PopulationSample:
    rng = _draw_rng(seed, draw)
    eta = scenario.type_weights(s0)
    counts = rng.multinomial(n, eta)
    return PopulationSample(n=n, counts=counts, seed=seed, draw=draw)


@dataclass(frozen=True)
class SimulationResult:
    n: int
    draws: int
    seed: int
    values: np.ndarray
    @property
    def mean(self) -> float:
        return float(self.values.mean())
    @property
    def stderr(self) -> float:
        if len(self.values) < 2:
            return 0.0
        return float(self.values.std(ddof=1) / np.sqrt(len(self.values)))


def simulate_symmetric(scenario: Scenario, strategy: ObliviousStrategy, n: int,
                       draws: int, seed: int = DEFAULT_SEED, s0=None) -> SimulationResult:
    """Per-capita realized welfare when all n consumers play the strategy.

    Under the population scaling of the cost model, per-capita welfare
    equals the continuum welfare evaluated at the drawn empirical type
    distribution, so each draw is exact given its type counts.
    """
    if n < 1:
        raise ValueError("population size must be >= 1")
    tree = strategy.tree
    if s0 is None:
        s0 = tree.chain.states[tree.s0_index]
    eta = scenario.type_weights(s0)
    rngs = [_draw_rng(seed, d) for d in range(draws)]
    F = np.vstack([rng.multinomial(n, eta) / float(n) for rng in rngs])  # (draws, X)

    demand = F @ strategy.actions  # (draws, N)
    from .equilibrium import _state_groups

    by_state, by_pair = _state_groups(tree)
    primary = np.zeros_like(demand)
    anc = np.zeros_like(demand)
    for label, ids in by_state:
        primary[:, ids] = scenario.costs.primary_at(label).value(0.0, demand[:, ids])
    root_label = tree.chain.states[tree.state_of[0]]
    anc[:, 0] = scenario.costs.ancillary0_at(root_label).value(0.0, demand[:, 0])
    for sp, sc, ids in by_pair:
        anc[:, ids] = scenario.costs.ancillary_at(sp, sc).value(demand[:, tree.parent[ids]], demand[:, ids])

    util = F @ type_utilities(scenario, strategy)  # (draws, N)
    values = (util - primary - anc) @ tree.prob
    return SimulationResult(n=n, draws=draws, seed=seed, values=values)


# ---------------------------------------------------------------------------
# tagged-consumer deviation


def _deviation_zgrids(scenario, tree, spec, agrid, base_points):
    from .equilibrium import _z_grids

    return _z_grids(scenario, tree, spec, agrid, base_points)


def _interp_rows(V_col_major: np.ndarray, zgrid: np.ndarray, z_query: np.ndarray) -> np.ndarray:
    """Interpolate V (len(zgrid) x K) along its first axis at per-column query
    points z_query (rows x K); returns (rows x K)."""
    idx = np.clip(np.searchsorted(zgrid, z_query), 1, len(zgrid) - 1)
    z0 = zgrid[idx - 1]
    z1 = zgrid[idx]
    w = np.where(z1 > z0, (z_query - z0) / np.where(z1 > z0, z1 - z0, 1.0), 0.0)
    cols = np.broadcast_to(np.arange(V_col_major.shape[1]), z_query.shape)
    lo = V_col_major[idx - 1, cols]
    hi = V_col_major[idx, cols]
    return lo + w * (hi - lo)


def _tagged_prices(scenario, tree, node, a_prev_total, a_total, n):
    """Price components at a node of the n-consumer game, as functions of the
    total previous and current demand (arrays broadcast together)."""
    labels = tree.chain.states
    sc = labels[tree.state_of[node]]
    per_prev = np.asarray(a_prev_total, dtype=float) / n
    per_cur = np.asarray(a_total, dtype=float) / n
    p = scenario.costs.primary_at(sc).d_cur(0.0, per_cur)
    if tree.parent[node] < 0:
        w = scenario.costs.ancillary0_at(sc).d_cur(0.0, per_cur)
        q = np.zeros_like(np.asarray(w))
    else:
        sp = labels[tree.state_of[tree.parent[node]]]
        h = scenario.costs.ancillary_at(sp, sc)
        w = h.d_cur(per_prev, per_cur)
        q = h.d_prev(per_prev, per_cur)
    return p, w, q


def _conform_value(scenario, tree, spec, own_actions, others_demand, n):
    """Exact expected payoff of the tagged consumer playing the per-node
    actions while the other n-1 consumers generate ``others_demand``."""
    z = type_state_paths_single(scenario, tree, spec, own_actions)
    total = 0.0
    for i in range(tree.num_nodes):
        t = int(tree.stage_of[i])
        a = float(own_actions[i])
        ap = float(own_actions[tree.parent[i]]) if tree.parent[i] >= 0 else 0.0
        prev_total = (others_demand[tree.parent[i]] + ap) if tree.parent[i] >= 0 else 0.0
        p, w, q = _tagged_prices(scenario, tree, i, prev_total, others_demand[i] + a, n)
        u = float(spec.utility.value(t, float(z[i]), a, int(tree.state_of[i])))
        total += tree.prob[i] * (u - (float(p) + float(w)) * a - float(q) * ap)
    return total


def _interp_diag(V_col_major: np.ndarray, zgrid: np.ndarray, z_query: np.ndarray) -> np.ndarray:
    """Interpolate column k of V at z_query[k], for all k at once."""
    idx = np.clip(np.searchsorted(zgrid, z_query), 1, len(zgrid) - 1)
    z0 = zgrid[idx - 1]
    z1 = zgrid[idx]
    w = np.where(z1 > z0, (z_query - z0) / np.where(z1 > z0, z1 - z0, 1.0), 0.0)
    cols = np.arange(V_col_major.shape[1])
    lo = V_col_major[idx - 1, cols]
    hi = V_col_major[idx, cols]
    return lo + w * (hi - lo)


def _best_deviation(scenario, tree, spec, others_demand, n, agrid, zgrids):
    """Backward DP over (node, own internal state, own previous action) and a
    forward pass at exact states; returns the deviation action path."""
    Ag = len(agrid)
    last = tree.num_stages - 1
    V: dict[int, np.ndarray] = {}

    for t in range(last, -1, -1):
        zg = zgrids[t]
        for node in tree.stages[t]:
            state = int(tree.state_of[node])
            u_za = np.asarray(spec.utility.value(t, zg[:, None], agrid[None, :], state), dtype=float)
            m_za = u_za
            if t < last:
                cont = np.zeros((len(zg), Ag))
                for c in tree.children(node):
                    znext = np.asarray(spec.transition.next_state(zg[:, None], agrid[None, :], int(tree.state_of[c])))
                    cont += tree.cond_prob[c] * _interp_rows(V[c], zgrids[t + 1], znext)
                m_za = m_za + cont
            if tree.parent[node] < 0:
                p, w, q = _tagged_prices(scenario, tree, node, 0.0, others_demand[node] + agrid, n)
                pay = -(np.asarray(p) + np.asarray(w)) * agrid
                V[node] = (m_za + pay[None, :]).max(axis=1, keepdims=True)
            else:
                ap_total = others_demand[tree.parent[node]] + agrid  # (Ap,)
                a_total = others_demand[node] + agrid  # (Ag,)
                p, w, q = _tagged_prices(
                    scenario, tree, node, ap_total[:, None], a_total[None, :], n
                )
                pay_pa = -(np.asarray(p) + np.asarray(w)) * agrid[None, :] - np.asarray(q) * agrid[:, None]
                V[node] = _kernels.stage_max(m_za, pay_pa)

    # forward pass at exact own state, previous action restricted to agrid
    actions = np.zeros(tree.num_nodes)
    z_path = np.zeros(tree.num_nodes)
    z_path[0] = spec.z0
    for t in range(tree.num_stages):
        for node in tree.stages[t]:
            state = int(tree.state_of[node])
            z = float(z_path[node])
            ap = float(actions[tree.parent[node]]) if tree.parent[node] >= 0 else 0.0
            u = np.asarray(spec.utility.value(t, np.full(Ag, z), agrid, state), dtype=float)
            prev_total = (others_demand[tree.parent[node]] + ap) if tree.parent[node] >= 0 else 0.0
            p, w, q = _tagged_prices(scenario, tree, node, prev_total, others_demand[node] + agrid, n)
            phi = u - (np.asarray(p) + np.asarray(w)) * agrid - np.asarray(q) * ap
            if t < last:
                for c in tree.children(node):
                    znext = np.asarray(spec.transition.next_state(np.full(Ag, z), agrid, int(tree.state_of[c])))
                    # continuation indexed by (next z, own action as the next
                    # stage's previous action); the action grid carries over
                    phi = phi + tree.cond_prob[c] * _interp_diag(V[c], zgrids[t + 1], znext)
            j = int(np.argmax(phi))
            actions[node] = agrid[j]
            for c in tree.children(node):
                z_path[c] = float(spec.transition.next_state(z, agrid[j], int(tree.state_of[c])))
    return actions


@dataclass(frozen=True)
class DeviationResult:
    n: int
    draws: int
    seed: int
    gains: np.ndarray          # (draws, num_types)
    type_ids: tuple[str, ...]
    @property
    def mean_by_type(self) -> np.ndarray:
        return self.gains.mean(axis=0)
    @property
    def max_mean(self) -> float:
        return float(self.mean_by_type.max())
    @property
    def stderr_by_type(self) -> np.ndarray:
        if self.gains.shape[0] < 2:
            return np.zeros(self.gains.shape[1])
        return self.gains.std(axis=0, ddof=1) / np.sqrt(self.gains.shape[0])


def deviation_gain(scenario: Scenario, strategy: ObliviousStrategy, n: int,
                   seed: int = DEFAULT_SEED, draws: int = 32, s0=None,
                   action_grid: int = 201, z_grid: int = 201,
                   threads: int = 1) -> DeviationResult:
    """Best payoff improvement available to one tagged consumer of each type
    when the other n-1 consumers play the strategy.

    The tagged consumer's own action enters aggregate demand, so prices in
    her program depend on her current and previous actions; the program is
    solved on (action x internal-state) grids, and the chosen deviation is
    re-evaluated exactly, so the reported gain is a lower bound on the true
    supremum and never negative.
    """
    tree = strategy.tree
    if s0 is None:
        s0 = tree.chain.states[tree.s0_index]
    B = scenario.bounds.action
    agrid = np.linspace(0.0, B, action_grid)
    cells = tree.num_nodes * z_grid * action_grid * action_grid
    if cells > DP_CELL_BUDGET:
        raise CapacityError(
            f"deviation program needs {cells} cells, over budget {DP_CELL_BUDGET}; "
            "reduce the grids or the horizon"
        )

    zgrids_by_type = [
        _deviation_zgrids(scenario, tree, spec, agrid, z_grid) for spec in scenario.types
    ]

    def one_draw(d: int) -> np.ndarray:
        if n > 1:
            pop = sample_population(scenario, s0, n - 1, seed, d)
            others = (n - 1) * (pop.empirical @ strategy.actions)
        else:
            others = np.zeros(tree.num_nodes)
        out = np.zeros(scenario.num_types)
        for x, spec in enumerate(scenario.types):
            conform = _conform_value(scenario, tree, spec, strategy.actions[x], others, n)
            dev = _best_deviation(scenario, tree, spec, others, n, agrid, zgrids_by_type[x])
            dev_value = _conform_value(scenario, tree, spec, dev, others, n)
            out[x] = max(dev_value, conform) - conform
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            gains = np.vstack(list(pool.map(one_draw, range(draws))))
    else:
        gains = np.vstack([one_draw(d) for d in range(draws)])
    return DeviationResult(n=n, draws=draws, seed=seed, gains=gains,
                           type_ids=tuple(t.type_id for t in scenario.types))


# ---------------------------------------------------------------------------
# welfare gap to the n-conditional optimum


@dataclass(frozen=True)
class WelfareGapResult:
    n: int
    draws: int
    seed: int
    gaps: np.ndarray
    @property
    def mean(self) -> float:
        return float(self.gaps.mean())
    @property
    def stderr(self) -> float:
        if len(self.gaps) < 2:
            return 0.0
        return float(self.gaps.std(ddof=1) / np.sqrt(len(self.gaps)))


def welfare_gap(scenario: Scenario, strategy: ObliviousStrategy, n_values,
                draws: int, seed: int = DEFAULT_SEED, s0=None,
                config: SolveConfig | None = None, threads: int = 1) -> list[WelfareGapResult]:
    """Expected shortfall of the conforming profile against the exact
    optimum conditioned on each drawn initial type distribution.

    For every draw the comparator re-solves the welfare program with the
    empirical weights (warm-started at the conforming strategy), so the gap
    is nonnegative up to solver tolerance and shrinks as the empirical
    distribution concentrates.
    """
    tree = strategy.tree
    if s0 is None:
        s0 = tree.chain.states[tree.s0_index]
    cfg = config or SolveConfig(polish=False, compute_value_gaps=False, restarts=1, strict=False)

    results = []
    for n in n_values:
        def one_draw(d: int, n=n) -> float:
            pop = sample_population(scenario, s0, n, seed, d)
            fw = pop.empirical
            base = _welfare_total(scenario, tree, strategy.actions, fw)
            v, fb, _res, _it = _maximize_welfare(
                scenario, tree, fw, cfg, [strategy.actions.copy()]
            )
            return fb - base

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                gaps = np.array(list(pool.map(one_draw, range(draws))))
        else:
            gaps = np.array([one_draw(d) for d in range(draws)])
        results.append(WelfareGapResult(n=n, draws=draws, seed=seed, gaps=gaps))
    return results


def write_experiment_csv(rows, path) -> None:
    """Rows: dicts with experiment, n, draws, seed, mean, stderr, metric."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment", "n", "draws", "seed", "mean", "stderr", "metric"])
        for r in rows:
            writer.writerow(
                [r["experiment"], r["n"], r["draws"], r["seed"],
                 f"{r['mean']:.12g}", f"{r['stderr']:.12g}", r["metric"]]
            )
