"""Continuum-game solvers.

The equilibrium under the proposed three-part pricing is computed as the
maximizer of the (concave) expected social welfare over the box of per-type,
per-history actions, then verified in two independent ways: the one-sided
stationarity conditions with the forward-looking correction term, and a
best-response dynamic program under the induced prices.  The marginal-cost
equilibrium is a damped best-response fixed point; the best response prefers
the current strategy whenever it is within a tie tolerance of optimal, which
makes the iteration terminate exactly at equilibria where consumers are
indifferent over an action interval.

Welfare maximization runs in three phases: projected supergradient ascent
with an adaptive step, golden-section line searches over a direction set
that includes parent-child action pairs (these follow the nonsmooth ridges
created by capped utilities), and a final snap of near-kink coordinates onto
the exact kink locations so that one-sided conditions evaluate on the
correct side.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .costs import CostModel
from .pricing import (
    Accounting,
    DemandPath,
    Mechanism,
    PaymentMode,
    PricePath,
    accounting,
    induced_prices,
)
from .scenario import HistoryTree, Scenario

__all__ = [
    "DEFAULT_SEED",
    "ObliviousStrategy",
    "WelfareReport",
    "KKTResidual",
    "SolveConfig",
    "SolveReport",
    "BestResponse",
    "NonConvergenceError",
    "NonConcavityWarning",
    "aggregate_demand",
    "type_state_paths",
    "type_utilities",
    "continuum_welfare",
    "oblivious_value",
    "best_response",
    "kkt_residual",
    "solve_doe",
    "solve_mcp",
    "solve_flat",
    "write_solve_csv",
]

DEFAULT_SEED = 1729

LOWER_ACTIVE, INTERIOR, UPPER_ACTIVE = 0, 1, 2
_BOUND_EPS = 1e-12


class NonConvergenceError(RuntimeError):
    def __init__(self, message, report=None, residual_history=()):
        super().__init__(message)
        self.report = report
        self.residual_history = tuple(residual_history)


class NonConcavityWarning(UserWarning):
    """A line search saw welfare values inconsistent with concavity."""


@dataclass(frozen=True)
class ObliviousStrategy:
    """Action table: one action in [0, B] per (consumer type, history node)."""

    tree: HistoryTree
    actions: np.ndarray

    def __post_init__(self):
        acts = np.array(self.actions, dtype=float)
        if acts.ndim != 2 or acts.shape[1] != self.tree.num_nodes:
            raise ValueError("strategy must be (num_types, num_nodes)")
        acts.setflags(write=False)
        object.__setattr__(self, "actions", acts)

    @property
    def num_types(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True)
class WelfareReport:
    total: float
    per_stage: tuple[float, ...]
    utility_total: float
    primary_cost_total: float
    ancillary_cost_total: float


@dataclass(frozen=True)
class KKTResidual:
    """Per (type, node) violation of the one-sided stationarity conditions,
    plus the active-bound classification."""

    violation: np.ndarray
    classification: np.ndarray

    @property
    def max_violation(self) -> float:
        return float(self.violation.max()) if self.violation.size else 0.0


@dataclass
class SolveConfig:
    tol: float = 1e-6              # stationarity tolerance (welfare solver)
    max_iters: int = 4000          # ascent iterations
    polish_sweeps: int = 60
    polish: bool = True
    snap_window: float = 1e-5
    damping: float = 0.5           # fixed-point step for the MCP solver
    fp_tol: float = 1e-8
    mcp_max_iters: int = 100_000
    action_grid: int = 2001
    z_grid: int = 201
    tie_tol: float = 1e-9
    seed: int = DEFAULT_SEED
    strict: bool = True            # raise NonConvergenceError on failure
    restarts: int = 2
    compute_value_gaps: bool = True


@dataclass
class SolveReport:
    mechanism: str
    strategy: ObliviousStrategy
    demand: DemandPath
    prices: PricePath
    welfare: WelfareReport
    residual: float
    residual_kind: str
    iterations: int
    converged: bool
    value_gaps: tuple[float, ...] = ()
    accounting: Accounting | None = None
    flat_rate: float | None = None
    residual_history: tuple[float, ...] = ()
    kkt: KKTResidual | None = None


@dataclass(frozen=True)
class BestResponse:
    actions: np.ndarray
    value: float


# ---------------------------------------------------------------------------
# strategy evaluation


def aggregate_demand(strategy: ObliviousStrategy, scenario: Scenario) -> DemandPath:
    """Type-weighted average action at every history node."""
    tree = strategy.tree
    weights = scenario.type_weights(tree.chain.states[tree.s0_index])
    return DemandPath(tree=tree, values=weights @ strategy.actions)


def type_state_paths(scenario: Scenario, tree: HistoryTree, actions: np.ndarray) -> np.ndarray:
    """Internal state of each type at each node, propagated along histories."""
    X = scenario.num_types
    z = np.zeros((X, tree.num_nodes))
    for x, spec in enumerate(scenario.types):
        z[x, 0] = spec.z0
        for t in range(1, tree.num_stages):
            ids = tree.stages[t]
            par = tree.parent[ids]
            z[x, ids] = spec.transition.next_state(z[x, par], actions[x, par], tree.state_of[ids])
    return z


def type_utilities(scenario: Scenario, strategy: ObliviousStrategy) -> np.ndarray:
    """Stage utility of each type at each node under the strategy."""
    tree = strategy.tree
    z = type_state_paths(scenario, tree, strategy.actions)
    u = np.zeros_like(z)
    for x, spec in enumerate(scenario.types):
        for t in range(tree.num_stages):
            ids = tree.stages[t]
            u[x, ids] = spec.utility.value(t, z[x, ids], strategy.actions[x, ids], tree.state_of[ids])
    return u


def _state_groups(tree: HistoryTree):
    cached = getattr(tree, "_fx_groups", None)
    if cached is not None:
        return cached
    labels = tree.chain.states
    by_state = []
    for s in np.unique(tree.state_of):
        by_state.append((labels[s], np.flatnonzero(tree.state_of == s)))
    by_pair = []
    for t in range(1, tree.num_stages):
        ids = tree.stages[t]
        keys = tree.state_of[tree.parent[ids]] * len(labels) + tree.state_of[ids]
        for key in np.unique(keys):
            sel = ids[keys == key]
            by_pair.append((labels[key // len(labels)], labels[key % len(labels)], sel))
    cached = (by_state, by_pair)
    tree._fx_groups = cached
    return cached


def _cost_values(costs: CostModel, tree: HistoryTree, demand: np.ndarray):
    by_state, by_pair = _state_groups(tree)
    primary = np.zeros(tree.num_nodes)
    anc = np.zeros(tree.num_nodes)
    for label, ids in by_state:
        primary[ids] = costs.primary_at(label).value(0.0, demand[ids])
    root_label = tree.chain.states[tree.state_of[0]]
    anc[0] = costs.ancillary0_at(root_label).value(0.0, demand[0])
    for sp, sc, ids in by_pair:
        anc[ids] = costs.ancillary_at(sp, sc).value(demand[tree.parent[ids]], demand[ids])
    return primary, anc


def _welfare_nodes(scenario: Scenario, tree: HistoryTree, actions: np.ndarray, weights: np.ndarray):
    demand = weights @ actions
    primary, anc = _cost_values(scenario.costs, tree, demand)
    util = np.zeros(tree.num_nodes)
    z = type_state_paths(scenario, tree, actions)
    per_type_util = np.zeros_like(z)
    for x, spec in enumerate(scenario.types):
        for t in range(tree.num_stages):
            ids = tree.stages[t]
            per_type_util[x, ids] = spec.utility.value(t, z[x, ids], actions[x, ids], tree.state_of[ids])
        util += weights[x] * per_type_util[x]
    return demand, primary, anc, util


def _welfare_total(scenario: Scenario, tree: HistoryTree, actions: np.ndarray, weights: np.ndarray) -> float:
    _, primary, anc, util = _welfare_nodes(scenario, tree, actions, weights)
    return float(tree.prob @ (util - primary - anc))


def continuum_welfare(strategy: ObliviousStrategy, scenario: Scenario) -> WelfareReport:
    """Expected social welfare of the strategy, with its decomposition."""
    tree = strategy.tree
    weights = scenario.type_weights(tree.chain.states[tree.s0_index])
    _, primary, anc, util = _welfare_nodes(scenario, tree, strategy.actions, weights)
    node_w = util - primary - anc
    per_stage = tuple(float(tree.prob[ids] @ node_w[ids]) for ids in tree.stages)
    return WelfareReport(
        total=float(tree.prob @ node_w),
        per_stage=per_stage,
        utility_total=float(tree.prob @ util),
        primary_cost_total=float(tree.prob @ primary),
        ancillary_cost_total=float(tree.prob @ anc),
    )


# ---------------------------------------------------------------------------
# marginal machinery: gradients, correction terms, stationarity checks


def _price_arrays_for(scenario: Scenario, tree: HistoryTree, demand: np.ndarray):
    from .pricing import _price_arrays

    return _price_arrays(scenario.costs, tree, demand)


def _behavior_marginals(scenario: Scenario, tree: HistoryTree, actions: np.ndarray):
    """For every (type, node): one-sided action derivatives of the stage
    utility, and one-sided sensitivities of expected future utility to the
    action through the internal-state chain."""
    X, N = actions.shape
    z = type_state_paths(scenario, tree, actions)
    du_a_m = np.zeros((X, N))
    du_a_p = np.zeros((X, N))
    S_m_all = np.zeros((X, N))
    S_p_all = np.zeros((X, N))
    last = tree.num_stages - 1

    for x, spec in enumerate(scenario.types):
        du_z_m = np.zeros(N)
        du_z_p = np.zeros(N)
        for t in range(tree.num_stages):
            ids = tree.stages[t]
            m, pl = spec.utility.d_action(t, z[x, ids], actions[x, ids], tree.state_of[ids])
            du_a_m[x, ids], du_a_p[x, ids] = m, pl
            m, pl = spec.utility.d_state(t, z[x, ids], actions[x, ids], tree.state_of[ids])
            du_z_m[ids], du_z_p[ids] = m, pl

        # transition sensitivities on each edge, stored at the child
        ra_m = np.zeros(N)
        ra_p = np.zeros(N)
        rz_m = np.zeros(N)
        rz_p = np.zeros(N)
        for t in range(1, tree.num_stages):
            ids = tree.stages[t]
            par = tree.parent[ids]
            m, pl = spec.transition.d_action(z[x, par], actions[x, par], tree.state_of[ids])
            ra_m[ids], ra_p[ids] = m, pl
            m, pl = spec.transition.d_state(z[x, par], actions[x, par], tree.state_of[ids])
            rz_m[ids], rz_p[ids] = m, pl

        # backward accumulation of the future-utility sensitivity to the
        # entering internal state (transitions are nondecreasing in z, so a
        # perturbation keeps its direction along the chain)
        T_m = np.zeros(N)
        T_p = np.zeros(N)
        acc_m = np.zeros(N)
        acc_p = np.zeros(N)
        S_m = np.zeros(N)
        S_p = np.zeros(N)
        for t in range(last, 0, -1):
            ids = tree.stages[t]
            T_m[ids] = du_z_m[ids] + acc_m[ids]
            T_p[ids] = du_z_p[ids] + acc_p[ids]
            par = tree.parent[ids]
            cw = tree.cond_prob[ids]
            np.add.at(acc_m, par, cw * rz_m[ids] * T_m[ids])
            np.add.at(acc_p, par, cw * rz_p[ids] * T_p[ids])
            # action sensitivity flips the side when the transition is
            # decreasing in the action
            term_p = np.where(ra_p[ids] >= 0.0, ra_p[ids] * T_p[ids], ra_p[ids] * T_m[ids])
            term_m = np.where(ra_m[ids] >= 0.0, ra_m[ids] * T_m[ids], ra_m[ids] * T_p[ids])
            np.add.at(S_p, par, cw * term_p)
            np.add.at(S_m, par, cw * term_m)

        S_m_all[x] = S_m
        S_p_all[x] = S_p

    return du_a_m, du_a_p, S_m_all, S_p_all


def _expected_backward_charge(tree: HistoryTree, q: np.ndarray) -> np.ndarray:
    """Per node, the expected next-stage backward charge per unit of the
    current action."""
    eq_next = np.zeros(tree.num_nodes)
    nz = tree.parent >= 0
    np.add.at(eq_next, tree.parent[nz], tree.cond_prob[nz] * q[nz])
    return eq_next


def _marginals(scenario: Scenario, tree: HistoryTree, actions: np.ndarray, weights: np.ndarray):
    """Induced prices plus, for every (type, node), the one-sided action
    derivative of the stage utility and the one-sided forward correction
    term (expected next-stage backward charge minus the future-utility chain
    through the internal state)."""
    demand = weights @ actions
    p, w, q = _price_arrays_for(scenario, tree, demand)
    eq_next = _expected_backward_charge(tree, q)
    du_a_m, du_a_p, S_m, S_p = _behavior_marginals(scenario, tree, actions)
    g_p = eq_next[None, :] - S_p
    g_m = eq_next[None, :] - S_m
    last = tree.num_stages - 1
    if last >= 0:
        g_p[:, tree.stages[last]] = 0.0
        g_m[:, tree.stages[last]] = 0.0
    return demand, p, w, q, du_a_m, du_a_p, g_m, g_p


def _welfare_gradient(scenario, tree, actions, weights):
    _, p, w, _, du_a_m, du_a_p, g_m, g_p = _marginals(scenario, tree, actions, weights)
    du = 0.5 * (du_a_m + du_a_p)
    g = 0.5 * (g_m + g_p)
    return (tree.prob[None, :] * weights[:, None]) * (du - (p + w)[None, :] - g)


def _mode_charge(tree, prices, mode) -> np.ndarray:
    if mode.mechanism is Mechanism.FLAT:
        return np.full(tree.num_nodes, mode.flat_rate)
    eff = prices.p + prices.w
    if mode.mechanism is Mechanism.PROPOSED:
        eff = eff + _expected_backward_charge(tree, prices.q)
    return eff


def _consumer_sided(scenario, tree, actions, prices, mode):
    """One-sided derivatives of each type's expected payoff at fixed prices,
    per (type, node), without probability weighting."""
    du_a_m, du_a_p, S_m, S_p = _behavior_marginals(scenario, tree, actions)
    eff = _mode_charge(tree, prices, mode)
    return du_a_m - eff[None, :] + S_m, du_a_p - eff[None, :] + S_p


def kkt_residual(strategy: ObliviousStrategy, scenario: Scenario) -> KKTResidual:
    """One-sided stationarity violations of the welfare program.

    At an optimum: wherever the action is below B, the right action
    derivative of the stage utility may not exceed the marginal price plus
    the forward correction; wherever it is above 0, the left derivative may
    not fall short of them.  Violations are clipped at zero, so the residual
    is zero at kinked optima where both inequalities hold with slack.
    """
    tree = strategy.tree
    weights = scenario.type_weights(tree.chain.states[tree.s0_index])
    actions = strategy.actions
    B = scenario.bounds.action
    _, p, w, _, du_a_m, du_a_p, g_m, g_p = _marginals(scenario, tree, actions, weights)
    pw = (p + w)[None, :]

    up = np.maximum(0.0, du_a_p - pw - g_p)
    down = np.maximum(0.0, pw + g_m - du_a_m)
    up[actions >= B - _BOUND_EPS] = 0.0
    down[actions <= _BOUND_EPS] = 0.0

    cls = np.full(actions.shape, INTERIOR, dtype=np.int8)
    cls[actions <= _BOUND_EPS] = LOWER_ACTIVE
    cls[actions >= B - _BOUND_EPS] = UPPER_ACTIVE
    return KKTResidual(violation=np.maximum(up, down), classification=cls)


# ---------------------------------------------------------------------------
# welfare maximization


def _golden_max(f, lo: float, hi: float, iters: int = 90, check_concavity: bool = False):
    """Golden-section maximization of a unimodal function on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    if check_concavity:
        fa, fb = f(a), f(b)
        mid = f(0.5 * (a + b))
        if mid < 0.5 * (fa + fb) - 1e-9:
            warnings.warn(
                "welfare is not concave along a search segment; the scenario "
                "may violate the convex-cost/concave-utility assumptions",
                NonConcavityWarning,
                stacklevel=3,
            )
    for _ in range(iters):
        if b - a < 1e-13 * max(1.0, abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = c if fc >= fd else d
    return x, max(fc, fd)


def _projected_ascent(welfare, gradient, v0, B, max_iters, check_concavity=True):
    v = v0.copy()
    fv = welfare(v)
    step = 0.25 * B
    checked_concavity = not check_concavity
    stalls = 0
    it = -1
    for it in range(max_iters):
        grad = gradient(v)
        pg = np.abs(np.clip(v + grad, 0.0, B) - v).max()
        if pg <= 1e-12:
            break
        improved = False
        while step > 1e-14:
            raw = v + step * grad
            cand = np.clip(raw, 0.0, B)
            fc = welfare(cand)
            # chord test for concavity, only on unclipped segments (the
            # projected path is not a straight line once the box binds)
            if not checked_concavity and np.array_equal(cand, raw):
                if welfare(v + 0.5 * step * grad) < 0.5 * (fv + fc) - 1e-9:
                    warnings.warn(
                        "welfare is not concave along the ascent direction; the "
                        "scenario may violate the convex-cost/concave-utility assumptions",
                        NonConcavityWarning,
                        stacklevel=2,
                    )
                checked_concavity = True
            if fc > fv + 1e-14:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        stalls = stalls + 1 if fc - fv < 1e-12 * (1.0 + abs(fv)) else 0
        v, fv = cand, fc
        if stalls >= 5:
            break
        step = min(step * 1.6, 4.0 * B)
    return v, fv, it + 1


def _direction_set(shape, tree, pair_dirs: bool, rng):
    """Search directions: coordinates, parent-child pairs within each type
    (ridge followers), and a few random directions."""
    X, N = shape
    dirs = []
    for x in range(X):
        for i in range(N):
            d = np.zeros(shape)
            d[x, i] = 1.0
            dirs.append(d)
    if pair_dirs:
        for x in range(X):
            for c in range(1, N):
                par = tree.parent[c]
                for sgn in (-1.0, 1.0):
                    d = np.zeros(shape)
                    d[x, par] = 1.0
                    d[x, c] = sgn
                    dirs.append(d)
        if X > 1:
            for i in range(N):
                for x in range(1, X):
                    d = np.zeros(shape)
                    d[0, i] = 1.0
                    d[x, i] = -1.0
                    dirs.append(d)
    for _ in range(8):
        d = rng.standard_normal(shape)
        dirs.append(d / np.abs(d).max())
    return dirs


def _line_range(v, d, B):
    """Parameter range keeping ``v + tau*d`` inside the action box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        hi_all = np.where(d > 0, (B - v) / d, np.where(d < 0, -v / d, np.inf))
        lo_all = np.where(d > 0, -v / d, np.where(d < 0, (B - v) / d, -np.inf))
    return float(lo_all.max()), float(hi_all.min())


def _polish(welfare, v, fv, B, tree, sweeps, rng, pair_dirs=True):
    dirs = _direction_set(v.shape, tree, pair_dirs, rng)
    for _ in range(sweeps):
        gained = 0.0
        for d in dirs:
            lo, hi = _line_range(v, d, B)
            if hi - lo < 1e-14:
                continue
            lo, hi = max(lo, -4.0 * B), min(hi, 4.0 * B)

            def phi(tau, d=d):
                return welfare(np.clip(v + tau * d, 0.0, B))

            tau, ft = _golden_max(phi, lo, hi)
            if ft > fv + 1e-13:
                v = np.clip(v + tau * d, 0.0, B)
                gained += ft - fv
                fv = ft
        if gained < 1e-12:
            break
    return v, fv


def _snap_kinks(scenario, tree, welfare, v, fv, window):
    """Move near-kink coordinates onto the exact kink when welfare allows.

    Kink candidates: the stage-utility kinks at the node's current internal
    state, the transition kinks, and the box bounds.  Snapping never lowers
    welfare by more than 1e-11.
    """
    B = scenario.bounds.action
    changed = False
    for x, spec in enumerate(scenario.types):
        z = type_state_paths(scenario, tree, v)[x]
        for i in range(tree.num_nodes):
            t = int(tree.stage_of[i])
            cands = set(spec.utility.action_kinks(t, float(z[i]), int(tree.state_of[i])))
            cands.update(spec.transition.action_kinks(float(z[i])))
            cands.update((0.0, B))
            a = v[x, i]
            for k in sorted(cands, key=lambda c: abs(c - a)):
                if not (0.0 <= k <= B):
                    continue
                if 0.0 < abs(k - a) <= window:
                    cand = v.copy()
                    cand[x, i] = k
                    fc = welfare(cand)
                    if fc >= fv - 1e-11:
                        v, fv = cand, fc
                        # internal states downstream of the changed action move
                        z = type_state_paths(scenario, tree, v)[x]
                        changed = True
                        break
    return v, fv, changed


def _maximize_welfare(scenario, tree, weights, cfg: SolveConfig, starts):
    B = scenario.bounds.action

    def welfare(acts):
        return _welfare_total(scenario, tree, acts, weights)

    def gradient(acts):
        return _welfare_gradient(scenario, tree, acts, weights)

    rng = np.random.default_rng(cfg.seed)
    best_v, best_f, best_res, iters = None, -np.inf, np.inf, 0
    for attempt, v0 in enumerate(starts):
        v, fv, it = _projected_ascent(welfare, gradient, v0, B, cfg.max_iters)
        iters += it
        res = kkt_residual(ObliviousStrategy(tree, v), scenario).max_violation
        if cfg.polish and res > cfg.tol:
            small = v.size <= 64
            v, fv = _polish(welfare, v, fv, B, tree, cfg.polish_sweeps, rng, pair_dirs=small)
            for _ in range(3):
                v, fv, moved = _snap_kinks(scenario, tree, welfare, v, fv, cfg.snap_window)
                if not moved:
                    break
                v, fv = _polish(welfare, v, fv, B, tree, 4, rng, pair_dirs=small)
            res = kkt_residual(ObliviousStrategy(tree, v), scenario).max_violation
        if fv > best_f or (res < best_res and fv > best_f - 1e-10):
            best_v, best_f, best_res = v, fv, res
        if best_res <= cfg.tol:
            break
    return best_v, best_f, best_res, iters


# ---------------------------------------------------------------------------
# best response by dynamic programming


def _effective_charge(tree, prices: PricePath, mode: PaymentMode):
    """Per-node price on the current own action, with the expected
    next-stage backward charge folded in under the proposed mechanism."""
    if mode.mechanism is Mechanism.FLAT:
        return np.full(tree.num_nodes, mode.flat_rate)
    eff = prices.p + prices.w
    if mode.mechanism is Mechanism.PROPOSED:
        eq_next = np.zeros(tree.num_nodes)
        nz = tree.parent >= 0
        np.add.at(eq_next, tree.parent[nz], tree.cond_prob[nz] * prices.q[nz])
        eff = eff + eq_next
    return eff


def oblivious_value(scenario: Scenario, prices: PricePath, type_spec, actions: np.ndarray,
                    mode: PaymentMode) -> float:
    """Exact expected payoff of one type playing the per-node actions."""
    tree = prices.tree
    acts = np.asarray(actions, dtype=float)[None, :]
    z = type_state_paths_single(scenario, tree, type_spec, acts[0])
    total = 0.0
    for t in range(tree.num_stages):
        ids = tree.stages[t]
        u = type_spec.utility.value(t, z[ids], acts[0, ids], tree.state_of[ids])
        if mode.mechanism is Mechanism.FLAT:
            pay = mode.flat_rate * acts[0, ids]
        else:
            pay = (prices.p[ids] + prices.w[ids]) * acts[0, ids]
            if mode.mechanism is Mechanism.PROPOSED and t >= 1:
                pay = pay + prices.q[ids] * acts[0, tree.parent[ids]]
        total += float(tree.prob[ids] @ (u - pay))
    return total


def type_state_paths_single(scenario, tree, type_spec, actions):
    z = np.zeros(tree.num_nodes)
    z[0] = type_spec.z0
    for t in range(1, tree.num_stages):
        ids = tree.stages[t]
        par = tree.parent[ids]
        z[ids] = type_spec.transition.next_state(z[par], actions[par], tree.state_of[ids])
    return z


def _z_grids(scenario, tree, type_spec, agrid, base_points, anchor=None):
    """Per-stage internal-state grids: uniform plus the states reachable
    from the initial state under the action grid (kept while small, so that
    interpolation is exact at on-path states).

    When an anchor strategy is given, each stage grid also gets a
    logarithmic cluster around the anchor's own state path; continuation
    values can be sharply curved there (notably under proximal
    regularization), and the cluster keeps the interpolation error below
    the payoff differences that small steps around the anchor produce.
    """
    Z = scenario.bounds.internal
    uniform = np.linspace(0.0, Z, base_points)
    anchor_z = None
    if anchor is not None:
        anchor_z = type_state_paths_single(scenario, tree, type_spec, np.asarray(anchor, float))
    offsets = np.concatenate([[0.0], np.logspace(-11, -3, 9), -np.logspace(-11, -3, 9)])

    grids = [np.array([type_spec.z0])]
    reach = np.array([type_spec.z0])
    for t in range(1, tree.num_stages):
        states_here = np.unique(tree.state_of[tree.stages[t]])
        if reach is not None and reach.size * agrid.size * states_here.size <= 500_000:
            nxt = []
            for s in states_here:
                vals = type_spec.transition.next_state(reach[:, None], agrid[None, :], int(s))
                nxt.append(np.unique(np.asarray(vals).ravel()))
            reach = np.unique(np.concatenate(nxt))
            if reach.size > 4000:
                reach = None
        else:
            reach = None
        parts = [uniform]
        if reach is not None:
            parts.append(reach)
        if anchor_z is not None:
            around = (anchor_z[tree.stages[t]][:, None] + offsets[None, :]).ravel()
            parts.append(np.clip(around, 0.0, Z))
        grids.append(np.unique(np.concatenate(parts)))
    return grids


def _vector_golden(f, lo, hi, iters=60):
    """Golden-section maximization vectorized over an array of brackets."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a = lo.astype(float).copy()
    b = hi.astype(float).copy()
    for _ in range(iters):
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        left = f(c) >= f(d)
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        if float((b - a).max()) < 1e-13:
            break
    x = 0.5 * (a + b)
    return x, f(x)


def best_response(scenario: Scenario, prices: PricePath, type_spec, mode: PaymentMode,
                  anchor: np.ndarray | None = None, cfg: SolveConfig | None = None,
                  prox_center: np.ndarray | None = None, prox_weight: float = 0.0) -> BestResponse:
    """Optimal per-node actions of one type against fixed induced prices.

    Backward dynamic program over (history node, own internal state), with
    the action optimized on a grid refined by golden-section search.  Ties
    within ``cfg.tie_tol`` break toward the anchor action when one is given,
    otherwise toward the smallest optimal action.

    With ``prox_weight > 0`` every stage objective is penalized by
    ``prox_weight/2 * (a - prox_center)^2``; the penalized problem has the
    same fixed points under self-play but a unique, continuously varying
    argmax, which the marginal-cost fixed-point solver relies on.  The
    returned value is always the unpenalized payoff of the returned actions.
    """
    if cfg is None:
        cfg = SolveConfig()
    if isinstance(type_spec, (int, np.integer)):
        type_spec = scenario.types[int(type_spec)]
    tree = prices.tree
    B = scenario.bounds.action
    agrid = np.linspace(0.0, B, cfg.action_grid)
    eff = _effective_charge(tree, prices, mode)
    zgrids = _z_grids(scenario, tree, type_spec, agrid, cfg.z_grid, anchor=anchor)
    last = tree.num_stages - 1

    V: dict[int, np.ndarray] = {}

    def stage_objective(node, t, zvals, avals):
        """Utility minus effective charge plus interpolated continuation,
        elementwise over matching-shape z and a arrays."""
        out = type_spec.utility.value(t, zvals, avals, int(tree.state_of[node])) - eff[node] * avals
        if prox_weight > 0.0 and prox_center is not None:
            out = out - 0.5 * prox_weight * (avals - prox_center[node]) ** 2
        if t < last:
            for c in tree.children(node):
                znext = type_spec.transition.next_state(zvals, avals, int(tree.state_of[c]))
                cont = np.interp(np.asarray(znext).ravel(), zgrids[t + 1], V[c])
                out = out + tree.cond_prob[c] * cont.reshape(np.shape(out))
        return out

    for t in range(last, -1, -1):
        zg = zgrids[t]
        for node in tree.stages[t]:
            phi = stage_objective(node, t, zg[:, None], agrid[None, :])
            j = np.argmax(phi, axis=1)
            vals = phi[np.arange(len(zg)), j]
            lo = agrid[np.maximum(j - 1, 0)]
            hi = agrid[np.minimum(j + 1, len(agrid) - 1)]
            xr, vr = _vector_golden(lambda a: stage_objective(node, t, zg, a), lo, hi)
            vals = np.maximum(vals, vr)
            if anchor is not None:
                vals = np.maximum(vals, stage_objective(node, t, zg, np.full(len(zg), anchor[node])))
            V[node] = vals

    # forward pass at exact internal states
    actions = np.zeros(tree.num_nodes)
    z_path = np.zeros(tree.num_nodes)
    z_path[0] = type_spec.z0
    for t in range(tree.num_stages):
        for node in tree.stages[t]:
            z = float(z_path[node])

            def phi(a, node=node, t=t, z=z):
                return stage_objective(node, t, np.full(np.shape(a), z), np.asarray(a, dtype=float))

            grid_vals = phi(agrid)
            j = int(np.argmax(grid_vals))
            xg, vg = _golden_max(lambda a: float(phi(a)), agrid[max(j - 1, 0)], agrid[min(j + 1, len(agrid) - 1)])
            vbest = max(float(grid_vals[j]), vg)

            specials = {0.0, B, float(agrid[j])}
            specials.update(k for k in type_spec.utility.action_kinks(t, z, int(tree.state_of[node])))
            specials.update(type_spec.transition.action_kinks(z))
            if anchor is not None:
                specials.add(float(anchor[node]))
            specials = sorted(a for a in specials if 0.0 <= a <= B)
            svals = {a: float(phi(a)) for a in specials}
            vbest = max(vbest, max(svals.values()))

            chosen = None
            if anchor is not None and svals.get(float(anchor[node]), -np.inf) >= vbest - cfg.tie_tol:
                chosen = float(anchor[node])
            if chosen is None:
                # smallest action achieving the maximum within the tie tolerance
                ties = np.flatnonzero(grid_vals >= vbest - cfg.tie_tol)
                cand = [a for a, fa in svals.items() if fa >= vbest - cfg.tie_tol]
                if xg is not None and vg >= vbest - cfg.tie_tol:
                    cand.append(xg)
                if ties.size:
                    j0 = int(ties[0])
                    edge = agrid[j0]
                    if j0 > 0:
                        lo_a, hi_a = agrid[j0 - 1], agrid[j0]
                        for _ in range(50):
                            mid = 0.5 * (lo_a + hi_a)
                            if float(phi(mid)) >= vbest - cfg.tie_tol:
                                hi_a = mid
                            else:
                                lo_a = mid
                        edge = hi_a
                    cand.append(float(edge))
                chosen = min(cand)
            actions[node] = chosen
            if t < last:
                for c in tree.children(node):
                    z_path[c] = float(type_spec.transition.next_state(z, chosen, int(tree.state_of[c])))

    value = oblivious_value(scenario, prices, type_spec, actions, mode)
    if anchor is not None:
        anchored = oblivious_value(scenario, prices, type_spec, np.asarray(anchor, float), mode)
        if anchored >= value - cfg.tie_tol:
            return BestResponse(actions=np.asarray(anchor, float).copy(), value=anchored)
    return BestResponse(actions=actions, value=value)


# ---------------------------------------------------------------------------
# proximal response at fixed prices (analytic, used by the fixed-point solver)


def _prox_response(scenario, tree, prices, mode, center, rho, cfg, rng):
    """Exact maximizer of total consumer payoff at fixed prices minus the
    probability-weighted proximal penalty ``rho/2 (u - center)^2``.

    The objective is separable across types and strictly concave for
    ``rho > 0``; ascent with analytic supergradients plus kink snapping
    solves it to near machine precision, warm-started at the center.
    """
    B = scenario.bounds.action
    prob = tree.prob

    def value(u):
        pay = sum(
            oblivious_value(scenario, prices, spec, u[x], mode)
            for x, spec in enumerate(scenario.types)
        )
        return pay - 0.5 * rho * float(((u - center) ** 2 * prob[None, :]).sum())

    def grad(u):
        left, right = _consumer_sided(scenario, tree, u, prices, mode)
        return prob[None, :] * (0.5 * (left + right) - rho * (u - center))

    def residual(u):
        left, right = _consumer_sided(scenario, tree, u, prices, mode)
        pen = rho * (u - center)
        up = np.maximum(0.0, right - pen)
        down = np.maximum(0.0, -(left - pen))
        up[u >= B - _BOUND_EPS] = 0.0
        down[u <= _BOUND_EPS] = 0.0
        return float(np.maximum(up, down).max())

    u, fu, _ = _projected_ascent(value, grad, center.copy(), B, 150, check_concavity=False)
    u, fu, _ = _snap_kinks(scenario, tree, value, u, fu, cfg.snap_window)
    if residual(u) > 1e-10:
        u, fu = _polish(value, u, fu, B, tree, 12, rng, pair_dirs=u.size <= 64)
        u, fu, _ = _snap_kinks(scenario, tree, value, u, fu, cfg.snap_window)
    return u


# ---------------------------------------------------------------------------
# equilibrium solvers


def _report_for(scenario, tree, actions, mechanism, residual, residual_kind, iterations,
                converged, mode, value_gaps=(), flat_rate=None, residual_history=(),
                kkt: KKTResidual | None = None):
    strategy = ObliviousStrategy(tree, actions)
    demand = aggregate_demand(strategy, scenario)
    prices = induced_prices(scenario.costs, demand)
    report = SolveReport(
        mechanism=mechanism,
        strategy=strategy,
        demand=demand,
        prices=prices,
        welfare=continuum_welfare(strategy, scenario),
        residual=residual,
        residual_kind=residual_kind,
        iterations=iterations,
        converged=converged,
        value_gaps=tuple(value_gaps),
        accounting=accounting(scenario, strategy, mode, prices=prices),
        flat_rate=flat_rate,
        residual_history=tuple(residual_history),
        kkt=kkt,
    )
    return report


def solve_doe(scenario: Scenario, s0=None, config: SolveConfig | None = None) -> SolveReport:
    """Equilibrium under the proposed mechanism, via welfare maximization.

    The maximizer of the concave expected welfare is computed over the
    action box, then certified: one-sided stationarity residuals at every
    (type, node), and per-type best-response value gaps under the induced
    prices.
    """
    cfg = config or SolveConfig()
    tree = scenario.tree(s0)
    weights = scenario.type_weights(tree.chain.states[tree.s0_index])
    B = scenario.bounds.action
    X, N = scenario.num_types, tree.num_nodes

    rng = np.random.default_rng(cfg.seed)
    starts = [np.full((X, N), 0.5 * B)]
    for _ in range(max(0, cfg.restarts - 1)):
        starts.append(rng.uniform(0.0, B, size=(X, N)))

    v, _fv, res, iters = _maximize_welfare(scenario, tree, weights, cfg, starts)
    strategy = ObliviousStrategy(tree, v)
    kkt = kkt_residual(strategy, scenario)
    converged = kkt.max_violation <= cfg.tol

    gaps = []
    if cfg.compute_value_gaps:
        prices = induced_prices(scenario.costs, aggregate_demand(strategy, scenario))
        for x, spec in enumerate(scenario.types):
            br = best_response(scenario, prices, spec, PaymentMode.proposed(), anchor=v[x], cfg=cfg)
            gaps.append(br.value - oblivious_value(scenario, prices, spec, v[x], PaymentMode.proposed()))

    report = _report_for(
        scenario, tree, v, "proposed", kkt.max_violation, "kkt", iters, converged,
        PaymentMode.proposed(), value_gaps=gaps, kkt=kkt,
    )
    if cfg.strict and not converged:
        raise NonConvergenceError(
            f"welfare solver left stationarity residual {kkt.max_violation:.3g} > tol {cfg.tol:.3g}",
            report=report,
        )
    return report


MCP_CERTIFICATE_TOL = 1e-7


def solve_mcp(scenario: Scenario, s0=None, config: SolveConfig | None = None) -> SolveReport:
    """Marginal-cost-pricing equilibrium by damped best-response iteration.

    The inner step is a proximal best response, computed analytically: the
    maximizer of each type's payoff at the current induced prices minus a
    quadratic penalty around the current strategy.  Proximal regularization
    keeps fixed points unchanged but makes the update single-valued and
    continuous, so the iteration converges even at equilibria where
    consumers are indifferent over an action interval; the weight grows on
    oscillation and relaxes while updates stay aligned.

    Convergence requires both a small fixed-point displacement and a global
    certificate: the dynamic-programming best response under the final
    prices may not improve any type's payoff by more than a value
    tolerance.  The certificate rules out off-optimum rest points on
    consumer-indifference segments, where displacement alone can vanish.
    """
    cfg = config or SolveConfig()
    tree = scenario.tree(s0)
    weights = scenario.type_weights(tree.chain.states[tree.s0_index])
    B = scenario.bounds.action
    X, N = scenario.num_types, tree.num_nodes
    mode = PaymentMode.mcp()
    rng = np.random.default_rng(cfg.seed)

    v = np.full((X, N), 0.5 * B)
    lam = cfg.damping
    rho = 1.0
    prev_delta = None
    aligned = 0
    history = []
    converged = False
    gaps = ()
    it = 0
    for it in range(1, cfg.mcp_max_iters + 1):
        prices = induced_prices(scenario.costs, DemandPath(tree, weights @ v))
        br = _prox_response(scenario, tree, prices, mode, v, rho, cfg, rng)
        delta = br - v
        resid = float(np.abs(delta).max())
        history.append(resid)
        if resid <= cfg.fp_tol:
            gaps = []
            for x, spec in enumerate(scenario.types):
                b = best_response(scenario, prices, spec, mode, anchor=v[x], cfg=cfg)
                gaps.append(b.value - oblivious_value(scenario, prices, spec, v[x], mode))
            if max(gaps) <= MCP_CERTIFICATE_TOL:
                converged = True
                break
            # displacement stalled short of the best-response set: relax the
            # proximal weight so the iteration can travel again
            rho = max(0.25 * rho, 1e-3)
            prev_delta = None
            continue
        if prev_delta is not None:
            if float(np.vdot(delta, prev_delta)) < 0.0:
                rho = min(rho * 4.0, 1e9)
                aligned = 0
            else:
                aligned += 1
                if aligned >= 3:
                    rho = max(rho * 0.5, 1e-3)
                    aligned = 0
        v = np.clip(v + lam * delta, 0.0, B)
        prev_delta = delta

    report = _report_for(
        scenario, tree, v, "mcp", history[-1] if history else 0.0, "fixed_point",
        it, converged, mode, value_gaps=gaps, residual_history=history[-50:],
    )
    if cfg.strict and not converged:
        raise NonConvergenceError(
            f"best-response iteration residual {history[-1]:.3g} > tol {cfg.fp_tol:.3g} "
            "(oscillation in the residual history indicates damping too large)",
            report=report,
            residual_history=history[-50:],
        )
    return report


def solve_flat(scenario: Scenario, s0=None, rate: float | None = None,
               config: SolveConfig | None = None) -> SolveReport:
    """Flat-rate benchmark: demand maximizes utility net of a fixed rate.

    When no rate is given it is set to the average induced marginal-cost
    price of the resulting allocation (iterated to a fixed point), which is
    the conventional break-even retail rate for the instance.
    """
    from .pricing import average_retail_price

    cfg = config or SolveConfig()
    tree = scenario.tree(s0)
    current = 0.0 if rate is None else rate
    zeros = np.zeros(tree.num_nodes)
    flat_prices = PricePath(tree=tree, p=zeros, w=zeros, q=zeros)
    v = None
    for _ in range(12):
        mode = PaymentMode.flat(current)
        v = np.vstack([
            best_response(scenario, flat_prices, spec, mode, cfg=cfg).actions
            for spec in scenario.types
        ])
        if rate is not None:
            break
        strategy = ObliviousStrategy(tree, v)
        demand = aggregate_demand(strategy, scenario)
        prices = induced_prices(scenario.costs, demand)
        new_rate = average_retail_price(demand, prices, include_q=False)
        if abs(new_rate - current) <= 1e-12:
            current = new_rate
            break
        current = new_rate

    report = _report_for(
        scenario, tree, v, "flat", 0.0, "fixed_point", 1, True,
        PaymentMode.flat(current), flat_rate=current,
    )
    return report


def write_solve_csv(report: SolveReport, scenario: Scenario, path, meta: dict | None = None) -> None:
    """SolveReport rows: one per (type, history node)."""
    import csv

    meta = meta or {}
    tree = report.strategy.tree
    kkt = report.kkt.violation if report.kkt is not None else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["mechanism", "E", "b0", "stage", "history_id", "type", "action", "A",
             "p", "w", "q", "welfare", "kkt_residual"]
        )
        for x, spec in enumerate(scenario.types):
            for i in range(tree.num_nodes):
                resid = kkt[x, i] if kkt is not None else report.residual
                writer.writerow(
                    [
                        report.mechanism,
                        meta.get("E", ""),
                        meta.get("b0", ""),
                        int(tree.stage_of[i]),
                        i,
                        spec.type_id,
                        f"{report.strategy.actions[x, i]:.12g}",
                        f"{report.demand.values[i]:.12g}",
                        f"{report.prices.p[i]:.12g}",
                        f"{report.prices.w[i]:.12g}",
                        f"{report.prices.q[i]:.12g}",
                        f"{report.welfare.total:.12g}",
                        f"{resid:.12g}",
                    ]
                )
