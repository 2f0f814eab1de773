"""Two-stage benchmark family: one consumer type facing a demand jump.

The consumer would like to consume ``1 + x`` now and ``1.2 - x`` at the peak
stage, where up to ``E`` units are shiftable from the peak to the off-peak
stage.  Consuming less than the off-peak cap raises the peak cap one for
one, which is exactly the shiftable-demand transition; stage utilities are
capped-linear with slopes 10 and 12.  The supplier pays a quadratic primary
cost and hinge-quadratic ramp costs on the operator's capacity trajectory
``b_t * A_t`` (reserve factors ``b0`` configurable, ``b1 = 1.1``, reference
capacity 1.12 before the first stage).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .behavior import CappedLinear, ShiftableCap
from .costs import CostFunction, CostModel, Hinge
from .equilibrium import SolveConfig, SolveReport, solve_doe, solve_flat, solve_mcp
from .pricing import average_retail_price
from .scenario import Bounds, ConsumerTypeSpec, ExogenousChain, Scenario, validate

__all__ = ["TwoStageParams", "build", "MechanismRecord", "run_tables", "sweep", "write_records_csv"]

OFFPEAK_SLOPE = 10.0
PEAK_SLOPE = 12.0
PEAK_RESERVE = 1.1          # b1
REFERENCE_CAPACITY = 1.12   # capacity in place before stage 0
FLAT_PEAK = 1.2             # peak demand under flat-rate pricing


@dataclass(frozen=True)
class TwoStageParams:
    """Instance parameters: shiftable amount E in [0, 0.1] and the stage-0
    reserve factor b0.  ``ancillary_scale`` rescales both ramp-cost weights
    (0 removes the mechanism difference entirely)."""

    E: float = 0.0
    b0: float = 1.12
    ancillary_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.E <= 0.1):
            raise ValueError(f"E must lie in [0, 0.1], got {self.E}")
        if self.b0 <= 0.0:
            raise ValueError(f"b0 must be positive, got {self.b0}")


def build(params: TwoStageParams) -> Scenario:
    """Assemble the instance as a generic scenario (deterministic chain,
    horizon 1, single type)."""
    chain = ExogenousChain(states=("base",), transition=np.array([[1.0]]), horizon=1)
    spec = ConsumerTypeSpec(
        type_id="household",
        z0=1.0 + params.E,
        utility=CappedLinear(slopes=(OFFPEAK_SLOPE, PEAK_SLOPE)),
        transition=ShiftableCap(base=1.0, floor=FLAT_PEAK - params.E),
    )
    s = params.ancillary_scale
    costs = CostModel(
        primary=CostFunction(poly=(0.0, 0.0, 1.0)),
        ancillary0=CostFunction(hinges=(Hinge(alpha=10.0 * s, beta=params.b0, delta=REFERENCE_CAPACITY),)),
        ancillary=CostFunction(hinges=(Hinge(alpha=20.0 * s, beta=PEAK_RESERVE, gamma=params.b0),)),
        price_bound=120.0,
        reserve_policy=(
            f"operator holds capacity proportional to load, factors b0={params.b0} "
            f"and b1={PEAK_RESERVE}; folded into the ramp cost terms"
        ),
    )
    bounds = Bounds(action=2.0, internal=1.2, price=120.0, utility=15.0)
    return Scenario(chain=chain, types=(spec,), eta={"base": (1.0,)}, costs=costs, bounds=bounds)


@dataclass(frozen=True)
class MechanismRecord:
    """One table row: equilibrium quantities for one pricing mechanism."""

    mechanism: str
    E: float
    b0: float
    a0: float
    a1: float
    welfare: float
    p0w0: float
    p1w1: float
    q1: float
    avg_price_exq: float
    avg_price_incq: float
    peak_reduction_pct: float


def _record(report: SolveReport, params: TwoStageParams, flat_rate=None) -> MechanismRecord:
    tree = report.strategy.tree
    a = report.strategy.actions[0]
    prices = report.prices
    if flat_rate is not None:
        avg_ex = avg_inc = flat_rate
    else:
        avg_ex = average_retail_price(report.demand, prices, include_q=False)
        avg_inc = average_retail_price(report.demand, prices, include_q=True)
    assert tree.num_nodes == 2
    return MechanismRecord(
        mechanism=report.mechanism,
        E=params.E,
        b0=params.b0,
        a0=float(a[0]),
        a1=float(a[1]),
        welfare=report.welfare.total,
        p0w0=float(prices.p[0] + prices.w[0]),
        p1w1=float(prices.p[1] + prices.w[1]),
        q1=float(prices.q[1]),
        avg_price_exq=avg_ex,
        avg_price_incq=avg_inc,
        peak_reduction_pct=100.0 * (FLAT_PEAK - float(a[1])) / FLAT_PEAK,
    )


def run_tables(E: float, b0: float, config: SolveConfig | None = None,
               ancillary_scale: float = 1.0) -> dict[str, MechanismRecord]:
    """Equilibrium rows for the flat, marginal-cost and proposed mechanisms."""
    params = TwoStageParams(E=E, b0=b0, ancillary_scale=ancillary_scale)
    scenario = build(params)
    report = validate(scenario)
    if not report.ok:
        raise ValueError(f"instance failed validation:\n{report}")
    cfg = config or SolveConfig()

    flat = solve_flat(scenario, config=cfg)
    mcp = solve_mcp(scenario, config=cfg)
    doe = solve_doe(scenario, config=cfg)
    return {
        "flat": _record(flat, params, flat_rate=flat.flat_rate),
        "mcp": _record(mcp, params),
        "proposed": _record(doe, params),
    }


def sweep(E_values, b0_values, config: SolveConfig | None = None) -> list[MechanismRecord]:
    """Welfare and peak-load curves over a substitutability/reserve grid."""
    records = []
    for b0 in b0_values:
        for E in E_values:
            rows = run_tables(float(E), float(b0), config=config)
            records.extend(rows[m] for m in ("flat", "mcp", "proposed"))
    return records


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["E", "b0", "mechanism", "a0", "a1", "welfare", "p0w0", "p1w1", "q1",
             "avg_price_exq", "avg_price_incq", "peak_reduction_pct"]
        )
        for r in records:
            writer.writerow(
                [
                    f"{r.E:.12g}", f"{r.b0:.12g}", r.mechanism,
                    f"{r.a0:.12g}", f"{r.a1:.12g}", f"{r.welfare:.12g}",
                    f"{r.p0w0:.12g}", f"{r.p1w1:.12g}", f"{r.q1:.12g}",
                    f"{r.avg_price_exq:.12g}", f"{r.avg_price_incq:.12g}",
                    f"{r.peak_reduction_pct:.12g}",
                ]
            )
