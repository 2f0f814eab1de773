"""Dynamic electricity-market pricing with load-fluctuation costs.

Solves continuum-market equilibria under a three-part pricing mechanism
(marginal energy price, marginal ramp price on current demand, backward
ramp charge on previous demand) and under plain marginal-cost pricing,
simulates finite consumer populations, and reproduces the dispatch-cost
approximation experiment.
"""

from ._backend import BACKEND, NUMBA_AVAILABLE, using_numba
from .behavior import (
    CappedLinear,
    IdentityTransition,
    LinearQuadratic,
    LinearTransition,
    ShiftableCap,
)
from .costs import CostFunction, CostModel, Hinge, scale_to_n
from .equilibrium import (
    DEFAULT_SEED,
    BestResponse,
    KKTResidual,
    NonConcavityWarning,
    NonConvergenceError,
    ObliviousStrategy,
    SolveConfig,
    SolveReport,
    WelfareReport,
    aggregate_demand,
    best_response,
    continuum_welfare,
    kkt_residual,
    oblivious_value,
    solve_doe,
    solve_flat,
    solve_mcp,
)
from .pricing import (
    Accounting,
    DemandPath,
    Mechanism,
    PaymentMode,
    PricePath,
    accounting,
    average_retail_price,
    induced_prices,
    stage_payoff,
)
from .scenario import (
    Bounds,
    CapacityError,
    ConsumerTypeSpec,
    ExogenousChain,
    HistoryTree,
    Scenario,
    ValidationReport,
    enumerate_histories,
    validate,
)
from .scenario_io import load_scenario, load_scenario_file, save_scenario_file

__version__ = "0.1.0"
