"""Scenario configuration files.

A scenario is a YAML key-value tree with four sections::

    chain:  {states, transition, horizon}
    types:  [{id, z0, eta, utility{family,...}, transition{family,...}}]
    costs:  {primary, ancillary0, ancillary}
    bounds: {B, Z, P, Q}

``eta`` maps each initial exogenous state to this type's weight.  Utility
and transition blocks name a registered family plus its parameters; cost
blocks give ``poly`` coefficients and ``hinges`` entries, either once (all
states) or under ``by_state`` / ``by_pair`` keys.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .behavior import CappedLinear, IdentityTransition, LinearQuadratic, LinearTransition, ShiftableCap
from .costs import CostFunction, CostModel, Hinge
from .scenario import Bounds, ConsumerTypeSpec, ExogenousChain, Scenario

__all__ = ["load_scenario", "load_scenario_file", "scenario_to_dict", "save_scenario_file"]


def _tuple(x):
    if isinstance(x, (list, tuple)):
        return tuple(float(v) for v in x)
    return (float(x),)


def _build_utility(spec: dict):
    family = spec.get("family")
    if family == "capped_linear":
        return CappedLinear(slopes=_tuple(spec["slopes"]))
    if family == "linear_quadratic":
        return LinearQuadratic(
            const=_tuple(spec.get("const", 0.0)),
            lin_a=_tuple(spec.get("lin_a", 0.0)),
            quad_a=_tuple(spec.get("quad_a", 0.0)),
            lin_z=_tuple(spec.get("lin_z", 0.0)),
            quad_z=_tuple(spec.get("quad_z", 0.0)),
        )
    raise ValueError(f"unknown utility family {family!r}")


def _build_transition(spec: dict):
    family = spec.get("family")
    if family == "shiftable_cap":
        return ShiftableCap(base=float(spec["base"]), floor=float(spec["floor"]))
    if family == "linear":
        return LinearTransition(
            offset=float(spec.get("offset", 0.0)),
            gain_state=float(spec.get("gain_state", 0.0)),
            gain_action=float(spec.get("gain_action", 0.0)),
            cap=float(spec.get("cap", np.inf)),
        )
    if family == "identity":
        return IdentityTransition()
    raise ValueError(f"unknown transition family {family!r}")


def _build_cost_function(spec: dict) -> CostFunction:
    hinges = tuple(
        Hinge(
            alpha=float(h["alpha"]),
            beta=float(h.get("beta", 1.0)),
            gamma=float(h.get("gamma", 0.0)),
            delta=float(h.get("delta", 0.0)),
        )
        for h in spec.get("hinges", ())
    )
    return CostFunction(poly=_tuple(spec.get("poly", ())), hinges=hinges)


def _build_cost_table(spec: dict, pair_keys: bool):
    if "by_state" in spec:
        return {str(k): _build_cost_function(v) for k, v in spec["by_state"].items()}
    if "by_pair" in spec:
        out = {}
        for k, v in spec["by_pair"].items():
            a, b = (part.strip() for part in str(k).split("|"))
            out[(a, b)] = _build_cost_function(v)
        return out
    return _build_cost_function(spec)


def load_scenario(doc: dict) -> Scenario:
    chain_doc = doc["chain"]
    chain = ExogenousChain(
        states=tuple(str(s) for s in chain_doc["states"]),
        transition=np.array(chain_doc["transition"], dtype=float),
        horizon=int(chain_doc["horizon"]),
    )

    types = []
    eta = {s: {} for s in chain.states}
    for tdoc in doc["types"]:
        spec = ConsumerTypeSpec(
            type_id=str(tdoc["id"]),
            z0=float(tdoc["z0"]),
            utility=_build_utility(tdoc["utility"]),
            transition=_build_transition(tdoc["transition"]),
        )
        types.append(spec)
        for s, w in tdoc["eta"].items():
            eta[str(s)][spec.type_id] = float(w)

    costs_doc = doc["costs"]
    costs = CostModel(
        primary=_build_cost_table(costs_doc.get("primary", {}), pair_keys=False),
        ancillary0=_build_cost_table(costs_doc.get("ancillary0", {}), pair_keys=False),
        ancillary=_build_cost_table(costs_doc.get("ancillary", {}), pair_keys=True),
        price_bound=float(doc["bounds"]["P"]),
        reserve_policy=str(costs_doc.get("reserve_policy", "")),
    )

    bdoc = doc["bounds"]
    bounds = Bounds(
        action=float(bdoc["B"]),
        internal=float(bdoc["Z"]),
        price=float(bdoc["P"]),
        utility=float(bdoc["Q"]),
    )
    return Scenario(chain=chain, types=tuple(types), eta=eta, costs=costs, bounds=bounds)


def load_scenario_file(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"scenario file {path} does not hold a mapping")
    return load_scenario(doc)


def _cost_function_to_dict(c: CostFunction) -> dict:
    out = {}
    if c.poly:
        out["poly"] = list(c.poly)
    if c.hinges:
        out["hinges"] = [
            {"alpha": h.alpha, "beta": h.beta, "gamma": h.gamma, "delta": h.delta} for h in c.hinges
        ]
    return out


def _cost_table_to_dict(table) -> dict:
    if isinstance(table, CostFunction):
        return _cost_function_to_dict(table)
    first = next(iter(table))
    if isinstance(first, tuple):
        return {"by_pair": {f"{a}|{b}": _cost_function_to_dict(v) for (a, b), v in table.items()}}
    return {"by_state": {k: _cost_function_to_dict(v) for k, v in table.items()}}


def _utility_to_dict(u) -> dict:
    if isinstance(u, CappedLinear):
        return {"family": "capped_linear", "slopes": list(u.slopes)}
    if isinstance(u, LinearQuadratic):
        return {
            "family": "linear_quadratic",
            "const": list(u.const),
            "lin_a": list(u.lin_a),
            "quad_a": list(u.quad_a),
            "lin_z": list(u.lin_z),
            "quad_z": list(u.quad_z),
        }
    raise ValueError(f"cannot serialize utility {type(u).__name__}")


def _transition_to_dict(tr) -> dict:
    if isinstance(tr, ShiftableCap):
        return {"family": "shiftable_cap", "base": tr.base, "floor": tr.floor}
    if isinstance(tr, LinearTransition):
        return {
            "family": "linear",
            "offset": tr.offset,
            "gain_state": tr.gain_state,
            "gain_action": tr.gain_action,
            "cap": tr.cap,
        }
    if isinstance(tr, IdentityTransition):
        return {"family": "identity"}
    raise ValueError(f"cannot serialize transition {type(tr).__name__}")


def scenario_to_dict(sc: Scenario) -> dict:
    types = []
    for i, spec in enumerate(sc.types):
        eta = {}
        for s in sc.chain.states:
            eta[s] = float(sc.type_weights(s)[i])
        types.append(
            {
                "id": spec.type_id,
                "z0": spec.z0,
                "eta": eta,
                "utility": _utility_to_dict(spec.utility),
                "transition": _transition_to_dict(spec.transition),
            }
        )
    return {
        "chain": {
            "states": list(sc.chain.states),
            "transition": sc.chain.transition.tolist(),
            "horizon": sc.chain.horizon,
        },
        "types": types,
        "costs": {
            "primary": _cost_table_to_dict(sc.costs.primary),
            "ancillary0": _cost_table_to_dict(sc.costs.ancillary0),
            "ancillary": _cost_table_to_dict(sc.costs.ancillary),
            "reserve_policy": sc.costs.reserve_policy,
        },
        "bounds": {
            "B": sc.bounds.action,
            "Z": sc.bounds.internal,
            "P": sc.bounds.price,
            "Q": sc.bounds.utility,
        },
    }


def save_scenario_file(sc: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario_to_dict(sc), fh, sort_keys=False)
    Path(path).touch()
