"""Payment channel network simulator.

An in-memory settlement ledger with tick-exact confirmation and delivery
bounds, the two-party channel protocol built on it (open, update with
hash time-locked contracts, close, breach remedy), multi-hop payment
orchestration, and a deterministic adversarial harness that checks the
protocol's security property over whole event traces.
"""

from .channel import ChannelEndpoint, Htlc, build_commitment, build_htlc_transactions
from .conditions import evaluate_condition
from .harness import (
    AdversarySpec,
    ChannelSpec,
    FinalState,
    GridDims,
    PaymentSpec,
    ScenarioConfig,
    UserSpec,
    Verdict,
    check_security,
    default_grid_dims,
    enumerate_adversary_grid,
    run_scenario,
)
from .ledger import Ledger, TimingParams, VisibilityMode
from .routing import PaymentPlan, collateral_lock_time, plan_payment
from .scenario import load_scenario, parse_scenario_text, save_scenario

__version__ = "0.1.0"

__all__ = [
    "AdversarySpec",
    "ChannelEndpoint",
    "ChannelSpec",
    "FinalState",
    "GridDims",
    "Htlc",
    "Ledger",
    "PaymentPlan",
    "PaymentSpec",
    "ScenarioConfig",
    "TimingParams",
    "UserSpec",
    "Verdict",
    "VisibilityMode",
    "build_commitment",
    "build_htlc_transactions",
    "check_security",
    "collateral_lock_time",
    "default_grid_dims",
    "enumerate_adversary_grid",
    "evaluate_condition",
    "load_scenario",
    "parse_scenario_text",
    "plan_payment",
    "run_scenario",
    "save_scenario",
]
