import pytest

from pcnsim.harness import (
    AdversarySpec,
    ChannelSpec,
    PaymentSpec,
    ScenarioConfig,
    UserSpec,
)
from pcnsim.ledger import TimingParams

DEFAULT_TIMING = TimingParams(conf_bound=5, sync_bound=2, self_delay=20,
                              forward_delta=8, watch_interval=10)


def two_party_config(adversaries=(), payments=None, **overrides) -> ScenarioConfig:
    """One channel alice->bob with a payment each way; the grid base."""
    if payments is None:
        payments = (
            PaymentSpec(path=("alice", "bob"), amount=30, start=12),
            PaymentSpec(path=("bob", "alice"), amount=20, start=20),
        )
    base = dict(
        timing=DEFAULT_TIMING,
        ledger_mode="affected_user",
        users=(UserSpec("alice", 100), UserSpec("bob", 0)),
        channels=(ChannelSpec("alice", "bob", 100),),
        payments=payments,
        adversaries=tuple(adversaries),
        horizon=400,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def multihop_config(adversaries=(), mode="affected_user", pay_mode="staggered",
                    **overrides) -> ScenarioConfig:
    """Four users, three channels, one three-hop payment a->d."""
    base = dict(
        timing=DEFAULT_TIMING,
        ledger_mode=mode,
        users=(UserSpec("a", 100), UserSpec("b", 100),
               UserSpec("c", 100), UserSpec("d", 0)),
        channels=(ChannelSpec("a", "b", 100), ChannelSpec("b", "c", 100),
                  ChannelSpec("c", "d", 100)),
        payments=(PaymentSpec(path=("a", "b", "c", "d"), amount=10, start=12,
                              mode=pay_mode),),
        adversaries=tuple(adversaries),
        horizon=400,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


@pytest.fixture
def timing():
    return DEFAULT_TIMING
