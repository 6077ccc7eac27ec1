"""Canonical negotiation flows used by the bench command and the test suites."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .policy import DataRule, Direction, FormFactorSet, PrivacyPolicy, Retention

DATA_TYPE = "image"


class Flow(enum.Enum):
    BASELINE = "baseline"
    ONE_PHASE = "1-phase"
    TWO_PHASE_ACCEPT = "2-phase-accept"
    TWO_PHASE_REJECT = "2-phase-reject"


@dataclass(frozen=True)
class FlowSetup:
    flow: Flow
    user: PrivacyPolicy
    owner: PrivacyPolicy
    data_type: str
    negotiate: bool
    expect_granted: bool


def _rule(direction: Direction, priority: int, data_type: str, retention: Retention,
          shared: bool, inferred: bool) -> DataRule:
    return DataRule(direction, priority, FormFactorSet(data_type, retention, shared, inferred))


def owner_policy() -> PrivacyPolicy:
    return PrivacyPolicy((
        _rule(Direction.IN, 1, "video", Retention.ONE_YEAR, False, True),
        _rule(Direction.OUT, 1, "face-detection", Retention.ONE_YEAR, False, False),
        _rule(Direction.OUT, 1, "image", Retention.ONE_YEAR, False, True),
    ), owner_id="owner")


def user_policy(flow: Flow) -> PrivacyPolicy:
    if flow in (Flow.BASELINE, Flow.ONE_PHASE):
        rules = (
            _rule(Direction.IN, 1, "image", Retention.THREE_MONTH, False, True),
            _rule(Direction.OUT, 1, "video", Retention.ONE_YEAR, False, False),
        )
    else:
        # asks for more than the owner offers, then falls back
        fallback = (Retention.ONE_YEAR, False, True) if flow is Flow.TWO_PHASE_ACCEPT \
            else (Retention.ONE_MONTH, False, False)
        rules = (
            _rule(Direction.IN, 1, "image", Retention.INDEFINITE, True, True),
            _rule(Direction.IN, 2, "image", *fallback),
        )
    return PrivacyPolicy(rules, owner_id="user")


def setup(flow: Flow) -> FlowSetup:
    return FlowSetup(
        flow=flow,
        user=user_policy(flow),
        owner=owner_policy(),
        data_type=DATA_TYPE,
        negotiate=flow is not Flow.BASELINE,
        expect_granted=flow is not Flow.TWO_PHASE_REJECT,
    )


def all_setups() -> list[FlowSetup]:
    return [setup(f) for f in Flow]
