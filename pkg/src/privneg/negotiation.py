"""Individual negotiation between an IoT user (requester) and an IoT owner.

The sessions are sans-IO state machines: they take a message and return the
replies to send. Drivers at the bottom of the module run them over the
simulated network or over TCP.

1-phase flow::

    requester --AccessRequest--> owner
    requester <--DataGrant------ owner
    requester <--DataPush*------ owner

2-phase flow::

    requester --AccessRequest--> owner
    requester <--Proposal------- owner
    requester --ProposalAccept-> owner     (or ProposalReject, end)
    requester <--DataPush*------ owner
"""

from __future__ import annotations

import enum
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import messages as m
from .errors import BadValue, DecodeError, NegotiationTimeout, ProtocolViolation, TransportError
from .policy import Direction, FormFactorSet, PrivacyPolicy, is_at_most_as_permissive, select_rule
from .transport import (
    LatencyProfile,
    Milestone,
    MilestoneLog,
    Scenario,
    Scheduler,
    TcpEndpoint,
    TcpListener,
    sim_channel,
    tcp_connect,
    tcp_listen,
)
from .utility import ScoringModel, compare_values, utility

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 5.0
PUSH_SIZE = 32


class Phase(enum.Enum):
    IDLE = "Idle"
    AWAITING_DECISION = "AwaitingDecision"
    PROPOSAL_PENDING = "ProposalPending"
    GRANTED = "Granted"
    REJECTED = "Rejected"


class Role(enum.Enum):
    REQUESTER = "requester"
    OWNER = "owner"


@dataclass(frozen=True)
class TranscriptEntry:
    sender: str
    message: m.Message

    def __str__(self) -> str:
        return f"{self.sender}: {m.describe(self.message)}"


def owner_handle_request(
    req: m.AccessRequest, owner_policy: PrivacyPolicy, model: ScoringModel
) -> m.DataGrant | m.Proposal | m.Denied:
    """Grant, counter-propose or deny an access request.

    A request is granted only if it scores at least the owner's own priority-1
    data-out rule and is structurally no looser than it.
    """
    own = select_rule(owner_policy, Direction.OUT, req.data_type, 1)
    if own is None:
        return m.Denied("no-such-data")
    req_u = utility([req.factors], model).utility
    own_u = utility([own.factors], model).utility
    if compare_values(req_u, own_u) >= 0 and is_at_most_as_permissive(req.factors, own.factors):
        return m.DataGrant(req.factors)
    return m.Proposal(own.factors)


def requester_evaluate_proposal(
    prop: m.Proposal, user_policy: PrivacyPolicy, model: Optional[ScoringModel] = None
) -> m.ProposalAccept | m.ProposalReject:
    """Accept a proposal iff it asks for no more than the user's priority-2
    fallback rule permits. Without a fallback the item is non-negotiable."""
    alt = select_rule(user_policy, Direction.IN, prop.factors.data_type, 2)
    if alt is None:
        return m.ProposalReject()
    if is_at_most_as_permissive(prop.factors, alt.factors):
        return m.ProposalAccept()
    return m.ProposalReject()


class _Session:
    role: Role

    def __init__(self):
        self.phase = Phase.IDLE
        self.agreed_rule: Optional[FormFactorSet] = None
        self.transcript: list[TranscriptEntry] = []
        self.violations: list[str] = []

    @property
    def done(self) -> bool:
        return self.phase in (Phase.GRANTED, Phase.REJECTED)

    def _record(self, sender: Role, msg: m.Message) -> None:
        self.transcript.append(TranscriptEntry(sender.value, msg))

    def _out(self, *msgs: m.Message) -> list[m.Message]:
        for msg in msgs:
            self._record(self.role, msg)
        return list(msgs)

    def violate(self, reason: str) -> list[m.Message]:
        log.debug("%s protocol violation: %s", self.role.value, reason)
        self.violations.append(reason)
        self.phase = Phase.REJECTED
        self.agreed_rule = None
        return []


class RequesterSession(_Session):
    role = Role.REQUESTER

    def __init__(self, policy: PrivacyPolicy, data_type: str, model: Optional[ScoringModel] = None,
                 negotiate: bool = True):
        super().__init__()
        self.policy = policy
        self.data_type = data_type
        self.model = model or ScoringModel()
        self.negotiate = negotiate
        self.received: list[m.DataPush] = []
        rule = select_rule(policy, Direction.IN, data_type, 1)
        if rule is None:
            raise BadValue(f"requester has no priority-1 data-in rule for {data_type!r}")
        self.request = rule.factors

    def start(self) -> m.AccessRequest:
        if self.phase is not Phase.IDLE:
            raise ProtocolViolation("session already started")
        self.phase = Phase.AWAITING_DECISION
        return self._out(m.AccessRequest(self.request))[0]

    def handle(self, msg: m.Message) -> list[m.Message]:
        self._record(Role.OWNER, msg)
        if self.phase is Phase.AWAITING_DECISION:
            if isinstance(msg, m.DataGrant):
                if msg.factors.data_type != self.data_type or not is_at_most_as_permissive(
                    msg.factors, self.request
                ):
                    return self.violate(f"grant {msg.factors} is looser than the request")
                self.agreed_rule = msg.factors
                self.phase = Phase.GRANTED
                return []
            if isinstance(msg, m.Proposal):
                if msg.factors.data_type != self.data_type:
                    return self.violate(f"proposal for {msg.factors.data_type!r}")
                self.phase = Phase.PROPOSAL_PENDING
                reply = requester_evaluate_proposal(msg, self.policy, self.model)
                if isinstance(reply, m.ProposalAccept):
                    self.agreed_rule = msg.factors
                    self.phase = Phase.GRANTED
                else:
                    self.phase = Phase.REJECTED
                return self._out(reply)
            if isinstance(msg, m.Denied):
                self.phase = Phase.REJECTED
                return []
            if not self.negotiate and isinstance(msg, m.DataPush):
                # baseline: the owner serves the request as asked
                self.agreed_rule = self.request
                self.phase = Phase.GRANTED
                self.received.append(msg)
                return []
        elif self.phase is Phase.GRANTED and isinstance(msg, m.DataPush):
            self.received.append(msg)
            return []
        return self.violate(f"unexpected {type(msg).__name__} in phase {self.phase.value}")


PayloadSource = Callable[[int], bytes]


def seeded_payloads(seed: int, size: int = PUSH_SIZE) -> PayloadSource:
    """Deterministic sensor payloads: the same (seed, sequence) gives the same bytes."""

    def source(sequence: int) -> bytes:
        return random.Random(f"{seed}:{sequence}").randbytes(size)

    return source


class OwnerSession(_Session):
    """Owner side of one session. With ``negotiate=False`` it behaves as the
    no-negotiation baseline and pushes data straight away."""

    role = Role.OWNER

    def __init__(
        self,
        policy: PrivacyPolicy,
        model: Optional[ScoringModel] = None,
        pushes: int = 1,
        source: Optional[PayloadSource] = None,
        negotiate: bool = True,
    ):
        super().__init__()
        self.policy = policy
        self.model = model or ScoringModel()
        self.pushes = pushes
        self.source = source or seeded_payloads(0)
        self.negotiate = negotiate
        self.proposal: Optional[FormFactorSet] = None
        # (sequence, rule the push was sent under)
        self.push_log: list[tuple[int, FormFactorSet]] = []

    def _data(self) -> list[m.Message]:
        out = []
        for seq in range(self.pushes):
            self.push_log.append((seq, self.agreed_rule))
            out.append(m.DataPush(seq, self.source(seq)))
        return out

    def handle(self, msg: m.Message) -> list[m.Message]:
        self._record(Role.REQUESTER, msg)
        if self.phase is Phase.IDLE and isinstance(msg, m.AccessRequest):
            if not self.negotiate:
                self.agreed_rule = msg.factors
                self.phase = Phase.GRANTED
                return self._out(*self._data())
            decision = owner_handle_request(msg, self.policy, self.model)
            if isinstance(decision, m.DataGrant):
                self.agreed_rule = decision.factors
                self.phase = Phase.GRANTED
                return self._out(decision, *self._data())
            if isinstance(decision, m.Proposal):
                self.proposal = decision.factors
                self.phase = Phase.PROPOSAL_PENDING
                return self._out(decision)
            self.phase = Phase.REJECTED
            return self._out(decision)
        if self.phase is Phase.PROPOSAL_PENDING:
            if isinstance(msg, m.ProposalAccept):
                self.agreed_rule = self.proposal
                self.phase = Phase.GRANTED
                return self._out(*self._data())
            if isinstance(msg, m.ProposalReject):
                self.phase = Phase.REJECTED
                return []
        return self.violate(f"unexpected {type(msg).__name__} in phase {self.phase.value}")


@dataclass
class Outcome:
    granted: bool
    rule: Optional[FormFactorSet]
    transcript: list[TranscriptEntry]
    milestones: list[Milestone] = field(default_factory=list)
    owner_milestones: list[Milestone] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    owner_push_log: list[tuple[int, FormFactorSet]] = field(default_factory=list)

    @property
    def messages(self) -> list[m.Message]:
        return [e.message for e in self.transcript]

    @property
    def pre_data(self) -> list[TranscriptEntry]:
        return [e for e in self.transcript if not isinstance(e.message, m.DataPush)]

    @property
    def data(self) -> list[m.DataPush]:
        return [e.message for e in self.transcript if isinstance(e.message, m.DataPush)]

    @property
    def phases(self) -> int:
        return 2 if any(isinstance(e.message, m.Proposal) for e in self.transcript) else 1

    @property
    def total_ms(self) -> float:
        return self.milestones[-1].elapsed_ms if self.milestones else 0.0

    def milestone(self, label: str) -> Optional[float]:
        for ms in self.milestones:
            if ms.label == label:
                return ms.elapsed_ms
        return None


_RECEIVE_LABELS = {
    m.DataGrant: "grant_received",
    m.Proposal: "proposal_received",
    m.Denied: "denied_received",
}


def _track(milestones: MilestoneLog, msg: m.Message, now_ms: float, incoming: bool) -> None:
    if incoming:
        label = "data_received" if isinstance(msg, m.DataPush) else _RECEIVE_LABELS.get(type(msg))
    else:
        label = "request_sent" if isinstance(msg, m.AccessRequest) else "reply_sent"
    if label and label not in milestones:
        milestones.record(label, now_ms)


def owner_perspective(profile: LatencyProfile, phases: int, negotiated: bool = True) -> list[Milestone]:
    """Owner-side timeline, measured from the moment the request is detected."""
    out = [Milestone("request_detected", 0.0)]
    t = profile.owner_connect_ms
    out.append(Milestone("connected", t))
    if phases == 2:
        if profile.scenario is Scenario.USER_MANAGED:
            t += profile.service_discovery_ms
            out.append(Milestone("services_discovered", t))
        out.append(Milestone("proposal_sent", t))
        out.append(Milestone("reply_received", t + 2 * profile.per_message_ms))
    else:
        out.append(Milestone("grant_sent" if negotiated else "data_sent", t))
    return out


def _outcome(requester: RequesterSession, owner: Optional[OwnerSession], milestones: MilestoneLog,
             owner_milestones: list[Milestone]) -> Outcome:
    granted = requester.phase is Phase.GRANTED and (owner is None or owner.phase is Phase.GRANTED)
    violations = list(requester.violations) + (list(owner.violations) if owner else [])
    return Outcome(
        granted=granted,
        rule=requester.agreed_rule if granted else None,
        transcript=list(requester.transcript),
        milestones=milestones.as_list(),
        owner_milestones=owner_milestones,
        violations=violations,
        owner_push_log=list(owner.push_log) if owner else [],
    )


def _run_sim(requester: RequesterSession, owner: OwnerSession, profile: LatencyProfile,
             timeout_s: float) -> Outcome:
    sched = Scheduler()
    req_ep, own_ep = sim_channel(profile, sched)
    milestones = MilestoneLog()

    def on_requester(msg):
        _track(milestones, msg, req_ep.now_ms, incoming=True)
        for reply in requester.handle(msg):
            _track(milestones, reply, req_ep.now_ms, incoming=False)
            req_ep.send(reply)

    def on_owner(msg):
        for reply in owner.handle(msg):
            own_ep.send(reply)

    req_ep.on_message = on_requester
    own_ep.on_message = on_owner
    req_ep.on_error = lambda exc: requester.violate(f"bad frame: {exc}")
    own_ep.on_error = lambda exc: owner.violate(f"bad frame: {exc}")

    first = requester.start()
    _track(milestones, first, 0.0, incoming=False)
    if profile.connect_ms > 0:
        milestones.record("connected", profile.connect_ms)
    req_ep.send(first)
    sched.run(until_ms=timeout_s * 1000.0)
    if not requester.done:
        raise NegotiationTimeout(f"no decision within {timeout_s} s of virtual time")
    return _outcome(requester, owner, milestones, owner_perspective(profile, 2 if owner.proposal else 1, owner.negotiate))


def drive_requester(endpoint: TcpEndpoint, requester: RequesterSession,
                    timeout_s: float = DEFAULT_TIMEOUT_S, start: Optional[float] = None) -> Outcome:
    """Run the requester side over a connected stream endpoint, timing
    milestones on the wall clock from ``start``."""
    start = time.perf_counter() if start is None else start
    milestones = MilestoneLog()
    deadline = time.perf_counter() + timeout_s

    def elapsed() -> float:
        return (time.perf_counter() - start) * 1000.0

    first = requester.start()
    _track(milestones, first, elapsed(), incoming=False)
    endpoint.send(first)
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            raise NegotiationTimeout(f"no completion within {timeout_s} s")
        try:
            msg = endpoint.recv(timeout=remaining)
        except DecodeError as exc:
            requester.violate(f"bad frame: {exc}")
            break
        except TransportError:
            if requester.done:
                break
            raise
        if msg is None:
            break
        _track(milestones, msg, elapsed(), incoming=True)
        for reply in requester.handle(msg):
            _track(milestones, reply, elapsed(), incoming=False)
            endpoint.send(reply)
        if requester.phase is Phase.REJECTED:
            break
    if not requester.done:
        requester.violate("connection closed before a decision")
    return _outcome(requester, None, milestones, [])


def serve_owner(
    address: str,
    owner_policy: PrivacyPolicy,
    model: Optional[ScoringModel] = None,
    pushes: int = 1,
    seed: int = 0,
    negotiate: bool = True,
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> TcpListener:
    """Listen on ``address`` and negotiate with every requester that connects."""
    model = model or ScoringModel()

    def handler(endpoint: TcpEndpoint) -> None:
        session = OwnerSession(owner_policy, model, pushes, seeded_payloads(seed), negotiate)
        while not session.done:
            try:
                msg = endpoint.recv(timeout=timeout_s)
            except DecodeError as exc:
                session.violate(f"bad frame: {exc}")
                break
            if msg is None:
                break
            endpoint.send_many(session.handle(msg))

    return tcp_listen(address, handler)


def run_negotiation(
    requester_policy: PrivacyPolicy,
    owner_policy: PrivacyPolicy,
    data_type: str,
    model: Optional[ScoringModel] = None,
    transport: str = "sim",
    *,
    profile: Optional[LatencyProfile] = None,
    address: Optional[str] = None,
    pushes: int = 1,
    seed: int = 0,
    negotiate: bool = True,
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> Outcome:
    """Negotiate access to ``data_type`` and relay ``pushes`` data frames on grant.

    ``transport`` is ``"sim"`` (virtual time under ``profile``) or ``"tcp"``.
    For tcp, ``address`` names a running owner server; without one, a
    loopback server is started for the duration of the call.
    """
    model = model or ScoringModel()
    requester = RequesterSession(requester_policy, data_type, model, negotiate)
    if transport == "sim":
        owner = OwnerSession(owner_policy, model, pushes, seeded_payloads(seed), negotiate)
        return _run_sim(requester, owner, profile or LatencyProfile.zero(), timeout_s)
    if transport != "tcp":
        raise BadValue(f"unknown transport {transport!r}")
    if address is not None:
        start = time.perf_counter()
        with tcp_connect(address, timeout=timeout_s) as endpoint:
            return drive_requester(endpoint, requester, timeout_s, start)
    with serve_owner("127.0.0.1:0", owner_policy, model, pushes, seed, negotiate, timeout_s) as listener:
        start = time.perf_counter()
        with tcp_connect(listener.address, timeout=timeout_s) as endpoint:
            return drive_requester(endpoint, requester, timeout_s, start)
