"""Group negotiation: least-misery aggregation, candidate enumeration within
the boundary, bi-objective optimisation and the second-round fallback."""

from __future__ import annotations

import enum
import itertools
import logging
import math
import queue
import threading
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

from . import messages as m
from .errors import BadValue, CombinatorialLimit, EmptyGroup, MalformedXml, RaggedMatrix, UnknownUser
from .negotiation import requester_evaluate_proposal
from .policy import (
    DataRule,
    Direction,
    FormFactorSet,
    PrivacyPolicy,
    Retention,
    is_at_most_as_permissive,
    meet,
    parse_flag,
)
from .utility import ScoringModel

log = logging.getLogger(__name__)

DEFAULT_CAP = 10**6


@dataclass(frozen=True)
class GroupMatrix:
    """Per-user, per-sensor privacy settings. ``cells[user][i]`` is the user's
    factor set for ``sensors[i]``."""

    sensors: tuple[str, ...]
    users: tuple[str, ...]
    cells: Mapping[str, tuple[FormFactorSet, ...]]

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "cells", {u: tuple(row) for u, row in self.cells.items()})

    def validate(self) -> None:
        if not self.users:
            raise EmptyGroup("group has no members")
        if len(set(self.users)) != len(self.users):
            raise RaggedMatrix("duplicate user ids")
        if len(set(self.sensors)) != len(self.sensors):
            raise RaggedMatrix("duplicate sensor names")
        for user in self.users:
            row = self.cells.get(user)
            if row is None or len(row) != len(self.sensors):
                raise RaggedMatrix(f"row for {user!r} does not cover every sensor")
            for sensor, cell in zip(self.sensors, row):
                if cell.data_type != sensor:
                    raise RaggedMatrix(f"cell ({user}, {sensor}) has type {cell.data_type!r}")

    def row(self, user: str) -> tuple[FormFactorSet, ...]:
        try:
            return self.cells[user]
        except KeyError:
            raise UnknownUser(user) from None

    def with_row(self, user: str, row: Sequence[FormFactorSet]) -> "GroupMatrix":
        users = self.users if user in self.cells else self.users + (user,)
        return GroupMatrix(self.sensors, users, {**self.cells, user: tuple(row)})

    def without(self, user: str) -> "GroupMatrix":
        cells = {u: r for u, r in self.cells.items() if u != user}
        return GroupMatrix(self.sensors, tuple(u for u in self.users if u != user), cells)

    @classmethod
    def from_rows(cls, sensors: Sequence[str], rows: Mapping[str, Sequence[FormFactorSet]]) -> "GroupMatrix":
        return cls(tuple(sensors), tuple(rows), {u: tuple(r) for u, r in rows.items()})


@dataclass(frozen=True)
class BoundaryVector:
    sensors: tuple[str, ...]
    factors: tuple[FormFactorSet, ...]

    def __getitem__(self, sensor: str) -> FormFactorSet:
        return self.factors[self.sensors.index(sensor)]


@dataclass(frozen=True)
class CandidatePolicy:
    factors: tuple[FormFactorSet, ...]
    include: tuple[bool, ...]
    score_exposure: float = field(default=0.0, compare=False)
    score_benefit: float = field(default=0.0, compare=False)

    @property
    def key(self) -> tuple:
        return tuple((f.retention.months, f.shared, f.inferred, x) for f, x in zip(self.factors, self.include))

    def to_notify(self, user_id: str) -> m.Notify:
        return m.Notify(user_id, self.factors, self.include)

    def __str__(self) -> str:
        parts = [f"{f}{'' if x else ' (not collected)'}" for f, x in zip(self.factors, self.include)]
        return "; ".join(parts) or "(empty)"


def aggregate_least_misery(matrix: GroupMatrix) -> BoundaryVector:
    """Per sensor: the shortest retention and the AND of the sharing and
    inference flags over all members."""
    matrix.validate()
    columns = zip(*(matrix.cells[u] for u in matrix.users))
    return BoundaryVector(matrix.sensors, tuple(meet(col) for col in columns))


def _sensor_options(bound: FormFactorSet, retention_domain: Sequence[Retention]) -> list[tuple[FormFactorSet, bool]]:
    options = []
    for r in sorted(retention_domain, key=lambda r: r.months):
        if r.months > bound.retention.months:
            continue
        for s in (False, True) if bound.shared else (False,):
            for i in (False, True) if bound.inferred else (False,):
                f = FormFactorSet(bound.data_type, r, s, i)
                options.append((f, False))
                options.append((f, True))
    return options


def candidate_count(boundary: BoundaryVector, retention_domain: Optional[Sequence[Retention]] = None) -> int:
    domain = retention_domain or Retention.scale()
    total = 1
    for b in boundary.factors:
        retentions = sum(1 for r in domain if r.months <= b.retention.months)
        total *= retentions * (2 if b.shared else 1) * (2 if b.inferred else 1) * 2
    return total


def enumerate_candidates(
    boundary: BoundaryVector,
    retention_domain: Optional[Sequence[Retention]] = None,
    cap: int = DEFAULT_CAP,
) -> list[CandidatePolicy]:
    """Every per-sensor factor assignment within the boundary, crossed with
    per-sensor inclusion, in lexicographic order."""
    domain = retention_domain or Retention.scale()
    count = candidate_count(boundary, domain)
    if count > cap:
        raise CombinatorialLimit(count, cap)
    per_sensor = [_sensor_options(b, domain) for b in boundary.factors]
    return [
        CandidatePolicy(tuple(f for f, _ in combo), tuple(x for _, x in combo))
        for combo in itertools.product(*per_sensor)
    ]


@dataclass
class OptimizeResult:
    chosen: CandidatePolicy
    pareto: list[CandidatePolicy]


def score(candidate: CandidatePolicy, model: ScoringModel) -> CandidatePolicy:
    pe = 0.0
    b = 0.0
    for f, x in zip(candidate.factors, candidate.include):
        if x:
            pe += model.rule_exposure(f)
            b += model.rule_benefit(f)
    return replace(candidate, score_exposure=pe, score_benefit=b)


def pareto_front(scored: Sequence[CandidatePolicy]) -> list[int]:
    """Indices of candidates not dominated under (min exposure, max benefit).

    Candidates with identical scores are either all on the front or all off.
    """
    order = sorted(range(len(scored)), key=lambda k: (scored[k].score_exposure, -scored[k].score_benefit))
    front = []
    best_lower = -math.inf  # best benefit among strictly lower exposures
    for _, group in itertools.groupby(order, key=lambda k: scored[k].score_exposure):
        group = list(group)
        top = scored[group[0]].score_benefit
        if top > best_lower:
            front.extend(k for k in group if scored[k].score_benefit == top)
            best_lower = top
    return sorted(front)


def optimize(
    candidates: Sequence[CandidatePolicy],
    model: ScoringModel,
    weights: tuple[float, float] = (1.0, 1.0),
) -> OptimizeResult:
    """Pareto frontier of (exposure, benefit) and the weighted choice on it.

    The choice maximises ``w_b * benefit - w_pe * exposure``; ties go to the
    lower exposure, then to the earlier candidate in enumeration order.
    """
    if not candidates:
        raise BadValue("no candidates to optimize over")
    w_b, w_pe = weights
    if not (w_b > 0 and w_pe > 0):
        raise BadValue(f"weights must be positive, got {weights}")
    scored = [score(c, model) for c in candidates]
    front = pareto_front(scored)
    best = min(
        front,
        key=lambda k: (-(w_b * scored[k].score_benefit - w_pe * scored[k].score_exposure),
                       scored[k].score_exposure, k),
    )
    return OptimizeResult(scored[best], [scored[k] for k in front])


# --- second round --------------------------------------------------------------

class Verdict(str, enum.Enum):
    ACCEPT = "accept"
    DECLINE = "decline"


@dataclass(frozen=True)
class Notification:
    user_id: str
    message: m.Notify
    frame: bytes


@dataclass(frozen=True)
class Contact:
    user_id: str
    sensor: str
    proposal: FormFactorSet
    verdict: Verdict


def binding_users(matrix: GroupMatrix, sensor: str) -> list[str]:
    """Users whose removal strictly loosens the boundary for ``sensor``."""
    if len(matrix.users) < 2:
        return list(matrix.users)
    idx = matrix.sensors.index(sensor)
    bound = aggregate_least_misery(matrix).factors[idx]
    out = []
    for user in sorted(matrix.users):
        rest = meet(matrix.cells[u][idx] for u in matrix.users if u != user)
        if rest != bound:
            out.append(user)
    return out


def member_policy(user_id: str, prefs: Iterable[FormFactorSet], fallbacks: Iterable[FormFactorSet] = ()) -> PrivacyPolicy:
    rules = [DataRule(Direction.IN, 1, f) for f in prefs]
    rules += [DataRule(Direction.IN, 2, f) for f in fallbacks]
    return PrivacyPolicy(tuple(rules), owner_id=user_id)


@dataclass
class GroupResult:
    initial_boundary: BoundaryVector
    boundary: BoundaryVector
    candidate_count: int
    chosen: CandidatePolicy
    pareto: list[CandidatePolicy]
    contacts: list[Contact]
    notifications: list[Notification]
    matrix: GroupMatrix
    transcript: list[str]


class GroupSession:
    """One group negotiation. Member preferences may arrive from concurrent
    sessions through ``submit``; everything else runs serialized."""

    def __init__(self, sensors: Sequence[str], owner_request: Optional[Mapping[str, FormFactorSet]] = None):
        self.sensors = tuple(sensors)
        self.owner_request = dict(owner_request or {})
        self.policies: dict[str, PrivacyPolicy] = {}
        self.matrix = GroupMatrix(self.sensors, (), {})
        self.transcript: list[str] = []
        self.outbox: dict[str, list[bytes]] = {}
        self._inbox: "queue.Queue[m.GroupPrefSubmit]" = queue.Queue()
        self._lock = threading.Lock()

    # submissions
    def submit(self, msg: m.GroupPrefSubmit) -> None:
        """Thread-safe: queue a member's preferences for the next ``collect``."""
        self._inbox.put(msg)

    def submit_frame(self, frame: bytes) -> None:
        msg = m.decode(frame)
        if not isinstance(msg, m.GroupPrefSubmit):
            raise BadValue(f"expected GroupPrefSubmit, got {type(msg).__name__}")
        self.submit(msg)

    def collect(self) -> int:
        n = 0
        with self._lock:
            while True:
                try:
                    msg = self._inbox.get_nowait()
                except queue.Empty:
                    return n
                self.add_member(msg.user_id, msg.prefs, msg.fallbacks)
                n += 1

    def add_member(self, user_id: str, prefs: Sequence[FormFactorSet], fallbacks: Sequence[FormFactorSet] = ()) -> None:
        by_sensor = {f.data_type: f for f in prefs}
        missing = [s for s in self.sensors if s not in by_sensor]
        if missing:
            raise RaggedMatrix(f"{user_id!r} has no preference for {', '.join(missing)}")
        row = tuple(by_sensor[s] for s in self.sensors)
        self.matrix = self.matrix.with_row(user_id, row)
        self.policies[user_id] = member_policy(user_id, row, fallbacks)
        self.transcript.append(f"submit {user_id}")

    # operations
    def second_round(self, user_id: str, sensor: str, owner_proposal: FormFactorSet) -> Verdict:
        """Ask a member to relax ``sensor`` to the owner's proposal, using the
        same rule as individual negotiation against their priority-2 rule."""
        if user_id not in self.policies:
            raise UnknownUser(user_id)
        reply = requester_evaluate_proposal(m.Proposal(owner_proposal), self.policies[user_id])
        self._send(user_id, m.Proposal(owner_proposal))
        self.transcript.append(f"proposal -> {user_id}: {owner_proposal}")
        if isinstance(reply, m.ProposalAccept):
            row = list(self.matrix.row(user_id))
            row[self.sensors.index(sensor)] = owner_proposal
            self.matrix = self.matrix.with_row(user_id, row)
            self.transcript.append(f"{user_id}: accept")
            return Verdict.ACCEPT
        self.transcript.append(f"{user_id}: decline")
        return Verdict.DECLINE

    def notify_user(self, user_id: str, final_policy: CandidatePolicy) -> Notification:
        if user_id not in self.policies:
            raise UnknownUser(user_id)
        msg = final_policy.to_notify(user_id)
        frame = self._send(user_id, msg)
        self.transcript.append(f"notify -> {user_id}")
        return Notification(user_id, msg, frame)

    def _send(self, user_id: str, msg: m.Message) -> bytes:
        frame = m.encode(msg)
        self.outbox.setdefault(user_id, []).append(frame)
        return frame

    def run(
        self,
        model: Optional[ScoringModel] = None,
        weights: tuple[float, float] = (1.0, 1.0),
        cap: int = DEFAULT_CAP,
    ) -> GroupResult:
        self.collect()
        model = model or ScoringModel()
        with self._lock:
            initial = aggregate_least_misery(self.matrix)
            contacts: list[Contact] = []
            contacted: set[str] = set()
            declined: list[str] = []
            for sensor in self.sensors:
                wanted = self.owner_request.get(sensor)
                if wanted is None:
                    continue
                if is_at_most_as_permissive(wanted, aggregate_least_misery(self.matrix)[sensor]):
                    continue
                for user in binding_users(self.matrix, sensor):
                    if user in contacted:
                        continue
                    contacted.add(user)
                    verdict = self.second_round(user, sensor, wanted)
                    contacts.append(Contact(user, sensor, wanted, verdict))
                    if verdict is Verdict.DECLINE:
                        declined.append(user)
            boundary = aggregate_least_misery(self.matrix)
            candidates = enumerate_candidates(boundary, cap=cap)
            result = optimize(candidates, model, weights)
            notes = [self.notify_user(u, result.chosen) for u in sorted(declined)]
            return GroupResult(initial, boundary, len(candidates), result.chosen, result.pareto,
                               contacts, notes, self.matrix, list(self.transcript))


# --- group scenario file ---------------------------------------------------------

def _factors_from_attrs(el: ET.Element, sensors: Sequence[str]) -> FormFactorSet:
    sensor = el.get("sensor")
    if sensor not in sensors:
        raise BadValue(f"<{el.tag}> refers to unknown sensor {sensor!r}")
    return FormFactorSet(
        sensor,
        Retention.parse(el.get("retention"), strict=True),
        parse_flag(el.get("shared"), "shared"),
        parse_flag(el.get("inferred"), "inferred"),
    )


def parse_group(xml_text: str) -> GroupSession:
    """Read a ``<group>`` scenario: sensors, members with ``<pref>`` rows and
    optional ``<fallback>`` rules, and an optional ``<owner-request>`` per sensor."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "group":
        raise MalformedXml(f"root element must be <group>, got <{root.tag}>")
    sensors = [el.get("name", "").strip() for el in root.findall("sensor")]
    if not all(sensors):
        raise BadValue("every <sensor> needs a name")
    wanted = {}
    for el in root.findall("owner-request"):
        f = _factors_from_attrs(el, sensors)
        wanted[f.data_type] = f
    session = GroupSession(sensors, wanted)
    for member in root.findall("member"):
        user = member.get("id")
        if not user:
            raise BadValue("every <member> needs an id")
        prefs = [_factors_from_attrs(el, sensors) for el in member.findall("pref")]
        fallbacks = [_factors_from_attrs(el, sensors) for el in member.findall("fallback")]
        session.add_member(user, prefs, fallbacks)
    if not session.matrix.users:
        raise EmptyGroup("group file has no members")
    return session


def load_group(path) -> GroupSession:
    with open(path, encoding="utf-8") as fh:
        return parse_group(fh.read())
