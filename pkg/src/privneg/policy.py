"""Privacy policy documents: form factors, data rules, XML parsing and the
permissiveness order.

A policy file looks like::

    <privacy-policy>
      <data-in type="image" priority="1">
        <retention>3-month</retention>
        <shared>no</shared>
        <inferred>yes</inferred>
      </data-in>
    </privacy-policy>
"""

from __future__ import annotations

import enum
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import BadValue, DuplicateRule, MalformedXml, TypeMismatch, UnknownElement

ROOT_TAG = "privacy-policy"
_RULE_TAGS = {"data-in": "in", "data-out": "out"}
_FACTOR_TAGS = ("retention", "shared", "inferred")


class Retention(enum.Enum):
    """How long exchanged data may be kept. Ordered by month count."""

    NONE = ("none", 0)
    ONE_MONTH = ("1-month", 1)
    THREE_MONTH = ("3-month", 3)
    ONE_YEAR = ("1-year", 12)
    INDEFINITE = ("indefinite", math.inf)

    def __init__(self, label: str, months: float):
        self.label = label
        self.months = months

    def __str__(self) -> str:
        return self.label

    def __lt__(self, other: "Retention") -> bool:
        if not isinstance(other, Retention):
            return NotImplemented
        return self.months < other.months

    def __le__(self, other: "Retention") -> bool:
        if not isinstance(other, Retention):
            return NotImplemented
        return self.months <= other.months

    def __gt__(self, other: "Retention") -> bool:
        if not isinstance(other, Retention):
            return NotImplemented
        return self.months > other.months

    def __ge__(self, other: "Retention") -> bool:
        if not isinstance(other, Retention):
            return NotImplemented
        return self.months >= other.months

    @classmethod
    def parse(cls, text: Optional[str], strict: bool = True) -> "Retention":
        """Parse a retention label. Empty or missing text means ``none``.

        Unknown labels raise BadValue in strict mode and clamp to
        ``indefinite`` otherwise.
        """
        if text is None or not text.strip():
            return cls.NONE
        member = _RETENTION_BY_LABEL.get(text.strip().lower())
        if member is not None:
            return member
        if strict:
            raise BadValue(f"unknown retention period {text!r}")
        return cls.INDEFINITE

    @classmethod
    def scale(cls) -> list["Retention"]:
        """The full ordinal scale, strictest first."""
        return sorted(cls, key=lambda r: r.months)


_RETENTION_BY_LABEL = {r.label: r for r in Retention}


class Direction(enum.Enum):
    IN = "in"
    OUT = "out"

    @property
    def tag(self) -> str:
        return f"data-{self.value}"


_WHITESPACE = re.compile(r"\s")


def _check_token(data_type: str) -> None:
    if not data_type or data_type != data_type.lower() or _WHITESPACE.search(data_type):
        raise BadValue(f"data type must be a non-empty lowercase token, got {data_type!r}")


@dataclass(frozen=True, order=False)
class FormFactorSet:
    """The four form factors of one data item: type, retention, shared, inferred."""

    data_type: str
    retention: Retention = Retention.NONE
    shared: bool = False
    inferred: bool = False

    def __post_init__(self):
        _check_token(self.data_type)
        if not isinstance(self.retention, Retention):
            raise BadValue(f"retention must be a Retention, got {self.retention!r}")

    def sort_key(self) -> tuple:
        return (self.data_type, self.retention.months, self.shared, self.inferred)

    def __str__(self) -> str:
        return (
            f"{{{self.data_type}, {self.retention.label}, "
            f"shared={_yes_no(self.shared)}, inferred={_yes_no(self.inferred)}}}"
        )


@dataclass(frozen=True)
class DataRule:
    direction: Direction
    priority: int
    factors: FormFactorSet

    def __post_init__(self):
        if isinstance(self.priority, bool) or not isinstance(self.priority, int) or self.priority < 1:
            raise BadValue(f"priority must be a positive integer, got {self.priority!r}")

    @property
    def data_type(self) -> str:
        return self.factors.data_type

    @property
    def key(self) -> tuple[Direction, str, int]:
        return (self.direction, self.factors.data_type, self.priority)


@dataclass(frozen=True)
class PrivacyPolicy:
    rules: tuple[DataRule, ...] = ()
    owner_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        seen = set()
        for rule in self.rules:
            if rule.key in seen:
                d, t, p = rule.key
                raise DuplicateRule(f"duplicate {d.tag} rule for {t!r} at priority {p}")
            seen.add(rule.key)

    def rules_for(self, direction: Direction, data_type: Optional[str] = None) -> list[DataRule]:
        return [
            r for r in self.rules
            if r.direction is direction and (data_type is None or r.data_type == data_type)
        ]


def select_rule(
    policy: PrivacyPolicy, direction: Direction, data_type: str, priority: int
) -> Optional[DataRule]:
    """Return the unique rule matching (direction, type, priority), or None.

    None for priority 2 means the item is non-negotiable.
    """
    for rule in policy.rules:
        if rule.key == (direction, data_type, priority):
            return rule
    return None


def is_at_most_as_permissive(a: FormFactorSet, b: FormFactorSet) -> bool:
    """True iff ``a`` demands nothing looser than ``b`` permits."""
    if a.data_type != b.data_type:
        raise TypeMismatch(f"cannot compare {a.data_type!r} with {b.data_type!r}")
    return (
        a.retention.months <= b.retention.months
        and (not a.shared or b.shared)
        and (not a.inferred or b.inferred)
    )


def meet(items: Iterable[FormFactorSet]) -> FormFactorSet:
    """Greatest lower bound of factor sets of one data type."""
    items = list(items)
    if not items:
        raise ValueError("meet of an empty collection")
    data_type = items[0].data_type
    for f in items[1:]:
        if f.data_type != data_type:
            raise TypeMismatch(f"cannot meet {data_type!r} with {f.data_type!r}")
    return FormFactorSet(
        data_type,
        min((f.retention for f in items), key=lambda r: r.months),
        all(f.shared for f in items),
        all(f.inferred for f in items),
    )


# --- XML -----------------------------------------------------------------

def _yes_no(flag: bool) -> str:
    return "yes" if flag else "no"


def parse_flag(text: Optional[str], name: str) -> bool:
    """Parse yes/no case-insensitively; a missing value is the strict ``no``."""
    if text is None:
        return False
    value = text.strip().lower()
    if value == "yes":
        return True
    if value == "no":
        return False
    raise BadValue(f"<{name}> must be yes or no, got {text!r}")


def factors_from_element(el: ET.Element, strict: bool = True) -> FormFactorSet:
    """Read a factor set from an element with a ``type`` attribute and
    ``<retention>``, ``<shared>``, ``<inferred>`` children."""
    data_type = el.get("type")
    if data_type is None:
        raise BadValue(f"<{el.tag}> is missing the type attribute")
    values: dict[str, Optional[str]] = {}
    for child in el:
        if child.tag in _FACTOR_TAGS:
            values[child.tag] = child.text or ""
        elif strict:
            raise UnknownElement(f"unexpected <{child.tag}> inside <{el.tag}>")
    return FormFactorSet(
        data_type.strip(),
        Retention.parse(values.get("retention"), strict=strict),
        parse_flag(values.get("shared"), "shared"),
        parse_flag(values.get("inferred"), "inferred"),
    )


def factors_to_element(factors: FormFactorSet, tag: str, **attrs: str) -> ET.Element:
    el = ET.Element(tag, {"type": factors.data_type, **attrs})
    ret = ET.SubElement(el, "retention")
    if factors.retention is not Retention.NONE:
        ret.text = factors.retention.label
    ET.SubElement(el, "shared").text = _yes_no(factors.shared)
    ET.SubElement(el, "inferred").text = _yes_no(factors.inferred)
    return el


# Two typos appear in hand-written policies: whitespace inside end tags
# ("</ retention >") and an attribute-less <data-out> opened right before a
# real one. Lenient parsing repairs exactly these before the XML parser runs.
_END_TAG_SPACE = re.compile(r"</\s*([\w.-]+)\s*>")
_DANGLING_RULE = re.compile(r"<(data-(?:in|out))\s*>\s*(?=<\1[\s>])")


def _repair(text: str) -> str:
    text = _END_TAG_SPACE.sub(r"</\1>", text)
    return _DANGLING_RULE.sub("", text)


def parse_policy(xml_text: str, strict: bool = False, owner_id: str = "") -> PrivacyPolicy:
    """Parse a ``<privacy-policy>`` document.

    Lenient mode (the default) repairs end-tag whitespace and dangling rule
    tags, ignores unknown elements and clamps unknown retention labels to
    ``indefinite``. Strict mode rejects all three.
    """
    if isinstance(xml_text, bytes):
        xml_text = xml_text.decode("utf-8")
    if not strict:
        xml_text = _repair(xml_text)
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != ROOT_TAG:
        raise MalformedXml(f"root element must be <{ROOT_TAG}>, got <{root.tag}>")

    rules = []
    for el in root:
        direction = _RULE_TAGS.get(el.tag)
        if direction is None:
            if strict:
                raise UnknownElement(f"unexpected <{el.tag}> in policy")
            continue
        raw_priority = el.get("priority", "1").strip()
        try:
            priority = int(raw_priority)
        except ValueError:
            raise BadValue(f"priority must be an integer, got {raw_priority!r}") from None
        rules.append(DataRule(Direction(direction), priority, factors_from_element(el, strict)))
    return PrivacyPolicy(tuple(rules), owner_id=owner_id or root.get("owner", ""))


def policy_to_element(policy: PrivacyPolicy) -> ET.Element:
    root = ET.Element(ROOT_TAG)
    if policy.owner_id:
        root.set("owner", policy.owner_id)
    for rule in policy.rules:
        root.append(factors_to_element(rule.factors, rule.direction.tag, priority=str(rule.priority)))
    return root


def serialize_policy(policy: PrivacyPolicy) -> str:
    root = policy_to_element(policy)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def load_policy(path, strict: bool = False) -> PrivacyPolicy:
    with open(path, encoding="utf-8") as fh:
        return parse_policy(fh.read(), strict=strict)
