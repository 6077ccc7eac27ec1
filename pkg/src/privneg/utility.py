"""Utility-privacy scoring: exposure, benefit and net utility of data rules.

Exposure multiplies the four per-factor exposure scores of a rule and sums
over rules; benefit adds the four per-factor benefit scores and sums over
rules; utility is ``benefit - gamma * exposure``.
"""

from __future__ import annotations

import enum
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import BadValue, MalformedXml
from .policy import FormFactorSet, Retention, parse_flag

DEFAULT_TYPE = "default"
REL_TOL = 1e-9

# Synthetic defaults: the paper publishes no numeric tables.
DEFAULT_PE_TYPE = {"temperature": 1.0, "image": 4.0, "video": 8.0, "audio": 8.0, DEFAULT_TYPE: 2.0}
DEFAULT_PE_RETENTION = {
    Retention.NONE: 0.5,
    Retention.ONE_MONTH: 1.0,
    Retention.THREE_MONTH: 2.0,
    Retention.ONE_YEAR: 4.0,
    Retention.INDEFINITE: 8.0,
}
DEFAULT_PE_SHARED = {False: 1.0, True: 3.0}
DEFAULT_PE_INFERRED = {False: 1.0, True: 2.0}


def _frozen(mapping: Mapping) -> Mapping:
    return MappingProxyType(dict(mapping))


@dataclass(frozen=True)
class ScoringModel:
    gamma: float = 1.0
    pe_type: Mapping[str, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_TYPE))
    pe_retention: Mapping[Retention, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_RETENTION))
    pe_shared: Mapping[bool, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_SHARED))
    pe_inferred: Mapping[bool, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_INFERRED))
    b_type: Mapping[str, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_TYPE))
    b_retention: Mapping[Retention, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_RETENTION))
    b_shared: Mapping[bool, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_SHARED))
    b_inferred: Mapping[bool, float] = field(default_factory=lambda: _frozen(DEFAULT_PE_INFERRED))

    def __post_init__(self):
        for name in ("pe_type", "pe_retention", "pe_shared", "pe_inferred",
                     "b_type", "b_retention", "b_shared", "b_inferred"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise BadValue(f"gamma must be a non-negative real, got {self.gamma}")
        for name in ("pe_type", "b_type"):
            if DEFAULT_TYPE not in getattr(self, name):
                raise BadValue(f"{name} needs a {DEFAULT_TYPE!r} entry")
        if set(self.pe_retention) != set(Retention) or set(self.b_retention) != set(Retention):
            raise BadValue("retention tables must cover every retention period")
        for name in ("pe_shared", "pe_inferred", "b_shared", "b_inferred"):
            if set(getattr(self, name)) != {False, True}:
                raise BadValue(f"{name} must have entries for yes and no")

        for name in ("pe_type", "pe_retention", "pe_shared", "pe_inferred"):
            for key, value in getattr(self, name).items():
                if not (value > 0 and math.isfinite(value)):
                    raise BadValue(f"{name}[{key}] must be positive, got {value}")
        for name in ("b_type", "b_retention", "b_shared", "b_inferred"):
            for key, value in getattr(self, name).items():
                if not (value >= 0 and math.isfinite(value)):
                    raise BadValue(f"{name}[{key}] must be non-negative, got {value}")

        # stricter factor values never score a higher exposure
        ret = [self.pe_retention[r] for r in Retention.scale()]
        if any(a > b for a, b in zip(ret, ret[1:])):
            raise BadValue("pe_retention must be non-decreasing in retention length")
        if self.pe_shared[False] > self.pe_shared[True]:
            raise BadValue("pe_shared(no) must not exceed pe_shared(yes)")
        if self.pe_inferred[False] > self.pe_inferred[True]:
            raise BadValue("pe_inferred(no) must not exceed pe_inferred(yes)")

    def type_exposure(self, data_type: str) -> float:
        return self.pe_type.get(data_type, self.pe_type[DEFAULT_TYPE])

    def type_benefit(self, data_type: str) -> float:
        return self.b_type.get(data_type, self.b_type[DEFAULT_TYPE])

    def rule_exposure(self, f: FormFactorSet) -> float:
        return (
            self.type_exposure(f.data_type)
            * self.pe_retention[f.retention]
            * self.pe_shared[f.shared]
            * self.pe_inferred[f.inferred]
        )

    def rule_benefit(self, f: FormFactorSet) -> float:
        return (
            self.type_benefit(f.data_type)
            + self.b_retention[f.retention]
            + self.b_shared[f.shared]
            + self.b_inferred[f.inferred]
        )


@dataclass(frozen=True)
class UtilityReport:
    exposure: float
    benefit: float
    utility: float


class Ordering(enum.IntEnum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


def exposure(rules: Iterable[FormFactorSet], model: ScoringModel) -> float:
    return sum((model.rule_exposure(f) for f in rules), 0.0)


def benefit(rules: Iterable[FormFactorSet], model: ScoringModel) -> float:
    return sum((model.rule_benefit(f) for f in rules), 0.0)


def utility(rules: Iterable[FormFactorSet], model: ScoringModel) -> UtilityReport:
    rules = list(rules)
    pe = exposure(rules, model)
    b = benefit(rules, model)
    return UtilityReport(pe, b, b - model.gamma * pe)


def close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=REL_TOL, abs_tol=REL_TOL)


def compare_values(a: float, b: float) -> Ordering:
    if close(a, b):
        return Ordering.EQUAL
    return Ordering.GREATER if a > b else Ordering.LESS


def compare_requests(a: Iterable[FormFactorSet], b: Iterable[FormFactorSet], model: ScoringModel) -> Ordering:
    """Order two rule lists by utility, equal within 1e-9 relative."""
    return compare_values(utility(a, model).utility, utility(b, model).utility)


# --- scoring file ----------------------------------------------------------

_TABLES = {
    "pe-type": ("pe_type", "name"),
    "pe-retention": ("pe_retention", "period"),
    "pe-shared": ("pe_shared", "value"),
    "pe-inferred": ("pe_inferred", "value"),
    "b-type": ("b_type", "name"),
    "b-retention": ("b_retention", "period"),
    "b-shared": ("b_shared", "value"),
    "b-inferred": ("b_inferred", "value"),
}


def _table_key(attr: str, raw: str):
    if attr == "name":
        return raw.strip().lower()
    if attr == "period":
        return Retention.parse(raw, strict=True)
    return parse_flag(raw, "value")


def _real(text, what: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise BadValue(f"{what} must be a number, got {text!r}") from None
    return value


def parse_scoring(xml_text: str) -> ScoringModel:
    """Parse a ``<scoring gamma="...">`` document; unlisted entries keep defaults."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "scoring":
        raise MalformedXml(f"root element must be <scoring>, got <{root.tag}>")
    defaults = ScoringModel()
    tables = {name: dict(getattr(defaults, name)) for name, _ in _TABLES.values()}
    for el in root:
        if el.tag not in _TABLES:
            raise BadValue(f"unexpected <{el.tag}> in scoring file")
        name, attr = _TABLES[el.tag]
        raw_key = el.get(attr)
        if raw_key is None:
            raise BadValue(f"<{el.tag}> needs a {attr} attribute")
        tables[name][_table_key(attr, raw_key)] = _real(el.text, f"<{el.tag} {attr}={raw_key!r}>")
    gamma = _real(root.get("gamma", str(defaults.gamma)), "gamma")
    return ScoringModel(gamma=gamma, **tables)


def serialize_scoring(model: ScoringModel) -> str:
    root = ET.Element("scoring", gamma=repr(float(model.gamma)))
    for tag, (name, attr) in _TABLES.items():
        for key, value in getattr(model, name).items():
            if attr == "period":
                key = key.label
            elif attr == "value":
                key = "yes" if key else "no"
            child = ET.SubElement(root, tag, {attr: key})
            child.text = repr(float(value))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def load_scoring(path) -> ScoringModel:
    with open(path, encoding="utf-8") as fh:
        return parse_scoring(fh.read())
